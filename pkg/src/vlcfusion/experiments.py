"""Experiment harness on the synthetic benchmark: datasets and splits from a
flat config, a mock VLM that answers condition questions from the latent
scene flags, variant comparisons and the condition-count and
backend-noise sweeps."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .conditions import (
    ConditionSet,
    ImageRecord,
    ResponseMatrix,
    generate_responses,
    normalize_question,
    probe_subset,
    score_consistency,
    select_top_k,
)
from .detector import (
    DetectorConfig,
    TrainConfig,
    TrainResult,
    evaluate,
    oracle_conditions,
    train,
)
from .metrics import EvalReport
from .synth import Dataset, SplitPlan, Splits, SynthSpec, build_splits, generate_dataset
from .vlm import MockVLM

log = logging.getLogger(__name__)


# =============================================================================
# question bank for the mock VLM
# =============================================================================


@dataclass(frozen=True)
class BankQuestion:
    question: str
    truth: Callable[[Mapping[str, bool]], bool]
    flip: float = 0.0


def _flag(name):
    return lambda f: bool(f[name])


INFORMATIVE = (
    BankQuestion("Is it nighttime in this scene?", _flag("dark")),
    BankQuestion("Is it raining?", _flag("rain")),
    BankQuestion("Is the camera image blurred?", _flag("blur")),
    BankQuestion("Is the scene poorly lit?", _flag("dark")),
    BankQuestion("Are the surfaces wet from rain?", _flag("rain")),
    BankQuestion("Is camera visibility reduced?", lambda f: bool(f["dark"] or f["blur"])),
)

NOISY = (
    BankQuestion("Is there glare from street lights?", _flag("dark"), 0.4),
    BankQuestion("Are there puddles visible?", _flag("rain"), 0.4),
    BankQuestion("Is this a city street?", _flag("urban"), 0.4),
    BankQuestion("Is this scene from a weekend?", _flag("weekend"), 0.4),
)

# the first three informative questions read exactly one latent flag each
ORACLE_QUESTIONS = tuple(q.question for q in INFORMATIVE[:3])
ORACLE_FLAGS = ("dark", "rain", "blur")

# what a mock extraction step returns: nine distinct questions plus three
# that only differ by case, spacing or punctuation
MOCK_EXTRACTED = (
    INFORMATIVE[0].question,
    INFORMATIVE[1].question,
    "is it raining",
    INFORMATIVE[2].question,
    INFORMATIVE[3].question,
    NOISY[0].question,
    "Is it nighttime in this  scene ?",
    INFORMATIVE[4].question,
    NOISY[2].question,
    INFORMATIVE[5].question,
    "IS THE CAMERA IMAGE BLURRED",
    NOISY[3].question,
)


def question_bank(noisy_flip: float | None = None) -> dict[str, BankQuestion]:
    """Normalized question -> bank entry. ``noisy_flip`` overrides the flip
    probability of the noisy questions."""
    out = {}
    for q in INFORMATIVE + NOISY:
        if noisy_flip is not None and q.flip > 0:
            q = BankQuestion(q.question, q.truth, noisy_flip)
        out[normalize_question(q.question)] = q
    return out


def describe(flags: Mapping[str, bool]) -> str:
    parts = ["A night-time" if flags["dark"] else "A daytime", "street scene"]
    if flags["rain"]:
        parts.append("in the rain")
    if flags["urban"]:
        parts.append("in a city")
    text = " ".join(parts)
    if flags["blur"]:
        text += "; the camera image is blurry"
    return text + "."


def scene_vlm(
    ds: Dataset | Mapping[str, Mapping[str, bool]],
    seed: int = 0,
    flip: float | Mapping[str, float] | None = None,
    extracted: Sequence[str] = MOCK_EXTRACTED,
    noisy_flip: float | None = None,
    delay: float = 0.0,
    name: str = "mock",
) -> MockVLM:
    """A :class:`MockVLM` that answers bank questions from each scene's
    latent flags. ``flip`` (uniform or per-question) replaces the bank's own
    flip probabilities when given."""
    flags = ds if isinstance(ds, Mapping) else {s.id: s.conditions for s in ds.scenes}
    bank = question_bank(noisy_flip)

    def answer(ref, q):
        entry = bank.get(normalize_question(q))
        return bool(entry.truth(flags[ref])) if entry is not None else False

    if flip is None:
        flip_fn: float | Callable = lambda q: bank[normalize_question(q)].flip if normalize_question(q) in bank else 0.0
    elif isinstance(flip, Mapping):
        flip_fn = lambda q: float(flip.get(q, 0.0))  # noqa: E731
    else:
        flip_fn = float(flip)
    return MockVLM(
        captions=lambda ref: describe(flags[ref]),
        extracted=extracted,
        answer=answer,
        flip=flip_fn,
        seed=seed,
        delay=delay,
        name=name,
    )


def records(ds: Dataset, ids: Sequence[str] | None = None, split: str = "train") -> list[ImageRecord]:
    ids = ds.ids if ids is None else ids
    return [ImageRecord(i, None, split) for i in ids]


def vectors_from_responses(m: ResponseMatrix) -> dict[str, np.ndarray]:
    return {i: np.array([1.0 if v else 0.0 for v in row], np.float32) for i, row in m.rows.items()}


# =============================================================================
# configuration
# =============================================================================


@dataclass
class BenchConfig:
    """Flat benchmark configuration (every field is a ``key=value`` line in a
    config file)."""

    n_scenes: int = 2000
    grid: int = 64
    n_classes: int = 3
    max_objects: int = 5
    max_distractors: int = 3
    holdout: str = "dark+rain"
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    enc_channels: int = 8
    head_channels: int = 16
    reduction: int = 4

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            n_scenes=self.n_scenes, grid=self.grid, n_classes=self.n_classes,
            max_objects=self.max_objects, max_distractors=self.max_distractors,
        )

    def split_plan(self, seed: int) -> SplitPlan:
        combos = []
        for part in self.holdout.split(","):
            combo = {}
            for flag in part.split("+"):
                flag = flag.strip()
                if flag.startswith("!"):
                    combo[flag[1:]] = False
                elif flag:
                    combo[flag] = True
            combos.append(combo)
        return SplitPlan.from_dicts(combos, seed=seed)

    def detector(self, variant: str, n_conditions: int, seed: int) -> DetectorConfig:
        return DetectorConfig(
            variant=variant, n_classes=self.n_classes, enc_channels=self.enc_channels,
            head_channels=self.head_channels, reduction=self.reduction,
            n_conditions=n_conditions if variant == "vlc" else 0, seed=seed,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, seed=seed,
        )

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(getattr(cls(), f.name)) for f in fields(cls)}

    def to_dict(self) -> dict:
        return asdict(self)


# desk-scale setting used by the acceptance suite: a 32x32 grid and 1500
# scenes keeps one training run under a minute on one CPU core
ACCEPTANCE = BenchConfig(n_scenes=1500, grid=32, epochs=20)


def make_benchmark(cfg: BenchConfig, seed: int) -> tuple[Dataset, Splits]:
    ds = generate_dataset(cfg.synth_spec(), seed)
    return ds, build_splits(ds, cfg.split_plan(seed))


# =============================================================================
# runs
# =============================================================================


@dataclass
class RunResult:
    variant: str
    seed: int
    seen: EvalReport
    unseen: EvalReport
    train: TrainResult = field(repr=False)
    n_conditions: int = 0

    def row(self) -> dict:
        return {
            "variant": self.variant, "seed": self.seed, "k": self.n_conditions,
            "seen_mAP": self.seen.map, "seen_mAP50": self.seen.map50, "seen_mAR100": self.seen.mar100,
            "unseen_mAP": self.unseen.map, "unseen_mAP50": self.unseen.map50, "unseen_mAR100": self.unseen.mar100,
        }


def run_variant(
    ds: Dataset,
    splits: Splits,
    variant: str,
    seed: int,
    cfg: BenchConfig,
    conditions: Mapping[str, np.ndarray] | None = None,
) -> RunResult:
    """Train one variant on ``splits.train`` and evaluate on both test splits."""
    k = 0
    if variant == "vlc":
        if conditions is None:
            raise ValueError("the vlc variant needs condition vectors")
        k = len(next(iter(conditions.values())))
    else:
        conditions = None
    res = train(ds.subset(splits.train), ds.subset(splits.val), cfg.detector(variant, k, seed),
                cfg.train_config(seed), conditions)
    seen = evaluate(res.params, ds.subset(splits.test_seen), conditions)
    unseen = evaluate(res.params, ds.subset(splits.test_unseen), conditions)
    return RunResult(variant, seed, seen, unseen, res, k)


def split_metrics(r: RunResult) -> dict:
    return {"seen_mAP": r.seen.map, "seen_mAP50": r.seen.map50,
            "unseen_mAP": r.unseen.map, "unseen_mAP50": r.unseen.map50}


def oracle_vectors(ds: Dataset) -> dict[str, np.ndarray]:
    return oracle_conditions(ds, ORACLE_FLAGS)


def mock_condition_vectors(ds: Dataset, conditions: ConditionSet, seed: int, flip=None) -> dict[str, np.ndarray]:
    """One generation pass of the scene mock over the whole dataset."""
    vlm = scene_vlm(ds, seed=seed, flip=flip)
    return vectors_from_responses(generate_responses(records(ds), conditions, vlm))


def ranked_bank(ds: Dataset, seed: int, runs: int = 5, probe: int = 200,
                informative: int = 6, noisy: int = 4, noisy_flip: float = 0.4) -> ConditionSet:
    """Informative and noisy bank questions ordered by measured consistency."""
    qs = [q.question for q in INFORMATIVE[:informative]] + [q.question for q in NOISY[:noisy]]
    cs = ConditionSet.from_questions(qs, "extracted")
    vlm = scene_vlm(ds, seed=seed, noisy_flip=noisy_flip)
    report = score_consistency(probe_subset(records(ds), seed, probe), cs, vlm, runs=runs)
    return select_top_k(report, len(cs))


def ablate_k(
    cfg: BenchConfig,
    seeds: Sequence[int],
    ks: Sequence[int],
    noisy_flip: float = 0.4,
    progress: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Train vlc with the top-k consistency-ranked conditions for each k."""
    rows = []
    for seed in seeds:
        ds, splits = make_benchmark(cfg, seed)
        ranked = ranked_bank(ds, seed, noisy_flip=noisy_flip)
        if max(ks) > len(ranked):
            raise ValueError(f"k={max(ks)} exceeds the {len(ranked)} available conditions")
        # answers come from a single generation pass, as they would in practice
        vlm = scene_vlm(ds, seed=seed, noisy_flip=noisy_flip)
        full = vectors_from_responses(generate_responses(records(ds), ranked, vlm))
        for k in ks:
            vec = {i: v[:k] for i, v in full.items()}
            r = run_variant(ds, splits, "vlc", seed, cfg, vec)
            row = {"k": k, "seed": seed, **split_metrics(r), "conditions": " | ".join(ranked.questions[:k])}
            rows.append(row)
            if progress:
                progress(row)
    return rows


def ablate_backend(
    cfg: BenchConfig,
    seeds: Sequence[int],
    profiles: Mapping[str, float],
    progress: Callable[[dict], None] | None = None,
    cache: dict | None = None,
) -> list[dict]:
    """Train vlc on the oracle questions answered by mock backends that
    differ only in flip probability."""
    cs = ConditionSet.from_questions(ORACLE_QUESTIONS, "extracted")
    rows = []
    for seed in seeds:
        ds, splits = make_benchmark(cfg, seed)
        for name, flip in profiles.items():
            key = ("vlc", seed, flip)
            if cache is not None and key in cache:
                r = cache[key]
            else:
                vec = mock_condition_vectors(ds, cs, seed, flip=float(flip))
                r = run_variant(ds, splits, "vlc", seed, cfg, vec)
                if cache is not None:
                    cache[key] = r
            row = {"backend": name, "flip": float(flip), "seed": seed, **split_metrics(r)}
            rows.append(row)
            if progress:
                progress(row)
    return rows


def modality_vulnerability(cfg: BenchConfig, seed: int, n_eval: int = 200) -> dict:
    """Train a modality-a-only detector, then evaluate on dark-only and on
    clean scenes generated outside the training index range."""
    ds, splits = make_benchmark(cfg, seed)
    res = train(ds.subset(splits.train), ds.subset(splits.val), cfg.detector("single_a", 0, seed),
                cfg.train_config(seed))
    spec = cfg.synth_spec()
    spec = SynthSpec(**{**spec.__dict__, "n_scenes": n_eval})
    off = {"dark": False, "rain": False, "blur": False}
    dark = generate_dataset(spec, seed, force={**off, "dark": True}, start=10**6)
    clean = generate_dataset(spec, seed, force=off, start=10**6)
    return {"seed": seed, "dark_mAP50": evaluate(res.params, dark).map50,
            "clean_mAP50": evaluate(res.params, clean).map50}
