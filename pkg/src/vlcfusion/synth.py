"""Synthetic two-modality detection scenes with latent environmental flags.

Modality ``a`` is camera-like: three channels with sensor noise where the
class of an object is the sign pattern of its colour. Modality ``b`` is
range-like: a single occupancy/height channel that shows where solid
things are but says nothing about their class.

Besides objects, a scene holds distractors: solid structures that return
in ``b`` and show only a faint colour patch in ``a``. In clean light a
distractor looks like a darkened object, so telling the two apart in a
dark scene depends on knowing that the scene is dark.

Latent flags and what they do:

* ``dark``  -- modality a contrast x0.05 plus Gaussian noise (sigma 0.2)
* ``rain``  -- modality b cells dropped (set to 0) with probability 0.5
* ``blur``  -- modality a 3x3 box blur
* nuisance flags (``urban``, ``weekend``) change nothing
"""

from __future__ import annotations

import hashlib
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import io as aio

log = logging.getLogger(__name__)

DEGRADING_FLAGS = ("dark", "rain", "blur")
NUISANCE_FLAGS = ("urban", "weekend")
FLAGS = DEGRADING_FLAGS + NUISANCE_FLAGS

# colour signature per class: sign of each modality-a channel on the object
CLASS_COLORS = np.array(
    [
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, 1.0, -1.0],
        [-1.0, 1.0, 1.0],
        [1.0, -1.0, 1.0],
    ]
)


class SynthSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_scenes: int = 2000
    grid: int = 64
    n_classes: int = 3
    max_objects: int = 5
    min_objects: int = 1
    min_size: int | None = None  # default grid // 8
    max_size: int | None = None  # default grid // 4
    flag_probs: Mapping[str, float] = field(
        default_factory=lambda: {"dark": 0.35, "rain": 0.35, "blur": 0.3, "urban": 0.5, "weekend": 0.5}
    )
    object_amplitude: tuple[float, float] = (2.0, 4.0)
    max_distractors: int = 3
    distractor_amplitude: tuple[float, float] = (0.1, 0.2)
    sensor_noise: float = 0.2
    dark_gain: float = 0.05
    dark_noise: float = 0.2
    rain_dropout: float = 0.5
    range_noise: float = 0.05

    def sizes(self) -> tuple[int, int]:
        lo = self.min_size if self.min_size is not None else max(2, self.grid // 8)
        hi = self.max_size if self.max_size is not None else max(lo, self.grid // 4)
        return lo, hi

    def validate(self) -> None:
        if self.n_scenes < 1:
            raise SynthSpecError(f"n_scenes must be >= 1, got {self.n_scenes}")
        if self.grid < 8:
            raise SynthSpecError(f"grid must be >= 8, got {self.grid}")
        if not 1 <= self.n_classes <= len(CLASS_COLORS):
            raise SynthSpecError(f"n_classes must be in [1, {len(CLASS_COLORS)}], got {self.n_classes}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise SynthSpecError("need 0 <= min_objects <= max_objects")
        lo, hi = self.sizes()
        if not 1 <= lo <= hi < self.grid:
            raise SynthSpecError(f"object sizes [{lo}, {hi}] do not fit a {self.grid} grid")
        unknown = set(self.flag_probs) - set(FLAGS)
        if unknown:
            raise SynthSpecError(f"unknown condition flags {sorted(unknown)}; known: {FLAGS}")
        for k, p in self.flag_probs.items():
            if not 0.0 <= p <= 1.0:
                raise SynthSpecError(f"flag probability for {k} must be in [0, 1], got {p}")
        if not 0.0 <= self.rain_dropout <= 1.0:
            raise SynthSpecError("rain_dropout must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["object_amplitude"] = list(self.object_amplitude)
        d["distractor_amplitude"] = list(self.distractor_amplitude)
        d["flag_probs"] = {k: float(self.flag_probs.get(k, 0.0)) for k in FLAGS}
        return d


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass
class SyntheticScene:
    id: str
    modality_a: np.ndarray  # (3, H, W)
    modality_b: np.ndarray  # (1, H, W)
    conditions: dict[str, bool]
    boxes: list[GroundTruthBox]

    def flag_vector(self, flags: Sequence[str] = FLAGS) -> np.ndarray:
        return np.array([float(self.conditions[f]) for f in flags])


# =============================================================================
# generation
# =============================================================================


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def sample_layout(spec: SynthSpec, rng: np.random.Generator):
    """Non-overlapping object boxes and distractor boxes (one cell gap),
    placed by rejection sampling. Distractors carry a class colour but are
    not objects."""
    lo, hi = spec.sizes()
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    n_dis = int(rng.integers(0, spec.max_distractors + 1))
    occupied = np.zeros((spec.grid, spec.grid), dtype=bool)
    boxes: list[GroundTruthBox] = []
    for _ in range(n + n_dis):
        for _try in range(50):
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x0 = int(rng.integers(0, spec.grid - w + 1))
            y0 = int(rng.integers(0, spec.grid - h + 1))
            ys = slice(max(y0 - 1, 0), y0 + h + 1)
            xs = slice(max(x0 - 1, 0), x0 + w + 1)
            if occupied[ys, xs].any():
                continue
            occupied[y0 : y0 + h, x0 : x0 + w] = True
            boxes.append(GroundTruthBox(int(rng.integers(spec.n_classes)), x0, y0, x0 + w, y0 + h))
            break
    # objects are placed first, so running out of space only drops distractors
    n_obj = min(n, len(boxes))
    return boxes[:n_obj], boxes[n_obj:]


def box_blur3(x: np.ndarray) -> np.ndarray:
    """3x3 mean filter per channel with edge replication."""
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    H, W = x.shape[1:]
    return sum(p[:, i : i + H, j : j + W] for i in range(3) for j in range(3)) / 9.0


def render_clean(
    spec: SynthSpec,
    boxes: Sequence[GroundTruthBox],
    rng: np.random.Generator,
    distractors: Sequence[GroundTruthBox] = (),
):
    """Undegraded (modality_a, modality_b) for a layout, with sensor noise."""
    g = spec.grid
    a = rng.normal(0.0, spec.sensor_noise, size=(3, g, g))
    b = rng.normal(0.0, spec.range_noise, size=(1, g, g))
    for group, amp in ((boxes, spec.object_amplitude), (distractors, spec.distractor_amplitude)):
        for bx in group:
            ys, xs = slice(int(bx.y_min), int(bx.y_max)), slice(int(bx.x_min), int(bx.x_max))
            a[:, ys, xs] += rng.uniform(*amp) * CLASS_COLORS[bx.class_id][:, None, None]
            b[0, ys, xs] += rng.uniform(0.8, 1.2)
    return a, b


def degrade(spec: SynthSpec, a: np.ndarray, b: np.ndarray, flags: Mapping[str, bool], rng: np.random.Generator):
    """Apply each active flag to the modality it governs."""
    a, b = a.copy(), b.copy()
    if flags.get("blur"):
        a = box_blur3(a)
    if flags.get("dark"):
        a = spec.dark_gain * a + rng.normal(0.0, spec.dark_noise, size=a.shape)
    if flags.get("rain"):
        keep = rng.random(b.shape[1:]) >= spec.rain_dropout
        b = b * keep[None]
    return a, b


def generate_scene(spec: SynthSpec, seed: int, index: int, force: Mapping[str, bool] | None = None) -> SyntheticScene:
    """One scene from its own RNG stream ``(seed, index)``.

    ``force`` pins flags (for targeted test sets) without changing the
    random stream used for layout and noise.
    """
    rng = scene_rng(seed, index)
    draws = rng.random(len(FLAGS))
    flags = {f: bool(draws[i] < spec.flag_probs.get(f, 0.0)) for i, f in enumerate(FLAGS)}
    if force:
        flags.update({k: bool(v) for k, v in force.items()})
    boxes, distractors = sample_layout(spec, rng)
    a, b = render_clean(spec, boxes, rng, distractors)
    a, b = degrade(spec, a, b, flags, rng)
    return SyntheticScene(f"scene_{index:06d}", a.astype(np.float32), b.astype(np.float32), flags, boxes)


def clean_counterpart(spec: SynthSpec, seed: int, index: int) -> SyntheticScene:
    """The same scene with every degrading flag forced off."""
    return generate_scene(spec, seed, index, force={f: False for f in DEGRADING_FLAGS})


@dataclass
class Dataset:
    spec: SynthSpec
    seed: int
    scenes: list[SyntheticScene]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.scenes]

    def by_id(self) -> dict[str, SyntheticScene]:
        return {s.id: s for s in self.scenes}

    def subset(self, ids: Sequence[str]) -> "Dataset":
        m = self.by_id()
        return Dataset(self.spec, self.seed, [m[i] for i in ids])

    def arrays(self):
        """Stacked ``(a, b, flags)`` arrays: (N,3,H,W), (N,1,H,W), (N,n_flags)."""
        a = np.stack([s.modality_a for s in self.scenes])
        b = np.stack([s.modality_b for s in self.scenes])
        f = np.stack([s.flag_vector() for s in self.scenes]).astype(np.float32)
        return a, b, f

    def manifest(self) -> dict:
        return {
            "format": "vlcfusion-synth",
            "version": 1,
            "seed": self.seed,
            "spec": self.spec.to_dict(),
            "flags": list(FLAGS),
            "dataset_hash": self.hash(),
            "scenes": [
                {
                    "id": s.id,
                    "file": f"scenes/{s.id}.npz",
                    "conditions": s.conditions,
                    "boxes": [{"class_id": bx.class_id, "box": bx.as_list()} for bx in s.boxes],
                }
                for s in self.scenes
            ],
        }

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(aio.dumps({"seed": self.seed, "spec": self.spec.to_dict()}).encode())
        for s in self.scenes:
            h.update(s.id.encode())
            h.update(aio.dumps({"c": s.conditions, "b": [[bx.class_id, *bx.as_list()] for bx in s.boxes]}).encode())
            h.update(np.ascontiguousarray(s.modality_a, "<f4").tobytes())
            h.update(np.ascontiguousarray(s.modality_b, "<f4").tobytes())
        return h.hexdigest()


def generate_dataset(
    spec: SynthSpec,
    seed: int,
    force: Mapping[str, bool] | None = None,
    workers: int = 1,
    start: int = 0,
) -> Dataset:
    """``spec.n_scenes`` scenes, deterministic under ``seed`` whatever ``workers`` is."""
    spec.validate()
    idx = range(start, start + spec.n_scenes)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scenes = list(pool.map(lambda i: generate_scene(spec, seed, i, force), idx))
    else:
        scenes = [generate_scene(spec, seed, i, force) for i in idx]
    return Dataset(spec, seed, scenes)


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    """Write per-scene ``.npz`` records then ``manifest.json``."""
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    for s in ds.scenes:
        import io as _io

        buf = _io.BytesIO()
        np.savez(buf, modality_a=s.modality_a, modality_b=s.modality_b)
        aio.atomic_write_bytes(out / "scenes" / f"{s.id}.npz", buf.getvalue())
    return aio.write_json(out / "manifest.json", ds.manifest())


def load_dataset(manifest_path: str | Path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    m = aio.read_json(path)
    if m.get("format") != "vlcfusion-synth":
        raise SynthSpecError(f"{path}: not a synthetic dataset manifest")
    spec_d = dict(m["spec"])
    for key in ("object_amplitude", "distractor_amplitude"):
        spec_d[key] = tuple(spec_d[key])
    spec = SynthSpec(**spec_d)
    scenes = []
    for e in m["scenes"]:
        with np.load(path.parent / e["file"]) as z:
            a, b = z["modality_a"], z["modality_b"]
        boxes = [GroundTruthBox(bx["class_id"], *bx["box"]) for bx in e["boxes"]]
        scenes.append(SyntheticScene(e["id"], a, b, dict(e["conditions"]), boxes))
    ds = Dataset(spec, m["seed"], scenes)
    if ds.hash() != m["dataset_hash"]:
        raise SynthSpecError(f"{path}: dataset hash mismatch; scene files were modified")
    return ds


# =============================================================================
# splits
# =============================================================================


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitPlan:
    """Scenes matching any ``holdout`` combination go to test_unseen only;
    the rest are shuffled and cut by ``ratios`` into train/val/test_seen."""

    holdout: tuple[tuple[tuple[str, bool], ...], ...] = ((("dark", True), ("rain", True)),)
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    @classmethod
    def from_dicts(cls, holdout: Sequence[Mapping[str, bool]], ratios=(0.8, 0.1, 0.1), seed: int = 0) -> "SplitPlan":
        return cls(tuple(tuple(sorted(h.items())) for h in holdout), tuple(ratios), seed)

    def validate(self) -> None:
        if len(self.ratios) != 3 or min(self.ratios) < 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise SplitError(f"ratios must be three non-negative numbers summing to 1, got {self.ratios}")
        if not self.holdout:
            raise SplitError("split plan needs at least one held-out condition combination")
        for combo in self.holdout:
            for k, _ in combo:
                if k not in FLAGS:
                    raise SplitError(f"unknown flag {k!r} in held-out combination")

    def is_unseen(self, flags: Mapping[str, bool]) -> bool:
        return any(all(bool(flags[k]) == v for k, v in combo) for combo in self.holdout)


@dataclass
class Splits:
    train: list[str]
    val: list[str]
    test_seen: list[str]
    test_unseen: list[str]

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.to_dict().items()}

    def to_dict(self) -> dict[str, list[str]]:
        return {"train": self.train, "val": self.val, "test_seen": self.test_seen, "test_unseen": self.test_unseen}

    def __getitem__(self, name: str) -> list[str]:
        return self.to_dict()[name]


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    return n - n_val - n_test, n_val, n_test


def _combo(flags: Mapping[str, bool]) -> tuple:
    return tuple(bool(flags[f]) for f in FLAGS)


def build_splits(ds: Dataset, plan: SplitPlan) -> Splits:
    plan.validate()
    unseen = [s.id for s in ds.scenes if plan.is_unseen(s.conditions)]
    seen = [s.id for s in ds.scenes if not plan.is_unseen(s.conditions)]
    if not unseen:
        raise SplitError("no scene falls in the held-out combination(s); test_unseen would be empty")
    if not seen:
        raise SplitError("every scene is held out; nothing left to train on")
    order = np.random.default_rng(plan.seed).permutation(len(seen))
    seen = [seen[i] for i in order]
    n_tr, n_va, _ = split_counts(len(seen), plan.ratios)
    splits = Splits(seen[:n_tr], seen[n_tr : n_tr + n_va], seen[n_tr + n_va :], unseen)
    check_disjoint(ds, splits)
    return splits


def check_disjoint(ds: Dataset, splits: Splits) -> None:
    """No latent-condition combination may appear in both train and test_unseen."""
    by_id = ds.by_id()
    train = {_combo(by_id[i].conditions) for i in splits.train}
    shared = train & {_combo(by_id[i].conditions) for i in splits.test_unseen}
    if shared:
        raise SplitError(f"train and test_unseen share condition combinations {sorted(shared)}")


def all_combinations() -> list[dict[str, bool]]:
    return [dict(zip(FLAGS, bits)) for bits in itertools.product((False, True), repeat=len(FLAGS))]


def save_splits(splits: Splits, path: str | Path) -> Path:
    return aio.write_json(path, {**splits.to_dict(), "counts": splits.counts()})


def load_splits(path: str | Path) -> Splits:
    d = aio.read_json(path)
    return Splits(d["train"], d["val"], d["test_seen"], d["test_unseen"])
