"""Offline condition mining: caption -> extract -> dedup -> generate,
plus consistency ranking over repeated runs and top-k selection.

Artifacts (all JSON, written atomically):

* ``conditions.json``  ``{"provenance": ..., "conditions": [{"index", "question"}]}``
* ``responses.json``   ``{"condition_set_hash": ..., "rows": {id: [true, false, null, ...]}}``
* ``consistency.json`` ``{"runs": R, "probe_images": n, "scores": [{"index", "question", "consistency"}]}``
"""

from __future__ import annotations

import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import io as aio
from .vlm import (
    Backend,
    ImageRef,
    VlmError,
    VlmNetworkError,
    VlmRequest,
    VlmSchemaError,
    VlmTimeoutError,
    query,
)

log = logging.getLogger(__name__)

PROVENANCES = ("human_defined", "extracted")


# =============================================================================
# types
# =============================================================================


@dataclass(frozen=True)
class ImageRecord:
    id: str
    uri: str | None = None
    split: str = "train"

    def ref(self) -> ImageRef:
        return ImageRef(self.id, self.uri)


@dataclass(frozen=True)
class Caption:
    image_id: str
    text: str


@dataclass(frozen=True)
class Condition:
    index: int
    question: str


@dataclass
class ConditionSet:
    conditions: list[Condition]
    provenance: str = "extracted"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")

    @classmethod
    def from_questions(cls, questions: Iterable[str], provenance: str = "extracted") -> "ConditionSet":
        return cls([Condition(i, q) for i, q in enumerate(questions, start=1)], provenance)

    @property
    def questions(self) -> list[str]:
        return [c.question for c in self.conditions]

    def __len__(self) -> int:
        return len(self.conditions)

    def __iter__(self):
        return iter(self.conditions)

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "conditions": [{"index": c.index, "question": c.question} for c in self.conditions],
        }

    def hash(self) -> str:
        return aio.canonical_hash(self.to_dict())


@dataclass
class ResponseMatrix:
    condition_set_hash: str
    rows: dict[str, list[bool | None]]

    def to_dict(self) -> dict:
        return {"condition_set_hash": self.condition_set_hash, "rows": self.rows}

    def vectors(self, ids: Sequence[str] | None = None, dtype=np.float32) -> np.ndarray:
        """(N, K) 0/1 array; unknown answers encode as 0."""
        ids = list(self.rows) if ids is None else ids
        return np.asarray([[1.0 if v else 0.0 for v in self.rows[i]] for i in ids], dtype=dtype)

    def n_unknown(self) -> int:
        return sum(v is None for row in self.rows.values() for v in row)

    def activation_fraction(self) -> float:
        """Fraction of images with at least one condition answered true."""
        if not self.rows:
            return 0.0
        return sum(any(v is True for v in row) for row in self.rows.values()) / len(self.rows)


@dataclass
class ConsistencyReport:
    conditions: ConditionSet
    runs: int
    probe_count: int
    scores: dict[int, float]

    def ranked(self) -> list[tuple[Condition, float]]:
        """Conditions by consistency, highest first; ties keep index order."""
        return sorted(((c, self.scores[c.index]) for c in self.conditions), key=lambda t: (-t[1], t[0].index))

    def to_dict(self) -> dict:
        return {
            "runs": self.runs,
            "probe_images": self.probe_count,
            "scores": [{"index": c.index, "question": c.question, "consistency": s} for c, s in self.ranked()],
        }


class PipelineInterrupted(RuntimeError):
    """The backend became unreachable; completed rows are in ``checkpoint``."""

    def __init__(self, message: str, checkpoint: Path | None, done: int):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.done = done


class ExtractionError(RuntimeError):
    pass


@dataclass
class RetryPolicy:
    attempts: int = 3
    backoff: float = 0.5
    factor: float = 2.0
    sleep: Callable[[float], None] = field(default=time.sleep, repr=False)


# =============================================================================
# prompt templates
# =============================================================================


@dataclass(frozen=True)
class PromptTemplate:
    system: str
    user: str

    def render(self, n: int | None = None) -> tuple[str, str]:
        if n is None:
            return self.system, self.user
        return self.system.replace("{N}", str(n)), self.user.replace("{N}", str(n))


def load_template(stage: str, directory: str | Path | None = None) -> PromptTemplate:
    """Load ``<stage>_system.txt`` / ``<stage>_user.txt`` from ``directory``
    or from the bundled prompt assets."""

    def read(name):
        if directory is not None:
            return (Path(directory) / name).read_text("utf-8").rstrip("\n")
        return resources.files("vlcfusion").joinpath("prompts", name).read_text("utf-8").rstrip("\n")

    return PromptTemplate(read(f"{stage}_system.txt"), read(f"{stage}_user.txt"))


def captioning_template() -> PromptTemplate:
    return load_template("captioning")


def extraction_template() -> PromptTemplate:
    return load_template("extraction")


def generation_template() -> PromptTemplate:
    return load_template("generation")


def format_questions(questions: Sequence[str]) -> str:
    return "\n".join(f"{i}. {q}" for i, q in enumerate(questions, start=1))


# =============================================================================
# steps
# =============================================================================


def _with_retry(request: VlmRequest, vlm: Backend, retry: RetryPolicy):
    """Run ``query`` with exponential backoff; returns (response, attempts)."""
    last: VlmError | None = None
    for attempt in range(1, retry.attempts + 1):
        try:
            resp = query(request, vlm)
            resp.attempts = attempt
            return resp
        except VlmError as exc:
            last = exc
            log.debug("attempt %d/%d failed: %s", attempt, retry.attempts, exc)
            if attempt < retry.attempts and retry.backoff > 0:
                retry.sleep(retry.backoff * retry.factor ** (attempt - 1))
    assert last is not None
    last.attempts = retry.attempts  # type: ignore[attr-defined]
    raise last


def sample_captioning_subset(manifest: Sequence[ImageRecord], m: int, seed: int) -> list[ImageRecord]:
    """``m`` distinct records drawn uniformly without replacement, in manifest order."""
    n = len(manifest)
    if not 1 <= m <= n:
        raise ValueError(f"captioning subset size must be in [1, {n}], got {m}")
    idx = np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))
    return [manifest[i] for i in idx]


def caption_images(
    subset: Sequence[ImageRecord],
    vlm: Backend,
    template: PromptTemplate | None = None,
    retry: RetryPolicy | None = None,
    workers: int = 1,
) -> tuple[list[Caption], list[dict]]:
    """Caption each image; failures after retries are returned, not raised."""
    template = template or captioning_template()
    retry = retry or RetryPolicy()
    system, user = template.render()

    def one(rec: ImageRecord):
        req = VlmRequest(system, user, (rec.ref(),), "caption")
        try:
            return Caption(rec.id, _with_retry(req, vlm, retry).parsed)
        except VlmError as exc:
            return {"image_id": rec.id, "error": f"{type(exc).__name__}: {exc}", "attempts": retry.attempts}

    results = _map(one, subset, workers)
    captions = [r for r in results if isinstance(r, Caption)]
    failures = [r for r in results if isinstance(r, dict)]
    return captions, failures


def extract_conditions(
    pairs: Sequence[tuple[ImageRecord, Caption]],
    vlm: Backend,
    template: PromptTemplate | None = None,
    retry: RetryPolicy | None = None,
) -> ConditionSet:
    """Ask the VLM for yes/no condition questions from image-caption pairs.

    Returns the raw (not yet deduplicated) set.
    """
    if not pairs:
        raise ValueError("extract_conditions needs at least one image-caption pair")
    template = template or extraction_template()
    retry = retry or RetryPolicy()
    system, user = template.render()
    lines = [f"Image {i}: {cap.text}" for i, (_, cap) in enumerate(pairs, start=1)]
    req = VlmRequest(system, user + "\n\n" + "\n".join(lines), tuple(rec.ref() for rec, _ in pairs), "condition_list")
    try:
        questions = _with_retry(req, vlm, retry).parsed
    except VlmError as exc:
        raise ExtractionError(f"condition extraction failed after {retry.attempts} attempts: {exc}") from exc
    return ConditionSet.from_questions(questions, "extracted")


_WS = re.compile(r"\s+")
_TERMINAL_PUNCT = ".?!,;:"


def normalize_question(q: str) -> str:
    """Case-fold, collapse whitespace, strip surrounding space and terminal punctuation."""
    s = _WS.sub(" ", q.casefold()).strip()
    return s.rstrip(_TERMINAL_PUNCT).strip()


def dedup_conditions(raw: ConditionSet) -> ConditionSet:
    """Drop later questions whose normalized text repeats an earlier one."""
    seen: set[str] = set()
    kept = []
    for c in raw:
        key = normalize_question(c.question)
        if key in seen:
            continue
        seen.add(key)
        kept.append(c.question)
    return ConditionSet.from_questions(kept, raw.provenance)


def _map(fn, items, workers):
    items = list(items)
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _ask(rec: ImageRecord, questions: Sequence[str], vlm, template, retry) -> list[bool | None]:
    system, user = template.render(len(questions))
    req = VlmRequest(system, user + "\n" + format_questions(questions), (rec.ref(),), "boolean_map", len(questions))
    try:
        return list(_with_retry(req, vlm, retry).parsed)
    except VlmSchemaError:
        log.info("unparseable answers for %s after %d attempts; marking unknown", rec.id, retry.attempts)
        return [None] * len(questions)


def generate_responses(
    manifest: Sequence[ImageRecord],
    conditions: ConditionSet,
    vlm: Backend,
    template: PromptTemplate | None = None,
    batch: bool = True,
    retry: RetryPolicy | None = None,
    workers: int = 1,
    checkpoint: str | Path | None = None,
    checkpoint_every: int = 50,
) -> ResponseMatrix:
    """Answer every condition for every image.

    ``batch`` asks all K questions in one prompt per image; otherwise one
    prompt per (image, condition). Parse failures become unknown cells.
    Network failures write completed rows to ``checkpoint`` and raise
    :class:`PipelineInterrupted`; rerunning with the same checkpoint resumes.
    """
    if len(conditions) < 1:
        raise ValueError("generate_responses needs at least one condition")
    template = template or generation_template()
    retry = retry or RetryPolicy()
    chash = conditions.hash()
    questions = conditions.questions
    rows: dict[str, list[bool | None]] = {}
    ckpt = Path(checkpoint) if checkpoint is not None else None
    if ckpt is not None and ckpt.exists():
        prev = aio.read_json(ckpt)
        if prev.get("condition_set_hash") == chash:
            rows.update(prev["rows"])
            log.info("resuming from %s with %d rows", ckpt, len(rows))

    def one(rec: ImageRecord):
        if batch:
            return _ask(rec, questions, vlm, template, retry)
        return [_ask(rec, [q], vlm, template, retry)[0] for q in questions]

    todo = [r for r in manifest if r.id not in rows]
    step = max(1, checkpoint_every)
    for start in range(0, len(todo), step):
        chunk = todo[start : start + step]
        try:
            answers = _map(one, chunk, workers)
        except (VlmNetworkError, VlmTimeoutError) as exc:
            if ckpt is not None:
                aio.write_json(ckpt, ResponseMatrix(chash, rows).to_dict())
            raise PipelineInterrupted(
                f"backend unreachable after {retry.attempts} attempts: {exc}", ckpt, len(rows)
            ) from exc
        for rec, ans in zip(chunk, answers):
            rows[rec.id] = ans
        if ckpt is not None:
            aio.write_json(ckpt, ResponseMatrix(chash, rows).to_dict())
    ordered = {r.id: rows[r.id] for r in manifest}
    return ResponseMatrix(chash, ordered)


def probe_subset(manifest: Sequence[ImageRecord], seed: int, size: int = 200) -> list[ImageRecord]:
    return sample_captioning_subset(manifest, min(size, len(manifest)), seed)


def score_consistency(
    probe: Sequence[ImageRecord],
    conditions: ConditionSet,
    vlm: Backend,
    runs: int = 5,
    template: PromptTemplate | None = None,
    retry: RetryPolicy | None = None,
    workers: int = 1,
) -> ConsistencyReport:
    """Ask the same questions ``runs`` times; per condition, average over
    probe images of (size of the majority answer) / runs.

    Unknown answers count toward neither side.
    """
    if runs < 2:
        raise ValueError("consistency needs at least 2 runs")
    if not probe:
        raise ValueError("probe subset is empty")
    mats = [
        generate_responses(probe, conditions, vlm, template, retry=retry, workers=workers)
        for _ in range(runs)
    ]
    ids = [r.id for r in probe]
    true_votes = np.zeros((len(ids), len(conditions)))
    false_votes = np.zeros_like(true_votes)
    for m in mats:
        for i, img in enumerate(ids):
            for j, v in enumerate(m.rows[img]):
                if v is True:
                    true_votes[i, j] += 1
                elif v is False:
                    false_votes[i, j] += 1
    per_image = np.maximum(true_votes, false_votes) / runs
    scores = {c.index: float(per_image[:, j].mean()) for j, c in enumerate(conditions)}
    return ConsistencyReport(conditions, runs, len(ids), scores)


def select_top_k(report: ConsistencyReport, k: int) -> ConditionSet:
    """The ``k`` most consistent conditions, re-indexed from 1 in ranked order."""
    n = len(report.conditions)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    chosen = [c.question for c, _ in report.ranked()[:k]]
    return ConditionSet.from_questions(chosen, report.conditions.provenance)


# =============================================================================
# persistence
# =============================================================================


def conditions_from_dict(obj: dict, source: str = "conditions") -> ConditionSet:
    aio.validate(obj, "conditions", source)
    conds = [Condition(c["index"], c["question"]) for c in obj["conditions"]]
    idx = [c.index for c in conds]
    if idx != list(range(1, len(conds) + 1)):
        raise aio.ArtifactSchemaError(f"{source}: field conditions/index: indices must run 1..{len(conds)} in order")
    seen: dict[str, int] = {}
    for c in conds:
        key = normalize_question(c.question)
        if key in seen:
            raise aio.ArtifactSchemaError(
                f"{source}: field conditions/{c.index - 1}/question: duplicates condition {seen[key]} "
                "after normalization (case, whitespace, terminal punctuation); run dedup_conditions first"
            )
        seen[key] = c.index
    return ConditionSet(conds, obj["provenance"])


def save_conditions(cs: ConditionSet, path: str | Path) -> Path:
    return aio.write_json(path, cs.to_dict())


def load_conditions(path: str | Path) -> ConditionSet:
    return conditions_from_dict(aio.read_json(path), str(path))


def bundled_conditions(name: str) -> ConditionSet:
    """Example condition files shipped with the package (see ``vlcfusion/data``)."""
    text = resources.files("vlcfusion").joinpath("data", f"{name}.json").read_text("utf-8")
    import json

    return conditions_from_dict(json.loads(text), name)


def save_responses(m: ResponseMatrix, path: str | Path) -> Path:
    return aio.write_json(path, m.to_dict())


def load_responses(path: str | Path) -> ResponseMatrix:
    obj = aio.read_json(path)
    aio.validate(obj, "responses", str(path))
    return ResponseMatrix(obj["condition_set_hash"], {k: list(v) for k, v in obj["rows"].items()})


def save_consistency(report: ConsistencyReport, path: str | Path) -> Path:
    return aio.write_json(path, report.to_dict())


def load_consistency(path: str | Path, conditions: ConditionSet) -> ConsistencyReport:
    obj = aio.read_json(path)
    aio.validate(obj, "consistency", str(path))
    scores = {s["index"]: float(s["consistency"]) for s in obj["scores"]}
    missing = {c.index for c in conditions} - set(scores)
    if missing:
        raise aio.ArtifactSchemaError(f"{path}: field scores: no score for condition(s) {sorted(missing)}")
    return ConsistencyReport(conditions, obj["runs"], obj.get("probe_images", 0), scores)


def save_captions(captions: Sequence[Caption], failures: Sequence[dict], path: str | Path) -> Path:
    return aio.write_json(
        path,
        {"captions": [{"image_id": c.image_id, "text": c.text} for c in captions], "failures": list(failures)},
    )


def load_captions(path: str | Path) -> list[Caption]:
    return [Caption(c["image_id"], c["text"]) for c in aio.read_json(path)["captions"]]
