"""Toy two-modality detector: per-modality conv encoders, a fusion block and
an anchor-free dense head with one prediction per feature cell.

Head output channels per cell: ``[objectness, class logits..., tx, ty, tw, th]``
where ``(tx, ty)`` is the box centre offset inside the cell (in cells) and
``(tw, th)`` are log box sizes in cells. A ground-truth box is assigned to
the cell containing its centre.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .fusion import VARIANTS, FusionBlockParams, fuse, init_fusion_params
from .metrics import DetectionResult, EvalReport, mean_ap
from .synth import Dataset, SyntheticScene

log = logging.getLogger(__name__)

SINGLE_VARIANTS = ("single_a", "single_b")
DETECTOR_VARIANTS = VARIANTS + SINGLE_VARIANTS
MAX_PARAMS = 200_000
STRIDE = 4


class DivergenceError(RuntimeError):
    pass


@dataclass
class DetectorConfig:
    variant: str = "vlc"
    n_classes: int = 3
    c_a_in: int = 3
    c_b_in: int = 1
    enc_channels: int = 8
    head_channels: int = 16
    head_kernel: int = 3
    reduction: int = 4
    n_conditions: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in DETECTOR_VARIANTS:
            raise ValueError(f"unknown detector variant {self.variant!r}; expected one of {DETECTOR_VARIANTS}")
        if self.variant == "vlc" and self.n_conditions < 1:
            raise ValueError("the vlc variant needs n_conditions >= 1")
        if self.variant != "vlc" and self.n_conditions:
            raise ValueError(f"variant {self.variant!r} takes no conditions (n_conditions={self.n_conditions})")

    @property
    def fused_channels(self) -> int:
        return self.enc_channels if self.variant in SINGLE_VARIANTS else 2 * self.enc_channels

    @property
    def head_out(self) -> int:
        return 1 + self.n_classes + 4


@dataclass
class DetectorParams:
    config: DetectorConfig
    weights: dict[str, np.ndarray]

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.weights.values()))

    def copy(self) -> "DetectorParams":
        return DetectorParams(DetectorConfig(**asdict(self.config)), {k: v.copy() for k, v in self.weights.items()})

    def fusion_params(self) -> FusionBlockParams:
        c = self.config
        fw = {k[len("fusion."):]: v for k, v in self.weights.items() if k.startswith("fusion.")}
        return FusionBlockParams(
            c.variant, c.enc_channels, c.enc_channels, c.fused_channels, c.n_conditions, c.reduction,
            1 if c.variant in ("vlc", "cbam_only") else 0, c.seed, fw,
        )


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def init_detector(config: DetectorConfig) -> DetectorParams:
    config.validate()
    rng = np.random.default_rng([config.seed, 1])
    e, w = config.enc_channels, {}
    streams = {"single_a": ("a",), "single_b": ("b",)}.get(config.variant, ("a", "b"))
    for m in streams:
        c_in = config.c_a_in if m == "a" else config.c_b_in
        w[f"enc_{m}.w0"] = _he(rng, (e, c_in, 3, 3), 9 * c_in)
        w[f"enc_{m}.b0"] = np.zeros(e, np.float32)
        w[f"enc_{m}.w1"] = _he(rng, (e, e, 3, 3), 9 * e)
        w[f"enc_{m}.b1"] = np.zeros(e, np.float32)
    if config.variant in VARIANTS:
        fp = init_fusion_params(
            config.variant, e, e, 2 * e,
            n_conditions=config.n_conditions, reduction=config.reduction,
            out_depth=1 if config.variant in ("vlc", "cbam_only") else None,
            seed=int(rng.integers(2**31)), dtype=np.float32,
        )
        w.update({f"fusion.{k}": v for k, v in fp.weights.items()})
    c, h = config.fused_channels, config.head_channels
    k = config.head_kernel
    w["head.w0"] = _he(rng, (h, c, k, k), k * k * c)
    w["head.b0"] = np.zeros(h, np.float32)
    w["head.w1"] = (rng.standard_normal((config.head_out, h, 1, 1)) * 0.01).astype(np.float32)
    b1 = np.zeros(config.head_out, np.float32)
    b1[0] = -2.0  # objectness prior: most cells are empty
    w["head.b1"] = b1
    params = DetectorParams(config, w)
    if params.n_parameters() > MAX_PARAMS:
        raise ValueError(f"detector has {params.n_parameters()} parameters, limit is {MAX_PARAMS}")
    return params


# =============================================================================
# forward
# =============================================================================


def _encode(x, w, m):
    h = ad.relu(ad.conv2d(x, w[f"enc_{m}.w0"], w[f"enc_{m}.b0"], stride=2, pad=1))
    return ad.relu(ad.conv2d(h, w[f"enc_{m}.w1"], w[f"enc_{m}.b1"], stride=2, pad=1))


def forward_raw(params: DetectorParams | Mapping, a, b, r=None, config: DetectorConfig | None = None) -> Var:
    """Head output (B, 1 + n_classes + 4, H/4, W/4) as a ``Var``.

    ``params`` may be :class:`DetectorParams` or a mapping of ``Var``
    weights (training), in which case ``config`` is required.
    """
    if isinstance(params, DetectorParams):
        config, w = params.config, params.weights
    else:
        w = params
    assert config is not None
    v = config.variant
    if (r is not None) != (v == "vlc"):
        raise ValueError("a condition vector is required for the vlc variant and not accepted otherwise")
    if v == "single_a":
        f = _encode(a, w, "a")
    elif v == "single_b":
        f = _encode(b, w, "b")
    else:
        fa, fb = _encode(a, w, "a"), _encode(b, w, "b")
        if fa.shape[2:] != fb.shape[2:]:
            raise ValueError(f"encoder outputs differ spatially: {fa.shape} vs {fb.shape}")
        fw = {k[len("fusion."):]: val for k, val in w.items() if k.startswith("fusion.")}
        f = ad.relu(ad.as_var(fuse(v, fa, fb, r, fw)))
    h = ad.relu(ad.conv2d(f, w["head.w0"], w["head.b0"], stride=1, pad=config.head_kernel // 2))
    return ad.conv2d(h, w["head.w1"], w["head.b1"])


@dataclass
class HeadOutput:
    objectness: np.ndarray  # (B, Hf, Wf) in (0, 1)
    class_probs: np.ndarray  # (B, n_classes, Hf, Wf), sums to 1 over classes
    box: np.ndarray  # (B, 4, Hf, Wf) raw offsets


def decode_head(raw: np.ndarray, n_classes: int) -> HeadOutput:
    obj = ad.stable_sigmoid(raw[:, 0])
    logits = raw[:, 1 : 1 + n_classes]
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return HeadOutput(obj, p, raw[:, 1 + n_classes :])


def nms(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in score order."""
    from ._kernels import iou_matrix

    order = np.argsort(-scores, kind="mergesort")
    ious = iou_matrix(boxes[order], boxes[order])
    keep = np.ones(len(order), dtype=bool)
    for i in range(len(order)):
        if keep[i]:
            keep[i + 1 :] &= ious[i, i + 1 :] < thresh
    return order[keep]


def detections_from_head(
    head: HeadOutput, grid: int, score_thresh: float = 0.01, max_dets: int = 100, nms_iou: float | None = 0.5
) -> list[DetectionResult]:
    """Per image: one candidate per cell scored ``objectness * max class prob``,
    sorted by score."""
    B, Hf, Wf = head.objectness.shape
    jj, ii = np.meshgrid(np.arange(Wf), np.arange(Hf))
    out = []
    for n in range(B):
        cls = head.class_probs[n].argmax(axis=0)
        score = head.objectness[n] * head.class_probs[n].max(axis=0)
        tx, ty, tw, th = head.box[n]
        cx = (jj + np.clip(tx, 0.0, 1.0)) * STRIDE
        cy = (ii + np.clip(ty, 0.0, 1.0)) * STRIDE
        bw = np.exp(np.clip(tw, -3.0, 3.0)) * STRIDE
        bh = np.exp(np.clip(th, -3.0, 3.0)) * STRIDE
        boxes = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=-1).reshape(-1, 4)
        boxes = np.clip(boxes, 0.0, float(grid))
        s, c = score.reshape(-1), cls.reshape(-1)
        m = (s >= score_thresh) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, s, c = boxes[m], s[m], c[m]
        if nms_iou is not None and len(s):
            keep = np.concatenate([np.flatnonzero(c == k)[nms(boxes[c == k], s[c == k], nms_iou)] for k in np.unique(c)])
            boxes, s, c = boxes[keep], s[keep], c[keep]
        order = np.argsort(-s, kind="mergesort")[:max_dets]
        out.append(DetectionResult(boxes[order], c[order], s[order]))
    return out


def forward_detector(scene_or_batch, params: DetectorParams, r=None, variant: str | None = None, **kw):
    """Detections for one :class:`SyntheticScene` (returns one result) or a
    ``(a, b)`` batch tuple (returns a list)."""
    if variant is not None and variant != params.config.variant:
        raise ValueError(f"params were built for {params.config.variant!r}, not {variant!r}")
    single = isinstance(scene_or_batch, SyntheticScene)
    if single:
        a, b = scene_or_batch.modality_a[None], scene_or_batch.modality_b[None]
        if r is not None:
            r = np.asarray(r, dtype=np.float32).reshape(1, -1)
    else:
        a, b = scene_or_batch
    grid = a.shape[-1]
    raw = forward_raw(params, a, b, r).data
    dets = detections_from_head(decode_head(raw, params.config.n_classes), grid, **kw)
    return dets[0] if single else dets


# =============================================================================
# targets and loss
# =============================================================================


def build_targets(scenes: Sequence[SyntheticScene], grid: int, n_classes: int):
    """Objectness, class id, box targets and positive mask on the feature grid."""
    hf = grid // STRIDE
    B = len(scenes)
    obj = np.zeros((B, hf, hf), np.float32)
    cls = np.zeros((B, hf, hf), np.int64)
    box = np.zeros((B, 4, hf, hf), np.float32)
    for n, s in enumerate(scenes):
        for bx in s.boxes:
            cx, cy = (bx.x_min + bx.x_max) / 2, (bx.y_min + bx.y_max) / 2
            j, i = min(int(cx // STRIDE), hf - 1), min(int(cy // STRIDE), hf - 1)
            obj[n, i, j] = 1.0
            cls[n, i, j] = bx.class_id
            box[n, :, i, j] = (
                cx / STRIDE - j,
                cy / STRIDE - i,
                math.log((bx.x_max - bx.x_min) / STRIDE),
                math.log((bx.y_max - bx.y_min) / STRIDE),
            )
    return obj, cls, box


def detection_loss(raw: Var, obj, cls, box, n_classes: int):
    """Objectness BCE over all cells + class CE and box L1 on positive cells,
    each normalised by the number of positives."""
    npos = max(float(obj.sum()), 1.0)
    logits_obj = ad.reshape(_channel(raw, 0, 1), obj.shape)
    l_obj = ad.bce_with_logits(logits_obj, obj)
    l_cls = ad.softmax_cross_entropy(_channel(raw, 1, 1 + n_classes), cls, obj, axis=1)
    l_box = ad.masked_l1(_channel(raw, 1 + n_classes, 5 + n_classes), box, obj[:, None])
    return ad.mul(l_obj, 1 / npos), ad.mul(l_cls, 1 / npos), ad.mul(l_box, 1 / npos)


def _channel(x: Var, lo: int, hi: int) -> Var:
    data = x.data[:, lo:hi]

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        x._accumulate(full)

    return ad._make(np.ascontiguousarray(data), (x,), backward)


# =============================================================================
# training
# =============================================================================


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 10.0
    eval_every: int = 1
    select_metric: str = "map50"
    seed: int = 0


@dataclass
class TrainResult:
    params: DetectorParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_score: float = float("-inf")
    seconds: float = 0.0

    def log_csv(self) -> str:
        buf = io.StringIO()
        cols = ["epoch", "loss", "loss_obj", "loss_cls", "loss_box", "val_map", "val_map50", "seconds"]
        w = csv.DictWriter(buf, cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in self.log:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


ConditionSource = Mapping[str, np.ndarray]


def condition_matrix(ds: Dataset, source: ConditionSource | None, k: int) -> np.ndarray | None:
    """Stack per-scene condition vectors in dataset order."""
    if source is None:
        return None
    missing = [s.id for s in ds.scenes if s.id not in source]
    if missing:
        raise KeyError(f"no condition vector for {len(missing)} scene(s), e.g. {missing[0]}")
    r = np.stack([np.asarray(source[s.id], dtype=np.float32) for s in ds.scenes])
    if r.shape[1] != k:
        raise ValueError(f"condition vectors have length {r.shape[1]}, detector expects {k}")
    return r


def oracle_conditions(ds: Dataset, flags: Sequence[str]) -> dict[str, np.ndarray]:
    """Condition vectors read straight from the latent flags."""
    return {s.id: np.array([float(s.conditions[f]) for f in flags], np.float32) for s in ds.scenes}


def train(
    train_set: Dataset,
    val_set: Dataset,
    config: DetectorConfig,
    hyper: TrainConfig | None = None,
    conditions: ConditionSource | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Momentum SGD for a fixed number of epochs; the parameters with the
    best validation score are returned."""
    hyper = hyper or TrainConfig()
    if not train_set.scenes or not val_set.scenes:
        raise ValueError("train and validation sets must be non-empty")
    params = init_detector(config)
    grid = train_set.spec.grid
    a, b, _ = train_set.arrays()
    r_all = condition_matrix(train_set, conditions, config.n_conditions) if config.variant == "vlc" else None
    if config.variant == "vlc" and r_all is None:
        raise ValueError("the vlc variant needs a condition source")
    tgt = build_targets(train_set.scenes, grid, config.n_classes)
    names = sorted(params.weights)
    vel = {k: np.zeros_like(params.weights[k]) for k in names}
    rng = np.random.default_rng([hyper.seed, 2])
    result = TrainResult(params.copy())
    t0 = time.perf_counter()
    n = len(train_set.scenes)
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            wv = {k: Var(params.weights[k], requires_grad=True) for k in names}
            r = r_all[idx] if r_all is not None else None
            raw = forward_raw(wv, a[idx], b[idx], r, config)
            parts = detection_loss(raw, tgt[0][idx], tgt[1][idx], tgt[2][idx], config.n_classes)
            loss = ad.add(ad.add(parts[0], parts[1]), parts[2])
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(obj={float(parts[0].data)}, cls={float(parts[1].data)}, box={float(parts[2].data)}); "
                    f"try a lower lr than {hyper.lr}"
                )
            loss.backward()
            grads = {k: (wv[k].grad if wv[k].grad is not None else np.zeros_like(params.weights[k])) for k in names}
            gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            scale = min(1.0, hyper.clip_norm / gnorm) if gnorm > 0 else 1.0
            for k in names:
                g = grads[k] * scale + hyper.weight_decay * params.weights[k]
                vel[k] = hyper.momentum * vel[k] + g
                params.weights[k] = (params.weights[k] - hyper.lr * vel[k]).astype(np.float32)
            sums += [float(p.data) * len(idx) for p in parts]
        row = {"epoch": epoch, "loss": float(sums.sum() / n), "loss_obj": float(sums[0] / n),
               "loss_cls": float(sums[1] / n), "loss_box": float(sums[2] / n)}
        if epoch % hyper.eval_every == 0 or epoch == hyper.epochs:
            rep = evaluate(params, val_set, conditions)
            row.update(val_map=rep.map, val_map50=rep.map50)
            score = rep.map50 if hyper.select_metric == "map50" else rep.map
            if score > result.best_score:
                result.best_score, result.best_epoch = score, epoch
                result.params = params.copy()
        row["seconds"] = time.perf_counter() - t0
        result.log.append(row)
        if progress is not None:
            progress(row)
        log.info("epoch %d loss %.4f val %s", epoch, row["loss"], row.get("val_map50"))
    result.seconds = time.perf_counter() - t0
    return result


def predict(params: DetectorParams, ds: Dataset, conditions: ConditionSource | None = None, batch_size: int = 64,
            **kw) -> list[DetectionResult]:
    if not ds.scenes:
        raise ValueError("cannot evaluate an empty split")
    a, b, _ = ds.arrays()
    r_all = condition_matrix(ds, conditions, params.config.n_conditions) if params.config.variant == "vlc" else None
    if params.config.variant == "vlc" and r_all is None:
        raise ValueError("the vlc variant needs a condition source")
    dets: list[DetectionResult] = []
    for s in range(0, len(ds.scenes), batch_size):
        r = r_all[s : s + batch_size] if r_all is not None else None
        dets += forward_detector((a[s : s + batch_size], b[s : s + batch_size]), params, r, **kw)
    return dets


def ground_truth(ds: Dataset) -> list[DetectionResult]:
    return [
        DetectionResult([bx.as_list() for bx in s.boxes], [bx.class_id for bx in s.boxes], None)
        for s in ds.scenes
    ]


def evaluate(params: DetectorParams, ds: Dataset, conditions: ConditionSource | None = None,
             class_names: Mapping[int, str] | None = None) -> EvalReport:
    dets = predict(params, ds, conditions)
    names = class_names or {i: f"class_{i}" for i in range(params.config.n_classes)}
    return mean_ap(dets, ground_truth(ds), class_names=names, classes=range(params.config.n_classes))


# =============================================================================
# persistence
# =============================================================================


def save_detector(params: DetectorParams, path: str | Path) -> Path:
    meta = {"kind": "detector", "variant": params.config.variant, "seed": params.config.seed,
            "config": asdict(params.config)}
    return save_arrays(path, params.weights, meta)


def load_detector(path: str | Path) -> DetectorParams:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "detector":
        raise CheckpointError(f"{path}: expected kind 'detector', found {meta.get('kind')!r}")
    return DetectorParams(DetectorConfig(**meta["config"]), arrays)
