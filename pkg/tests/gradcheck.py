"""Central finite-difference gradient checking for fusion blocks."""

import numpy as np

from vlcfusion import fusion as F
from vlcfusion.autodiff import Var

STEP = 1e-5
FLOOR = 1e-3  # absolute floor in the relative-error denominator


def rel_error(analytic, numeric):
    """Elementwise ``|a - n| / max(|a|, |n|, FLOOR)``, maximised."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def fusion_case(variant, seed, B=2, c_a=4, c_b=4, H=5, W=5, k=3):
    rng = np.random.default_rng(seed)
    p = F.init_fusion_params(variant, c_a, c_b, n_conditions=k if variant == "vlc" else 0,
                             reduction=2, seed=seed, zero_film=False,
                             out_depth=1 if variant in ("vlc", "cbam_only") else None)
    a = rng.standard_normal((B, c_a, H, W))
    b = rng.standard_normal((B, c_b, H, W))
    r = rng.integers(0, 2, (B, k)).astype(np.float64) if variant == "vlc" else None
    return p, {"a": a, "b": b, "r": r}


def check_variant(variant, seed=0, **shape):
    """Max relative error over inputs and all weights of one random case."""
    p, inputs = fusion_case(variant, seed, **shape)
    tensors = {f"w.{k}": v for k, v in p.weights.items()}
    tensors.update({k: v for k, v in inputs.items() if v is not None})
    probe = None

    def loss(arrs, track=False):
        vs = {k: Var(v, requires_grad=track) for k, v in arrs.items()}
        w = {k[2:]: v for k, v in vs.items() if k.startswith("w.")}
        out = F.fuse(variant, vs["a"], vs["b"], vs.get("r"), w)
        total = (out.data * probe).sum()
        if track:
            from vlcfusion import autodiff as ad
            ad.sum(ad.mul(out, probe)).backward()
        return total, vs

    out0 = F.fuse(variant, inputs["a"], inputs["b"], inputs["r"], p)
    probe = np.random.default_rng(seed + 99).standard_normal(out0.shape)
    _, vs = loss(tensors, track=True)
    worst = 0.0
    for name, arr in tensors.items():
        g = vs[name].grad if vs[name].grad is not None else np.zeros_like(arr)
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + STEP
            fp, _ = loss(tensors)
            arr[idx] = orig - STEP
            fm, _ = loss(tensors)
            arr[idx] = orig
            num[idx] = (fp - fm) / (2 * STEP)
        worst = max(worst, rel_error(g, num))
    return worst
