"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20]

Also times one detector training step end to end under each path by
re-running this script in a subprocess with ``VLCFUSION_NUMBA`` set.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from vlcfusion import _kernels as K


def _best(fn, repeat):
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 8, 16, 16)).astype(np.float32)
    w = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
    y = K.np_conv2d_forward(x, w, 1, 1)
    g = rng.standard_normal(y.shape).astype(np.float32)
    boxes = np.sort(rng.uniform(0, 64, (200, 4)), axis=1)[:, [0, 1, 2, 3]]
    boxes[:, 2:] = boxes[:, :2] + rng.uniform(2, 10, (200, 2))
    ious = K.np_iou_matrix(boxes, boxes[:50])
    cases = {
        "conv2d_forward": (lambda: K.nb_conv2d_forward(x, w, 1, 1), lambda: K.np_conv2d_forward(x, w, 1, 1)),
        "conv2d_backward_input": (lambda: K.nb_conv2d_backward_input(g, w, 16, 16, 1, 1),
                                  lambda: K.np_conv2d_backward_input(g, w, 16, 16, 1, 1)),
        "conv2d_backward_weight": (lambda: K.nb_conv2d_backward_weight(g, x, 3, 3, 1, 1),
                                   lambda: K.np_conv2d_backward_weight(g, x, 3, 3, 1, 1)),
        "iou_matrix_200x50": (lambda: K.nb_iou_matrix(boxes, boxes[:50]), lambda: K.np_iou_matrix(boxes, boxes[:50])),
        "greedy_match_200x50": (lambda: K.nb_greedy_match(ious, 0.5), lambda: K.np_greedy_match(ious, 0.5)),
    }
    rows = []
    for name, (nb, npy) in cases.items():
        t_nb, t_np = _best(nb, repeat), _best(npy, repeat)
        rows.append((name, t_nb, t_np))
    return rows


def train_step_seconds(repeat):
    from vlcfusion.detector import DetectorConfig, TrainConfig, train
    from vlcfusion.synth import SynthSpec, generate_dataset

    ds = generate_dataset(SynthSpec(n_scenes=64, grid=32), 0)
    cfg = DetectorConfig(variant="cbam_only")
    hyper = TrainConfig(epochs=1, batch_size=16)
    train(ds, ds.subset(ds.ids[:8]), cfg, hyper)  # warm-up
    return min(timeit.repeat(lambda: train(ds, ds.subset(ds.ids[:8]), cfg, hyper), number=1, repeat=max(1, repeat // 5)))


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--step-only", action="store_true", help=argparse.SUPPRESS)
    args = p.parse_args()
    if args.step_only:
        print(json.dumps({"numba": K.USE_NUMBA, "seconds": train_step_seconds(args.repeat)}))
        return
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, t_nb, t_np in kernel_table(args.repeat):
        print(f"{name:<26}{1e3 * t_nb:>10.3f}{1e3 * t_np:>10.3f}{t_np / t_nb:>8.1f}x")
    print()
    print("one training epoch (64 scenes, 32x32, cbam_only):")
    for flag in ("1", "0"):
        env = {**os.environ, "VLCFUSION_NUMBA": flag}
        out = subprocess.run([sys.executable, __file__, "--step-only", "--repeat", str(args.repeat)],
                             env=env, capture_output=True, text=True, check=True).stdout
        res = json.loads(out.strip().splitlines()[-1])
        print(f"  VLCFUSION_NUMBA={flag}: {res['seconds']:.3f} s (numba active: {res['numba']})")


if __name__ == "__main__":
    main()
