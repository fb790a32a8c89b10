import numpy as np
import pytest

from vlcfusion import autodiff as ad
from vlcfusion import detector as D
from vlcfusion.autodiff import Var
from vlcfusion.metrics import mean_ap
from vlcfusion.synth import SplitPlan, SynthSpec, build_splits, generate_dataset

import oracles
from gradcheck import rel_error

SPEC = SynthSpec(n_scenes=24, grid=16)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(SPEC, 0)


def _cfg(variant, **kw):
    return D.DetectorConfig(variant=variant, n_conditions=3 if variant == "vlc" else 0, **kw)


def test_targets_decode_back_to_ground_truth(ds):
    obj, cls, box = D.build_targets(ds.scenes, SPEC.grid, SPEC.n_classes)
    raw = np.zeros((len(ds.scenes), 1 + SPEC.n_classes + 4) + obj.shape[1:])
    raw[:, 0] = np.where(obj > 0, 30.0, -30.0)
    for k in range(SPEC.n_classes):
        raw[:, 1 + k] = np.where(cls == k, 30.0, 0.0)
    raw[:, 1 + SPEC.n_classes:] = box
    dets = D.detections_from_head(D.decode_head(raw, SPEC.n_classes), SPEC.grid, score_thresh=0.5)
    rep = mean_ap(dets, D.ground_truth(ds))
    assert rep.map == pytest.approx(1.0) and rep.mar100 == pytest.approx(1.0)
    assert sum(len(d) for d in dets) == sum(len(s.boxes) for s in ds.scenes)


def test_nms_matches_loop_oracle():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 20, (30, 2))
    boxes = np.concatenate([xy, xy + rng.uniform(2, 8, (30, 2))], axis=1)
    scores = rng.random(30)
    keep = D.nms(boxes, scores, 0.4)
    ref = []
    for i in sorted(range(30), key=lambda i: -scores[i]):
        if all(oracles.box_iou(boxes[i], boxes[j]) < 0.4 for j in ref):
            ref.append(i)
    assert keep.tolist() == ref


def test_head_probabilities(ds):
    raw = np.random.default_rng(0).standard_normal((2, 8, 4, 4)) * 50
    h = D.decode_head(raw, 3)
    assert np.all((h.objectness >= 0) & (h.objectness <= 1))
    np.testing.assert_allclose(h.class_probs.sum(axis=1), 1.0)


@pytest.mark.parametrize("variant", D.DETECTOR_VARIANTS)
def test_forward_shapes_and_param_budget(ds, variant):
    p = D.init_detector(_cfg(variant))
    assert p.n_parameters() <= D.MAX_PARAMS
    a, b, f = ds.arrays()
    r = f[:4, :3] if variant == "vlc" else None
    raw = D.forward_raw(p, a[:4], b[:4], r)
    assert raw.shape == (4, p.config.head_out, SPEC.grid // D.STRIDE, SPEC.grid // D.STRIDE)
    det = D.forward_detector(ds.scenes[0], p, f[0, :3] if variant == "vlc" else None)
    assert len(det) <= 100


def test_condition_argument_is_enforced(ds):
    a, b, f = ds.arrays()
    with pytest.raises(ValueError):
        D.forward_raw(D.init_detector(_cfg("vlc")), a[:1], b[:1], None)
    with pytest.raises(ValueError):
        D.forward_raw(D.init_detector(_cfg("concat_conv")), a[:1], b[:1], f[:1, :3])
    with pytest.raises(ValueError):
        D.DetectorConfig(variant="concat_conv", n_conditions=2).validate()
    with pytest.raises(ValueError):
        D.forward_detector(ds.scenes[0], D.init_detector(_cfg("single_a")), variant="single_b")


@pytest.mark.parametrize("variant", ["vlc", "learnable_align"])
def test_detector_loss_gradient(ds, variant):
    p = D.init_detector(_cfg(variant, enc_channels=2, head_channels=3))
    w64 = {k: v.astype(np.float64) for k, v in p.weights.items()}
    scenes = ds.scenes[:2]
    a = np.stack([s.modality_a for s in scenes]).astype(np.float64)
    b = np.stack([s.modality_b for s in scenes]).astype(np.float64)
    r = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]) if variant == "vlc" else None
    tgt = D.build_targets(scenes, SPEC.grid, SPEC.n_classes)

    def loss(weights, track=False):
        wv = {k: Var(v, requires_grad=track) for k, v in weights.items()}
        parts = D.detection_loss(D.forward_raw(wv, a, b, r, p.config), *tgt, SPEC.n_classes)
        total = ad.add(ad.add(parts[0], parts[1]), parts[2])
        return total, wv

    total, wv = loss(w64, track=True)
    total.backward()
    for name in ("head.w1", "enc_a.w0", "enc_b.b1"):
        arr = w64[name]
        num = np.zeros_like(arr)
        for idx in list(np.ndindex(arr.shape))[:40]:
            o = arr[idx]
            arr[idx] = o + 1e-6
            fp = float(loss(w64)[0].data)
            arr[idx] = o - 1e-6
            fm = float(loss(w64)[0].data)
            arr[idx] = o
            num[idx] = (fp - fm) / 2e-6
        sel = tuple(np.array(list(np.ndindex(arr.shape))[:40]).T)
        assert rel_error(wv[name].grad[sel], num[sel]) < 1e-4, name


def test_training_is_deterministic_and_learns():
    d = generate_dataset(SynthSpec(n_scenes=60, grid=16, flag_probs={"dark": 0.3, "rain": 0.3}), 1)
    sp = build_splits(d, SplitPlan(seed=1))
    cond = D.oracle_conditions(d, ["dark", "rain", "blur"])
    hyper = D.TrainConfig(epochs=3, batch_size=8, seed=1)
    r1 = D.train(d.subset(sp.train), d.subset(sp.val), _cfg("vlc"), hyper, cond)
    r2 = D.train(d.subset(sp.train), d.subset(sp.val), _cfg("vlc"), hyper, cond)
    for k in r1.params.weights:
        np.testing.assert_array_equal(r1.params.weights[k], r2.params.weights[k])
    assert [row["loss"] for row in r1.log] == [row["loss"] for row in r2.log]
    assert r1.log[-1]["loss"] < r1.log[0]["loss"]
    assert 1 <= r1.best_epoch <= 3
    assert r1.log_csv().splitlines()[0].startswith("epoch,loss")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # divergence overflows on purpose
def test_training_errors(ds):
    sub = ds.subset(ds.ids[:4])
    with pytest.raises(ValueError, match="condition source"):
        D.train(sub, sub, _cfg("vlc"), D.TrainConfig(epochs=1))
    with pytest.raises(KeyError):
        D.train(sub, sub, _cfg("vlc"), D.TrainConfig(epochs=1), {})
    with pytest.raises(D.DivergenceError, match="lower lr"):
        D.train(sub, sub, _cfg("concat_conv"), D.TrainConfig(epochs=2, lr=1e12, clip_norm=1e30))


def test_checkpoint_round_trip(ds, tmp_path):
    p = D.init_detector(_cfg("cbam_only", seed=4))
    D.save_detector(p, tmp_path / "d.ckpt")
    q = D.load_detector(tmp_path / "d.ckpt")
    assert q.config == p.config
    for k in p.weights:
        np.testing.assert_array_equal(p.weights[k], q.weights[k])
    assert q.fusion_params().n_parameters() > 0
