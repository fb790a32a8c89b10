import json
import zipfile

import numpy as np
import pytest

from vlcfusion import checkpoint as C
from vlcfusion import fusion as F


def test_fusion_params_round_trip(tmp_path):
    p = F.init_fusion_params("vlc", 3, 2, n_conditions=4, seed=5, dtype=np.float32, zero_film=False)
    C.save_fusion_params(p, tmp_path / "f.ckpt")
    q = C.load_fusion_params(tmp_path / "f.ckpt")
    assert (q.variant, q.c_a, q.c_b, q.c_out, q.n_conditions) == ("vlc", 3, 2, 5, 4)
    for k in p.weights:
        np.testing.assert_array_equal(p.weights[k], q.weights[k])


def test_archives_are_byte_identical(tmp_path):
    p = F.init_fusion_params("concat_conv", 2, 2, seed=1)
    C.save_fusion_params(p, tmp_path / "a.ckpt")
    C.save_fusion_params(p, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def _rewrite_manifest(src, dst, edit):
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        for item in zin.infolist():
            data = zin.read(item)
            if item.filename == "manifest.json":
                m = json.loads(data)
                edit(m)
                data = json.dumps(m).encode()
            zout.writestr(item, data)


@pytest.mark.parametrize("edit,match", [
    (lambda m: m.update(format="other"), "not a"),
    (lambda m: m.update(version=9), "version"),
    (lambda m: m["arrays"][0].update(shape=[999]), "values"),
    (lambda m: m["dims"].update(c_a="three"), "dims"),
])
def test_corrupt_checkpoints_are_rejected(tmp_path, edit, match):
    p = F.init_fusion_params("concat_conv", 2, 2, seed=1)
    C.save_fusion_params(p, tmp_path / "ok.ckpt")
    _rewrite_manifest(tmp_path / "ok.ckpt", tmp_path / "bad.ckpt", edit)
    with pytest.raises(C.CheckpointError, match=match):
        C.load_fusion_params(tmp_path / "bad.ckpt")


def test_not_a_zip(tmp_path):
    (tmp_path / "x.ckpt").write_text("hello")
    with pytest.raises(C.CheckpointError):
        C.load_arrays(tmp_path / "x.ckpt")
