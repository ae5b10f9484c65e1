import numpy as np
import pytest

from amsnet.errors import InputError
from amsnet.harness.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from amsnet.harness.config import TrainConfig
from amsnet.harness.train import build_model, model_from_checkpoint


@pytest.mark.parametrize("precision", ["float32", "float64"])
def test_round_trip_bit_identical(tmp_path, precision):
    cfg = TrainConfig(variant="AMS", precision=precision, seed=3)
    model = build_model(cfg, 6)
    x = np.random.default_rng(0).normal(size=(4, 3, 32, 16)).astype(cfg.dtype)
    model.forward(x)  # moves the BN running statistics away from their initial values
    model.eval()
    ref = model.forward(x)
    opt = {"adam.m.w": np.arange(6.0).reshape(2, 3)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(cfg.to_dict(), model.state_dict(), 7, 6, 11, opt), path)
    ck = load_checkpoint(path)
    assert ck.epoch == 7 and ck.num_classes == 6 and ck.optimizer_step == 11
    assert ck.config == cfg.to_dict()
    assert list(ck.params) == list(model.state_dict())
    for k, v in model.state_dict().items():
        assert ck.params[k].dtype == v.dtype and np.array_equal(ck.params[k], v)
    assert any("running_var" in k for k in ck.params)
    assert np.array_equal(ck.optimizer["adam.m.w"], opt["adam.m.w"])
    restored = model_from_checkpoint(ck)
    restored.eval()
    out = restored.forward(x)
    assert np.array_equal(out[0], ref[0]) and np.array_equal(out[1], ref[1])


def test_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(InputError):
        load_checkpoint(p)
