import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roimae.checkpoint import MAGIC, Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from roimae.errors import CheckpointError, CompatibilityError
from roimae.model import ModelConfig, TransformerModel

CFG = ModelConfig(num_rois=5, window_len=8, hidden_dim=8, num_heads=2, num_layers=1, ffn_dim=16,
                  recon_hidden=8, clf_hidden=4)


def ckpt(seed=0, **meta):
    return Checkpoint.from_model(TransformerModel.init(CFG, seed), {"step": 3, "seed": seed, **meta})


def test_save_load_save_byte_identical(tmp_path):
    c = ckpt(strategy="mask_roi")
    save_checkpoint(c, tmp_path / "a.bin")
    back = load_checkpoint(tmp_path / "a.bin")
    save_checkpoint(back, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    for n, a in c.arrays.items():
        assert a.tobytes() == back.arrays[n].tobytes()
    assert back.metadata == {"step": 3, "seed": 0, "strategy": "mask_roi"}
    assert back.model_config == CFG


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32))
def test_round_trip_preserves_every_bit(seed):
    c = ckpt(seed)
    rng = np.random.default_rng(seed)
    name = next(iter(c.arrays))
    c.arrays[name].flat[0] = rng.normal() * 1e-300  # subnormal-range values survive too
    assert to_bytes(from_bytes(to_bytes(c))) == to_bytes(c)


def test_optimizer_moments_round_trip():
    from roimae.training import AdamW
    model = TransformerModel.init(CFG, 0)
    opt = AdamW(dict(model.params), 0.0)
    for t in model.params.values():
        t.grad = np.ones_like(t.data)
    opt.step(1e-3)
    c = Checkpoint.from_model(model, {}, opt)
    back = from_bytes(to_bytes(c))
    m, v = back.optimizer_moments()
    assert set(m) == set(model.params)
    assert np.allclose(m["embed.weight"], 0.1)
    assert back.to_model().params.keys() == model.params.keys()


def test_bad_magic():
    buf = bytearray(to_bytes(ckpt()))
    buf[0:8] = b"NOTACKPT"
    with pytest.raises(CheckpointError, match="magic"):
        from_bytes(bytes(buf))


def test_truncated():
    buf = to_bytes(ckpt())
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(buf[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        from_bytes(buf[:20])


def _rewrite_header(buf, edit):
    import json
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + hlen])
    edit(header)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hb)) + hb + buf[16 + hlen:]


def test_version_mismatch():
    buf = _rewrite_header(to_bytes(ckpt()), lambda h: h.update(format_version=99))
    with pytest.raises(CheckpointError, match="version 99"):
        from_bytes(buf)


def test_roi_mismatch_names_both_values(tmp_path):
    save_checkpoint(ckpt(), tmp_path / "c.bin")
    with pytest.raises(CompatibilityError, match="num_rois=5.*7 ROIs"):
        load_checkpoint(tmp_path / "c.bin", expected_rois=7)


def test_shape_mismatch_with_config():
    def edit(h):
        h["model_config"]["hidden_dim"] = 4
        h["model_config"]["ffn_dim"] = 16
    with pytest.raises(CompatibilityError):
        from_bytes(_rewrite_header(to_bytes(ckpt()), edit))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.bin")
