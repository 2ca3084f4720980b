import struct

import numpy as np
import pytest

from ddpnet.checkpoint import MAGIC, decode, encode, load_checkpoint, save_checkpoint
from ddpnet.errors import CheckpointError
from ddpnet.model import build_ddpnet, preset_spec
from ddpnet.tensor import Tensor
from ddpnet.training import AdamState, ScheduleConfig, TrainConfig, fit


@pytest.fixture
def trained(tiny_model, synth_samples):
    cfg = TrainConfig(schedule=ScheduleConfig(base_lr=1e-3, epochs=1, warmup=0), batch_size=4, augment=None)
    _, opt = fit(tiny_model, synth_samples[:4], cfg)
    return tiny_model, opt


def test_round_trip_restores_everything(trained, tmp_path):
    model, opt = trained
    mean = np.array([0.1, 0.2, 0.3], np.float32)
    save_checkpoint(tmp_path / "m.ddpck", model, opt, mean)
    back, opt2, mean2 = load_checkpoint(tmp_path / "m.ddpck")
    assert back.spec == model.spec and np.array_equal(mean2, mean)
    for (n, a), (m, b) in zip(model.named_parameters(), back.named_parameters()):
        assert n == m and np.array_equal(a.data, b.data) and a.dtype == b.dtype
    for (_, a), (_, b) in zip(model.named_bn_states(), back.named_bn_states()):
        assert np.array_equal(a.running_mean, b.running_mean) and np.array_equal(a.running_var, b.running_var)
    assert opt2.step == opt.step and opt2.weight_decay == opt.weight_decay
    assert all(np.array_equal(opt.m[k], opt2.m[k]) and np.array_equal(opt.v[k], opt2.v[k]) for k in opt.m)
    x = Tensor.wrap(np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32))
    assert np.array_equal(model.forward(x, "eval").data, back.forward(x, "eval").data)
    assert encode(back, opt2, mean2) == encode(model, opt, mean)


def test_weights_only_checkpoint(tiny_model, tmp_path):
    save_checkpoint(tmp_path / "w", tiny_model)
    _, opt, mean = load_checkpoint(tmp_path / "w")
    assert opt is None and mean is None


def test_double_precision_survives(tmp_path):
    model = build_ddpnet(preset_spec("tiny"), rng=1, dtype=np.float64)
    save_checkpoint(tmp_path / "d", model)
    assert load_checkpoint(tmp_path / "d")[0].dtype == np.float64


def test_tiny_checkpoint_is_small(trained, tmp_path):
    save_checkpoint(tmp_path / "t", *trained)
    assert (tmp_path / "t").stat().st_size < 10 * 2**20


def test_no_temporary_file_left(tiny_model, tmp_path):
    save_checkpoint(tmp_path / "c", tiny_model)
    assert [p.name for p in tmp_path.iterdir()] == ["c"]


def test_bad_magic(tiny_model):
    buf = encode(tiny_model)
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"X" + buf[1:])


def test_version_mismatch(tiny_model):
    buf = encode(tiny_model)
    with pytest.raises(CheckpointError, match="version 2"):
        decode(MAGIC + struct.pack("<I", 2) + buf[len(MAGIC) + 4:])


@pytest.mark.parametrize("cut", [5, 20, 200, -1])
def test_truncation(tiny_model, cut):
    buf = encode(tiny_model)
    with pytest.raises(CheckpointError, match="truncated"):
        decode(buf[:cut])


def test_trailing_bytes(tiny_model):
    with pytest.raises(CheckpointError, match="trailing"):
        decode(encode(tiny_model) + b"\0")


def test_layout_is_readable_by_hand(tiny_model):
    # header: magic, version, spec text, record count; first record is the first parameter
    buf = encode(tiny_model)
    version, spec_len = struct.unpack_from("<II", buf, len(MAGIC))
    pos = len(MAGIC) + 8
    assert version == 1 and buf[pos:pos + spec_len].decode() == tiny_model.spec.to_text()
    pos += spec_len
    (count,) = struct.unpack_from("<I", buf, pos)
    _, records = decode(buf)
    assert count == len(records)
    name, first = next(iter(tiny_model.named_parameters()))
    assert np.array_equal(records[f"param.{name}"], first.data)


def test_spec_mismatch_is_reported(tiny_model, tmp_path):
    other = build_ddpnet(preset_spec("tiny").replace(num_classes=4), rng=0)
    spec_text = other.spec.to_text().encode()
    buf = encode(tiny_model)
    _, old_len = struct.unpack_from("<II", buf, len(MAGIC))
    head = MAGIC + struct.pack("<II", 1, len(spec_text)) + spec_text
    (tmp_path / "x").write_bytes(head + buf[len(MAGIC) + 8 + old_len:])
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path / "x")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "absent")


def test_optimizer_without_moments_is_refused(tiny_model, tmp_path):
    # a stored optimizer must cover every parameter
    save_checkpoint(tmp_path / "a", tiny_model, AdamState(step=7))
    with pytest.raises(CheckpointError, match="missing record"):
        load_checkpoint(tmp_path / "a")
