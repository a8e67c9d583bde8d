import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from lstcl.backbone import BackboneConfig
from lstcl.checkpoint import checkpoint_hash, load_checkpoint, params_checksum, save_checkpoint
from lstcl.contrastive import LossConfig, lstcl_loss, symmetrized_step
from lstcl.errors import ConfigError, ParameterMapError
from lstcl.trainer import (
    OptimizerState,
    TrainConfig,
    build_encoders,
    lr_at,
    make_batch,
    optimizer_step,
    pretrain,
    read_metrics,
)
from lstcl.videogen import GeneratorConfig, generate_corpus

GEN = GeneratorConfig(k_classes=4, t_total=32, height=8, width=8, segment_count=4, rect_sizes=(3,))
TINY = BackboneConfig(frames=4, image_size=8, patch=4, dim=16, depth=1, heads=2)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(GEN, 16, seed=0)


def tiny_cfg(tmp_path=None, **kw):
    base = dict(epochs=3, warmup_epochs=1, batch_size=4, backbone=TINY, proj_dim=8, stride_short=1, stride_long=4)
    if tmp_path is not None:
        base.update(checkpoint_dir=str(tmp_path / "ckpt"), metrics_path=str(tmp_path / "metrics.csv"))
    base.update(kw)
    return TrainConfig(**base)


# --------------------------------------------------------------------------
# schedule

def test_lr_endpoints():
    assert lr_at(10, 100, 10, 0.5) == 0.5
    assert lr_at(100, 100, 10, 0.5) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(0, 100, 10, 0.5) == pytest.approx(0.05)


def test_warmup_is_linear_and_increasing():
    lrs = np.array([lr_at(s, 100, 20, 1.0) for s in range(20)])
    assert np.all(np.diff(lrs) > 0)
    assert np.allclose(np.diff(lrs, 2), 0.0, atol=1e-15)


def test_lr_continuous_at_boundary():
    before, at = lr_at(19, 100, 20, 1.0), lr_at(20, 100, 20, 1.0)
    assert before == pytest.approx(at)


@settings(max_examples=100, deadline=None)
@given(total=st.integers(2, 500), data=st.data())
def test_lr_bounded_and_decaying(total, data):
    warmup = data.draw(st.integers(0, total - 1))
    lrs = [lr_at(s, total, warmup, 1.0) for s in range(total + 1)]
    assert all(0.0 <= x <= 1.0 + 1e-12 for x in lrs)
    assert all(a >= b - 1e-12 for a, b in zip(lrs[warmup:], lrs[warmup + 1:]))


@pytest.mark.parametrize("args", [(0, 10, 10, 1.0), (11, 10, 2, 1.0), (-1, 10, 2, 1.0), (0, 10, -1, 1.0)])
def test_lr_bad_bounds(args):
    with pytest.raises(ConfigError):
        lr_at(*args)


def test_peak_lr_scaling():
    assert TrainConfig(base_lr=1e-2, batch_size=64).lr_peak == pytest.approx(2.5e-3)


# --------------------------------------------------------------------------
# AdamW

def test_zero_grad_zero_decay_keeps_params():
    p = {"w": torch.randn(3)}
    before = p["w"].clone()
    st_ = OptimizerState(weight_decay=0.0)
    optimizer_step(p, {"w": torch.zeros(3)}, st_, 0.1)
    assert torch.equal(p["w"], before) and st_.step == 1


def test_decoupled_decay_scales_params():
    p = {"w": torch.tensor([2.0, -4.0], dtype=torch.float64)}
    optimizer_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, OptimizerState(weight_decay=0.1), 0.01)
    assert torch.equal(p["w"], torch.tensor([2.0, -4.0], dtype=torch.float64) * (1 - 0.01 * 0.1))


def test_first_step_hand_formula():
    g, lr, b1, b2, eps = 0.3, 1e-2, 0.9, 0.999, 1e-8
    p = {"w": torch.tensor(0.0, dtype=torch.float64)}
    optimizer_step(p, {"w": torch.tensor(g, dtype=torch.float64)}, OptimizerState(weight_decay=0.0), lr)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    assert p["w"].item() == pytest.approx(-lr * m_hat / (math.sqrt(v_hat) + eps), rel=1e-12)
    assert abs(p["w"].item()) == pytest.approx(lr, rel=1e-6)


def test_matches_torch_adamw_over_many_steps():
    torch.manual_seed(0)
    w = torch.randn(5, 3, dtype=torch.float64)
    ours = {"w": w.clone()}
    ref = torch.nn.Parameter(w.clone())
    opt = torch.optim.AdamW([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05)
    state = OptimizerState(weight_decay=0.05)
    for i in range(50):
        g = torch.randn(5, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(i))
        lr = lr_at(i, 50, 5, 1e-2)
        for group in opt.param_groups:
            group["lr"] = lr
        ref.grad = g.clone()
        opt.step()
        optimizer_step(ours, {"w": g}, state, lr)
    torch.testing.assert_close(ours["w"], ref.detach(), rtol=1e-10, atol=1e-12)


def test_optimizer_shape_and_name_errors():
    with pytest.raises(ParameterMapError):
        optimizer_step({"w": torch.zeros(2)}, {"v": torch.zeros(2)}, OptimizerState(), 0.1)
    with pytest.raises(ParameterMapError):
        optimizer_step({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, OptimizerState(), 0.1)


@pytest.mark.parametrize("lr", [1e-3, 1e-4])
def test_step_decreases_loss_on_frozen_batch(corpus, lr):
    cfg = tiny_cfg(augment={"crop": False, "brightness": 0.0})
    online, momentum = build_encoders(cfg)
    short, long = make_batch(corpus[:4], cfg, np.random.default_rng(0))
    before, grads = symmetrized_step(online, momentum, short, long, cfg.loss)
    optimizer_step(dict(online.named_parameters()), grads, OptimizerState(weight_decay=0.0), lr)
    with torch.no_grad():
        after = lstcl_loss(online, momentum, short, long, cfg.loss).item()
    assert after < before


# --------------------------------------------------------------------------
# pretraining loop

def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=5, warmup_epochs=5)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(stride_short=4, stride_long=2)


def test_infeasible_strides_rejected_before_training(corpus, tmp_path):
    cfg = tiny_cfg(tmp_path, stride_long=16)  # span 49 > 32 frames
    with pytest.raises(ConfigError):
        pretrain(corpus, cfg)
    assert not (tmp_path / "ckpt").exists()


def test_zero_epochs_returns_initial_params(corpus, tmp_path):
    cfg = tiny_cfg(tmp_path, epochs=0, warmup_epochs=0)
    res = pretrain(corpus, cfg)
    fresh, _ = build_encoders(cfg)
    assert params_checksum(res.online) == params_checksum(fresh)
    assert read_metrics(tmp_path / "metrics.csv") == []
    assert (tmp_path / "metrics.csv").read_text().strip() == "step,epoch,lr,loss,wall_ms"


@pytest.mark.parametrize("framework", ["infonce", "byol", "simsiam"])
def test_same_seed_same_checkpoint(corpus, tmp_path, framework):
    hashes = []
    for run in range(2):
        cfg = tiny_cfg(tmp_path / str(run), epochs=2, loss=LossConfig(framework=framework))
        pretrain(corpus, cfg)
        hashes.append(checkpoint_hash(tmp_path / str(run) / "ckpt"))
    assert hashes[0] == hashes[1]


def test_different_seed_differs(corpus, tmp_path):
    a = pretrain(corpus, tiny_cfg(tmp_path / "a", epochs=2, seed=0))
    b = pretrain(corpus, tiny_cfg(tmp_path / "b", epochs=2, seed=1))
    assert params_checksum(a.online) != params_checksum(b.online)


def _strip_wall(rows):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in rows]


def test_resume_reproduces_uninterrupted_run(corpus, tmp_path):
    full = tiny_cfg(tmp_path / "full")
    pretrain(corpus, full)
    part = tiny_cfg(tmp_path / "part")
    pretrain(corpus, part, stop_after_epoch=1)
    pretrain(corpus, part, resume_from=tmp_path / "part" / "ckpt")
    assert _strip_wall(read_metrics(tmp_path / "part" / "metrics.csv")) == \
        _strip_wall(read_metrics(tmp_path / "full" / "metrics.csv"))
    assert checkpoint_hash(tmp_path / "part" / "ckpt") == checkpoint_hash(tmp_path / "full" / "ckpt")


def test_metrics_rows(corpus, tmp_path):
    cfg = tiny_cfg(tmp_path)
    res = pretrain(corpus, cfg)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert len(rows) == 3 * 4 == len(res.metrics)
    assert [int(r["step"]) for r in rows] == list(range(12))
    assert all(float(r["loss"]) > 0 and float(r["lr"]) > 0 for r in rows)


def test_resume_rejects_other_model(corpus, tmp_path):
    pretrain(corpus, tiny_cfg(tmp_path, epochs=1, warmup_epochs=0))
    other = tiny_cfg(tmp_path, backbone=BackboneConfig(frames=4, image_size=8, patch=4, dim=8, depth=1, heads=2))
    with pytest.raises(ConfigError):
        pretrain(corpus, other, resume_from=tmp_path / "ckpt")


def test_checkpoint_roundtrip_and_corruption(tmp_path):
    tensors = {"a": torch.randn(3, 2), "b": torch.tensor(1.5)}
    digest = save_checkpoint(tmp_path, tensors, {"config_hash": "x", "step": 3})
    back, meta = load_checkpoint(tmp_path)
    assert meta["sha256"] == digest and meta["step"] == 3
    assert all(torch.equal(back[k], tensors[k]) for k in tensors)
    raw = bytearray((tmp_path / "params.f32").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "params.f32").write_bytes(bytes(raw))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path)


def test_payload_is_little_endian_float32(tmp_path):
    save_checkpoint(tmp_path, {"w": torch.tensor([1.0, -2.5])}, {})
    assert np.frombuffer((tmp_path / "params.f32").read_bytes(), dtype="<f4").tolist() == [1.0, -2.5]
