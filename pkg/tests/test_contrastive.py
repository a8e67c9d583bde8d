import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from lstcl.backbone import BackboneConfig
from lstcl.contrastive import (
    Encoder,
    Framework,
    LossConfig,
    byol_loss,
    encode_key,
    encode_query,
    info_nce,
    l2_normalize,
    lstcl_loss,
    momentum_update,
    pair_loss,
    shared_names,
    simsiam_loss,
    symmetrized_step,
)
from lstcl.errors import ConfigError, NumericError, ParameterMapError

TINY = BackboneConfig(frames=2, image_size=8, patch=4, dim=8, depth=1, heads=2)
FRAMEWORKS = list(Framework)


def _unit(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return l2_normalize(torch.randn(*shape, generator=g, dtype=dtype))


def _encoders(framework, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    online = Encoder.build(TINY, proj_dim=4).to(dtype)
    momentum = online.key_copy() if Framework(framework).uses_momentum else None
    return online, momentum


def _clips(b=3, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 2, 8, 8, 1, generator=g, dtype=dtype), torch.rand(b, 2, 8, 8, 1, generator=g, dtype=dtype)


# --------------------------------------------------------------------------
# encoders

def test_query_and_key_are_unit_vectors():
    online, momentum = _encoders("infonce")
    s, _ = _clips(5)
    for v in (encode_query(online, s), encode_key(momentum, s)):
        assert torch.allclose(v.norm(dim=-1), torch.ones(5), atol=1e-6)


def test_key_equals_normalized_projection():
    online, _ = _encoders("simsiam")
    s, _ = _clips()
    torch.testing.assert_close(encode_key(online, s), l2_normalize(online.projector(online.backbone(s))))


def test_key_copy_has_no_predictor_and_same_names():
    online, momentum = _encoders("byol")
    assert momentum.predictor is None
    assert set(shared_names(online)) == {n for n, _ in momentum.named_parameters()}
    assert all(torch.equal(dict(online.named_parameters())[n], p) for n, p in momentum.named_parameters())


def test_zero_vector_normalization_raises():
    with pytest.raises(NumericError):
        l2_normalize(torch.zeros(2, 3))


def test_zero_predictor_output_raises():
    online, _ = _encoders("infonce")
    with torch.no_grad():
        for p in online.predictor.fc2.parameters():
            p.zero_()
    with pytest.raises(NumericError):
        encode_query(online, _clips()[0])


# --------------------------------------------------------------------------
# InfoNCE

def loop_info_nce(q, k, rho):
    total = 0.0
    for i in range(q.shape[0]):
        logits = [sum(q[i, c].item() * k[j, c].item() for c in range(q.shape[1])) / rho for j in range(k.shape[0])]
        top = max(logits)
        lse = top + math.log(sum(math.exp(x - top) for x in logits))
        total += lse - logits[i]
    return total


def test_info_nce_single_pair_is_zero():
    q = _unit(1, 3)
    assert info_nce(q, _unit(1, 3, seed=1), 0.2).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("b", [2, 4, 8])
def test_info_nce_identical_keys(b):
    q = _unit(b, 5)
    k = _unit(1, 5, seed=3).expand(b, -1)
    assert info_nce(q, k, 0.2).item() == pytest.approx(b * math.log(b), abs=1e-9)


@pytest.mark.parametrize("b,d,seed", [(b, d, s) for b in (1, 2, 4, 8) for d in (3, 7) for s in range(2)])
def test_info_nce_matches_loop_oracle(b, d, seed):
    q, k = _unit(b, d, seed=seed), _unit(b, d, seed=seed + 100)
    assert abs(info_nce(q, k, 0.2).item() - loop_info_nce(q, k, 0.2)) < 1e-6
    assert abs(info_nce(q, k, 0.2, reduction="mean").item() - loop_info_nce(q, k, 0.2) / b) < 1e-6


@settings(max_examples=50, deadline=None)
@given(b=st.integers(1, 8), d=st.integers(2, 6), rho=st.floats(0.05, 2.0), seed=st.integers(0, 10_000))
def test_info_nce_non_negative_and_finite(b, d, rho, seed):
    q, k = _unit(b, d, seed=seed), _unit(b, d, seed=seed + 1)
    loss = info_nce(q, k, rho)
    assert torch.isfinite(loss) and loss.item() >= -1e-12


def test_info_nce_decreases_as_positive_aligns():
    k = _unit(4, 3)
    noise = _unit(4, 3, seed=9)
    losses = [info_nce(l2_normalize(a * k + (1 - a) * noise), k, 0.2).item() for a in (0.0, 0.3, 0.6, 0.9, 1.0)]
    assert all(x > y for x, y in zip(losses, losses[1:]))


def test_temperature_sharpens_gap():
    k = torch.eye(4, dtype=torch.float64)
    separated = k.clone()
    # each query sits halfway between its own key and the next one
    confusable = l2_normalize(k + torch.roll(k, 1, dims=1))
    gaps = [info_nce(confusable, k, rho).item() - info_nce(separated, k, rho).item() for rho in (1.0, 0.5, 0.25)]
    assert all(a < b for a, b in zip(gaps, gaps[1:]))


def test_non_finite_input_raises():
    q = _unit(2, 3)
    bad = q.clone()
    bad[0, 0] = float("nan")
    with pytest.raises(NumericError):
        info_nce(bad, q, 0.2)
    with pytest.raises(NumericError):
        byol_loss(q, bad)


# --------------------------------------------------------------------------
# BYOL / SimSiam

def test_byol_exact_terms():
    k = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    p = torch.tensor([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
    terms = byol_loss(p, k, reduction="none")
    assert terms.tolist() == [0.0, 2.0, 4.0]
    assert byol_loss(p, k).item() == 6.0


def test_simsiam_equals_byol_and_blocks_key_gradient():
    p = _unit(4, 5).requires_grad_()
    k = _unit(4, 5, seed=1).requires_grad_()
    s = simsiam_loss(p, k)
    assert s.item() == byol_loss(p, k).item()
    s.backward()
    assert k.grad is None or torch.count_nonzero(k.grad) == 0
    assert torch.count_nonzero(p.grad) > 0


@pytest.mark.parametrize("fn", [byol_loss, simsiam_loss])
def test_byol_gradient_wrt_query(gradcheck, fn):
    for seed in range(5):
        p = (torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))).requires_grad_()
        k = _unit(3, 4, seed=seed + 50)
        assert gradcheck(lambda: fn(p, k), [p]) <= 1e-5


def test_info_nce_gradient(gradcheck):
    for seed in range(5):
        q = torch.randn(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(seed)).requires_grad_()
        k = torch.randn(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(seed + 9)).requires_grad_()
        assert gradcheck(lambda: info_nce(l2_normalize(q), l2_normalize(k), 0.2), [q, k]) <= 1e-5


@pytest.mark.parametrize("framework", FRAMEWORKS)
def test_full_chain_gradient(gradcheck, framework):
    # backbone -> projector -> predictor -> normalise -> loss, double precision.
    # Keys are frozen at the unperturbed parameters: for SimSiam they come from
    # the same encoder, and central differences must not see through the stop-gradient.
    for seed in range(5):
        online, momentum = _encoders(framework, seed=seed, dtype=torch.float64)
        s, l = _clips(3, seed=seed, dtype=torch.float64)
        cfg = LossConfig(framework=framework, symmetrize=False)
        k = encode_key(momentum or online, l)
        fn = lambda: pair_loss(encode_query(online, s), k, cfg)  # noqa: E731
        assert gradcheck(fn, list(online.parameters()), n_probe=3, seed=seed) <= 1e-5


@pytest.mark.parametrize("framework", FRAMEWORKS)
def test_head_gradient_single_precision(gradcheck, framework):
    cfg = LossConfig(framework=framework)
    for seed in range(5):
        torch.manual_seed(seed)
        projector, predictor = Encoder.build(TINY, proj_dim=4).projector, Encoder.build(TINY, proj_dim=4).predictor
        x = torch.randn(6, 8)
        k = _unit(6, 4, seed=seed, dtype=torch.float32)

        def fn():
            return pair_loss(l2_normalize(predictor(projector(x))), k, cfg)

        params = list(projector.parameters()) + list(predictor.parameters())
        assert gradcheck(fn, params, eps=1e-3, n_probe=6, seed=seed) <= 1e-3


# --------------------------------------------------------------------------
# stop-gradient and symmetrisation

@pytest.mark.parametrize("framework", FRAMEWORKS)
def test_key_path_gradients_are_zero(framework):
    online, momentum = _encoders(framework)
    if momentum is not None:
        for p in momentum.parameters():
            p.requires_grad_(True)
    s, l = _clips()
    l.requires_grad_(True)
    cfg = LossConfig(framework=framework, symmetrize=False)
    lstcl_loss(online, momentum, s, l, cfg).backward()
    # long clips only feed the key encoder when the dual term is off
    assert l.grad is None or torch.count_nonzero(l.grad) == 0
    if momentum is not None:
        assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in momentum.parameters())


@pytest.mark.parametrize("framework", FRAMEWORKS)
def test_symmetrized_loss_invariant_to_swap(framework):
    online, momentum = _encoders(framework)
    s, l = _clips(4)
    cfg = LossConfig(framework=framework)
    a, _ = symmetrized_step(online, momentum, s, l, cfg)
    b, _ = symmetrized_step(online, momentum, l, s, cfg)
    assert a == b


@pytest.mark.parametrize("framework", FRAMEWORKS)
def test_symmetrize_false_is_single_term(framework):
    online, momentum = _encoders(framework)
    s, l = _clips(4)
    key_enc = online if momentum is None else momentum
    cfg = LossConfig(framework=framework, symmetrize=False)
    expect = pair_loss(encode_query(online, s), encode_key(key_enc, l), cfg, reduction="mean")
    assert symmetrized_step(online, momentum, s, l, cfg)[0] == expect.item()


@pytest.mark.parametrize("framework", FRAMEWORKS)
def test_gradient_additivity(framework):
    online, momentum = _encoders(framework, dtype=torch.float64)
    s, l = _clips(4, dtype=torch.float64)
    single = LossConfig(framework=framework, symmetrize=False)
    _, g_sym = symmetrized_step(online, momentum, s, l, LossConfig(framework=framework))
    _, g1 = symmetrized_step(online, momentum, s, l, single)
    _, g2 = symmetrized_step(online, momentum, l, s, single)
    for name in g_sym:
        torch.testing.assert_close(g_sym[name], g1[name] + g2[name], rtol=1e-10, atol=1e-12)


def test_momentum_configuration_errors():
    online, momentum = _encoders("infonce")
    s, l = _clips()
    with pytest.raises(ConfigError):
        lstcl_loss(online, None, s, l, LossConfig(framework="byol"))
    with pytest.raises(ConfigError):
        lstcl_loss(online, momentum, s, l, LossConfig(framework="simsiam"))


@pytest.mark.parametrize("kw", [{"temperature": 0.0}, {"momentum": 1.5}, {"framework": "moco"}])
def test_bad_loss_config(kw):
    with pytest.raises((ConfigError, ValueError)):
        LossConfig(**kw)


def test_step_is_deterministic():
    s, l = _clips(4)
    runs = []
    for _ in range(2):
        online, momentum = _encoders("infonce", seed=3)
        runs.append(symmetrized_step(online, momentum, s, l, LossConfig()))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(runs[0][1][n], runs[1][1][n]) for n in runs[0][1])


def test_gradients_finite_at_small_temperature():
    online, momentum = _encoders("infonce")
    s, l = _clips(6)
    loss, grads = symmetrized_step(online, momentum, s, l, LossConfig(temperature=0.05))
    assert math.isfinite(loss) and all(torch.isfinite(g).all() for g in grads.values())


# --------------------------------------------------------------------------
# momentum update

@pytest.mark.parametrize("m", [0.0, 0.5, 0.99, 1.0])
def test_momentum_update_formula(m):
    online, momentum = _encoders("byol")
    with torch.no_grad():
        for p in online.parameters():
            p.add_(torch.randn_like(p))
    before = {n: p.clone() for n, p in momentum.named_parameters()}
    theta = dict(online.named_parameters())
    momentum_update(online, momentum, m)
    for n, p in momentum.named_parameters():
        expect = m * before[n] + (1 - m) * theta[n]
        assert torch.equal(p, expect)
        if m in (0.0, 1.0):
            assert torch.equal(p, theta[n] if m == 0.0 else before[n])


def test_momentum_scalar_probe():
    mom = {"w": torch.zeros(())}
    momentum_update({"w": torch.tensor(2.0)}, mom, 0.5)
    assert mom["w"].item() == 1.0


def test_momentum_update_is_name_keyed():
    names = [f"p{i}" for i in range(5)]
    online = {n: torch.randn(3) for n in names}
    a = {n: torch.randn(3) for n in names}
    b = {n: a[n].clone() for n in reversed(names)}
    momentum_update(online, a, 0.7)
    momentum_update(dict(reversed(list(online.items()))), b, 0.7)
    assert all(torch.equal(a[n], b[n]) for n in names)


def test_momentum_name_mismatch():
    with pytest.raises(ParameterMapError):
        momentum_update({"a": torch.zeros(2)}, {"b": torch.zeros(2)}, 0.5)
    with pytest.raises(ParameterMapError):
        momentum_update({"a": torch.zeros(2)}, {"a": torch.zeros(3)}, 0.5)


def test_momentum_distance_non_increasing():
    online, momentum = _encoders("infonce")
    with torch.no_grad():
        for p in online.parameters():
            p.add_(torch.randn_like(p))
    theta = dict(online.named_parameters())

    def dist():
        return math.sqrt(sum(((p - theta[n]) ** 2).sum().item() for n, p in momentum.named_parameters()))

    start = prev = dist()
    for _ in range(100):
        momentum_update(online, momentum, 0.99)
        cur = dist()
        assert cur <= prev
        prev = cur
    assert prev == pytest.approx(0.99**100 * start, rel=1e-4)
