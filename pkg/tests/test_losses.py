import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from fromnet.losses import (
    MarginHead,
    MarginSpec,
    cosine_logits,
    margin_loss,
    pattern_ce_loss,
    pattern_reg_loss,
    total_loss,
)



@pytest.fixture(autouse=True)
def double_precision():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def scalar_margin_oracle(cos, labels, m1, m2, m3, s):
    """Direct per-sample evaluation with plain floats."""
    total = 0.0
    for row, y in zip(cos, labels):
        theta = math.acos(min(max(row[y], -1.0), 1.0))
        delta = math.cos(m1 * theta + m2) - m3
        num = math.exp(s * delta)
        den = num + sum(math.exp(s * c) for j, c in enumerate(row) if j != y)
        total += -math.log(num / den)
    return total / len(cos)


def logsumexp_ce_oracle(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total / len(logits)


def numeric_grad(f, x, eps=1e-5):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = f().item()
        flat[i] = old - eps
        lo = f().item()
        flat[i] = old
        g.view(-1)[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return (a - b).norm().item() / max(a.norm().item(), b.norm().item(), 1e-12)


# -- margin loss ---------------------------------------------------------------


def test_cosface_scalar_example():
    cos = torch.tensor([[0.9, 0.1]])
    loss = margin_loss(cos, torch.tensor([0]), MarginSpec.cosface(0.35, s=64))
    # direct scalar evaluation on the same double inputs
    z = 64 * 0.1 - 64 * (0.9 - 0.35)
    oracle = math.log1p(math.exp(z))
    assert abs(loss.item() - oracle) / oracle <= 1e-15
    # 0.9, 0.1 and 0.35 are not exact doubles; the exponent lands one ulp from -28.8
    closed = math.log1p(math.exp(-28.8))
    assert closed == pytest.approx(3.09e-13, rel=1e-2)
    assert abs(loss.item() - closed) / closed < 4e-15


def test_arcface_zero_angle():
    # theta_y = 0: delta = cos(0.5); compare against the scalar oracle
    cos = torch.tensor([[1.0, 0.2, -0.3]])
    spec = MarginSpec.arcface(0.5, s=8)
    loss = margin_loss(cos, torch.tensor([0]), spec)
    delta = math.cos(0.5)
    expected = -math.log(math.exp(8 * delta) / (math.exp(8 * delta) + math.exp(1.6) + math.exp(-2.4)))
    assert loss.item() == pytest.approx(expected, rel=1e-6)
    assert loss.item() == pytest.approx(scalar_margin_oracle([[1.0, 0.2, -0.3]], [0], 1, 0.5, 0, 8), rel=1e-9)


@pytest.mark.parametrize("spec", [MarginSpec.cosface(0.35, 30), MarginSpec.arcface(0.5, 30), MarginSpec.sphereface(4, 30), MarginSpec(1.0, 0.1, 0.2, 16)])
def test_margin_loss_matches_scalar_oracle(spec):
    rng = np.random.default_rng(0)
    cos = rng.uniform(-1, 1, size=(6, 5))
    labels = rng.integers(0, 5, size=6)
    got = margin_loss(torch.tensor(cos), torch.tensor(labels), spec).item()
    assert got == pytest.approx(scalar_margin_oracle(cos.tolist(), labels.tolist(), spec.m1, spec.m2, spec.m3, spec.s), rel=1e-9)


def test_no_margin_is_softmax_ce():
    gen = torch.Generator().manual_seed(0)
    for _ in range(100):
        cos = torch.rand(7, 9, generator=gen) * 2 - 1
        labels = torch.randint(0, 9, (7,), generator=gen)
        s = float(torch.rand(1, generator=gen)) * 60 + 1
        got = margin_loss(cos, labels, MarginSpec(1.0, 0.0, 0.0, s))
        assert abs(got.item() - F.cross_entropy(s * cos, labels).item()) <= 1e-9
    cos = torch.rand(4, 3) * 2 - 1
    labels = torch.tensor([0, 1, 2, 0])
    assert margin_loss(cos, labels, MarginSpec(1, 0, 0, 1)).item() == pytest.approx(F.cross_entropy(cos, labels).item(), abs=1e-12)


def test_margin_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        margin_loss(torch.zeros(0, 3), torch.zeros(0, dtype=torch.long), MarginSpec())


def test_margin_spec_validation():
    with pytest.raises(ValueError):
        MarginSpec(s=0)
    with pytest.raises(ValueError):
        MarginSpec.from_preset("triplet")
    assert MarginSpec.from_preset("cosface", s=64) == MarginSpec(1.0, 0.0, 0.35, 64)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
def test_margin_loss_scale_invariant_in_embeddings(c, seed):
    gen = torch.Generator().manual_seed(seed)
    emb = torch.randn(5, 8, generator=gen)
    weights = torch.randn(6, 8, generator=gen)
    labels = torch.randint(0, 6, (5,), generator=gen)
    spec = MarginSpec.cosface(0.35, 30)
    a = margin_loss(cosine_logits(emb, weights), labels, spec)
    b = margin_loss(cosine_logits(emb * c, weights), labels, spec)
    assert abs(a.item() - b.item()) < 1e-7


# -- pattern losses --------------------------------------------------------------


def test_pattern_ce_uniform():
    loss = pattern_ce_loss(torch.zeros(8, 226), torch.arange(8))
    assert abs(loss.item() - math.log(226)) < 1e-12
    assert math.log(226) == pytest.approx(5.4205, abs=1e-4)


def test_pattern_ce_one_hot_limit():
    losses = []
    for gap in (1.0, 10.0, 100.0):
        logits = torch.zeros(1, 226)
        logits[0, 3] = gap
        losses.append(pattern_ce_loss(logits, torch.tensor([3])).item())
    assert losses[0] > losses[1] > losses[2] >= 0
    assert losses[2] < 1e-30


def test_pattern_ce_matches_oracle():
    gen = torch.Generator().manual_seed(3)
    logits = torch.randn(8, 226, generator=gen) * 3
    labels = torch.randint(0, 226, (8,), generator=gen)
    got = pattern_ce_loss(logits, labels).item()
    assert abs(got - logsumexp_ce_oracle(logits.tolist(), labels.tolist())) < 1e-10
    assert got >= 0


def test_pattern_ce_label_range():
    with pytest.raises(ValueError):
        pattern_ce_loss(torch.zeros(2, 5), torch.tensor([0, 5]))
    with pytest.raises(ValueError):
        pattern_ce_loss(torch.zeros(2, 5), torch.tensor([-1, 0]))


def test_pattern_reg_examples():
    t = torch.rand(3, 4)
    assert pattern_reg_loss(t.clone(), t).item() == 0.0
    pred = torch.zeros(1, 4)
    target = torch.tensor([[0.3, 0.0, 0.4, 0.0]])
    assert pattern_reg_loss(pred, target).item() == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(ValueError):
        pattern_reg_loss(torch.zeros(2, 4), torch.zeros(3, 4))
    with pytest.raises(ValueError):
        pattern_reg_loss(torch.zeros(2, 3), torch.zeros(2, 3))


def test_pattern_reg_matches_oracle():
    rng = np.random.default_rng(5)
    pred, target = rng.random((10, 4)), rng.random((10, 4))
    oracle = sum(math.sqrt(sum((t - p) ** 2 for p, t in zip(pr, tr))) for pr, tr in zip(pred, target)) / 10
    assert abs(pattern_reg_loss(torch.tensor(pred), torch.tensor(target)).item() - oracle) < 1e-10


def test_total_loss():
    a, b = torch.tensor(2.0), torch.tensor(3.0)
    assert total_loss(a, b, 0.0).item() == 2.0
    assert total_loss(a, b, 1.0).item() == 5.0
    gen = torch.Generator().manual_seed(1)
    x, y = torch.rand(2, generator=gen)
    assert total_loss(x, y, 0.5).item() == pytest.approx(x.item() + 0.5 * y.item(), abs=1e-15)
    with pytest.raises(ValueError):
        total_loss(a, b, -0.1)


# -- gradient checks ---------------------------------------------------------------


@pytest.mark.parametrize("spec", [MarginSpec.cosface(0.35, 8), MarginSpec.arcface(0.5, 8), MarginSpec.sphereface(2, 8)])
def test_margin_loss_gradcheck_wrt_embeddings_and_weights(spec):
    gen = torch.Generator().manual_seed(0)
    emb = torch.randn(4, 6, generator=gen, requires_grad=True)
    w = torch.randn(8, 6, generator=gen, requires_grad=True)
    labels = torch.randint(0, 8, (4,), generator=gen)
    f = lambda: margin_loss(cosine_logits(emb, w), labels, spec)
    f().backward()
    with torch.no_grad():
        assert rel_err(emb.grad, numeric_grad(f, emb.detach())) < 1e-4
        assert rel_err(w.grad, numeric_grad(f, w.detach())) < 1e-4


def test_pattern_losses_gradcheck():
    gen = torch.Generator().manual_seed(1)
    logits = torch.randn(4, 8, generator=gen, requires_grad=True)
    labels = torch.randint(0, 8, (4,), generator=gen)
    assert torch.autograd.gradcheck(lambda z: pattern_ce_loss(z, labels), (logits,), eps=1e-5, atol=1e-8, rtol=1e-4)
    pred = torch.rand(4, 4, generator=gen, requires_grad=True)
    target = torch.rand(4, 4, generator=gen)
    assert torch.autograd.gradcheck(lambda p: pattern_reg_loss(p, target), (pred,), eps=1e-5, atol=1e-8, rtol=1e-4)
    lm = torch.rand((), generator=gen, requires_grad=True)
    lp = torch.rand((), generator=gen, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: total_loss(a, b, 0.7), (lm, lp))


def test_margin_head_loss_and_grad():
    head = MarginHead(6, 8, MarginSpec.cosface(0.35, 8))
    emb = torch.randn(4, 6, requires_grad=True)
    loss, cos = head(emb, torch.tensor([0, 1, 2, 3]))
    assert cos.shape == (4, 8) and cos.abs().max() <= 1 + 1e-6
    loss.backward()
    assert head.weight.grad.abs().sum() > 0 and emb.grad.abs().sum() > 0
