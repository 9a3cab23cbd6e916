import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_max_rel_error, random_homography, to_matrix
from sagan import geometry as geo
from sagan import losses as L
from sagan.geometry import make_transform, translation


def t(*v):
    return torch.tensor(v, dtype=torch.float64)


# --- adversarial -------------------------------------------------------------

def test_critic_adv_loss_examples():
    z = t(0.0)
    assert L.critic_adv_loss(z, z, z, z).item() == 0.0
    assert L.critic_adv_loss(t(1.0), t(1.0), t(0.5), t(0.5)).item() == 0.0
    assert L.critic_adv_loss(t(2.0), t(1.0), t(0.0), t(0.0)).item() == 1.0


def test_critic_adv_loss_oracle():
    rng = np.random.default_rng(0)
    a, b, c, d = (rng.normal(size=n) for n in (5, 7, 5, 7))
    got = L.critic_adv_loss(*(torch.tensor(v) for v in (a, b, c, d))).item()
    assert abs(got - (a.mean() - b.mean() + c.mean() - d.mean())) < 1e-12


def test_gen_adv_loss_examples():
    assert L.gen_adv_loss(t(0.0, 0.0), t(0.0)).item() == 0.0
    assert L.gen_adv_loss(t(1.0), t(1.0)).item() == -2.0
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=9), rng.normal(size=9)
    assert abs(L.gen_adv_loss(torch.tensor(a), torch.tensor(b)).item() - (-a.mean() - b.mean())) < 1e-12


def test_adv_losses_reject_empty():
    e = torch.zeros(0)
    with pytest.raises(L.LossError):
        L.critic_adv_loss(e, t(1.0))
    with pytest.raises(L.LossError):
        L.gen_adv_loss(e)
    with pytest.raises(L.LossError):
        L.critic_adv_loss(t(1.0), t(1.0), e, t(1.0))


# --- gradient penalty ------------------------------------------------------------

def test_gradient_penalty_unit_linear_critic():
    lin = nn.Linear(8, 1, bias=True).double()
    with torch.no_grad():
        w = torch.randn(1, 8, dtype=torch.float64)
        lin.weight.copy_(w / w.norm())
    real, fake = torch.randn(6, 8, dtype=torch.float64), torch.randn(6, 8, dtype=torch.float64)
    gp = L.gradient_penalty(lambda x: lin(x).squeeze(1), real, fake)
    assert gp.item() < 1e-20


def test_gradient_penalty_zero_critic():
    real, fake = torch.randn(4, 3, 5, 5), torch.randn(4, 3, 5, 5)
    assert L.gradient_penalty(lambda x: x.sum(dim=(1, 2, 3)) * 0.0, real, fake).item() == 1.0
    assert L.gradient_penalty(lambda x: torch.zeros(x.shape[0]), real, fake).item() == 1.0


def test_gradient_penalty_shape_mismatch():
    with pytest.raises(L.LossError):
        L.gradient_penalty(lambda x: x.sum(1), torch.zeros(2, 3), torch.zeros(3, 3))


def test_gradient_penalty_matches_finite_difference_norm():
    torch.manual_seed(0)
    critic = nn.Sequential(nn.Conv2d(2, 4, 3, stride=2, padding=1), nn.Tanh(), nn.Flatten(), nn.Linear(4 * 4 * 4, 1)).double()
    score = lambda x: critic(x).squeeze(1)  # noqa: E731
    real = torch.randn(3, 2, 8, 8, dtype=torch.float64)
    fake = torch.randn(3, 2, 8, 8, dtype=torch.float64)
    g = torch.Generator().manual_seed(5)
    got = L.gradient_penalty(score, real, fake, generator=g).item()

    eps = torch.rand((3, 1, 1, 1), generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    x_hat = eps * real + (1 - eps) * fake
    h = 1e-5
    norms = []
    with torch.no_grad():
        for i in range(3):
            xi = x_hat[i:i + 1].clone()
            grad = torch.zeros_like(xi).view(-1)
            flat = xi.view(-1)
            for j in range(flat.numel()):
                o = flat[j].item()
                flat[j] = o + h
                fp = score(xi).item()
                flat[j] = o - h
                fm = score(xi).item()
                flat[j] = o
                grad[j] = (fp - fm) / (2 * h)
            norms.append(grad.norm().item())
    expected = float(np.mean([(n - 1) ** 2 for n in norms]))
    assert abs(got - expected) / max(abs(expected), 1e-12) < 1e-3


def test_gradient_penalty_is_differentiable_for_critic():
    lin = nn.Linear(4, 1).double()
    gp = L.gradient_penalty(lambda x: lin(x).squeeze(1) ** 2, torch.randn(5, 4, dtype=torch.float64),
                            torch.randn(5, 4, dtype=torch.float64))
    gp.backward()
    assert lin.weight.grad is not None and torch.isfinite(lin.weight.grad).all()


# --- cycle terms ---------------------------------------------------------------------

def test_pcl_examples():
    x = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert L.pcl(x, x).item() == 0.0
    assert abs(L.pcl(x + 0.5, x).item() - 0.5) < 1e-15
    y = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    assert abs(L.pcl(x, y).item() - np.abs(x.numpy() - y.numpy()).mean()) < 1e-15
    assert L.pcl(x, y).item() == L.pcl(y, x).item()
    with pytest.raises(L.LossError):
        L.pcl(x, y[:1])


def test_pcl_valid_mask():
    x = torch.zeros(1, 2, 2, 2, dtype=torch.float64)
    y = torch.tensor([[[[1.0, 3.0], [0.0, 0.0]]] * 2], dtype=torch.float64)
    valid = torch.tensor([[[[True, False], [True, True]]]])
    # valid elements: 1, 0, 0 in each channel -> mean 1/3
    assert abs(L.pcl(y, x, valid).item() - 1.0 / 3.0) < 1e-15


def test_scl_examples():
    rng = np.random.default_rng(2)
    h = make_transform("homography", random_homography(rng))
    assert L.scl(h, geo.invert(h)).item() < 1e-15
    ident = make_transform("affine", [1, 0, 0, 0, 1, 0])
    assert abs(L.scl(ident, translation(0.5, 0.0)).item() - 0.5 / 6) < 1e-15


def test_scl_matches_independent_oracle_and_is_not_symmetric():
    rng = np.random.default_rng(3)
    asym = 0.0
    for _ in range(20):
        pa, pb = random_homography(rng), random_homography(rng)
        inv = np.linalg.inv(to_matrix("homography", pa))
        inv = (inv / inv[2, 2]).reshape(-1)[:8]
        expected = np.abs(inv - pb).mean()
        ta, tb = make_transform("homography", pa), make_transform("homography", pb)
        assert abs(L.scl(ta, tb).item() - expected) < 1e-9
        asym = max(asym, abs(L.scl(ta, tb).item() - L.scl(tb, ta).item()))
    assert asym > 1e-3


def test_scl_errors():
    with pytest.raises(L.LossError):
        L.scl(make_transform("affine", [1, 0, 0, 0, 1, 0]), make_transform("homography", [1, 0, 0, 0, 1, 0, 0, 0]))
    z = make_transform("tps", torch.zeros(32))
    with pytest.raises(geo.UnsupportedKindError):
        L.scl(z, z)


def test_cycle_loss():
    w = L.LossWeights(lambda_pcl=10.0)
    assert L.cycle_loss(0.0, 0.0, w) == 0.0
    assert L.cycle_loss(1.0, 1.0, w) == 11.0
    rng = np.random.default_rng(4)
    for _ in range(10):
        s, p, lam = rng.uniform(0, 5, 3)
        assert abs(L.cycle_loss(s, p, L.LossWeights(lambda_pcl=lam)) - (s + lam * p)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(-3, 3))
def test_cycle_loss_linear(s1, s2, p1, p2, lam, a):
    w = L.LossWeights(lambda_pcl=lam)
    lhs = L.cycle_loss(a * s1 + s2, a * p1 + p2, w)
    rhs = a * L.cycle_loss(s1, p1, w) + L.cycle_loss(s2, p2, w)
    assert abs(lhs - rhs) <= 1e-9 * (1 + abs(lhs))


def test_mask_identity_loss():
    a = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    b = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    ones = torch.ones(2, 1, 4, 4, dtype=torch.float64)
    assert L.mask_identity_loss(a, a, ones).item() == 0.0
    assert L.mask_identity_loss(a, b, torch.zeros_like(ones)).item() == 0.0
    half = ones.clone()
    half[..., :2] = 0.0
    assert abs(L.mask_identity_loss(b + 1.0, b, half).item() - 0.5) < 1e-15
    with pytest.raises(L.LossError):
        L.mask_identity_loss(a, b[:, :2], ones)


def test_siamese_closed_forms():
    e = torch.tensor([[0.3, -1.2, 2.0]], dtype=torch.float64)
    assert L.siamese_loss(1, e, e, 2.0).item() == 0.0
    far = e + torch.tensor([[3.0, 0.0, 0.0]], dtype=torch.float64)
    assert L.siamese_loss(0, e, far, 2.0).item() == 0.0
    assert abs(L.siamese_loss(0, e, e, 2.0).item() - 4.0) < 1e-9
    near = e + torch.tensor([[0.0, 0.3, 0.0]], dtype=torch.float64)
    assert abs(L.siamese_loss(1, e, near, 2.0).item() - 0.09) < 1e-9
    with pytest.raises(L.LossError):
        L.siamese_loss(1, e, e[:, :2], 2.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.1, 4.0), st.floats(0.1, 4.0))
def test_siamese_branch_properties(d1, d2, m1, m2):
    e = torch.zeros(1, 2, dtype=torch.float64)
    at = lambda d: torch.tensor([[d, 0.0]], dtype=torch.float64)  # noqa: E731
    assert L.siamese_loss(1, e, at(d1), m1).item() == L.siamese_loss(1, e, at(d1), m2).item()
    lo, hi = sorted((d1, d2))
    assert L.siamese_loss(0, e, at(lo), m1).item() >= L.siamese_loss(0, e, at(hi), m1).item()


def test_total_gen_loss():
    w1 = L.LossWeights(lambda_cyc=1, lambda_idt=1, lambda_siam=1)
    assert L.total_gen_loss(L.LossReport(), w1) == 0.0
    assert L.total_gen_loss(L.LossReport(g_adv=1, cyc=1, idt=1, siam=1), w1) == 4.0
    rng = np.random.default_rng(5)
    for _ in range(10):
        a, c, i, s = rng.normal(size=4)
        lc, li, ls = rng.uniform(0, 3, 3)
        w = L.LossWeights(lambda_cyc=lc, lambda_idt=li, lambda_siam=ls)
        got = L.total_gen_loss(L.LossReport(g_adv=a, cyc=c, idt=i, siam=s), w)
        assert abs(got - (a + lc * c + li * i + ls * s)) < 1e-12


def test_loss_weights_validation():
    with pytest.raises(L.LossError):
        L.LossWeights(lambda_pcl=-1.0)
    with pytest.raises(L.LossError):
        L.LossWeights(margin=0.0)
    with pytest.raises(L.LossError):
        L.LossWeights(lambda_idt=float("inf"))


def test_nonadversarial_losses_nonnegative():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = torch.tensor(rng.normal(size=(2, 3, 4, 4)))
        b = torch.tensor(rng.normal(size=(2, 3, 4, 4)))
        m = torch.tensor(rng.integers(0, 2, size=(2, 1, 4, 4)), dtype=torch.float64)
        assert L.pcl(a, b) >= 0 and L.mask_identity_loss(a, b, m) >= 0
        ta = make_transform("homography", random_homography(rng))
        tb = make_transform("homography", random_homography(rng))
        assert L.scl(ta, tb) >= 0
        assert L.siamese_loss(int(rng.integers(0, 2)), a.flatten(1), b.flatten(1), 2.0) >= 0


# --- finite-difference checks -----------------------------------------------------------

def _rand(*shape, seed=0):
    return torch.tensor(np.random.default_rng(seed).normal(size=shape))


def test_losses_finite_difference():
    a, b = _rand(2, 3, 8, 8, seed=1), _rand(2, 3, 8, 8, seed=2)
    mask = (_rand(2, 1, 8, 8, seed=3) > 0).double()
    rng = np.random.default_rng(4)
    p1 = torch.tensor(np.stack([random_homography(rng) for _ in range(2)]))
    p2 = torch.tensor(np.stack([random_homography(rng) for _ in range(2)]))
    e1, e2 = _rand(2, 16, seed=5), _rand(2, 16, seed=6) * 0.2
    labels = torch.tensor([1.0, 0.0], dtype=torch.float64)
    checks = {
        "pcl": (lambda x, y: L.pcl(x, y), [a, b]),
        "scl": (lambda p, q: L.scl(geo.Transform("homography", p), geo.Transform("homography", q)), [p1, p2]),
        "idt": (lambda x, y: L.mask_identity_loss(x, y, mask), [a, b]),
        "siam": (lambda x, y: L.siamese_loss(labels, x, y, 6.0), [e1, e2]),
        "adv_d": (lambda f, r: L.critic_adv_loss(f, r, f * 0.5, r * 2.0), [e1[:, 0], e2[:, 0]]),
        "adv_g": (lambda f, q: L.gen_adv_loss(f, q), [e1[:, 0], e2[:, 0]]),
        "cyc": (lambda p, q, x, y: L.cycle_loss(
            L.scl(geo.Transform("homography", p), geo.Transform("homography", q)), L.pcl(x, y), L.LossWeights()),
            [p1, p2, a, b]),
    }
    for name, (fn, inputs) in checks.items():
        assert fd_max_rel_error(fn, inputs) < 1e-3, name
