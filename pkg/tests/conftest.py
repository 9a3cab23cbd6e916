import numpy as np
import pytest
import torch


def random_homography(rng: np.random.Generator) -> np.ndarray:
    """Well-conditioned homography params: near-identity linear part, mild perspective."""
    lin = np.eye(2) + rng.uniform(-0.3, 0.3, size=(2, 2))
    t = rng.uniform(-0.3, 0.3, size=2)
    p = rng.uniform(-0.15, 0.15, size=2)
    return np.array([lin[0, 0], lin[0, 1], t[0], lin[1, 0], lin[1, 1], t[1], p[0], p[1]])


def random_affine(rng: np.random.Generator) -> np.ndarray:
    lin = np.eye(2) + rng.uniform(-0.3, 0.3, size=(2, 2))
    t = rng.uniform(-0.3, 0.3, size=2)
    return np.array([lin[0, 0], lin[0, 1], t[0], lin[1, 0], lin[1, 1], t[1]])


def to_matrix(kind: str, p: np.ndarray) -> np.ndarray:
    if kind == "affine":
        return np.vstack([np.asarray(p).reshape(2, 3), [0.0, 0.0, 1.0]])
    return np.append(np.asarray(p), 1.0).reshape(3, 3)


def fd_max_rel_error(fn, inputs, eps=1e-4):
    """Max relative error between autograd and central differences of sum(fn * probe)."""
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    gen = torch.Generator().manual_seed(1234)
    out = fn(*inputs)
    probe = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    grads = torch.autograd.grad((out * probe).sum(), inputs, allow_unused=True)
    worst = 0.0
    for x, g in zip(inputs, grads):
        g = torch.zeros_like(x) if g is None else g
        num = torch.zeros_like(x)
        flat = x.detach().view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = (fn(*inputs) * probe).sum().item()
            flat[i] = orig - eps
            fm = (fn(*inputs) * probe).sum().item()
            flat[i] = orig
            num.view(-1)[i] = (fp - fm) / (2 * eps)
        denom = max(num.abs().max().item(), g.abs().max().item(), 1e-8)
        worst = max(worst, (g - num).abs().max().item() / denom)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember a pass/fail line for the end-of-session summary, and echo it now."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
