"""Finite-difference checks of every differentiable piece, in float64 on tiny inputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence

import torch

from . import geometry as geo
from . import losses as L
from .networks import SAGAN, ImageCritic, ModelConfig

DEFAULT_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def input_rel_error(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-6,
                    seed: int = 0) -> float:
    """Max relative error of autograd vs central differences, one input coordinate at a time.

    The scalar differentiated is sum(fn(*inputs) * probe) for a fixed random probe.
    """
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    gen = torch.Generator().manual_seed(seed)
    out = fn(*inputs)
    probe = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    grads = torch.autograd.grad((out * probe).sum(), inputs, allow_unused=True)
    worst = 0.0
    # perturb through .data so losses that differentiate internally still work
    for x, g in zip(inputs, grads):
        g = torch.zeros_like(x) if g is None else g
        num = torch.zeros_like(x)
        flat = x.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = (fn(*inputs) * probe).sum().item()
            flat[i] = orig - eps
            fm = (fn(*inputs) * probe).sum().item()
            flat[i] = orig
            num.view(-1)[i] = (fp - fm) / (2 * eps)
        scale = max(num.abs().max().item(), g.abs().max().item(), 1e-12)
        worst = max(worst, (g - num).abs().max().item() / scale)
    return worst


def directional_rel_error(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                          n_dirs: int = 3, eps: float = 1e-6, seed: int = 0) -> float:
    """Compare autograd directional derivatives with central differences along random directions.

    Used where the parameter count makes coordinate-wise differences too slow.
    """
    params = list(params)
    grads = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    originals = [p.detach().clone() for p in params]
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        analytic = sum((g * d).sum().item() for g, d in zip(grads, dirs))
        vals = []
        for sign in (1.0, -1.0):
            for p, o, d in zip(params, originals, dirs):
                p.data.copy_(o + sign * eps * d)
            vals.append(loss_fn().item())
        for p, o in zip(params, originals):
            p.data.copy_(o)
        numeric = (vals[0] - vals[1]) / (2 * eps)
        scale = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst


def _homography(gen: torch.Generator, n: int) -> torch.Tensor:
    p = geo.identity_params(geo.HOMOGRAPHY, torch.float64).repeat(n, 1)
    noise = (torch.rand(n, 8, generator=gen, dtype=torch.float64) - 0.5)
    return p + noise * torch.tensor([0.4, 0.4, 0.6, 0.4, 0.4, 0.6, 0.2, 0.2], dtype=torch.float64)


def tiny_models(seed: int, size=(8, 8), channels: int = 3) -> SAGAN:
    """A float64 model on ``size`` images whose STMs start away from the identity.

    Identity transforms put every sample on the pixel lattice, where bilinear
    interpolation has kinks, so the localization heads get small random weights.
    """
    torch.manual_seed(seed)
    cfg = ModelConfig(channels=channels, size=tuple(size), code_dim=4, loc_width=4, loc_hidden=8, gen_width=4,
                      gen_res_blocks=1, critic_width=4, critic_depth=2, dt_hidden=8, siam_width=4, emb_dim=6)
    models = SAGAN(cfg).double()
    with torch.no_grad():
        for s in (models.s1, models.s2):
            s.loc.head.weight.normal_(0.0, 0.05)
            s.loc.head.bias.add_(torch.randn(s.loc.head.bias.shape, dtype=torch.float64) * 0.03)
    return models


def run_checks(seed: int = 0, tol: float = DEFAULT_TOL) -> List[CheckResult]:
    """Every finite-difference invariant on 2-item 8x8 batches."""
    from .data import make_batch
    from .training import TrainConfig, forward_cycle_x, generator_losses

    gen = torch.Generator().manual_seed(seed)
    n, c, h, w = 2, 3, 8, 8
    img = torch.rand(n, c, h, w, generator=gen, dtype=torch.float64) * 2 - 1
    mask = torch.ones(n, 1, h, w, dtype=torch.float64)
    p = _homography(gen, n)
    q = _homography(gen, n)
    results = []

    def add(name, err):
        results.append(CheckResult(name, float(err), tol))

    def warp_p(params):
        return geo.warp(img, geo.generate_grid(geo.Transform(geo.HOMOGRAPHY, params), (h, w)))

    def warp_img(values):
        return geo.warp(values, geo.generate_grid(geo.Transform(geo.HOMOGRAPHY, p), (h, w)))

    add("warp/params", input_rel_error(warp_p, [p], seed=seed))
    add("warp/image", input_rel_error(warp_img, [img], seed=seed))
    add("invert", input_rel_error(lambda a: geo.invert_params(geo.HOMOGRAPHY, a), [p], seed=seed))

    other = torch.rand(n, c, h, w, generator=gen, dtype=torch.float64) * 2 - 1
    valid = (torch.rand(n, 1, h, w, generator=gen) > 0.3).double()
    add("pcl", input_rel_error(lambda a, b: L.pcl(a, b, valid), [other, img], seed=seed))
    add("scl", input_rel_error(
        lambda a, b: L.scl(geo.Transform(geo.HOMOGRAPHY, a), geo.Transform(geo.HOMOGRAPHY, b)), [p, q], seed=seed))
    wts = L.LossWeights()
    add("cycle", input_rel_error(
        lambda a, b, x1: L.cycle_loss(L.scl(geo.Transform(geo.HOMOGRAPHY, a), geo.Transform(geo.HOMOGRAPHY, b)),
                                      L.pcl(x1, img), wts), [p, q, other], seed=seed))
    add("mask_identity", input_rel_error(lambda a, b: L.mask_identity_loss(a, b, valid), [other, img], seed=seed))

    e1 = torch.randn(n, 5, generator=gen, dtype=torch.float64) * 0.3
    e2 = torch.randn(n, 5, generator=gen, dtype=torch.float64) * 0.3
    add("siamese/positive", input_rel_error(lambda a, b: L.siamese_loss(1, a, b, 2.0), [e1, e2], seed=seed))
    add("siamese/negative", input_rel_error(lambda a, b: L.siamese_loss(0, a, b, 2.0), [e1, e2], seed=seed))

    s1, s2, s3 = (torch.randn(n, generator=gen, dtype=torch.float64) for _ in range(3))
    add("adversarial/critic", input_rel_error(lambda a, b, c_, d: L.critic_adv_loss(a, b, c_, d),
                                              [s1, s2, s3, s3.flip(0)], seed=seed))
    add("adversarial/generator", input_rel_error(lambda a, b: L.gen_adv_loss(a, b), [s1, s2], seed=seed))

    torch.manual_seed(seed)
    critic = ImageCritic(c, (h, w), width=4, depth=2).double()
    gp_gen_state = torch.Generator().manual_seed(seed + 1).get_state()

    def gp():
        g = torch.Generator()
        g.set_state(gp_gen_state)
        return L.gradient_penalty(critic, img, other, g)

    # a piecewise-linear critic has an input-gradient that is locally constant,
    # so the penalty is checked against the critic's own weights
    add("gradient_penalty", directional_rel_error(gp, list(critic.parameters()), seed=seed))

    models = tiny_models(seed, (h, w), c)
    bx = make_batch(img, mask)
    by = make_batch(other, mask)
    code = torch.randn(n, models.cfg.code_dim, generator=gen, dtype=torch.float64)
    cfg = TrainConfig(model=models.cfg)
    trainable = models.generator_parameters()

    def cycle_x():
        art = forward_cycle_x(models, bx, code)
        return L.cycle_loss(L.scl(art.t_xy, art.t_yx), L.pcl(art.x_prime, bx.values, art.valid), cfg.weights)

    add("forward_cycle_x", directional_rel_error(cycle_x, trainable, seed=seed))
    add("forward_cycle_x/image", input_rel_error(
        lambda v: (lambda a: L.cycle_loss(L.scl(a.t_xy, a.t_yx), L.pcl(a.x_prime, v, a.valid), cfg.weights))(
            forward_cycle_x(models, make_batch(v, mask), code)), [img], seed=seed))
    add("generator_total", directional_rel_error(lambda: generator_losses(models, bx, by, code, code, cfg)[0],
                                                 trainable, seed=seed))
    return results


def format_report(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}"
             for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
