"""Training objectives, each a pure function of its inputs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Union

import torch

from . import geometry as geo


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_pcl: float = 10.0
    lambda_cyc: float = 1.0
    lambda_idt: float = 5.0
    lambda_siam: float = 1.0
    margin: float = 2.0
    gp_weight: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise LossError(f"{f.name} must be finite and >= 0, got {v}")
        if self.margin <= 0:
            raise LossError("siamese margin must be > 0")


@dataclass
class LossReport:
    d_adv: float = 0.0
    g_adv: float = 0.0
    scl: float = 0.0
    pcl: float = 0.0
    cyc: float = 0.0
    idt: float = 0.0
    siam: float = 0.0
    gp: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)

    def all_finite(self) -> bool:
        return all(math.isfinite(v) for v in asdict(self).values())


def _nonempty(*batches):
    for b in batches:
        if b is None or b.numel() == 0:
            raise LossError("score batch is empty")


def critic_adv_loss(d1_fake: torch.Tensor, d1_real: torch.Tensor,
                    dt_fwd: Optional[torch.Tensor] = None, dt_inv: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Wasserstein critic objective (minimised by the critics).

    Fake images / forward transforms are pushed down, real images / inverted
    reverse transforms up.
    """
    _nonempty(d1_fake, d1_real)
    loss = d1_fake.mean() - d1_real.mean()
    if dt_fwd is not None or dt_inv is not None:
        _nonempty(dt_fwd, dt_inv)
        loss = loss + dt_fwd.mean() - dt_inv.mean()
    return loss


def gen_adv_loss(d1_fake: torch.Tensor, dt_fwd: Optional[torch.Tensor] = None) -> torch.Tensor:
    _nonempty(d1_fake)
    loss = -d1_fake.mean()
    if dt_fwd is not None:
        _nonempty(dt_fwd)
        loss = loss - dt_fwd.mean()
    return loss


def _safe_norm(sq: torch.Tensor) -> torch.Tensor:
    # sqrt with a zero (not infinite) gradient where sq == 0
    pos = sq > 0
    return torch.where(pos, torch.where(pos, sq, torch.ones_like(sq)).sqrt(), torch.zeros_like(sq))


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor, fake: torch.Tensor,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean of (||grad critic(x_hat)||_2 - 1)^2 over random interpolates x_hat."""
    if real.shape != fake.shape:
        raise LossError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ in shape")
    eps_shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    eps = torch.rand(eps_shape, generator=generator, dtype=real.dtype)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    score = critic(x_hat)
    grad = None
    if score.requires_grad:
        grad, = torch.autograd.grad(score.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norm = _safe_norm(grad.flatten(1).pow(2).sum(1))
    return ((norm - 1.0) ** 2).mean()


def pcl(x_recovered: torch.Tensor, x: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Pixel-level cycle loss: mean L1; with ``valid`` (N, 1, H, W) only those pixels count."""
    if x_recovered.shape != x.shape:
        raise LossError(f"shape mismatch {tuple(x_recovered.shape)} vs {tuple(x.shape)}")
    diff = (x_recovered - x).abs()
    if valid is None:
        return diff.mean()
    w = valid.to(diff.dtype).expand_as(diff)
    return (diff * w).sum() / w.sum().clamp_min(1.0)


def scl(t_xy: geo.Transform, t_yx: geo.Transform) -> torch.Tensor:
    """Spatial cycle loss: mean |invert(t_xy) - t_yx| over all parameters."""
    if t_xy.kind != t_yx.kind:
        raise LossError(f"kind mismatch: {t_xy.kind} vs {t_yx.kind}")
    if t_xy.kind == geo.TPS:
        raise geo.UnsupportedKindError("spatial cycle loss needs invertible (affine/homography) transforms")
    inv = geo.invert_params(t_xy.kind, t_xy.params)
    return (inv - t_yx.params.to(inv.dtype)).abs().mean()


def cycle_loss(scl_val, pcl_val, w: LossWeights):
    return scl_val + w.lambda_pcl * pcl_val


def mask_identity_loss(adapted: torch.Tensor, warped: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean L1 between adapted and warped images inside the (channel-broadcast) mask."""
    if adapted.shape != warped.shape:
        raise LossError(f"shape mismatch {tuple(adapted.shape)} vs {tuple(warped.shape)}")
    return (adapted * mask - warped * mask).abs().mean()


def siamese_loss(label: Union[int, torch.Tensor], e1: torch.Tensor, e2: torch.Tensor, m: float) -> torch.Tensor:
    """Contrastive loss averaged over pairs: label 1 -> d^2, label 0 -> max(0, m - d)^2."""
    if e1.shape != e2.shape:
        raise LossError(f"embedding shapes differ: {tuple(e1.shape)} vs {tuple(e2.shape)}")
    if m <= 0:
        raise LossError("margin must be > 0")
    if e1.dim() == 1:
        e1, e2 = e1.unsqueeze(0), e2.unsqueeze(0)
    sq = (e1 - e2).pow(2).sum(-1)
    d = _safe_norm(sq)
    label = torch.as_tensor(label, dtype=sq.dtype)
    loss = label * sq + (1 - label) * torch.clamp(m - d, min=0.0).pow(2)
    return loss.mean()


def total_gen_loss(parts: LossReport, w: LossWeights):
    """Generator/STM objective from already-computed parts (adv, cyc, idt, siam)."""
    return parts.g_adv + w.lambda_cyc * parts.cyc + w.lambda_idt * parts.idt + w.lambda_siam * parts.siam
