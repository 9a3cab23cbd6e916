"""Cyclic adversarial training of the spatial + pixel adaptation model."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from . import geometry as geo
from . import losses as L
from .data import EpochSampler, ImageBatch, save_image, to_uint8
from .networks import SAGAN, STM, Generator, ModelConfig, SpatialCode

log = logging.getLogger(__name__)

LOG_FIELDS = [f.name for f in fields(L.LossReport)]


class NumericalAbort(RuntimeError):
    def __init__(self, message: str, snapshot: Optional[Path] = None):
        super().__init__(message if snapshot is None else f"{message} (snapshot: {snapshot})")
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    critic_steps_per_gen: int = 5
    lr_critic: float = 1e-4
    lr_gen: float = 2e-4
    betas: tuple = (0.5, 0.9)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    M: int = 10
    seed: int = 0
    use_dt: bool = True
    # False: plain entangled cycle loss through S2 (the "WD" ablation)
    disentangled: bool = True
    # False: STMs frozen at the identity (the "WS" ablation)
    spatial: bool = True
    lipschitz: str = "gp"
    clip_value: float = 0.01
    # restrict the pixel cycle loss to pixels that survive the warp round trip
    pcl_valid_only: bool = True
    # learning rates decay linearly to zero from this fraction of ``steps`` onward (1.0 = constant)
    lr_decay_from: float = 0.5
    eval_every: int = 500
    checkpoint_every: int = 1000
    grid_every: int = 1000

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**{**self.model, "size": tuple(self.model["size"])})
        self.betas = tuple(self.betas)
        for name in ("steps", "batch_size", "critic_steps_per_gen", "M"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr_critic <= 0 or self.lr_gen <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.lr_decay_from <= 1.0:
            raise ValueError("lr_decay_from must lie in [0, 1]")
        if self.lipschitz not in ("gp", "clip"):
            raise ValueError("lipschitz must be 'gp' or 'clip'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["model"]["size"] = list(self.model.size)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CycleArtifacts:
    x_s: torch.Tensor
    m_s: torch.Tensor
    t_xy: geo.Transform
    x_adp: torch.Tensor
    t_yx: geo.Transform        # path 1: S_b's estimate of the way back (SCL only)
    x_back: torch.Tensor
    x_prime: torch.Tensor      # path 2: spatially exact recovery, pixel-adapted back (PCL only)
    valid: Optional[torch.Tensor]


def forward_cycle(s_a: STM, g_a: Generator, s_b: STM, g_b: Generator, values: torch.Tensor,
                  mask: torch.Tensor, code, disentangled: bool = True) -> CycleArtifacts:
    kind = s_a.kind
    x_s, m_s, p_xy = s_a(values, mask, code)
    x_adp = g_a(x_s, m_s)
    p_yx = s_b.loc(torch.cat([x_adp, m_s], dim=1), code)
    if disentangled:
        p_inv = geo.invert_params(kind, p_xy)
        grid = geo.generate_grid(geo.Transform(kind, p_inv), tuple(values.shape[2:]))
        x_back = geo.warp(x_adp, grid, fill=s_a.fill)
        m_back = (geo.warp(m_s, grid, fill=0.0) >= 0.5).to(m_s.dtype)
        valid = grid.valid_mask.unsqueeze(1)
    else:
        x_back, m_back = s_b.warp(x_adp, m_s, p_yx)
        valid = None
    x_prime = g_b(x_back, m_back)
    return CycleArtifacts(x_s, m_s, geo.Transform(kind, p_xy), x_adp, geo.Transform(kind, p_yx),
                          x_back, x_prime, valid)


def forward_cycle_x(models: SAGAN, x: ImageBatch, code, disentangled: bool = True) -> CycleArtifacts:
    return forward_cycle(models.s1, models.g1, models.s2, models.g2, x.values, x.mask, code, disentangled)


def forward_cycle_y(models: SAGAN, y: ImageBatch, code, disentangled: bool = True) -> CycleArtifacts:
    return forward_cycle(models.s2, models.g2, models.s1, models.g1, y.values, y.mask, code, disentangled)


def _direction_parts(art: CycleArtifacts, src: torch.Tensor, cfg: TrainConfig, use_valid: bool):
    w = cfg.weights
    if cfg.disentangled:
        scl = L.scl(art.t_xy, art.t_yx)
        pcl = L.pcl(art.x_prime, src, art.valid if use_valid else None)
    else:
        # entangled cycle: one reconstruction error, no separate spatial term
        scl = src.new_zeros(())
        pcl = L.pcl(art.x_prime, src)
    return scl, pcl, L.cycle_loss(scl, pcl, w), L.mask_identity_loss(art.x_adp, art.x_s, art.m_s)


def _siamese(models: SAGAN, anchor: torch.Tensor, pos: Sequence[torch.Tensor], neg: Sequence[torch.Tensor], m: float):
    e = models.siam
    ea = e(anchor)
    terms = [L.siamese_loss(1, ea, e(p), m) for p in pos] + [L.siamese_loss(0, ea, e(q), m) for q in neg]
    return torch.stack(terms).mean()


def generator_losses(models: SAGAN, bx: ImageBatch, by: ImageBatch, code_x, code_y, cfg: TrainConfig):
    """Both mirrored directions; returns (total, LossReport of tensors)."""
    w = cfg.weights
    ax = forward_cycle_x(models, bx, code_x, cfg.disentangled)
    ay = forward_cycle_y(models, by, code_y, cfg.disentangled)
    use_dt = cfg.use_dt and models.dt is not None

    # X -> Y: fool D1, and D_T on the forward transform
    adv_x = L.gen_adv_loss(models.d1(ax.x_adp), models.dt(ax.t_xy.params) if use_dt else None)
    # Y -> X: fool D2; S2 pulls its inverse towards the forward-transform side of D_T
    adv_y = -models.d2(ay.x_adp).mean()
    if use_dt:
        adv_y = adv_y + models.dt(geo.invert_params(ay.t_xy.kind, ay.t_xy.params)).mean()

    scl_x, pcl_x, cyc_x, idt_x = _direction_parts(ax, bx.values, cfg, cfg.pcl_valid_only)
    scl_y, pcl_y, cyc_y, idt_y = _direction_parts(ay, by.values, cfg, cfg.pcl_valid_only)

    m = w.margin
    siam_x = _siamese(models, bx.values, [ax.x_s, ax.x_adp], [ay.x_s, by.values], m)
    siam_y = _siamese(models, by.values, [ay.x_s, ay.x_adp], [ax.x_s, bx.values], m)

    part_x = L.LossReport(g_adv=adv_x, scl=scl_x, pcl=pcl_x, cyc=cyc_x, idt=idt_x, siam=siam_x)
    part_y = L.LossReport(g_adv=adv_y, scl=scl_y, pcl=pcl_y, cyc=cyc_y, idt=idt_y, siam=siam_y)
    total = L.total_gen_loss(part_x, w) + L.total_gen_loss(part_y, w)
    report = L.LossReport(
        g_adv=adv_x + adv_y, scl=scl_x + scl_y, pcl=pcl_x + pcl_y, cyc=cyc_x + cyc_y,
        idt=idt_x + idt_y, siam=siam_x + siam_y, total_g=total,
    )
    return total, report, ax, ay


def critic_losses(models: SAGAN, bx: ImageBatch, by: ImageBatch, code_x, code_y, cfg: TrainConfig,
                  generator: Optional[torch.Generator] = None):
    """Returns (total, d_adv, gp) for D1, D2 and D_T."""
    with torch.no_grad():
        x_s, m_s, p_xy = models.s1(bx.values, bx.mask, code_x)
        x_adp = models.g1(x_s, m_s)
        y_s, my_s, p_yx = models.s2(by.values, by.mask, code_y)
        y_adp = models.g2(y_s, my_s)
    use_dt = cfg.use_dt and models.dt is not None
    kind = models.s1.kind
    if use_dt:
        inv_yx = geo.invert_params(kind, p_yx)
        d_adv = L.critic_adv_loss(models.d1(x_adp), models.d1(by.values), models.dt(p_xy), models.dt(inv_yx))
    else:
        d_adv = L.critic_adv_loss(models.d1(x_adp), models.d1(by.values))
    d_adv = d_adv + L.critic_adv_loss(models.d2(y_adp), models.d2(bx.values))
    gp = x_adp.new_zeros(())
    if cfg.lipschitz == "gp":
        gp = L.gradient_penalty(models.d1, by.values, x_adp, generator) \
            + L.gradient_penalty(models.d2, bx.values, y_adp, generator)
        if use_dt:
            gp = gp + L.gradient_penalty(models.dt, inv_yx, p_xy, generator)
    return d_adv + cfg.weights.gp_weight * gp, d_adv, gp


@dataclass
class Optimizers:
    gen: torch.optim.Optimizer
    critic: torch.optim.Optimizer

    @classmethod
    def create(cls, models: SAGAN, cfg: TrainConfig) -> "Optimizers":
        gen_params = [p for p in models.generator_parameters()]
        if not cfg.spatial:
            frozen = {id(p) for p in list(models.s1.parameters()) + list(models.s2.parameters())}
            gen_params = [p for p in gen_params if id(p) not in frozen]
        return cls(
            torch.optim.Adam(gen_params, lr=cfg.lr_gen, betas=cfg.betas),
            torch.optim.Adam(models.critic_parameters(), lr=cfg.lr_critic, betas=cfg.betas),
        )


@dataclass
class Counters:
    critic_updates: int = 0
    gen_updates: int = 0


def _as_list(b, n: int) -> List[ImageBatch]:
    if isinstance(b, ImageBatch):
        return [b] * n
    b = list(b)
    if len(b) != n:
        raise ValueError(f"expected {n} batches, got {len(b)}")
    return b


def train_step(models: SAGAN, optimizers: Optimizers, batch_x, batch_y, cfg: TrainConfig,
               generator: torch.Generator, counters: Optional[Counters] = None) -> L.LossReport:
    """``critic_steps_per_gen`` critic updates, then one generator update.

    ``batch_x`` / ``batch_y`` are either one batch reused for every update or a
    sequence of ``critic_steps_per_gen + 1`` batches (critic batches first).
    """
    k = cfg.critic_steps_per_gen
    xs, ys = _as_list(batch_x, k + 1), _as_list(batch_y, k + 1)
    if any(len(b) == 0 for b in xs + ys):
        raise ValueError("empty batch")
    counters = counters if counters is not None else Counters()
    code_dim = models.cfg.code_dim
    models.train()

    for i in range(k):
        bx, by = xs[i], ys[i]
        cx = SpatialCode.sample(len(bx), code_dim, generator=generator).values
        cy = SpatialCode.sample(len(by), code_dim, generator=generator).values
        total_d, d_adv, gp = critic_losses(models, bx, by, cx, cy, cfg, generator)
        optimizers.critic.zero_grad(set_to_none=True)
        total_d.backward()
        optimizers.critic.step()
        if cfg.lipschitz == "clip":
            with torch.no_grad():
                for p in models.critic_parameters():
                    p.clamp_(-cfg.clip_value, cfg.clip_value)
        counters.critic_updates += 1

    bx, by = xs[k], ys[k]
    cx = SpatialCode.sample(len(bx), code_dim, generator=generator).values
    cy = SpatialCode.sample(len(by), code_dim, generator=generator).values
    total_g, parts, _, _ = generator_losses(models, bx, by, cx, cy, cfg)
    optimizers.gen.zero_grad(set_to_none=True)
    # critics only receive gradients in their own update
    for p in models.critic_parameters():
        p.requires_grad_(False)
    try:
        total_g.backward()
    finally:
        for p in models.critic_parameters():
            p.requires_grad_(True)
    optimizers.gen.step()
    counters.gen_updates += 1

    report = L.LossReport(**{name: float(getattr(parts, name).detach()) for name in LOG_FIELDS
                             if name not in ("d_adv", "gp", "total_d")},
                          d_adv=float(d_adv.detach()), gp=float(gp.detach()), total_d=float(total_d.detach()))
    if not report.all_finite():
        raise NumericalAbort(f"non-finite loss: {report.as_dict()}")
    return report


# --- adaptation -------------------------------------------------------------

@torch.no_grad()
def adapt_with_params(models: SAGAN, x: ImageBatch, M: int, seed: int, pixel: bool = True):
    """M adapted versions of ``x`` (one fresh code per item per mode) and their transforms."""
    if M < 1:
        raise ValueError("M must be >= 1")
    models.eval()
    g = torch.Generator().manual_seed(seed)
    outs, params = [], []
    for _ in range(M):
        code = SpatialCode.sample(len(x), models.cfg.code_dim, generator=g, dtype=x.values.dtype)
        x_s, m_s, p = models.s1(x.values, x.mask, code)
        adapted = models.g1(x_s, m_s) if pixel else x_s
        outs.append(ImageBatch(adapted, m_s, x.identity, x.camera))
        params.append(p)
    return outs, params


def adapt(models: SAGAN, x: ImageBatch, M: int, seed: int, pixel: bool = True) -> List[ImageBatch]:
    return adapt_with_params(models, x, M, seed, pixel)[0]


# --- full training loop -------------------------------------------------------

def _write_grid(models: SAGAN, x: ImageBatch, y: ImageBatch, M: int, path: Path, rows: int = 4, seed: int = 0):
    xb = x.index(slice(0, rows))
    outs, _ = adapt_with_params(models, xb, M, seed)
    with torch.no_grad():
        code = SpatialCode.sample(len(xb), models.cfg.code_dim, seed=seed).values
        warped, _, _ = models.s1(xb.values, xb.mask, code)
    lines = []
    for r in range(len(xb)):
        cells = [xb.values[r], warped[r]] + [o.values[r] for o in outs] + [y.values[r % len(y)]]
        lines.append(np.concatenate([to_uint8(c) for c in cells], axis=1))
    from PIL import Image
    arr = np.concatenate(lines, axis=0)
    Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(path)


class Trainer:
    """Owns models, optimizers, samplers and RNG state; resumable bit-exactly."""

    def __init__(self, cfg: TrainConfig, x: ImageBatch, y: ImageBatch):
        self.cfg = cfg
        self.x, self.y = x, y
        torch.manual_seed(cfg.seed)
        self.models = SAGAN(cfg.model)
        self.optimizers = Optimizers.create(self.models, cfg)
        self.generator = torch.Generator().manual_seed(cfg.seed + 7919)
        self.sampler_x = EpochSampler(x, cfg.batch_size, cfg.seed * 2 + 1)
        self.sampler_y = EpochSampler(y, cfg.batch_size, cfg.seed * 2 + 2)
        self.counters = Counters()
        self.step = 0

    def lr_scale(self) -> float:
        start = self.cfg.lr_decay_from * self.cfg.steps
        if self.step < start or self.cfg.lr_decay_from >= 1.0:
            return 1.0
        return max(0.0, (self.cfg.steps - self.step) / (self.cfg.steps - start))

    def one_step(self) -> L.LossReport:
        k = self.cfg.critic_steps_per_gen
        scale = self.lr_scale()
        for opt, lr in ((self.optimizers.gen, self.cfg.lr_gen), (self.optimizers.critic, self.cfg.lr_critic)):
            for group in opt.param_groups:
                group["lr"] = lr * scale
        xs = [self.sampler_x.next() for _ in range(k + 1)]
        ys = [self.sampler_y.next() for _ in range(k + 1)]
        report = train_step(self.models, self.optimizers, xs, ys, self.cfg, self.generator, self.counters)
        self.step += 1
        return report

    def state_dict(self) -> dict:
        return {
            "models": self.models.state_dict(),
            "opt_gen": self.optimizers.gen.state_dict(),
            "opt_critic": self.optimizers.critic.state_dict(),
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "step": self.step,
            "counters": asdict(self.counters),
            "rng": self.generator.get_state(),
            "sampler_x": self.sampler_x.state_dict(),
            "sampler_y": self.sampler_y.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        if state["config_hash"] != self.cfg.hash():
            raise ValueError("checkpoint was written with a different configuration")
        self.models.load_state_dict(state["models"])
        self.optimizers.gen.load_state_dict(state["opt_gen"])
        self.optimizers.critic.load_state_dict(state["opt_critic"])
        self.step = int(state["step"])
        self.counters = Counters(**state["counters"])
        self.generator.set_state(state["rng"])
        self.sampler_x.load_state_dict(state["sampler_x"])
        self.sampler_y.load_state_dict(state["sampler_y"])

    def save(self, path) -> Path:
        path = Path(path)
        torch.save(self.state_dict(), path)
        return path


class CheckpointError(IOError):
    pass


def load_checkpoint(path) -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for corrupt archives
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict) or "models" not in state or "config" not in state:
        raise CheckpointError(f"{path} is not a training checkpoint")
    return state


def models_from_checkpoint(path) -> (SAGAN, TrainConfig):
    state = load_checkpoint(path)
    cfg = TrainConfig(**state["config"])
    models = SAGAN(cfg.model)
    try:
        models.load_state_dict(state["models"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match its configuration: {exc}") from exc
    models.eval()
    return models, cfg


EvalFn = Callable[[SAGAN], Dict[str, float]]


def train(cfg: TrainConfig, x: ImageBatch, y: ImageBatch, run_dir=None, eval_fn: Optional[EvalFn] = None,
          resume: Optional[Union[str, Path]] = None, steps: Optional[int] = None) -> Trainer:
    """Run training, logging every step's LossReport (plus periodic eval) to CSV.

    With ``run_dir`` set, writes ``metrics.csv``, ``checkpoint_<step>.pt`` and
    ``step_<n>_grid.png``. ``steps`` overrides ``cfg.steps`` as the stop point.
    """
    trainer = Trainer(cfg, x, y)
    run_dir = Path(run_dir) if run_dir is not None else None
    if resume is not None:
        trainer.load_state_dict(load_checkpoint(resume))
    stop = cfg.steps if steps is None else steps
    eval_keys: List[str] = []
    writer = fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    rows: List[dict] = []
    try:
        while trainer.step < stop:
            try:
                report = trainer.one_step()
            except NumericalAbort as exc:
                snap = trainer.save(run_dir / f"abort_step_{trainer.step}.pt") if run_dir else None
                raise NumericalAbort(str(exc), snap) from None
            row = {"step": trainer.step, **report.as_dict()}
            if eval_fn is not None and (trainer.step % cfg.eval_every == 0 or trainer.step == stop):
                metrics = eval_fn(trainer.models)
                trainer.models.train()
                row.update(metrics)
                for key in metrics:
                    if key not in eval_keys:
                        eval_keys.append(key)
            rows.append(row)
            if run_dir is not None:
                if fh is None:
                    metrics_path = run_dir / "metrics.csv"
                    exists = metrics_path.exists() and resume is not None
                    fh = open(metrics_path, "a" if exists else "w", newline="")
                    writer = csv.writer(fh, lineterminator="\n")
                    if not exists:
                        writer.writerow(["step"] + LOG_FIELDS + ["eval"])
                extra = json.dumps({k: row[k] for k in eval_keys if k in row}, sort_keys=True) if eval_keys else ""
                writer.writerow([row["step"]] + [repr(row[f]) for f in LOG_FIELDS] + [extra])
                fh.flush()
                if trainer.step % cfg.checkpoint_every == 0 or trainer.step == stop:
                    trainer.save(run_dir / f"checkpoint_{trainer.step}.pt")
                if trainer.step % cfg.grid_every == 0 or trainer.step == stop:
                    _write_grid(trainer.models, x, y, min(cfg.M, 4), run_dir / f"step_{trainer.step}_grid.png")
    finally:
        if fh is not None:
            fh.close()
    trainer.log = rows
    return trainer


def read_metrics(path) -> List[dict]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {"step": int(rec["step"])}
            row.update({f: float(rec[f]) for f in LOG_FIELDS})
            if rec.get("eval"):
                row.update(json.loads(rec["eval"]))
            out.append(row)
    return out
