"""Learnable components: STMs, generators, critics and the Siamese embedder."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn

from . import geometry as geo

INJECT_INPUT = "input"
INJECT_FEATURES = "features"


class ChannelMismatchError(ValueError):
    pass


@dataclass
class SpatialCode:
    """Standard-normal code per item, ``values`` is (N, code_dim)."""
    values: torch.Tensor
    seed: Optional[int] = None

    @classmethod
    def sample(cls, n: int, code_dim: int, seed: Optional[int] = None,
               generator: Optional[torch.Generator] = None, dtype=torch.float32) -> "SpatialCode":
        if generator is None:
            generator = torch.Generator().manual_seed(0 if seed is None else seed)
        return cls(torch.randn(n, code_dim, generator=generator, dtype=dtype), seed)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


def _code_tensor(code, n: int, dtype) -> torch.Tensor:
    values = code.values if isinstance(code, SpatialCode) else code
    if values.dim() == 1:
        values = values.unsqueeze(0)
    if values.shape[0] == 1 and n > 1:
        values = values.expand(n, -1)
    return values.to(dtype)


def _conv_trunk(in_ch: int, width: int, n_down: int) -> nn.Sequential:
    layers = []
    ch = in_ch
    for i in range(n_down):
        out = width * min(2 ** i, 4)
        layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        ch = out
    return nn.Sequential(*layers)


def _trunk_out(in_ch: int, width: int, n_down: int, size) -> int:
    h, w = size
    return width * min(2 ** (n_down - 1), 4) * (h >> n_down) * (w >> n_down)


@dataclass
class ModelConfig:
    channels: int = 3
    size: Tuple[int, int] = (32, 32)
    kind: str = geo.HOMOGRAPHY
    code_dim: int = 8
    code_injection: str = INJECT_INPUT
    loc_width: int = 16
    loc_hidden: int = 64
    gen_width: int = 16
    gen_res_blocks: int = 2
    # 1x1 residual kernels keep the generator's receptive field small, so geometry must go through the STM
    gen_res_kernel: int = 1
    critic_width: int = 16
    critic_depth: int = 3
    dt_hidden: int = 64
    siam_width: int = 16
    emb_dim: int = 32

    def to_dict(self) -> dict:
        return asdict(self)


def param_bounds(kind: str) -> torch.Tensor:
    """Largest deviation from the identity each predicted parameter may take."""
    # linear entries within 0.35 of the identity keep |det| >= 0.65^2 - 0.35^2 = 0.3
    lin, shift, persp = 0.35, 0.5, 0.2
    if kind == geo.AFFINE:
        return torch.tensor([lin, lin, shift, lin, lin, shift])
    if kind == geo.HOMOGRAPHY:
        return torch.tensor([lin, lin, shift, lin, lin, shift, persp, persp])
    return torch.full((geo.param_count(kind),), 0.25)


class LocalizationNet(nn.Module):
    """Image + mask (+ spatial code) -> transform parameters.

    The head starts at zero weight with the identity as bias, so a fresh
    network predicts the identity for every input and code.
    """

    def __init__(self, channels: int, size, kind: str = geo.HOMOGRAPHY, code_dim: int = 8,
                 code_injection: str = INJECT_INPUT, width: int = 16, hidden: int = 64, n_down: int = 3):
        super().__init__()
        if code_injection not in (INJECT_INPUT, INJECT_FEATURES):
            raise ValueError(f"unknown code injection {code_injection!r}")
        self.kind = kind
        self.code_dim = code_dim
        self.code_injection = code_injection
        self.in_channels = channels + 1
        trunk_in = self.in_channels + (code_dim if code_injection == INJECT_INPUT else 0)
        self.trunk = _conv_trunk(trunk_in, width, n_down)
        feat = _trunk_out(trunk_in, width, n_down, size)
        fc_in = feat + (code_dim if code_injection == INJECT_FEATURES else 0)
        self.fc = nn.Sequential(nn.Linear(fc_in, hidden), nn.LeakyReLU(0.2))
        self.head = nn.Linear(hidden, geo.param_count(kind))
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias.copy_(geo.identity_params(kind))
        self.register_buffer("identity", geo.identity_params(kind))
        self.register_buffer("bound", param_bounds(kind))

    def forward(self, img_with_mask: torch.Tensor, code) -> torch.Tensor:
        n, c, h, w = img_with_mask.shape
        if c != self.in_channels:
            raise ChannelMismatchError(f"expected {self.in_channels} channels (image + mask), got {c}")
        z = _code_tensor(code, n, img_with_mask.dtype)
        if z.shape[-1] != self.code_dim:
            raise ChannelMismatchError(f"code length {z.shape[-1]} != code_dim {self.code_dim}")
        if self.code_injection == INJECT_INPUT:
            img_with_mask = torch.cat([img_with_mask, z[:, :, None, None].expand(n, self.code_dim, h, w)], dim=1)
            feats = self.trunk(img_with_mask).flatten(1)
        else:
            feats = torch.cat([self.trunk(img_with_mask).flatten(1), z], dim=1)
        raw = self.head(self.fc(feats))
        ident = self.identity.to(raw.dtype)
        bound = self.bound.to(raw.dtype)
        # keep predictions in a well-conditioned box around the identity
        return ident + bound * torch.tanh((raw - ident) / bound)


def localize(net: LocalizationNet, img_with_mask: torch.Tensor, code) -> torch.Tensor:
    return net(img_with_mask, code)


class STM(nn.Module):
    """Spatial transformer module: localization network + grid generation + warp."""

    def __init__(self, loc: LocalizationNet, fill: float = 0.0):
        super().__init__()
        self.loc = loc
        self.fill = fill

    @property
    def kind(self) -> str:
        return self.loc.kind

    def warp(self, values: torch.Tensor, mask: torch.Tensor, params: torch.Tensor):
        grid = geo.generate_grid(geo.Transform(self.kind, params), tuple(values.shape[2:]))
        warped = geo.warp(values, grid, fill=self.fill)
        warped_mask = (geo.warp(mask, grid, fill=0.0) >= 0.5).to(mask.dtype)
        return warped, warped_mask

    def forward(self, values: torch.Tensor, mask: torch.Tensor, code):
        params = self.loc(torch.cat([values, mask], dim=1), code)
        warped, warped_mask = self.warp(values, mask, params)
        return warped, warped_mask, params


def stm_forward(s: STM, values: torch.Tensor, mask: torch.Tensor, code):
    """Returns (warped image, warped mask, Transform)."""
    warped, warped_mask, params = s(values, mask, code)
    return warped, warped_mask, geo.Transform(s.kind, params)


class ResBlock(nn.Module):
    def __init__(self, ch: int, kernel: int = 1):
        super().__init__()
        pad = kernel // 2
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, kernel, padding=pad), nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch, kernel, padding=pad),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder -> residual blocks -> decoder; image + mask in, image out in [-1, 1]."""

    def __init__(self, channels: int, width: int = 16, res_blocks: int = 2, res_kernel: int = 1):
        super().__init__()
        self.channels = channels
        self.encoder = nn.Sequential(nn.Conv2d(channels + 1, width, 3, padding=1), nn.LeakyReLU(0.2))
        self.blocks = nn.Sequential(*[ResBlock(width, res_kernel) for _ in range(res_blocks)])
        self.decoder = nn.Conv2d(width, channels, 3, padding=1)

    def forward(self, values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if values.shape[1] != self.channels:
            raise ChannelMismatchError(f"expected {self.channels} image channels, got {values.shape[1]}")
        return torch.tanh(self.decoder(self.blocks(self.encoder(torch.cat([values, mask], dim=1)))))


def generate(g: Generator, values: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    if mask is None:
        mask = values.new_ones(values.shape[0], 1, *values.shape[2:])
    return g(values, mask)


class ImageCritic(nn.Module):
    """Wasserstein critic: one unbounded score per image."""

    def __init__(self, channels: int, size, width: int = 16, depth: int = 3):
        super().__init__()
        self.trunk = _conv_trunk(channels, width, depth)
        self.out = nn.Linear(_trunk_out(channels, width, depth, size), 1)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        return self.out(self.trunk(values).flatten(1)).squeeze(1)


def criticize_image(d: ImageCritic, values: torch.Tensor) -> torch.Tensor:
    return d(values)


class TransformCritic(nn.Module):
    """Scores gauge-normalized parameter vectors (centred on the identity)."""

    def __init__(self, kind: str = geo.HOMOGRAPHY, hidden: int = 64):
        super().__init__()
        self.kind = kind
        self.n_params = geo.param_count(kind)
        self.register_buffer("identity", geo.identity_params(kind))
        self.net = nn.Sequential(
            nn.Linear(self.n_params, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )

    def forward(self, params: torch.Tensor) -> torch.Tensor:
        if params.shape[-1] != self.n_params:
            raise ChannelMismatchError(f"expected {self.n_params} transform params, got {params.shape[-1]}")
        squeeze = params.dim() == 1
        if squeeze:
            params = params.unsqueeze(0)
        out = self.net(params - self.identity.to(params.dtype)).squeeze(1)
        return out[0] if squeeze else out


def criticize_transform(dt: TransformCritic, params: torch.Tensor) -> torch.Tensor:
    return dt(params)


class SiameseNet(nn.Module):
    def __init__(self, channels: int, size, width: int = 16, emb_dim: int = 32, depth: int = 3):
        super().__init__()
        self.emb_dim = emb_dim
        self.trunk = _conv_trunk(channels, width, depth)
        self.fc = nn.Linear(_trunk_out(channels, width, depth, size), emb_dim)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        return self.fc(self.trunk(values).flatten(1))


def embed(s: SiameseNet, values: torch.Tensor) -> torch.Tensor:
    return s(values)


class SAGAN(nn.Module):
    """All networks of the model, grouped for optimisation and checkpointing."""

    GENERATOR_PARTS = ("s1", "s2", "g1", "g2", "siam")
    CRITIC_PARTS = ("d1", "d2", "dt")

    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        c, size = cfg.channels, cfg.size

        def loc():
            return LocalizationNet(c, size, cfg.kind, cfg.code_dim, cfg.code_injection, cfg.loc_width, cfg.loc_hidden)

        self.s1 = STM(loc())
        self.s2 = STM(loc())
        self.g1 = Generator(c, cfg.gen_width, cfg.gen_res_blocks, cfg.gen_res_kernel)
        self.g2 = Generator(c, cfg.gen_width, cfg.gen_res_blocks, cfg.gen_res_kernel)
        self.d1 = ImageCritic(c, size, cfg.critic_width, cfg.critic_depth)
        self.d2 = ImageCritic(c, size, cfg.critic_width, cfg.critic_depth)
        self.dt = TransformCritic(cfg.kind, cfg.dt_hidden) if cfg.kind != geo.TPS else None
        self.siam = SiameseNet(c, size, cfg.siam_width, cfg.emb_dim)

    def parts(self, names):
        return [getattr(self, n) for n in names if getattr(self, n) is not None]

    def generator_parameters(self):
        return [p for m in self.parts(self.GENERATOR_PARTS) for p in m.parameters()]

    def critic_parameters(self):
        return [p for m in self.parts(self.CRITIC_PARTS) for p in m.parameters()]
