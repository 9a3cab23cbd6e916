"""Differentiable 2-D transforms, sampling grids and bilinear warping.

All coordinates live in the normalized frame [-1, 1]^2 with pixel centres at
the extremes (``align_corners=True`` in torch terms): pixel ``j`` of a row of
width ``W`` sits at ``u = -1 + 2 j / (W - 1)``.

A transform maps *output* coordinates to *source* coordinates (backward
warping): the output pixel at ``p`` pulls its value from ``T(p)`` in the
source image.

Parameter layouts::

    affine      [a, b, c, d, e, f]            -> [[a, b, c], [d, e, f], [0, 0, 1]]
    homography  [h0, h1, h2, h3, h4, h5, h6, h7] -> [[h0, h1, h2], [h3, h4, h5], [h6, h7, 1]]
    tps         2K offsets (dx_k, dy_k) of a fixed sqrt(K) x sqrt(K) control grid

Every function accepts either a single parameter vector ``(P,)`` or a batch
``(N, P)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch

AFFINE = "affine"
HOMOGRAPHY = "homography"
TPS = "tps"
KINDS = (AFFINE, HOMOGRAPHY, TPS)

DET_TOL = 1e-8
TPS_GRID = 4

ParamsLike = Union[torch.Tensor, Sequence[float]]


class GeometryError(ValueError):
    pass


class SingularTransformError(GeometryError):
    pass


class UnsupportedKindError(GeometryError):
    pass


def param_count(kind: str, tps_grid: int = TPS_GRID) -> int:
    if kind == AFFINE:
        return 6
    if kind == HOMOGRAPHY:
        return 8
    if kind == TPS:
        return 2 * tps_grid * tps_grid
    raise UnsupportedKindError(f"unknown transform kind {kind!r}")


def identity_params(kind: str, dtype=torch.float32, tps_grid: int = TPS_GRID) -> torch.Tensor:
    if kind == AFFINE:
        return torch.tensor([1.0, 0, 0, 0, 1, 0], dtype=dtype)
    if kind == HOMOGRAPHY:
        return torch.tensor([1.0, 0, 0, 0, 1, 0, 0, 0], dtype=dtype)
    return torch.zeros(param_count(kind, tps_grid), dtype=dtype)


def params_to_matrix(kind: str, params: torch.Tensor) -> torch.Tensor:
    """(..., P) -> (..., 3, 3) for affine / homography params."""
    if kind == AFFINE:
        bottom = params.new_tensor([0.0, 0.0, 1.0]).expand(*params.shape[:-1], 3)
        flat = torch.cat([params, bottom], dim=-1)
    elif kind == HOMOGRAPHY:
        one = params.new_ones(*params.shape[:-1], 1)
        flat = torch.cat([params, one], dim=-1)
    else:
        raise UnsupportedKindError(f"{kind!r} has no matrix form")
    return flat.reshape(*params.shape[:-1], 3, 3)


def matrix_to_params(kind: str, mat: torch.Tensor) -> torch.Tensor:
    """(..., 3, 3) -> (..., P); homographies are re-gauged so that H[2, 2] == 1."""
    if kind == AFFINE:
        mat = mat / mat[..., 2:3, 2:3]
        return mat[..., :2, :].reshape(*mat.shape[:-2], 6)
    if kind == HOMOGRAPHY:
        mat = mat / mat[..., 2:3, 2:3]
        return mat.reshape(*mat.shape[:-2], 9)[..., :8]
    raise UnsupportedKindError(f"{kind!r} has no matrix form")


def invert_params(kind: str, params: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable inverse in parameter space."""
    return matrix_to_params(kind, torch.linalg.inv(params_to_matrix(kind, params)))


def compose_params(kind: str, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Parameters of ``a o b`` (apply ``b`` first, then ``a``)."""
    return matrix_to_params(kind, params_to_matrix(kind, a) @ params_to_matrix(kind, b))


def _check_nonsingular(kind: str, params: torch.Tensor) -> None:
    mat = params_to_matrix(kind, params.detach().double())
    if kind == AFFINE:
        det = torch.linalg.det(mat[..., :2, :2])
    else:
        det = torch.linalg.det(mat)
    if bool((det.abs() < DET_TOL).any()):
        raise SingularTransformError(f"{kind} transform is singular (|det| < {DET_TOL:g})")


@dataclass(frozen=True)
class Transform:
    kind: str
    params: torch.Tensor
    source_size: Optional[Tuple[int, int]] = None

    @property
    def batched(self) -> bool:
        return self.params.dim() == 2

    def matrix(self) -> torch.Tensor:
        return params_to_matrix(self.kind, self.params)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Map normalized points ``(..., 2)``.

        For a batched transform ``points`` must be ``(N, ..., 2)``.
        """
        if self.kind == TPS:
            return _tps_apply(self.params, points)
        return _projective_apply(self.matrix(), points)


def make_transform(kind: str, params: ParamsLike, source_size: Optional[Tuple[int, int]] = None,
                   check: bool = True) -> Transform:
    if kind not in KINDS:
        raise UnsupportedKindError(f"unknown transform kind {kind!r}")
    if not isinstance(params, torch.Tensor):
        params = torch.as_tensor(params, dtype=torch.float64)
    if params.dim() not in (1, 2):
        raise GeometryError(f"params must be 1-D or 2-D, got shape {tuple(params.shape)}")
    n = param_count(kind) if kind != TPS else params.shape[-1]
    if kind == TPS:
        side = math.isqrt(n // 2)
        if n % 2 or side * side * 2 != n or side < 2:
            raise GeometryError(f"tps needs 2*K params for a square K-point grid, got {n}")
    elif params.shape[-1] != n:
        raise GeometryError(f"{kind} expects {n} params, got {params.shape[-1]}")
    if check and kind != TPS:
        _check_nonsingular(kind, params)
    return Transform(kind, params, source_size)


def translation(du: float, dv: float, kind: str = AFFINE, dtype=torch.float64) -> Transform:
    p = identity_params(kind, dtype=dtype)
    p[2], p[5] = du, dv
    return make_transform(kind, p)


def rotation(degrees: float, kind: str = HOMOGRAPHY, dtype=torch.float64) -> Transform:
    r = math.radians(degrees)
    c, s = math.cos(r), math.sin(r)
    p = identity_params(kind, dtype=dtype)
    p[0], p[1], p[3], p[4] = c, -s, s, c
    return make_transform(kind, p)


def _require_matrix_kind(*ts: Transform) -> None:
    for t in ts:
        if t.kind == TPS:
            raise UnsupportedKindError("tps transforms are forward-only")


def invert(t: Transform) -> Transform:
    _require_matrix_kind(t)
    return Transform(t.kind, invert_params(t.kind, t.params), t.source_size)


def compose(a: Transform, b: Transform) -> Transform:
    """Transform equivalent to applying ``b`` and then ``a``."""
    if a.kind != b.kind:
        raise GeometryError(f"cannot compose {a.kind} with {b.kind}")
    _require_matrix_kind(a, b)
    return Transform(a.kind, compose_params(a.kind, a.params, b.params), a.source_size or b.source_size)


def _projective_apply(mat: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    # mat: (3, 3) or (N, 3, 3); points: (..., 2) or (N, ..., 2)
    if mat.dim() == 3:
        extra = points.dim() - 2
        mat = mat.reshape(mat.shape[0], *([1] * extra), 3, 3)
    u, v = points[..., 0], points[..., 1]
    x = mat[..., 0, 0] * u + mat[..., 0, 1] * v + mat[..., 0, 2]
    y = mat[..., 1, 0] * u + mat[..., 1, 1] * v + mat[..., 1, 2]
    w = mat[..., 2, 0] * u + mat[..., 2, 1] * v + mat[..., 2, 2]
    return torch.stack([x / w, y / w], dim=-1)


# --- thin plate spline ------------------------------------------------------

def tps_control_points(side: int, dtype=torch.float64) -> torch.Tensor:
    lin = torch.linspace(-1.0, 1.0, side, dtype=dtype)
    vv, uu = torch.meshgrid(lin, lin, indexing="ij")
    return torch.stack([uu.reshape(-1), vv.reshape(-1)], dim=-1)


def _tps_kernel(r2: torch.Tensor) -> torch.Tensor:
    # U(r) = r^2 log r^2, with U(0) = 0
    safe = torch.where(r2 > 0, r2, torch.ones_like(r2))
    return torch.where(r2 > 0, r2 * torch.log(safe), torch.zeros_like(r2))


def _tps_apply(offsets: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    batched = offsets.dim() == 2
    if not batched:
        offsets, points = offsets.unsqueeze(0), points.unsqueeze(0)
    n, k2 = offsets.shape
    k = k2 // 2
    ctrl = tps_control_points(math.isqrt(k), dtype=offsets.dtype).to(offsets.device)
    targets = ctrl.unsqueeze(0) + offsets.reshape(n, k, 2)

    # Solve [[K, P], [P^T, 0]] [w; a] = [targets; 0]
    d2 = ((ctrl[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    kmat = _tps_kernel(d2)
    pmat = torch.cat([torch.ones(k, 1, dtype=ctrl.dtype, device=ctrl.device), ctrl], dim=1)
    top = torch.cat([kmat, pmat], dim=1)
    bottom = torch.cat([pmat.T, torch.zeros(3, 3, dtype=ctrl.dtype, device=ctrl.device)], dim=1)
    system = torch.cat([top, bottom], dim=0)
    rhs = torch.cat([targets, targets.new_zeros(n, 3, 2)], dim=1)
    coef = torch.linalg.solve(system.expand(n, -1, -1), rhs)  # (n, k + 3, 2)

    flat = points.reshape(n, -1, 2)
    r2 = ((flat[:, :, None, :] - ctrl[None, None]) ** 2).sum(-1)
    basis = torch.cat([_tps_kernel(r2), torch.ones_like(flat[..., :1]), flat], dim=-1)
    out = (basis @ coef).reshape(points.shape)
    return out if batched else out[0]


# --- grids and warping ------------------------------------------------------

@dataclass(frozen=True)
class SamplingGrid:
    coords: torch.Tensor      # (N, H, W, 2) source (u, v) per output pixel
    valid_mask: torch.Tensor  # (N, H, W) bool

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.coords.shape[1:3])


def meshgrid(out_size: Tuple[int, int], dtype=torch.float32, device=None) -> torch.Tensor:
    h, w = out_size
    v = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    u = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    return torch.stack([uu, vv], dim=-1)


def generate_grid(t: Transform, out_size: Tuple[int, int]) -> SamplingGrid:
    h, w = out_size
    if h < 2 or w < 2:
        raise GeometryError(f"output size must be at least 2x2, got {out_size}")
    params = t.params if t.batched else t.params.unsqueeze(0)
    base = meshgrid(out_size, dtype=params.dtype, device=params.device)
    base = base.unsqueeze(0).expand(params.shape[0], h, w, 2)
    coords = Transform(t.kind, params).apply(base)
    valid = (coords[..., 0].abs() <= 1.0) & (coords[..., 1].abs() <= 1.0)
    return SamplingGrid(coords, valid)


def _snap(x: torch.Tensor) -> torch.Tensor:
    # Pull near-integer pixel coordinates onto the integer (value only) so that
    # identity grids sample exactly; the gradient is passed straight through.
    tol = 64 * torch.finfo(x.dtype).eps * max(1.0, float(x.detach().abs().max()) if x.numel() else 1.0)
    r = torch.round(x)
    near = (x - r).abs() <= tol
    return x + torch.where(near, r - x, torch.zeros_like(x)).detach()


def warp(img: torch.Tensor, grid: SamplingGrid, fill: float = 0.0) -> torch.Tensor:
    """Bilinear backward warp of ``img`` (N, C, H, W) or (C, H, W).

    Neighbours that fall outside the source frame contribute ``fill``.
    Differentiable w.r.t. both the image and the grid coordinates.
    """
    squeeze = img.dim() == 3
    if squeeze:
        img = img.unsqueeze(0)
    if img.dim() != 4:
        raise GeometryError(f"expected (N, C, H, W) image, got shape {tuple(img.shape)}")
    coords = grid.coords
    n, c, h, w = img.shape
    if coords.shape[0] == 1 and n > 1:
        coords = coords.expand(n, *coords.shape[1:])
    if coords.shape[0] != n:
        raise GeometryError(f"grid batch {coords.shape[0]} does not match image batch {n}")
    coords = coords.to(img.dtype)
    oh, ow = coords.shape[1:3]

    x = _snap((coords[..., 0] + 1.0) * ((w - 1) / 2.0))
    y = _snap((coords[..., 1] + 1.0) * ((h - 1) / 2.0))
    # non-finite coordinates index out of frame; their NaN weights still reach the output
    x0 = torch.floor(torch.nan_to_num(x.detach(), nan=-2.0, posinf=-2.0, neginf=-2.0))
    y0 = torch.floor(torch.nan_to_num(y.detach(), nan=-2.0, posinf=-2.0, neginf=-2.0))
    fx = x - x0
    fy = y - y0

    flat = img.reshape(n, c, h * w)
    out = img.new_zeros(n, c, oh * ow)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long().reshape(n, 1, -1)
            vals = torch.gather(flat, 2, idx.expand(n, c, idx.shape[-1]))
            vals = torch.where(inside.reshape(n, 1, -1), vals, vals.new_tensor(fill))
            out = out + (wx * wy).reshape(n, 1, -1) * vals
    out = out.reshape(n, c, oh, ow)
    return out[0] if squeeze else out


def corner_error(t_est: Transform, t_gt: Transform, size: Tuple[int, int]) -> torch.Tensor:
    """Mean pixel distance between the image corners mapped by two transforms.

    Returns one value per batch item (or a scalar for unbatched transforms).
    """
    _require_matrix_kind(t_est, t_gt)
    h, w = size
    corners = torch.tensor([[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
    est = t_est.params.detach().double()
    gt = t_gt.params.detach().double()
    batched = est.dim() == 2 or gt.dim() == 2
    if batched:
        n = max(est.shape[0] if est.dim() == 2 else 1, gt.shape[0] if gt.dim() == 2 else 1)
        est = est.expand(n, -1) if est.dim() == 2 else est.unsqueeze(0).expand(n, -1)
        gt = gt.expand(n, -1) if gt.dim() == 2 else gt.unsqueeze(0).expand(n, -1)
        corners = corners.unsqueeze(0).expand(n, 4, 2)
    a = _projective_apply(params_to_matrix(t_est.kind, est), corners)
    b = _projective_apply(params_to_matrix(t_gt.kind, gt), corners)
    scale = torch.tensor([(w - 1) / 2.0, (h - 1) / 2.0], dtype=torch.float64)
    return (((a - b) * scale) ** 2).sum(-1).sqrt().mean(-1)
