"""Image batches, the synthetic ground-truth domain pair, and ReID directory I/O."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from . import geometry as geo

log = logging.getLogger(__name__)

IMAGE_EXTS = {".jpg", ".jpeg", ".png", ".bmp"}
# Market-1501 style: 0002_c1_000451.jpg, 0002_c1s1_000451_00.jpg
REID_NAME = re.compile(r"^(-?\d+)_c(\d+)(?:s\d+)?_[^/]*$")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ImageBatch:
    values: torch.Tensor    # (N, C, H, W) in [-1, 1]
    mask: torch.Tensor      # (N, 1, H, W) in {0, 1}
    identity: torch.Tensor  # (N,) int64
    camera: torch.Tensor    # (N,) int64

    def __post_init__(self):
        n = self.values.shape[0]
        if self.values.dim() != 4 or self.mask.dim() != 4 or self.mask.shape[1] != 1:
            raise DataError("values must be (N, C, H, W) and mask (N, 1, H, W)")
        if self.mask.shape[0] != n or self.identity.shape[0] != n or self.camera.shape[0] != n:
            raise DataError("inconsistent batch sizes across fields")
        if self.mask.shape[2:] != self.values.shape[2:]:
            raise DataError("mask and values differ in spatial size")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return tuple(self.values.shape[2:])

    def index(self, idx) -> "ImageBatch":
        return ImageBatch(self.values[idx], self.mask[idx], self.identity[idx], self.camera[idx])

    def with_input_mask(self) -> torch.Tensor:
        return torch.cat([self.values, self.mask], dim=1)

    def to(self, dtype=None) -> "ImageBatch":
        return replace(self, values=self.values.to(dtype), mask=self.mask.to(dtype))


def make_batch(values: torch.Tensor, mask: Optional[torch.Tensor] = None,
               identity=None, camera=None) -> ImageBatch:
    n = values.shape[0]
    if mask is None:
        mask = values.new_ones(n, 1, *values.shape[2:])
    identity = torch.zeros(n, dtype=torch.long) if identity is None else torch.as_tensor(identity, dtype=torch.long)
    camera = torch.zeros(n, dtype=torch.long) if camera is None else torch.as_tensor(camera, dtype=torch.long)
    return ImageBatch(values, mask, identity, camera)


def concat(batches: Sequence[ImageBatch]) -> ImageBatch:
    return ImageBatch(*(torch.cat([getattr(b, f) for b in batches]) for f in ("values", "mask", "identity", "camera")))


# --- synthetic domain pair --------------------------------------------------

@dataclass(frozen=True)
class SyntheticDomainSpec:
    gt_transform_family: str = geo.HOMOGRAPHY
    rotation_deg: float = 15.0
    perspective: float = 0.1
    translation: float = 0.2
    # the per-domain base transform draws each magnitude from [min_frac, 1] * range
    base_min_frac: float = 0.5
    # per-item jitter, as a fraction of each range
    jitter_frac: float = 0.05
    gain_range: Tuple[float, float] = (0.6, 1.4)
    bias_range: Tuple[float, float] = (-0.2, 0.2)
    color_shift: bool = True
    noise_std: float = 0.02
    n_identities: int = 32
    n_views: int = 4
    size: Tuple[int, int] = (32, 32)
    channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.gt_transform_family not in (geo.AFFINE, geo.HOMOGRAPHY):
            raise DataError("synthetic ground truth must be affine or homography")
        for name in ("rotation_deg", "perspective", "translation", "jitter_frac", "noise_std"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be >= 0")
        if self.rotation_deg >= 60 or self.perspective >= 0.5 or self.translation >= 1.0:
            raise DataError("ranges too large to guarantee invertible transforms")
        if self.color_shift and self.gain_range[0] <= 0:
            raise DataError("colour gains must be > 0")
        if self.n_identities < 1 or self.n_views < 1:
            raise DataError("need at least one identity and one view")


@dataclass(frozen=True)
class SyntheticPair:
    x: ImageBatch
    y: ImageBatch
    gt: geo.Transform        # per-item transform that produced y from x
    base: geo.Transform      # per-domain component of gt
    gain: torch.Tensor
    bias: torch.Tensor
    spec: SyntheticDomainSpec


def _gt_params(kind: str, rot_deg, tu, tv, pu, pv) -> np.ndarray:
    r = math.radians(rot_deg)
    c, s = math.cos(r), math.sin(r)
    m = np.array([[c, -s, tu], [s, c, tv], [pu, pv, 1.0]])
    if kind == geo.AFFINE:
        return m[:2].reshape(-1)
    return (m / m[2, 2]).reshape(-1)[:8]


def _smooth_field(rng: np.random.Generator, size, cells: int, lo: float, hi: float) -> np.ndarray:
    h, w = size
    coarse = rng.uniform(lo, hi, size=(cells, cells))
    img = Image.fromarray(coarse.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    return np.asarray(img, dtype=np.float64)


def _render_person(colors: np.ndarray, shape: np.ndarray, size, offset, stripes: float):
    """Hard-edged person sprite; returns (rgb (3, H, W), mask (H, W))."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sy, sx = h / 32.0, w / 32.0
    cx = w / 2.0 - 0.5 + offset[0]
    top = 3.0 * sy + offset[1]
    head_r, torso_w, torso_h, leg_gap = shape
    head = ((xx - cx) / (head_r * sx)) ** 2 + ((yy - (top + head_r * sy)) / (head_r * sy * 1.15)) ** 2 <= 1.0
    t0 = top + 2 * head_r * sy + 0.5 * sy
    t1 = t0 + torso_h * sy
    torso = (np.abs(xx - cx) <= torso_w * sx / 2) & (yy >= t0) & (yy < t1)
    l1 = t1 + 9.0 * sy
    leg_w = max(torso_w * sx / 2 - leg_gap * sx / 2, 1.0)
    legs = (yy >= t1) & (yy < l1) & (np.abs(xx - cx) >= leg_gap * sx / 2) & (np.abs(xx - cx) <= leg_gap * sx / 2 + leg_w)
    rgb = np.zeros((3, h, w))
    mask = head | torso | legs
    stripe = (np.floor((yy - t0) / (stripes * sy)) % 2 == 0) & torso
    torso_color = np.where(stripe[None], colors[1][:, None, None], colors[2][:, None, None])
    rgb = np.where(head[None], colors[0][:, None, None], rgb)
    rgb = np.where(torso[None], torso_color, rgb)
    rgb = np.where(legs[None], colors[3][:, None, None], rgb)
    return rgb, mask


def _render_domain_x(spec: SyntheticDomainSpec, rng: np.random.Generator):
    n_id, n_v = spec.n_identities, spec.n_views
    h, w = spec.size
    palette = rng.uniform(-0.9, 0.9, size=(n_id, 4, 3))
    palette[:, 0] = rng.uniform(0.2, 0.8, size=(n_id, 1)) * np.array([1.0, 0.75, 0.55])  # skin-ish head
    shapes = np.stack([
        rng.uniform(2.3, 3.2, n_id),   # head radius
        rng.uniform(7.0, 12.0, n_id),  # torso width
        rng.uniform(8.0, 11.0, n_id),  # torso height
        rng.uniform(1.0, 3.0, n_id),   # leg gap
    ], axis=1)
    stripes = rng.uniform(1.5, 4.0, n_id)
    values = np.zeros((n_id * n_v, 3, h, w))
    masks = np.zeros((n_id * n_v, 1, h, w))
    ids, cams = [], []
    for i in range(n_id):
        for v in range(n_v):
            k = i * n_v + v
            offset = rng.uniform(-1.5, 1.5, size=2)
            light = rng.uniform(-0.08, 0.08)
            bg = np.stack([_smooth_field(rng, (h, w), 5, -0.55, 0.35) for _ in range(3)])
            rgb, m = _render_person(palette[i], shapes[i], (h, w), offset, stripes[i])
            values[k] = np.where(m[None], np.clip(rgb + light, -1, 1), bg)
            masks[k, 0] = m
            ids.append(i)
            cams.append(v + 1)
    values = values[:, : spec.channels] if spec.channels <= 3 else np.concatenate(
        [values, np.repeat(values.mean(1, keepdims=True), spec.channels - 3, axis=1)], axis=1)
    return values, masks, np.array(ids), np.array(cams)


def _draw_gt(spec: SyntheticDomainSpec, rng: np.random.Generator, n: int):
    names = ("rotation_deg", "translation", "translation", "perspective", "perspective")
    ranges = np.array([getattr(spec, k) for k in names])
    if spec.gt_transform_family == geo.AFFINE:
        ranges[3:] = 0.0
    mags = rng.uniform(spec.base_min_frac, 1.0, size=5) * ranges
    base = mags * rng.choice([-1.0, 1.0], size=5)
    jitter = rng.uniform(-1.0, 1.0, size=(n, 5)) * ranges * spec.jitter_frac
    kind = spec.gt_transform_family
    base_p = _gt_params(kind, *base)
    items = np.stack([_gt_params(kind, *(base + j)) for j in jitter])
    return base_p, items


def synth_pair(spec: SyntheticDomainSpec) -> SyntheticPair:
    """Render domain X and its geometrically and photometrically shifted twin Y.

    Item ``i`` of Y shows the same identity, view and background as item ``i``
    of X, warped by ``gt[i]`` (backward convention: ``y(p) = x(gt_i(p))``),
    then colour shifted and noised. The pairing is for evaluation only.
    """
    rng = np.random.default_rng(spec.seed)
    xv, xm, ids, cams = _render_domain_x(spec, rng)
    n = xv.shape[0]
    kind = spec.gt_transform_family
    base_p, gt_p = _draw_gt(spec, rng, n)
    gt = geo.make_transform(kind, torch.tensor(gt_p), source_size=spec.size)  # raises if singular
    base = geo.make_transform(kind, torch.tensor(base_p), source_size=spec.size)

    x_vals = torch.tensor(xv)
    x_mask = torch.tensor(xm)
    grid = geo.generate_grid(gt, spec.size)
    y_vals = geo.warp(x_vals, grid, fill=0.0)
    y_mask = (geo.warp(x_mask, grid, fill=0.0) >= 0.5).double()

    c = spec.channels
    if spec.color_shift:
        gain = torch.tensor(rng.uniform(*spec.gain_range, size=c))
        bias = torch.tensor(rng.uniform(*spec.bias_range, size=c))
    else:
        gain, bias = torch.ones(c, dtype=torch.float64), torch.zeros(c, dtype=torch.float64)
    y_vals = y_vals * gain.view(1, c, 1, 1) + bias.view(1, c, 1, 1)
    if spec.noise_std > 0:
        y_vals = y_vals + torch.tensor(rng.normal(0.0, spec.noise_std, size=tuple(y_vals.shape)))
    y_vals = y_vals.clamp(-1.0, 1.0)

    ids_t = torch.tensor(ids, dtype=torch.long)
    cams_t = torch.tensor(cams, dtype=torch.long)
    x = ImageBatch(x_vals.float(), x_mask.float(), ids_t, cams_t)
    y = ImageBatch(y_vals.float(), y_mask.float(), ids_t.clone(), cams_t.clone())
    return SyntheticPair(x, y, gt, base, gain, bias, spec)


# --- sampling -----------------------------------------------------------------

def sample_batch(dataset: ImageBatch, n: int, seed: int) -> ImageBatch:
    """Uniform draw of ``n`` distinct items, deterministic in ``seed``."""
    if n > len(dataset) or n < 1:
        raise DataError(f"cannot draw {n} items from a dataset of {len(dataset)}")
    g = torch.Generator().manual_seed(seed)
    idx = torch.randperm(len(dataset), generator=g)[:n]
    return dataset.index(idx)


class EpochSampler:
    """Yields batches without replacement within an epoch; reshuffles per epoch."""

    def __init__(self, dataset: ImageBatch, batch_size: int, seed: int):
        if batch_size > len(dataset) or batch_size < 1:
            raise DataError(f"batch size {batch_size} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self.pos = 0
        self._perm = self._permutation(0)

    def _permutation(self, epoch: int) -> torch.Tensor:
        g = torch.Generator().manual_seed(self.seed * 1_000_003 + epoch)
        return torch.randperm(len(self.dataset), generator=g)

    def next(self) -> ImageBatch:
        if self.pos + self.batch_size > len(self._perm):
            self.epoch += 1
            self.pos = 0
            self._perm = self._permutation(self.epoch)
        idx = self._perm[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return self.dataset.index(idx)

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "pos": self.pos}

    def load_state_dict(self, state: dict) -> None:
        self.epoch, self.pos = int(state["epoch"]), int(state["pos"])
        self._perm = self._permutation(self.epoch)


# --- ReID directories ---------------------------------------------------------

def parse_reid_name(name: str) -> Optional[Tuple[int, int]]:
    """``0002_c1_000451.jpg`` -> (2, 1); None when the name does not follow the convention."""
    p = Path(name)
    if p.suffix.lower() not in IMAGE_EXTS:
        return None
    m = REID_NAME.match(p.stem)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


@dataclass(frozen=True)
class ReidDataset:
    batch: ImageBatch
    names: List[str]
    skipped: int


def _load_image(path: Path, size, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert(mode).resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)


def load_reid_dir(path, size: Tuple[int, int] = (32, 32), labelled: bool = True) -> ReidDataset:
    """Load a flat directory of ``<identity>_c<camera>_<seq>.<ext>`` images.

    Optional binary masks are read from ``<path>/masks/<stem>.png``; images
    without one get an all-ones mask. With ``labelled=False`` any image file
    is accepted and identity/camera default to 0 when the name does not parse.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.is_file())
    if not files:
        raise DataError(f"{root} is empty")
    values, masks, ids, cams, names = [], [], [], [], []
    skipped = 0
    for f in files:
        parsed = parse_reid_name(f.name)
        if parsed is None and not labelled and f.suffix.lower() in IMAGE_EXTS:
            parsed = (0, 0)
        if parsed is None:
            skipped += 1
            continue
        arr = _load_image(f, size, "RGB")
        values.append(arr / 127.5 - 1.0)
        mpath = root / "masks" / (f.stem + ".png")
        if mpath.exists():
            masks.append((_load_image(mpath, size, "L") >= 128).astype(np.float32))
        else:
            masks.append(np.ones((1, *size), dtype=np.float32))
        ids.append(parsed[0])
        cams.append(parsed[1])
        names.append(f.stem)
    if skipped:
        log.warning("skipped %d file(s) in %s with unparseable names", skipped, root)
    if not values:
        raise DataError(f"no parseable images in {root}")
    batch = ImageBatch(
        torch.tensor(np.stack(values), dtype=torch.float32).clamp(-1, 1),
        torch.tensor(np.stack(masks)),
        torch.tensor(ids, dtype=torch.long),
        torch.tensor(cams, dtype=torch.long),
    )
    return ReidDataset(batch, names, skipped)


def to_uint8(values: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, C) uint8."""
    arr = ((values.detach().float().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).numpy()
    return arr.transpose(1, 2, 0)


def save_image(values: torch.Tensor, path) -> None:
    arr = to_uint8(values)
    Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr).save(path)


def export_batch(batch: ImageBatch, out_dir, names: Optional[Sequence[str]] = None) -> List[str]:
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    written = []
    for k in range(len(batch)):
        stem = names[k] if names is not None else f"{int(batch.identity[k]):04d}_c{int(batch.camera[k])}_{k:06d}"
        save_image(batch.values[k], out / f"{stem}.png")
        Image.fromarray((batch.mask[k, 0].numpy() > 0.5).astype(np.uint8) * 255).save(out / "masks" / f"{stem}.png")
        written.append(stem)
    return written


def export_pair(pair: SyntheticPair, out_dir) -> Path:
    """Write both domains as ReID-style directories plus the ground truth as JSON."""
    out = Path(out_dir)
    names = export_batch(pair.x, out / "domain_x")
    export_batch(pair.y, out / "domain_y")
    meta = {
        "kind": pair.gt.kind,
        "gt": {n: p for n, p in zip(names, pair.gt.params.tolist())},
        "base": pair.base.params.tolist(),
        "gain": pair.gain.tolist(),
        "bias": pair.bias.tolist(),
        "size": list(pair.spec.size),
        "seed": pair.spec.seed,
    }
    (out / "ground_truth.json").write_text(json.dumps(meta, indent=2))
    return out
