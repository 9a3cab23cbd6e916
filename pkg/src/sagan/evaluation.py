"""Retrieval metrics, synthetic homography recovery, and the multi-code sweep."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.spatial.distance import cdist
from scipy.stats import spearmanr

from . import geometry as geo
from .data import ImageBatch, SyntheticPair, concat
from .networks import SAGAN, SiameseNet, SpatialCode
from .training import adapt_with_params

log = logging.getLogger(__name__)


@dataclass
class RetrievalResult:
    ranked: List[np.ndarray]   # per evaluated query: gallery indices by ascending distance
    r1: float
    r5: float
    r10: float
    mAP: float
    cmc: np.ndarray            # cmc[k - 1] = rank-k accuracy
    aps: np.ndarray
    excluded: int = 0          # queries without any valid gallery match

    def row(self, method: str) -> dict:
        return {"Method": method, "R-1": self.r1, "R-5": self.r5, "R-10": self.r10, "mAP": self.mAP}


def euclidean_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # direct differences (not the |a|^2 + |b|^2 - 2ab expansion) keep rankings translation invariant
    return cdist(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def cmc_map(query_emb, gallery_emb, query_ids, gallery_ids, query_cams, gallery_cams,
            max_rank: int = 10) -> RetrievalResult:
    """Single-query CMC and mAP with Euclidean ranking.

    Gallery items sharing both identity and camera with the query are removed
    from its ranking; queries left with no true match are excluded and counted.
    """
    q_ids, g_ids = np.asarray(query_ids), np.asarray(gallery_ids)
    q_cams, g_cams = np.asarray(query_cams), np.asarray(gallery_cams)
    if len(q_ids) == 0 or len(g_ids) == 0:
        raise ValueError("query and gallery must be nonempty")
    dist = euclidean_distances(np.asarray(query_emb), np.asarray(gallery_emb))
    n_g = len(g_ids)
    width = max(max_rank, n_g)
    cmc = np.zeros(width)
    aps, ranked = [], []
    excluded = 0
    for i in range(len(q_ids)):
        order = np.argsort(dist[i], kind="stable")
        keep = ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        order = order[keep]
        good = g_ids[order] == q_ids[i]
        if not good.any():
            excluded += 1
            continue
        ranked.append(order)
        hits = np.flatnonzero(good)
        cmc[hits[0]:] += 1
        precision = np.arange(1, len(hits) + 1) / (hits + 1)
        aps.append(precision.mean())
    if not aps:
        raise ValueError("no query has a valid gallery match")
    n = len(aps)
    cmc = cmc / n
    if excluded:
        log.info("excluded %d queries without valid matches", excluded)
    return RetrievalResult(ranked, float(cmc[0]), float(cmc[min(4, width - 1)]), float(cmc[min(9, width - 1)]),
                           float(np.mean(aps)), cmc, np.array(aps), excluded)


# --- synthetic spatial recovery -----------------------------------------------

@torch.no_grad()
def predict_transforms(models: SAGAN, x: ImageBatch, seed: int = 0) -> geo.Transform:
    models.eval()
    code = SpatialCode.sample(len(x), models.cfg.code_dim, seed=seed, dtype=x.values.dtype)
    params = models.s1.loc(torch.cat([x.values, x.mask], dim=1), code)
    return geo.Transform(models.s1.kind, params)


def homography_recovery_eval(models: SAGAN, x: ImageBatch, gt: geo.Transform, seed: int = 0) -> Dict[str, float]:
    """Corner error (pixels) of S1's transform for each source item vs its ground truth."""
    pred = predict_transforms(models, x, seed)
    err = geo.corner_error(pred, gt, x.size).numpy()
    return {"corner_mean": float(err.mean()), "corner_median": float(np.median(err))}


@torch.no_grad()
def identity_preservation(models: SAGAN, siam: SiameseNet, x: ImageBatch, y: ImageBatch,
                          seed: int = 0) -> Tuple[float, float]:
    """(mean distance of x to its adaptation, mean distance of x to y) in the embedding."""
    siam.eval()
    outs, _ = adapt_with_params(models, x, 1, seed)
    ex = siam(x.values)
    pos = (ex - siam(outs[0].values)).norm(dim=1).mean().item()
    n = min(len(x), len(y))
    neg = (ex[:n] - siam(y.values[:n])).norm(dim=1).mean().item()
    return pos, neg


# --- toy re-identification pipeline ---------------------------------------------

@dataclass
class EmbedderConfig:
    steps: int = 300
    batch_size: int = 64
    lr: float = 2e-3
    width: int = 16
    emb_dim: int = 32
    seed: int = 0


class IDEmbedder(nn.Module):
    """SiameseNet trunk with an identity-classification head; the trunk output is the descriptor."""

    def __init__(self, channels: int, size, n_ids: int, width: int, emb_dim: int):
        super().__init__()
        self.trunk = SiameseNet(channels, size, width, emb_dim)
        self.head = nn.Linear(emb_dim, n_ids)

    def forward(self, x):
        return self.head(F.leaky_relu(self.trunk(x), 0.2))


def train_embedder(train: ImageBatch, cfg: EmbedderConfig = EmbedderConfig()) -> SiameseNet:
    """Train on labelled source images; returns the frozen feature extractor."""
    torch.manual_seed(cfg.seed)
    ids = train.identity
    n_ids = int(ids.max()) + 1
    model = IDEmbedder(train.values.shape[1], train.size, n_ids, cfg.width, cfg.emb_dim)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed)
    n = len(train)
    bs = min(cfg.batch_size, n)
    for _ in range(cfg.steps):
        idx = torch.randperm(n, generator=g)[:bs]
        loss = F.cross_entropy(model(train.values[idx]), ids[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model.trunk


@torch.no_grad()
def target_retrieval(embedder: SiameseNet, target: ImageBatch, query_camera: Optional[int] = None) -> RetrievalResult:
    """Queries are the target images from one camera, the gallery is everything else."""
    cams = target.camera
    qc = int(cams.min()) if query_camera is None else query_camera
    q = cams == qc
    feats = embedder(target.values).numpy()
    return cmc_map(feats[q.numpy()], feats[(~q).numpy()], target.identity[q].numpy(), target.identity[~q].numpy(),
                   cams[q].numpy(), cams[~q].numpy())


def adapted_training_set(models: SAGAN, x: ImageBatch, M: int, seed: int, pixel: bool = True) -> ImageBatch:
    outs, _ = adapt_with_params(models, x, M, seed, pixel)
    return concat(outs)


def retrieval_with_adaptation(models: Optional[SAGAN], pair: SyntheticPair, M: int = 1, seed: int = 0,
                              embed_cfg: Optional[EmbedderConfig] = None) -> RetrievalResult:
    """Train the toy embedder on source images (adapted by ``models`` when given) and rank the target."""
    cfg = embed_cfg or EmbedderConfig(seed=seed)
    train = pair.x if models is None else adapted_training_set(models, pair.x, M, seed)
    return target_retrieval(train_embedder(train, cfg), pair.y)


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) < 2 or len(set(a)) < 2 or len(set(b)) < 2:
        return float("nan")
    rho = spearmanr(a, b).statistic
    return float(rho)


def m_sweep(models: SAGAN, pairs: Sequence[SyntheticPair], M_values: Sequence[int], seed: int = 0,
            embed_cfg: Optional[EmbedderConfig] = None) -> Tuple[List[dict], float]:
    """R-1 (averaged over ``pairs``) for each number of spatial codes, plus Spearman rho of R-1 vs M."""
    rows = []
    for M in M_values:
        res = [retrieval_with_adaptation(models, p, M, seed, embed_cfg) for p in pairs]
        rows.append({"M": M, "R-1": float(np.mean([r.r1 for r in res])), "mAP": float(np.mean([r.mAP for r in res]))})
    rho = spearman([r["M"] for r in rows], [r["R-1"] for r in rows])
    return rows, rho


def write_table(rows: Sequence[dict], path, columns: Sequence[str] = ("Method", "R-1", "R-5", "R-10", "mAP")) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def plot_sweep(rows: Sequence[dict], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot([r["M"] for r in rows], [100 * r["R-1"] for r in rows], marker="o")
    ax.set_xlabel("M (spatial codes)")
    ax.set_ylabel("R-1 (%)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
