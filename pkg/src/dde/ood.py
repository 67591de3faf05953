"""Per-factor OOD reasoners: k-means over a factor's representative latent
dims, a Gaussian mixture built from the cluster structure, percentile
threshold calibration, scoring, and AUROC.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Rng, ContractError
from .data import ConfigError

VAR_FLOOR = 1e-6


@dataclass
class OodVerdict:
    score: float                # mixture log-likelihood
    is_ood: bool


@dataclass
class OodReasoner:
    factor: str
    dims: list                  # representative latent dims this scorer reads
    weights: np.ndarray         # (k,)
    means: np.ndarray           # (k, d)
    variances: np.ndarray       # (k, d) diagonal covariances
    threshold: float            # log-likelihood cutoff

    def to_dict(self) -> dict:
        return {
            "factor": self.factor,
            "dims": list(self.dims),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OodReasoner":
        return cls(d["factor"], list(d["dims"]), np.array(d["weights"]),
                   np.array(d["means"]), np.array(d["variances"]),
                   float(d["threshold"]))


def _kmeans(points: np.ndarray, k: int, rng: Rng,
            max_iter: int = 300, tol: float = 1e-6):
    """Lloyd's algorithm with k-means++ seeding; an emptied cluster is
    re-seeded from the point farthest from its assigned center."""
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    for j in range(1, k):
        d2 = np.min(((points[:, None, :] - centers[None, :j, :]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centers[j] = points[int(rng.integers(n))]
            continue
        r = rng.uniform(0.0, total)
        centers[j] = points[np.searchsorted(np.cumsum(d2), r).clip(0, n - 1)]

    assign = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            mask = assign == j
            if mask.any():
                new_centers[j] = points[mask].mean(axis=0)
            else:
                far = d2[np.arange(n), assign].argmax()
                new_centers[j] = points[far]
        shift = np.sqrt(((new_centers - centers) ** 2).sum(-1)).max()
        centers = new_centers
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return centers, d2.argmin(axis=1)


def fit(embeddings: np.ndarray, k: int, percentile: float = 5.0,
        seed: int = 0, factor: str = "", dims=None) -> OodReasoner:
    """Cluster calibration embeddings and build a GMM from the clusters;
    the threshold is the q-th percentile of calibration log-likelihoods."""
    pts = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if pts.ndim != 2:
        raise ContractError("embeddings must be (n, d)")
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k > len(np.unique(pts, axis=0)):
        raise ConfigError(f"k={k} exceeds the number of distinct points")

    centers, assign = _kmeans(pts, k, Rng(seed))
    weights = np.zeros(k)
    variances = np.full((k, pts.shape[1]), VAR_FLOOR)
    for j in range(k):
        mask = assign == j
        weights[j] = mask.mean()
        if mask.any():
            variances[j] = np.maximum(pts[mask].var(axis=0), VAR_FLOOR)
    weights = np.maximum(weights, 1e-12)
    weights /= weights.sum()

    reasoner = OodReasoner(factor, list(dims) if dims is not None else
                           list(range(pts.shape[1])),
                           weights, centers, variances, threshold=-np.inf)
    scores = np.array([_loglik(reasoner, p) for p in pts])
    reasoner.threshold = float(np.percentile(scores, percentile))
    return reasoner


def _loglik(reasoner: OodReasoner, z: np.ndarray) -> float:
    z = np.asarray(z, dtype=np.float64)
    diff = z[None, :] - reasoner.means
    log_comp = (np.log(reasoner.weights)
                - 0.5 * (np.log(2 * np.pi * reasoner.variances)
                         + diff ** 2 / reasoner.variances).sum(axis=1))
    mx = log_comp.max()
    return float(mx + np.log(np.exp(log_comp - mx).sum()))


def score(reasoner: OodReasoner, z) -> OodVerdict:
    """Mixture log-likelihood of z; OOD iff it falls below the threshold."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if z.shape[0] != reasoner.means.shape[1]:
        raise ContractError(f"embedding dim {z.shape[0]} != reasoner dim "
                            f"{reasoner.means.shape[1]}")
    s = _loglik(reasoner, z)
    return OodVerdict(s, s < reasoner.threshold)


def auroc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUROC; higher score means more in-distribution.

    labels: truthy for ID, falsy for OOD.  Ties contribute 1/2.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray([bool(l) for l in labels])
    n_id = int(labels.sum())
    n_ood = int((~labels).sum())
    if n_id == 0 or n_ood == 0:
        raise ContractError("auroc needs both ID and OOD samples")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # average rank, 1-based
        i = j + 1
    r_id = ranks[labels].sum()
    return float((r_id - n_id * (n_id + 1) / 2.0) / (n_id * n_ood))
