"""Evaluation protocol: fit per-factor reasoners on the calibration split,
score held-out test samples (equal ID/OOD counts), and benchmark single-image
inference latency.
"""

from __future__ import annotations

import time

import numpy as np

from .data import FactorDataset
from .encoder import EncoderModel, encode
from .tensor import Tensor
from . import ood


def encode_batched(model: EncoderModel, images: np.ndarray, batch: int = 64):
    mu = np.zeros((len(images), model.latent_dim))
    lv = np.zeros((len(images), model.latent_dim))
    for s in range(0, len(images), batch):
        lat = encode(model, images[s:s + batch])
        mu[s:s + batch] = lat.mu.data
        lv[s:s + batch] = lat.logvar.data
    return mu, lv


def fit_reasoners(model: EncoderModel, dataset: FactorDataset,
                  percentile: float = 5.0, seed: int = 0,
                  k_override: dict | None = None) -> dict:
    """One reasoner per factor, fit on the calibration split restricted to
    that factor's representative dims; k defaults to the number of factor
    values seen in training."""
    cal = dataset.indices("calibration")
    mu, _ = encode_batched(model, dataset.images[cal])
    reasoners = {}
    for spec in dataset.specs:
        dims = model.rep_dims[spec.name]
        k = (k_override or {}).get(spec.name, len(spec.train_values))
        reasoners[spec.name] = ood.fit(mu[:, dims], k, percentile=percentile,
                                       seed=seed, factor=spec.name, dims=dims)
    return reasoners


def scoring_set(dataset: FactorDataset, factor: str):
    """Test indices for one factor's reasoner: ID samples have all factors
    in-train; OOD samples are out-of-train in this factor only.  The larger
    side is truncated deterministically so counts are equal."""
    spec = dataset.spec(factor)
    others = [s for s in dataset.specs if s.name != factor]
    id_idx, ood_idx = [], []
    for i in dataset.indices("test"):
        vals = dataset.factors[i]
        if any(vals[o.name] not in o.train_values for o in others):
            continue
        (id_idx if vals[factor] in spec.train_values else ood_idx).append(i)
    m = min(len(id_idx), len(ood_idx))
    return id_idx[:m], ood_idx[:m]


def factor_aurocs(model: EncoderModel, dataset: FactorDataset,
                  percentile: float = 5.0, seed: int = 0,
                  k_override: dict | None = None) -> dict:
    """AUROC of each factor's reasoner on its balanced ID/OOD test set."""
    reasoners = fit_reasoners(model, dataset, percentile, seed, k_override)
    out = {}
    for spec in dataset.specs:
        f = spec.name
        id_idx, ood_idx = scoring_set(dataset, f)
        idx = id_idx + ood_idx
        mu, _ = encode_batched(model, dataset.images[idx])
        dims = model.rep_dims[f]
        scores = [ood.score(reasoners[f], z).score for z in mu[:, dims]]
        labels = [True] * len(id_idx) + [False] * len(ood_idx)
        out[f] = ood.auroc(scores, labels)
    return out


def latency_benchmark(model: EncoderModel, images: np.ndarray,
                      runs: int = 1000) -> dict:
    """Single-image CPU inference latency over `runs` encodes (preprocessing
    from the stored byte image included, dataset load excluded)."""
    byte_imgs = [np.round(img * 255.0).astype(np.uint8) for img in images]
    times = []
    for r in range(runs):
        raw = byte_imgs[r % len(byte_imgs)]
        t0 = time.perf_counter()
        x = Tensor(raw.astype(np.float64) / 255.0)
        encode(model, x)
        times.append(time.perf_counter() - t0)
    times = np.array(times)
    return {
        "runs": runs,
        "mean_ms": float(times.mean() * 1e3),
        "p50_ms": float(np.percentile(times, 50) * 1e3),
        "p90_ms": float(np.percentile(times, 90) * 1e3),
        "p99_ms": float(np.percentile(times, 99) * 1e3),
    }


def evaluate_models(teacher: EncoderModel, student: EncoderModel,
                    dataset: FactorDataset, percentile: float = 5.0,
                    seed: int = 0, bench_runs: int = 1000) -> dict:
    bench_imgs = dataset.images[dataset.indices("test")[:32]]
    report = {
        "auroc": {
            "teacher": factor_aurocs(teacher, dataset, percentile, seed),
            "student": factor_aurocs(student, dataset, percentile, seed),
        },
        "model_bytes": {
            "teacher": teacher.parameter_bytes(),
            "student": student.parameter_bytes(),
        },
        "reasoners": {
            "teacher": {f: r.to_dict() for f, r in
                        fit_reasoners(teacher, dataset, percentile, seed).items()},
            "student": {f: r.to_dict() for f, r in
                        fit_reasoners(student, dataset, percentile, seed).items()},
        },
        "timing": {
            "teacher": latency_benchmark(teacher, bench_imgs, bench_runs),
            "student": latency_benchmark(student, bench_imgs, bench_runs),
        },
    }
    return report
