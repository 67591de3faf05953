"""Convolution operator spectra via per-frequency FFT + SVD, singular-value
clipping, operator drift, the network Lipschitz coefficient, and the
Rademacher bounds for the three loss kinds.

Spectra use the circular-padding (block circulant) operator convention: the
operator's singular vectors are Fourier basis vectors, so the singular
values are exactly the per-frequency SVDs of the kernel transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ContractError
from .data import chi_of_dataset  # noqa: F401  (certification-side entry point)


@dataclass
class SpectrumReport:
    layer_id: int
    values: np.ndarray          # all singular values, descending

    @property
    def max(self) -> float:
        return float(self.values[0])


@dataclass
class LipschitzCert:
    chi: float
    kappa: float
    delta_op: float
    nu: float
    layer_count: int
    kappa_theta: float


@dataclass
class RademacherBound:
    kind: str
    m: int
    d: int
    delta: float
    loss_bound: float           # B
    omega: float
    dudley: float
    concentration: float
    zeta: float


def _as_kernel(kernel) -> np.ndarray:
    k = kernel.data if isinstance(kernel, Tensor) else np.asarray(kernel, dtype=np.float64)
    if k.ndim != 4:
        raise ContractError("kernel must have shape (C_out, C_in, k, k)")
    return k


def _freq_coeffs(kernel: np.ndarray, spatial) -> np.ndarray:
    h, w = spatial
    kh, kw = kernel.shape[2], kernel.shape[3]
    if kh > h or kw > w:
        # kernel taps wrap around the image, so fold them modulo the size
        folded = np.zeros(kernel.shape[:2] + (h, w))
        ii, jj = np.meshgrid(np.arange(kh) % h, np.arange(kw) % w, indexing="ij")
        np.add.at(folded, (slice(None), slice(None), ii, jj), kernel)
        kernel = folded
    coeffs = np.fft.fft2(kernel, s=(h, w), axes=(2, 3))
    return coeffs.transpose(2, 3, 0, 1)          # (H, W, C_out, C_in)


def conv_singular_values(kernel, spatial, layer_id: int = 0) -> SpectrumReport:
    """All H*W*min(C_in, C_out) singular values of the circulant conv
    operator, via SVD of each per-frequency C_out x C_in matrix."""
    k = _as_kernel(kernel)
    sv = np.linalg.svd(_freq_coeffs(k, spatial), compute_uv=False)
    values = np.sort(sv.ravel())[::-1]
    return SpectrumReport(layer_id, values)


def clip_singular_values(kernel, spatial, theta: float) -> np.ndarray:
    """Clamp the conv operator's singular values to <= theta, returning a
    kernel with the original (k x k) support.

    Projection to the norm ball happens in the frequency domain; cropping
    back to k x k support can re-grow the norm slightly, so the two
    projections alternate until the re-measured norm is within 1e-10 of
    theta (both constraint sets are convex, so the alternation converges).
    """
    if theta <= 0:
        raise ContractError("clip threshold must be > 0")
    k = _as_kernel(kernel)
    h, w = spatial
    kh, kw = k.shape[2], k.shape[3]
    if kh > h or kw > w:
        raise ContractError("cannot clip a kernel larger than its input")
    if conv_singular_values(k, spatial).max <= theta + 1e-9:
        return k.copy()

    cur = k.copy()
    mx = np.inf
    for _ in range(500):
        u, s, vt = np.linalg.svd(_freq_coeffs(cur, spatial), full_matrices=False)
        s = np.minimum(s, theta)
        clipped = (u * s[..., None, :]) @ vt
        full = np.real(np.fft.ifft2(clipped.transpose(2, 3, 0, 1), axes=(2, 3)))
        cur = full[:, :, :kh, :kw]
        mx = conv_singular_values(cur, spatial).max
        if mx <= theta + 1e-10:
            break
    if mx > theta:
        cur *= theta / mx
    return cur


def operator_drift(model, snapshot=None, per_layer: bool = False):
    """Summed spectral-norm distance between each layer's current effective
    operator and its initialization snapshot."""
    snapshot = model.snapshot if snapshot is None else snapshot
    spatial = model.layer_spatial()
    drifts = []
    for li, spec in enumerate(model.layers):
        diff = model.effective_kernel(li) - snapshot[li]
        if spec.kind == "conv":
            drifts.append(conv_singular_values(diff, spatial[li], layer_id=li).max)
        else:
            sv = np.linalg.svd(diff, compute_uv=False)
            drifts.append(float(sv[0]) if sv.size else 0.0)
    total = float(sum(drifts))
    return (total, drifts) if per_layer else total


def network_lipschitz(chi: float, kappa: float, delta_op: float,
                      nu: float, layer_count: int) -> float:
    """chi * kappa * delta_op * (1 + nu + delta_op/L)^L."""
    if min(chi, kappa, delta_op, nu) < 0 or layer_count < 1:
        raise ContractError("network_lipschitz args must be >= 0 with L >= 1")
    return chi * kappa * delta_op * (1.0 + nu + delta_op / layer_count) ** layer_count


def zeta_bound(kind: str, m: int, d: int, delta: float, loss_bound: float,
               omega: float, kappa: float, chi: float, delta_op: float,
               nu: float, layer_count: int) -> RademacherBound:
    """High-probability generalization bound: Dudley term (from the network
    Lipschitz coefficient) plus the concentration term."""
    if m < 1 or d < 1:
        raise ContractError("m and d must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ContractError("delta must lie in (0, 1)")
    dudley = (2.0 * chi * kappa * delta_op
              * (1.0 + nu + delta_op / layer_count) ** layer_count
              * math.sqrt(8.7 * d / m))
    concentration = (loss_bound + 2.0 * kappa * omega * m) * math.sqrt(math.log(1.0 / delta) / (2.0 * m))
    return RademacherBound(kind, m, d, delta, loss_bound, omega,
                           dudley, concentration, dudley + concentration)


DEFAULT_CERT_CONSTANTS = {
    # per-loss Lipschitz constants and range bounds, plus the shared inputs
    "kappa": {"D": 3.0, "A": 61.5, "I": 206.4},
    "loss_bound": {"D": 1.0, "A": 54.72, "I": 216.8},
    "omega": 0.001,
    "delta": 0.1,
    "m": {"D": 3000, "A": 1500, "I": 1500},
}


def certify(model, dataset=None, constants: dict | None = None,
            m_grid=None) -> dict:
    """Full certification report: per-layer spectra summaries, operator
    drift, kappa_theta per loss kind, and the three zeta bounds (with a
    zeta-vs-m table for plotting)."""
    consts = {**DEFAULT_CERT_CONSTANTS, **(constants or {})}
    chi = chi_of_dataset(dataset) if dataset is not None else float(consts["chi"])
    nu = model.init_norm_slack
    layer_count = len(model.layers)
    d = model.parameter_count()

    spatial = model.layer_spatial()
    spectra = []
    for li, spec in enumerate(model.layers):
        eff = model.effective_kernel(li)
        if spec.kind == "conv":
            rep = conv_singular_values(eff, spatial[li], layer_id=li)
        else:
            rep = SpectrumReport(li, np.sort(np.linalg.svd(eff, compute_uv=False))[::-1])
        spectra.append({"layer": li, "kind": spec.kind,
                        "max": rep.max, "min": float(rep.values[-1]),
                        "count": int(rep.values.size)})

    delta_op = operator_drift(model)
    bounds, kappa_thetas = {}, {}
    for kind in ("D", "A", "I"):
        kappa = float(consts["kappa"][kind])
        kappa_thetas[kind] = network_lipschitz(chi, kappa, delta_op, nu, layer_count)
        b = zeta_bound(kind, int(consts["m"][kind]), d, float(consts["delta"]),
                       float(consts["loss_bound"][kind]), float(consts["omega"]),
                       kappa, chi, delta_op, nu, layer_count)
        bounds[kind] = {"m": b.m, "dudley": b.dudley,
                        "concentration": b.concentration, "zeta": b.zeta}

    if m_grid is None:
        m_grid = [10, 30, 100, 300, 1000, 1500, 2000, 3000]
    zeta_vs_m = []
    for m in m_grid:
        row = {"m": int(m)}
        for kind in ("D", "A", "I"):
            b = zeta_bound(kind, int(m), d, float(consts["delta"]),
                           float(consts["loss_bound"][kind]), float(consts["omega"]),
                           float(consts["kappa"][kind]), chi, delta_op, nu, layer_count)
            row[f"dudley_{kind}"] = b.dudley
            row[f"zeta_{kind}"] = b.zeta
        zeta_vs_m.append(row)

    return {
        "operator_convention": "circular-padding circulant spectra "
                               "(training uses zero padding)",
        "chi": chi,
        "nu": nu,
        "layer_count": layer_count,
        "parameter_count": d,
        "spectra": spectra,
        "delta_op": delta_op,
        "kappa_theta": kappa_thetas,
        "zeta": bounds,
        "constants": consts,
        "zeta_vs_m": zeta_vs_m,
    }
