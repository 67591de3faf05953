"""Teacher pre-training and the primal-dual distillation loop.

The distillation loop follows the batched primal-dual recipe: per batch
element, a bounded distillation loss plus per-factor hinged adaptability and
isolation losses weighted by dual variables; Adam on the batch mean for the
primal step, then a projected ascent step on each dual variable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, Rng, AdamState, adam_step, grad, NumericError
from .data import FactorDataset, ConfigError
from .encoder import EncoderModel, build_teacher, compress, encode, sample
from .losses import Margins, distill_loss, adapt_loss, isolation_loss, bounded, hinge


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss); message carries the epoch index."""


@dataclass
class DualState:
    lambda_a: dict              # factor -> lambda_{A,f} >= 0
    lambda_i: dict
    eta_a: dict                 # factor -> dual learning rate
    eta_i: dict

    def __post_init__(self):
        for d in (self.lambda_a, self.lambda_i):
            for f, v in d.items():
                if v < 0:
                    raise ConfigError(f"dual variable for '{f}' must be >= 0")


def dual_step(state: DualState, batch_mean_hinges: dict) -> DualState:
    """Projected dual ascent: lambda' = max(lambda + eta * h, 0).

    batch_mean_hinges maps ("A"|"I", factor) to the batch-mean hinged loss.
    """
    la, li = dict(state.lambda_a), dict(state.lambda_i)
    for (kind, f), h in batch_mean_hinges.items():
        if h < 0:
            raise ConfigError("hinged losses must be >= 0")
        if kind == "A":
            la[f] = max(la[f] + state.eta_a[f] * h, 0.0)
        else:
            li[f] = max(li[f] + state.eta_i[f] * h, 0.0)
    return DualState(la, li, dict(state.eta_a), dict(state.eta_i))


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-5            # primal (distillation) rate
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 50
    seed: int = 0
    ratio: float = 0.5
    margins: Margins | None = None
    dual_init: dict | None = None       # ("A"|"I", factor) -> lambda^0
    dual_rates: dict | None = None      # ("A"|"I", factor) -> eta
    spectral_clip_enabled: bool = False
    spectral_clip_theta: float = 1.0
    early_stop_hinge: float = 1e-4
    early_stop_dloss: float = 1e-5
    early_stop_patience: int = 3
    log_batches: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")


# Desk-scale defaults mirroring the two-factor schema: tight margins and
# aggressive dual rates on the pattern factor, looser on the overlay factor.
DEFAULT_MARGINS = {"haze": (0.1, 0.1), "backdrop": (0.0001, 0.0001)}
DEFAULT_DUAL_INIT = {"haze": (2.0, 2.0), "backdrop": (10.0, 10.0)}
DEFAULT_DUAL_RATES = {"haze": (0.05, 0.05), "backdrop": (0.5, 0.5)}


def _resolve_duals(config: TrainConfig, factors):
    margins = config.margins
    if margins is None:
        margins = Margins({f: DEFAULT_MARGINS.get(f, (0.1, 0.1))[0] for f in factors},
                          {f: DEFAULT_MARGINS.get(f, (0.1, 0.1))[1] for f in factors})
    init = config.dual_init or {}
    rates = config.dual_rates or {}
    la = {f: init.get(("A", f), DEFAULT_DUAL_INIT.get(f, (1.0, 1.0))[0]) for f in factors}
    li = {f: init.get(("I", f), DEFAULT_DUAL_INIT.get(f, (1.0, 1.0))[1]) for f in factors}
    ea = {f: rates.get(("A", f), DEFAULT_DUAL_RATES.get(f, (0.05, 0.05))[0]) for f in factors}
    ei = {f: rates.get(("I", f), DEFAULT_DUAL_RATES.get(f, (0.05, 0.05))[1]) for f in factors}
    return margins, DualState(la, li, ea, ei)


@dataclass
class DualTrace:
    factors: list
    records: list = field(default_factory=list)     # one dict per epoch
    batch_records: list = field(default_factory=list)

    def to_csv(self, path: str, meta: dict | None = None) -> None:
        cols = ["epoch", "L_D"]
        for f in self.factors:
            cols += [f"hinge_A_{f}", f"hinge_I_{f}"]
        for f in self.factors:
            cols += [f"lambda_A_{f}", f"lambda_I_{f}"]
        extra = {k: str(v) for k, v in (meta or {}).items()}
        cols += list(extra)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for rec in self.records:
                row = {c: repr(rec[c]) if isinstance(rec[c], float) else rec[c]
                       for c in cols if c in rec}
                writer.writerow(row | extra)


def _cache_teacher_latents(teacher: EncoderModel, images: np.ndarray,
                           indices, batch: int = 64):
    """Teacher is frozen, so encode each needed image exactly once."""
    idx = sorted(set(indices))
    mu = np.zeros((len(images), teacher.latent_dim))
    lv = np.zeros((len(images), teacher.latent_dim))
    for s in range(0, len(idx), batch):
        chunk = idx[s:s + batch]
        lat = encode(teacher, images[chunk])
        mu[chunk] = lat.mu.data
        lv[chunk] = lat.logvar.data
    return mu, lv


def distill(teacher: EncoderModel, student: EncoderModel | None,
            dataset: FactorDataset, config: TrainConfig):
    """Primal-dual distillation of a compressed student from a frozen teacher.

    Returns (student, DualTrace).  student=None builds one by compressing the
    teacher at config.ratio.
    """
    factors = [s.name for s in dataset.specs]
    for f in factors:
        if f not in dataset.pair_sets:
            raise ConfigError(f"dataset has no pair set for factor '{f}'")
    teacher.freeze()
    if student is None:
        student = compress(teacher, config.ratio, seed=config.seed + 1)

    margins, duals = _resolve_duals(config, factors)
    rng = Rng(config.seed)
    train_idx = dataset.indices("train")
    images = dataset.images
    n = student.latent_dim
    rep = student.rep_dims

    needed = list(train_idx)
    for f in factors:
        for i, j in dataset.pair_sets[f].pairs:
            needed += [i, j]
    t_mu, t_lv = _cache_teacher_latents(teacher, images, needed)

    params = student.trainable()
    adam = AdamState(beta1=config.beta1, beta2=config.beta2)
    trace = DualTrace(factors)
    flat_hist = []

    for epoch in range(config.epochs):
        perm = rng.permutation(len(train_idx))
        pair_pick = {f: rng.integers(len(dataset.pair_sets[f].pairs),
                                     size=len(train_idx))
                     for f in factors}
        ep_ld, ep_h = [], {("A", f): [] for f in factors} | {("I", f): [] for f in factors}

        for start in range(0, len(perm), config.batch_size):
            pos = perm[start:start + config.batch_size]
            xs = np.array([train_idx[p] for p in pos])
            b = len(xs)

            try:
                s_lat = encode(student, images[xs])
                t_lat = _const_latent(t_mu[xs], t_lv[xs])
                ld = bounded(distill_loss(t_lat, s_lat), "D")        # (b,)
                total = ld
                mean_hinges = {}
                for f in factors:
                    pairs = dataset.pair_sets[f].pairs
                    pi = [pairs[pair_pick[f][p]] for p in pos]
                    ia = np.array([p[0] for p in pi])
                    ib = np.array([p[1] for p in pi])
                    # one epsilon per pair, shared across (x, x')
                    eps = rng.normal((b, n))
                    a = sample(_const_latent(t_mu[ia], t_lv[ia]), eps=eps)
                    a2 = sample(_const_latent(t_mu[ib], t_lv[ib]), eps=eps)
                    sl = encode(student, images[ia])
                    sl2 = encode(student, images[ib])
                    h_a = hinge(bounded(adapt_loss(a, sl, a2, sl2, rep[f]), "A"),
                                margins.adapt[f])
                    h_i = hinge(bounded(isolation_loss(a, sl, a2, sl2, rep[f], n), "I"),
                                margins.isolate[f])
                    total = total + duals.lambda_a[f] * h_a + duals.lambda_i[f] * h_i
                    mean_hinges[("A", f)] = float(h_a.data.mean())
                    mean_hinges[("I", f)] = float(h_i.data.mean())
                root = total.mean()
                grads = grad(root, params)
                adam_step(params, grads, adam, config.lr)
            except NumericError as e:
                raise TrainingError(f"non-finite loss at epoch {epoch}: {e}") from e

            prev = duals
            duals = dual_step(duals, mean_hinges)
            if config.spectral_clip_enabled:
                _clip_model(student, config.spectral_clip_theta)
            ep_ld.append(float(ld.data.mean()))
            for key, h in mean_hinges.items():
                ep_h[key].append(h)
            if config.log_batches:
                trace.batch_records.append({
                    "epoch": epoch, "hinges": mean_hinges,
                    "lambda_before": (dict(prev.lambda_a), dict(prev.lambda_i)),
                    "lambda_after": (dict(duals.lambda_a), dict(duals.lambda_i)),
                })

        rec = {"epoch": epoch, "L_D": float(np.mean(ep_ld))}
        for f in factors:
            rec[f"hinge_A_{f}"] = float(np.mean(ep_h[("A", f)]))
            rec[f"hinge_I_{f}"] = float(np.mean(ep_h[("I", f)]))
            rec[f"lambda_A_{f}"] = duals.lambda_a[f]
            rec[f"lambda_I_{f}"] = duals.lambda_i[f]
        trace.records.append(rec)

        flat_hist.append(rec["L_D"])
        hinges_ok = all(rec[f"hinge_{k}_{f}"] < config.early_stop_hinge
                        for f in factors for k in ("A", "I"))
        if hinges_ok and len(flat_hist) > config.early_stop_patience:
            window = flat_hist[-(config.early_stop_patience + 1):]
            if max(window) - min(window) < config.early_stop_dloss:
                break

    return student, trace


def _const_latent(mu: np.ndarray, lv: np.ndarray):
    from .encoder import GaussianLatent
    return GaussianLatent(Tensor(mu), Tensor(lv))


def _clip_model(model: EncoderModel, theta: float) -> None:
    from .spectral import clip_singular_values, conv_singular_values
    spatial = model.layer_spatial()
    for li, spec in enumerate(model.layers):
        eff = model.effective_kernel(li)
        if spec.standardized:
            # effective operator norm is linear in the gain (standardization
            # is scale-invariant in W), so clip through the gain
            sn = (conv_singular_values(eff, spatial[li]).max if spec.kind == "conv"
                  else float(np.linalg.svd(eff, compute_uv=False)[0]))
            if sn > theta:
                spec.gain *= theta / sn
        elif spec.kind == "conv":
            model.params[li]["w"].data = clip_singular_values(eff, spatial[li], theta)
        else:
            sv = np.linalg.svd(eff, compute_uv=False)
            if sv.size and sv[0] > theta:
                k4 = clip_singular_values(eff[:, :, None, None], (1, 1), theta)
                model.params[li]["w"].data = k4[:, :, 0, 0]


# ---------------------------------------------------------------------------
# Teacher pre-training: VAE objective plus weak pair alignment so that each
# factor's representative dims react to that factor and other dims do not.
# ---------------------------------------------------------------------------

@dataclass
class TeacherConfig:
    arch: dict = field(default_factory=dict)    # forwarded to build_teacher
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    decoder_hidden: int = 128
    kl_weight: float = 0.005
    recon_weight: float = 1.0
    align_penalty: float = 2.0
    align_reward: float = 0.5


def _init_linear(rng: Rng, n_out: int, n_in: int):
    limit = np.sqrt(3.0 / n_in)
    return (Tensor(rng.uniform(-limit, limit, (n_out, n_in)), requires_grad=True),
            Tensor(np.zeros(n_out), requires_grad=True))


def train_teacher(dataset: FactorDataset, config: TeacherConfig) -> EncoderModel:
    """Train a partially disentangled teacher and return its encoder.

    Objective: reconstruction + KL to a standard normal, plus per-factor
    alignment on match pairs (penalize mean-shift outside the factor's
    representative dims, reward it inside).
    """
    factors = [s.name for s in dataset.specs]
    for f in factors:
        if f not in dataset.pair_sets:
            raise ConfigError(f"dataset has no pair set for factor '{f}'")

    arch = dict(config.arch)
    arch.setdefault("seed", config.seed)
    model = build_teacher(arch)
    rng = Rng(config.seed + 7919)
    c, h, w = model.input_shape
    pix = c * h * w
    n = model.latent_dim

    dw1, db1 = _init_linear(rng, config.decoder_hidden, n)
    dw2, db2 = _init_linear(rng, pix, config.decoder_hidden)
    dec = [dw1, db1, dw2, db2]

    params = model.trainable() + dec
    adam = AdamState(beta1=config.beta1, beta2=config.beta2)
    train_idx = dataset.indices("train")
    images = dataset.images

    for epoch in range(config.epochs):
        perm = rng.permutation(len(train_idx))
        pair_pick = {f: rng.integers(len(dataset.pair_sets[f].pairs),
                                     size=len(train_idx))
                     for f in factors}
        for start in range(0, len(perm), config.batch_size):
            pos = perm[start:start + config.batch_size]
            xs = np.array([train_idx[p] for p in pos])
            b = len(xs)
            try:
                lat = encode(model, images[xs])
                eps = Tensor(rng.normal((b, n)))
                z = lat.mu + eps * (lat.logvar * 0.5).exp()
                hid = (z @ dw1.T + db1).leaky_relu(0.2)
                recon = hid @ dw2.T + db2
                target = images[xs].reshape(b, -1)
                mse = ((recon - Tensor(target)) ** 2).mean()
                v = lat.logvar.exp()
                kl = ((lat.mu ** 2 + v - 1.0 - lat.logvar).sum(axis=-1) * 0.5).mean()
                loss = config.recon_weight * mse + config.kl_weight * kl

                for f in factors:
                    pairs = dataset.pair_sets[f].pairs
                    pi = [pairs[pair_pick[f][p]] for p in pos]
                    ia = np.array([p[0] for p in pi])
                    ib = np.array([p[1] for p in pi])
                    la = encode(model, images[ia])
                    lb = encode(model, images[ib])
                    dmu = la.mu - lb.mu
                    zf = model.rep_dims[f]
                    comp = [k for k in range(n) if k not in set(zf)]
                    pen = (dmu.take(comp, axis=-1) ** 2).mean()
                    rew = dmu.take(zf, axis=-1).abs().mean()
                    loss = loss + config.align_penalty * pen - config.align_reward * rew
                grads = grad(loss, params)
                adam_step(params, grads, adam, config.lr)
            except NumericError as e:
                raise TrainingError(f"teacher diverged at epoch {epoch}: {e}") from e

    return model
