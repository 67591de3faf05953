"""Gaussian encoder models: teacher/student architectures, ratio compression,
scaled weight standardization (batch-norm folding), latent heads,
reparameterized sampling, and the binary weight format.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor, Rng, conv2d, ContractError
from .data import ConfigError

LOGVAR_BOUND = 4.0
DEFAULT_GAIN = 1.7
DEFAULT_SLOPE = 0.2
MAGIC = b"DDE1"


class CorruptWeightsError(RuntimeError):
    """Weight file failed its checksum or is truncated."""


@dataclass
class LayerSpec:
    kind: str                   # "conv" | "linear"
    in_width: int
    out_width: int
    k: int = 0
    stride: int = 1
    padding: int = 0
    slope: float = DEFAULT_SLOPE
    standardized: bool = False
    gain: float = DEFAULT_GAIN

    def __post_init__(self):
        if self.in_width < 1 or self.out_width < 1:
            raise ConfigError("layer widths must be >= 1")
        if self.gain <= 0:
            raise ConfigError("gain must be positive")


@dataclass
class GaussianLatent:
    """Per-sample latent mean and log-variance (last axis is the latent dim)."""
    mu: Tensor
    logvar: Tensor


def standardize(w: Tensor, gain: float) -> Tensor:
    """Scaled weight standardization over the fan-in dimensions.

    Returns gain * (W - mean) / (std * sqrt(fan_in)); a 1e-6 stabilizer is
    added to the denominator for degenerate (constant) filters.  Runs on the
    tape so gradients flow through the normalization.
    """
    axes = tuple(range(1, w.data.ndim))
    if not axes:
        raise ContractError("standardize expects a weight with >=1 input dim")
    alpha = int(np.prod([w.data.shape[a] for a in axes]))
    mu = w.mean(axis=axes[0], keepdims=True) if len(axes) == 1 else None
    if mu is None:
        mu = w
        for a in axes:
            mu = mu.mean(axis=a, keepdims=True)
    centered = w - mu
    var = (centered * centered)
    for a in axes:
        var = var.mean(axis=a, keepdims=True)
    std = (var + 1e-24).sqrt()
    stab = (std.data < 1e-12) * 1e-6
    denom = std * math.sqrt(alpha) + Tensor(stab)
    return centered * (gain / denom)


class EncoderModel:
    """Layer specs + weights for a teacher or student Gaussian encoder.

    The trunk is a stack of (standardized) conv layers with leaky-ReLU; the
    last two layers are parallel linear heads producing mu and logvar of
    size N.  An effective-kernel snapshot at initialization supports
    operator-drift tracking.
    """

    def __init__(self, input_shape, layers, latent_dim, rep_dims, seed=0,
                 init_norm_slack=4898.0):
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        self.latent_dim = int(latent_dim)
        self.rep_dims = {f: sorted(int(i) for i in ix) for f, ix in rep_dims.items()}
        self.init_norm_slack = float(init_norm_slack)
        self._validate_rep_dims()
        self.params = []
        self._init_params(Rng(seed))
        self.snapshot = [self.effective_kernel(i).copy() for i in range(len(self.layers))]

    # -- construction ----------------------------------------------------

    def _validate_rep_dims(self):
        seen = set()
        for f, ix in self.rep_dims.items():
            if not ix:
                raise ConfigError(f"factor '{f}' has no representative dims")
            s = set(ix)
            if not s <= set(range(self.latent_dim)):
                raise ConfigError(f"factor '{f}' representative dims out of range")
            if s & seen:
                raise ConfigError("representative dims must be disjoint across factors")
            seen |= s

    def _init_params(self, rng: Rng):
        from .spectral import clip_singular_values, conv_singular_values
        spatial = self.layer_spatial()
        for li, spec in enumerate(self.layers):
            if spec.kind == "conv":
                shape = (spec.out_width, spec.in_width, spec.k, spec.k)
            else:
                shape = (spec.out_width, spec.in_width)
            fan_in = int(np.prod(shape[1:]))
            limit = math.sqrt(3.0 / fan_in)
            w = rng.uniform(-limit, limit, shape)
            # bound the initial operator norm by 1 + slack
            bound = 1.0 + self.init_norm_slack
            if spec.kind == "linear" and not spec.standardized:
                sv = np.linalg.svd(w, compute_uv=False)
                if sv[0] > bound:
                    w = clip_singular_values(w[:, :, None, None], (1, 1), bound)[:, :, 0, 0]
            elif spec.standardized:
                # standardization is scale-invariant in W, so an oversized
                # initial operator can only be shrunk through the gain
                eff = _standardized_data(w, spec.gain)
                sn = conv_singular_values(eff, spatial[li]).values[0] if spec.kind == "conv" \
                    else np.linalg.svd(eff, compute_uv=False)[0]
                if sn > bound:
                    spec.gain *= bound / sn
            self.params.append({
                "w": Tensor(w, requires_grad=True),
                "b": Tensor(np.zeros(spec.out_width), requires_grad=True),
            })

    def layer_spatial(self) -> list:
        """Input spatial size (H, W) seen by each layer."""
        c, h, w = self.input_shape
        out = []
        for spec in self.layers:
            out.append((h, w))
            if spec.kind == "conv":
                h = (h + 2 * spec.padding - spec.k) // spec.stride + 1
                w = (w + 2 * spec.padding - spec.k) // spec.stride + 1
            else:
                h = w = 1
        return out

    # -- accounting -------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p["w"].size + p["b"].size for p in self.params)

    def parameter_bytes(self) -> int:
        return self.parameter_count() * 8

    def trainable(self) -> list:
        out = []
        for p in self.params:
            out.extend([p["w"], p["b"]])
        return out

    def freeze(self) -> None:
        for t in self.trainable():
            t.requires_grad = False

    def effective_kernel(self, li: int) -> np.ndarray:
        """The operator actually applied by layer li (standardized if set)."""
        spec = self.layers[li]
        w = self.params[li]["w"].data
        return _standardized_data(w, spec.gain) if spec.standardized else w.copy()


def _standardized_data(w: np.ndarray, gain: float) -> np.ndarray:
    axes = tuple(range(1, w.ndim))
    alpha = int(np.prod([w.shape[a] for a in axes]))
    mu = w.mean(axis=axes, keepdims=True)
    std = np.sqrt(((w - mu) ** 2).mean(axis=axes, keepdims=True) + 1e-24)
    denom = std * math.sqrt(alpha) + (std < 1e-12) * 1e-6
    return gain * (w - mu) / denom


def build_teacher(config: dict | None = None) -> EncoderModel:
    """Five standardized stride-2 conv layers (32..512 wide) plus mu/logvar
    linear heads, N=30 by default."""
    cfg = dict(
        input_shape=(3, 32, 32),
        widths=(32, 64, 128, 256, 512),
        kernel=3, stride=2, padding=1,
        latent_dim=30,
        rep_dims={"haze": [3], "backdrop": [6]},
        gain=DEFAULT_GAIN, slope=DEFAULT_SLOPE,
        seed=0, init_norm_slack=4898.0,
    )
    cfg.update(config or {})
    layers = []
    cin = cfg["input_shape"][0]
    for wdt in cfg["widths"]:
        if wdt < 1:
            raise ConfigError("widths must be positive")
        layers.append(LayerSpec("conv", cin, int(wdt), k=cfg["kernel"],
                                stride=cfg["stride"], padding=cfg["padding"],
                                slope=cfg["slope"], standardized=True,
                                gain=cfg["gain"]))
        cin = int(wdt)
    # feature dim after the trunk
    model_shape = cfg["input_shape"]
    h, w = model_shape[1], model_shape[2]
    for _ in cfg["widths"]:
        h = (h + 2 * cfg["padding"] - cfg["kernel"]) // cfg["stride"] + 1
        w = (w + 2 * cfg["padding"] - cfg["kernel"]) // cfg["stride"] + 1
    feat = cin * h * w
    n = int(cfg["latent_dim"])
    layers.append(LayerSpec("linear", feat, n))   # mu head
    layers.append(LayerSpec("linear", feat, n))   # logvar head
    return EncoderModel(cfg["input_shape"], layers, n, cfg["rep_dims"],
                        seed=cfg["seed"], init_norm_slack=cfg["init_norm_slack"])


def compress(teacher: EncoderModel, r: float, seed: int = 1) -> EncoderModel:
    """Shrink every layer width by ratio r (latent size and representative
    dims unchanged); fresh initialization with its own snapshot."""
    if not 0.1 <= r <= 0.9:
        raise ConfigError(f"compression ratio {r} outside [0.1, 0.9]")
    layers = []
    prev = teacher.input_shape[0]
    for spec in teacher.layers:
        if spec.kind == "conv":
            wdt = max(1, math.ceil((1.0 - r) * spec.out_width))
            layers.append(LayerSpec("conv", prev, wdt, k=spec.k, stride=spec.stride,
                                    padding=spec.padding, slope=spec.slope,
                                    standardized=spec.standardized, gain=spec.gain))
            prev = wdt
        else:
            # heads keep the latent size; their fan-in follows the shrunk trunk
            # (conv geometry, and hence output spatial size, is unchanged)
            h, wd_ = teacher.input_shape[1], teacher.input_shape[2]
            for s in teacher.layers:
                if s.kind == "conv":
                    h = (h + 2 * s.padding - s.k) // s.stride + 1
                    wd_ = (wd_ + 2 * s.padding - s.k) // s.stride + 1
            layers.append(LayerSpec("linear", prev * h * wd_, teacher.latent_dim,
                                    slope=spec.slope, standardized=spec.standardized,
                                    gain=spec.gain))
    return EncoderModel(teacher.input_shape, layers, teacher.latent_dim,
                        teacher.rep_dims, seed=seed,
                        init_norm_slack=teacher.init_norm_slack)


def encode(model: EncoderModel, x) -> GaussianLatent:
    """Pure function of (weights, x); logvar is smoothly bounded to
    [-LOGVAR_BOUND, LOGVAR_BOUND] via tanh.

    Accepts a Tensor or array of shape (C,H,W) or (B,C,H,W).
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    batched = x.data.ndim == 4
    h = x if batched else x.reshape(1, *x.shape)
    head_inputs = None
    heads = []
    for spec, p in zip(model.layers, model.params):
        w = standardize(p["w"], spec.gain) if spec.standardized else p["w"]
        if spec.kind == "conv":
            h = conv2d(h, w, stride=spec.stride, padding=spec.padding)
            h = h + p["b"].reshape(1, -1, 1, 1)
            h = h.leaky_relu(spec.slope)
        else:
            if head_inputs is None:
                head_inputs = h.reshape(h.shape[0], -1)
            heads.append(head_inputs @ w.T + p["b"])
    if len(heads) != 2:
        raise ConfigError("encoder needs exactly two linear heads (mu, logvar)")
    # smooth tanh bound: keeps gradient alive at the rails and stops the
    # variance head from inflating its way out of the pairwise constraints
    mu = heads[0]
    logvar = (heads[1] * (1.0 / LOGVAR_BOUND)).tanh() * LOGVAR_BOUND
    if not batched:
        mu, logvar = mu.reshape(-1), logvar.reshape(-1)
    return GaussianLatent(mu, logvar)


def sample(latent: GaussianLatent, rng: Rng | None = None, eps=None,
           sigma_is_variance: bool = False) -> Tensor:
    """Reparameterized draw a = eps * sigma + mu from a Gaussian latent.

    sigma is the standard deviation exp(logvar/2) by default; set
    sigma_is_variance for the alternative reading.  The result is a
    constant (off-tape) tensor.
    """
    if eps is None:
        eps = rng.normal(latent.mu.shape)
    else:
        eps = np.asarray(eps, dtype=np.float64)
    scale = np.exp(latent.logvar.data if sigma_is_variance else latent.logvar.data / 2.0)
    return Tensor(eps * scale + latent.mu.data)


# ---------------------------------------------------------------------------
# Weight file: magic "DDE1", uint64 header length, JSON header, float64 LE
# payload (per layer: weight then bias, then the snapshot kernels).
# ---------------------------------------------------------------------------

def save_weights(model: EncoderModel, path: str, meta: dict | None = None) -> None:
    chunks = []
    for p in model.params:
        chunks.append(p["w"].data.astype("<f8").tobytes())
        chunks.append(p["b"].data.astype("<f8").tobytes())
    for s in model.snapshot:
        chunks.append(s.astype("<f8").tobytes())
    payload = b"".join(chunks)
    header = {
        "layers": [asdict(s) for s in model.layers],
        "latent_dim": model.latent_dim,
        "rep_dims": model.rep_dims,
        "input_shape": list(model.input_shape),
        "init_norm_slack": model.init_norm_slack,
        "parameter_count": model.parameter_count(),
        "crc32": zlib.crc32(payload) & 0xFFFFFFFF,
    }
    if meta:
        header["meta"] = meta
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hjson)))
        f.write(hjson)
        f.write(payload)


def load_weights(path: str) -> EncoderModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CorruptWeightsError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    payload = blob[12 + hlen:]
    if (zlib.crc32(payload) & 0xFFFFFFFF) != header["crc32"]:
        raise CorruptWeightsError(f"{path}: checksum mismatch")

    layers = [LayerSpec(**s) for s in header["layers"]]
    model = EncoderModel.__new__(EncoderModel)
    model.input_shape = tuple(header["input_shape"])
    model.layers = layers
    model.latent_dim = int(header["latent_dim"])
    model.rep_dims = {f: [int(i) for i in ix] for f, ix in header["rep_dims"].items()}
    model.init_norm_slack = float(header["init_norm_slack"])
    model._validate_rep_dims()

    off = 0

    def read(shape):
        nonlocal off
        n = int(np.prod(shape)) * 8
        if off + n > len(payload):
            raise CorruptWeightsError(f"{path}: truncated payload")
        arr = np.frombuffer(payload[off:off + n], dtype="<f8").reshape(shape).copy()
        off += n
        return arr

    model.params = []
    for spec in layers:
        shape = ((spec.out_width, spec.in_width, spec.k, spec.k)
                 if spec.kind == "conv" else (spec.out_width, spec.in_width))
        model.params.append({
            "w": Tensor(read(shape), requires_grad=True),
            "b": Tensor(read((spec.out_width,)), requires_grad=True),
        })
    model.snapshot = []
    for spec in layers:
        shape = ((spec.out_width, spec.in_width, spec.k, spec.k)
                 if spec.kind == "conv" else (spec.out_width, spec.in_width))
        model.snapshot.append(read(shape))
    if model.parameter_count() != header["parameter_count"]:
        raise CorruptWeightsError(f"{path}: parameter count mismatch")
    return model
