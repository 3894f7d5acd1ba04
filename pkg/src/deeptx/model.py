"""DeepTx channel predictor: a pre-activation ResNet of dilated depthwise-separable convs.

Data layout is channels-last, (batch, S, F, channels).  The network maps
stacked UL channel estimates plus a constant tau plane to a predicted
(S, F, N_R, N_T) complex channel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_WIDTHS = (128, 128, 128, 256, 256, 256, 256, 256, 128, 128, 128)
DEFAULT_DILATIONS = ((1, 1), (1, 1), (2, 3), (2, 3), (3, 5), (3, 5), (3, 5), (2, 3), (2, 3), (1, 1), (1, 1))
SHORT_DILATIONS = ((1, 1), (1, 1), (1, 2), (1, 2), (2, 3), (2, 3), (2, 3), (1, 2), (1, 2), (1, 1), (1, 1))
NORM_EPS = 1e-3
NORM_MOMENTUM = 0.99


def _spread(pattern, n):
    """Resample an 11-block dilation schedule to n blocks."""
    if n == 0:
        return ()
    if n == 1:
        return (pattern[0],)
    idx = np.round(np.linspace(0, len(pattern) - 1, n)).astype(int)
    return tuple(tuple(pattern[i]) for i in idx)


@dataclass
class ModelConfig:
    widths: tuple = DEFAULT_WIDTHS
    dilations: tuple = DEFAULT_DILATIONS
    kernel: tuple = (3, 3)
    n_rx: int = 4
    n_tx: int = 2
    tau_max: int = 6
    history: int = 1
    output_scale: float = 1e-2
    input_skip: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.dilations = tuple(tuple(int(v) for v in d) for d in self.dilations)
        self.kernel = tuple(self.kernel)
        if len(self.widths) != len(self.dilations):
            raise ValueError("widths and dilations must have one entry per block")
        if not 1 <= self.history <= 3:
            raise ValueError("history must be 1..3 UL slots")

    @property
    def n_blocks(self) -> int:
        return len(self.widths)

    @property
    def in_channels(self) -> int:
        return 2 * self.n_rx * self.n_tx * self.history + 1

    @property
    def out_channels(self) -> int:
        return 2 * self.n_rx * self.n_tx

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def variant(name: str, **overrides) -> ModelConfig:
    """Named architectures from the ablation table."""
    d = DEFAULT_DILATIONS
    table = {
        "deeptx": (DEFAULT_WIDTHS, d),
        "xl": ((256, 256, 256, 256, 512, 512, 512, 512, 512, 256, 256, 256, 256), _spread(d, 13)),
        "l": ((256, 256, 256, 512, 512, 512, 512, 512, 256, 256, 256), d),
        "s": ((64, 64, 128, 256, 256, 128, 64, 64, 64), _spread(d, 9)),
        "xs": ((32, 32, 64, 64, 64, 64, 64, 32, 32), _spread(d, 9)),
        "xxs": ((32, 32, 64, 64, 64, 32, 32), _spread(d, 7)),
        "shorter_dilations": (DEFAULT_WIDTHS, SHORT_DILATIONS),
        "no_dilations": (DEFAULT_WIDTHS, ((1, 1),) * 11),
    }
    key = name.lower()
    if key in table:
        widths, dil = table[key]
    elif "x" in key and key.replace("x", "").isdigit():
        w, n = (int(v) for v in key.split("x"))
        widths, dil = (w,) * n, _spread(d, n)
    else:
        raise ValueError(f"unknown architecture {name!r}")
    return ModelConfig(widths=widths, dilations=dil, **overrides)


def param_shapes(cfg: ModelConfig) -> dict:
    """Ordered trainable parameter names and shapes."""
    shapes = {}
    ks, kf = cfg.kernel
    if not cfg.widths:
        shapes["conv_out.w"] = (cfg.in_channels, cfg.out_channels)
        shapes["conv_out.b"] = (cfg.out_channels,)
        return shapes
    c = cfg.widths[0]
    shapes["conv_in.w"] = (cfg.in_channels, c)
    shapes["conv_in.b"] = (c,)
    for i, w in enumerate(cfg.widths):
        p = f"block{i}."
        shapes[p + "norm1.gamma"] = (c,)
        shapes[p + "norm1.beta"] = (c,)
        shapes[p + "dw1.k"] = (ks, kf, c)
        shapes[p + "pw1.w"] = (c, w)
        shapes[p + "norm2.gamma"] = (w,)
        shapes[p + "norm2.beta"] = (w,)
        shapes[p + "dw2.k"] = (ks, kf, w)
        shapes[p + "dw2.b"] = (w,)
        shapes[p + "pw2.w"] = (w, w)
        shapes[p + "pw2.b"] = (w,)
        if w != c:
            shapes[p + "proj.w"] = (c, w)
            shapes[p + "proj.b"] = (w,)
        c = w
    shapes["conv_out.w"] = (c, cfg.out_channels)
    shapes["conv_out.b"] = (cfg.out_channels,)
    return shapes


def buffer_shapes(cfg: ModelConfig) -> dict:
    """Running mean and variance of every normalization layer."""
    shapes = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            base = name[: -len(".gamma")]
            shapes[base + ".mean"] = shape
            shapes[base + ".var"] = shape
    return shapes


def trainable_param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def param_count(cfg: ModelConfig) -> int:
    """All stored scalars of the model: trainable weights plus normalization statistics."""
    return trainable_param_count(cfg) + int(sum(np.prod(s) for s in buffer_shapes(cfg).values()))


def receptive_field(cfg: ModelConfig) -> tuple:
    """Receptive field (symbols, subcarriers) of one output RE."""
    ks, kf = cfg.kernel
    rs = 1 + sum(2 * (ks - 1) * d[0] for d in cfg.dilations)
    rf = 1 + sum(2 * (kf - 1) * d[1] for d in cfg.dilations)
    return rs, rf


def block_multiplies(c_in: int, c_out: int, kernel=(3, 3)) -> tuple:
    """Per-RE multiplies of one block vs. the same block with full convolutions."""
    taps = kernel[0] * kernel[1]
    separable = taps * c_in + c_in * c_out + taps * c_out + c_out * c_out
    full = taps * c_in * c_out + taps * c_out * c_out
    return separable, full


@dataclass
class DeepTxModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=None) -> "DeepTxModel":
        dtype = np.dtype(dtype or ad.get_dtype())
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".gamma"):
                value = np.ones(shape)
            elif name.endswith((".b", ".beta")):
                value = np.zeros(shape)
            else:
                fan_in = shape[0] if len(shape) == 2 else shape[0] * shape[1]
                limit = np.sqrt(3.0 / fan_in)
                if name.startswith("conv_out"):
                    limit *= config.output_scale
                value = rng.uniform(-limit, limit, size=shape)
            params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
        buffers = {}
        for name, shape in buffer_shapes(config).items():
            fill = np.ones if name.endswith(".var") else np.zeros
            buffers[name] = fill(shape, dtype=dtype)
        return cls(config, params, buffers)

    def parameters(self):
        return list(self.params.values())

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "DeepTxModel":
        return DeepTxModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> "DeepTxModel":
        return DeepTxModel(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )


# ---------------------------------------------------------------------------
# input assembly

def complex_to_planes(h: np.ndarray) -> np.ndarray:
    """(..., N_R, N_T) complex -> (..., 2*N_R*N_T) real: real parts, then imaginary."""
    flat = h.reshape(h.shape[:-2] + (-1,))
    return np.concatenate([flat.real, flat.imag], axis=-1)


def preprocess(estimates, tau, tau_max: int, history: int | None = None) -> np.ndarray:
    """Assemble the network input from 1-3 UL channel estimates and tau.

    ``estimates`` is a sequence of complex arrays (..., S, F, N_R, N_T), oldest
    first.  ``tau`` is a scalar or one value per leading batch element.  The
    channel planes are not normalized.
    """
    if isinstance(estimates, np.ndarray):
        estimates = [estimates]
    estimates = list(estimates)
    if history is not None and len(estimates) != history:
        raise ValueError(f"expected {history} UL estimates, got {len(estimates)}")
    shape = estimates[0].shape
    if any(e.shape != shape for e in estimates):
        raise ValueError("all UL estimates must share one shape")
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 1) or np.any(tau > tau_max):
        raise ValueError(f"tau must be in [1, {tau_max}]")
    planes = [complex_to_planes(e) for e in estimates]
    grid = shape[:-2]
    tau_plane = np.broadcast_to((tau / tau_max).reshape(tau.shape + (1,) * (len(grid) - tau.ndim)), grid)
    return np.concatenate(planes + [tau_plane[..., None]], axis=-1).astype(ad.get_dtype())


# ---------------------------------------------------------------------------
# forward pass

def _norm(model, name, x: Tensor, training: bool) -> Tensor:
    gamma = model.params[name + ".gamma"]
    beta = model.params[name + ".beta"]
    if training:
        data = x.data
        axes = tuple(range(data.ndim - 1))
        mean = data.mean(axis=axes)
        var = data.var(axis=axes)
        m = NORM_MOMENTUM
        for key, stat in ((".mean", mean), (".var", var)):
            buf = model.buffers[name + key]
            model.buffers[name + key] = (m * buf + (1 - m) * stat).astype(buf.dtype)
        return ad.batch_norm(x, gamma, beta, eps=NORM_EPS)
    mean = model.buffers[name + ".mean"]
    inv = 1.0 / np.sqrt(model.buffers[name + ".var"] + NORM_EPS)
    return (x - Tensor(mean)) * (gamma * Tensor(inv)) + beta


def _check_finite(t: Tensor, where: str):
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite activation in {where}")


def forward_raw(model: DeepTxModel, inputs, training: bool = False) -> Tensor:
    """Network output before the complex reshape, (B, S, F, 2*N_R*N_T)."""
    cfg = model.config
    p = model.params
    x = ad.as_tensor(inputs)
    if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
        raise ad.ShapeError(f"forward: expected (B, S, F, {cfg.in_channels}) input, got {x.shape}")
    if not cfg.widths:
        return ad.conv2d_pointwise(x, p["conv_out.w"], p["conv_out.b"])
    h = ad.conv2d_pointwise(x, p["conv_in.w"], p["conv_in.b"])
    c = cfg.widths[0]
    for i, (w, dil) in enumerate(zip(cfg.widths, cfg.dilations)):
        b = f"block{i}."
        zeros_c = Tensor(np.zeros(c, dtype=h.data.dtype))
        zeros_w = Tensor(np.zeros(w, dtype=h.data.dtype))
        r = ad.relu(_norm(model, b + "norm1", h, training))
        r = ad.conv2d_depthwise(r, p[b + "dw1.k"], zeros_c, dilation=dil)
        r = ad.conv2d_pointwise(r, p[b + "pw1.w"], zeros_w)
        r = ad.relu(_norm(model, b + "norm2", r, training))
        r = ad.conv2d_depthwise(r, p[b + "dw2.k"], p[b + "dw2.b"], dilation=dil)
        r = ad.conv2d_pointwise(r, p[b + "pw2.w"], p[b + "pw2.b"])
        skip = h if w == c else ad.conv2d_pointwise(h, p[b + "proj.w"], p[b + "proj.b"])
        h = skip + r
        _check_finite(h, f"ResNet block {i + 1}")
        c = w
    out = ad.conv2d_pointwise(h, p["conv_out.w"], p["conv_out.b"])
    if cfg.input_skip:
        n = cfg.out_channels
        latest = x.data[..., (cfg.history - 1) * n: cfg.history * n]
        out = out + Tensor(latest)
    _check_finite(out, "output convolution")
    return out


def planes_to_complex_tensor(out: Tensor, n_rx: int, n_tx: int) -> Tensor:
    """(..., 2*N_R*N_T) real planes -> (..., N_R, N_T, 2) complex tensor."""
    lead = out.shape[:-1]
    t = ad.reshape(out, lead + (2, n_rx, n_tx))
    nd = len(lead)
    axes = tuple(range(nd)) + (nd + 1, nd + 2, nd)
    return ad.transpose(t, axes)


def forward(model: DeepTxModel, inputs, training: bool = False) -> Tensor:
    """Predicted UL-oriented channel, complex tensor (B, S, F, N_R, N_T, 2)."""
    out = forward_raw(model, inputs, training)
    return planes_to_complex_tensor(out, model.config.n_rx, model.config.n_tx)


def l2_activation_penalty(output: Tensor, weight: float) -> Tensor:
    """weight * mean |z|^2 over the complex entries of ``output``."""
    return ad.reduce_mean(ad.abs_squared(output)) * weight


# ---------------------------------------------------------------------------
# checkpoints
#
# b"DTXM" | version u32 | config-json length u32 | config json | tensor count u32
# per tensor: name length u16 | name utf-8 | ndim u8 | dims u32* | float32 LE data

CKPT_MAGIC = b"DTXM"
CKPT_VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, model: DeepTxModel) -> None:
    items = [(k, v.data) for k, v in model.params.items()]
    items += [("buffer:" + k, v) for k, v in model.buffers.items()]
    cfg = model.config.to_json().encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> DeepTxModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, version, n = struct.unpack_from("<4sII", blob, 0)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 12
        config = ModelConfig.from_json(blob[pos: pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        params, buffers = {}, {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos: pos + ln].decode()
            pos += ln
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(blob):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += size
            if name.startswith("buffer:"):
                buffers[name[len("buffer:"):]] = arr
            else:
                params[name] = Tensor(arr, requires_grad=True, name=name)
    except struct.error as err:
        raise CheckpointError(f"{path}: truncated checkpoint ({err})") from None
    expected = param_shapes(config)
    if set(expected) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match the stored config")
    return DeepTxModel(config, {k: params[k] for k in expected}, buffers)
