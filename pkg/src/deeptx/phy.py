"""Per-RE OFDM building blocks: 16-QAM mapping, pilots, channel, LS + LMMSE, LLRs.

Every function that lies on the downlink path accepts and returns
:class:`~deeptx.autodiff.Tensor` values in the (..., 2) complex layout so the
receiver can sit inside the training graph.  Uplink processing calls the
same functions outside any tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BITS_PER_SYMBOL = 4
LLR_CLAMP = 40.0


# ---------------------------------------------------------------------------
# constellation

@dataclass(frozen=True)
class Constellation:
    """Gray-labelled 16-QAM with unit average energy.

    Label bits (b0, b1, b2, b3) select (I sign, I magnitude, Q sign,
    Q magnitude); a 0 sign bit is positive and a 0 magnitude bit picks the
    inner level.
    """

    points: np.ndarray  # (16,) complex, index = b0*8 + b1*4 + b2*2 + b3
    labels: np.ndarray  # (16, 4) bits

    @property
    def order(self) -> int:
        return len(self.points)

    @property
    def bits_per_symbol(self) -> int:
        return self.labels.shape[1]

    def subset(self, m: int, bit: int) -> np.ndarray:
        """Indices of points whose m-th label bit equals ``bit``."""
        return np.flatnonzero(self.labels[:, m] == bit)


@lru_cache(maxsize=None)
def qam16() -> Constellation:
    labels = ((np.arange(16)[:, None] >> np.arange(3, -1, -1)) & 1).astype(np.int8)
    sign = 1 - 2 * labels[:, [0, 2]]
    level = 1 + 2 * labels[:, [1, 3]]
    pts = sign * level
    points = (pts[:, 0] + 1j * pts[:, 1]) / np.sqrt(10.0)
    points.setflags(write=False)
    labels.setflags(write=False)
    return Constellation(points, labels)


def map_bits(bits, constellation: Constellation | None = None) -> np.ndarray:
    """Map a bit array whose last axis length is a multiple of 4 to symbols."""
    c = constellation or qam16()
    bits = np.asarray(bits)
    nb = c.bits_per_symbol
    if bits.shape[-1] % nb:
        raise ValueError(f"bit count {bits.shape[-1]} not divisible by {nb}")
    groups = bits.reshape(bits.shape[:-1] + (-1, nb)).astype(np.int64)
    index = groups @ (1 << np.arange(nb - 1, -1, -1))
    return c.points[index]


def hard_demap(symbols, constellation: Constellation | None = None) -> np.ndarray:
    """Nearest-point bits for each symbol; the last axis grows by a factor of 4."""
    c = constellation or qam16()
    symbols = np.asarray(symbols)
    nearest = np.argmin(np.abs(symbols[..., None] - c.points), axis=-1)
    bits = c.labels[nearest]
    return bits.reshape(symbols.shape[:-1] + (-1,))


# ---------------------------------------------------------------------------
# pilots and resource grids

@dataclass(frozen=True)
class PilotPattern:
    """Pilot OFDM symbols (0-based) with a two-layer frequency comb.

    Layer k owns the pilot REs on subcarriers f with f % 2 == k; the other
    layer is muted there.
    """

    kind: str
    symbols: tuple
    n_layers: int = 2

    def pilot_values(self, n_subcarriers: int) -> np.ndarray:
        """Unit-modulus QPSK pilots, shape (len(symbols), n_subcarriers)."""
        rng = np.random.default_rng(0x5EED)
        phase = rng.integers(0, 4, size=(len(self.symbols), n_subcarriers))
        return np.exp(1j * (np.pi / 4 + np.pi / 2 * phase))

    def data_symbols(self, n_symbols: int) -> np.ndarray:
        return np.array([s for s in range(n_symbols) if s not in self.symbols])

    def fit(self, n_symbols: int) -> "PilotPattern":
        """The pattern restricted to pilot symbols inside a grid of ``n_symbols``."""
        kept = tuple(s for s in self.symbols if s < n_symbols)
        if not kept:
            raise ValueError(f"{self.kind}: no pilot symbol fits in {n_symbols} OFDM symbols")
        return self if kept == self.symbols else PilotPattern(self.kind, kept, self.n_layers)

    def layer_subcarriers(self, layer: int, n_subcarriers: int) -> np.ndarray:
        return np.arange(layer, n_subcarriers, self.n_layers)


DMRS2 = PilotPattern("DMRS2", (2, 11))
SRS1 = PilotPattern("SRS1", (12,))
PATTERNS = {"DMRS2": DMRS2, "SRS1": SRS1}


def pilot_pattern(kind) -> PilotPattern:
    if isinstance(kind, PilotPattern):
        return kind
    try:
        return PATTERNS[kind.upper()]
    except KeyError:
        raise ValueError(f"unknown pilot pattern {kind!r}") from None


@dataclass
class ResourceGrid:
    symbols: np.ndarray  # (..., S, F, N_T) complex
    data_mask: np.ndarray  # (S, F) bool
    pilot_mask: np.ndarray  # (S, F, N_T) bool
    bits: np.ndarray  # (..., S_data, F, N_T, 4)
    pattern: PilotPattern


def make_grid(pattern, n_symbols, n_subcarriers, rng, batch=(), n_layers=2,
              constellation: Constellation | None = None) -> ResourceGrid:
    """Random 16-QAM data on data symbols plus comb pilots on pilot symbols."""
    pattern = pilot_pattern(pattern).fit(n_symbols)
    c = constellation or qam16()
    batch = (batch,) if isinstance(batch, (int, np.integer)) else tuple(batch)
    data_syms = pattern.data_symbols(n_symbols)
    bits = rng.integers(0, 2, size=batch + (len(data_syms), n_subcarriers, n_layers, c.bits_per_symbol),
                        dtype=np.int8)
    grid = np.zeros(batch + (n_symbols, n_subcarriers, n_layers), dtype=np.complex128)
    grid[..., data_syms, :, :] = map_bits(bits.reshape(bits.shape[:-2] + (-1,)), c).reshape(
        bits.shape[:-1])
    values = pattern.pilot_values(n_subcarriers)
    pilot_mask = np.zeros((n_symbols, n_subcarriers, n_layers), dtype=bool)
    for k in range(n_layers):
        sc = pattern.layer_subcarriers(k, n_subcarriers)
        for p, s in enumerate(pattern.symbols):
            grid[..., s, sc, k] = values[p, sc]
            pilot_mask[s, sc, k] = True
    data_mask = np.zeros((n_symbols, n_subcarriers), dtype=bool)
    data_mask[data_syms] = True
    return ResourceGrid(grid, data_mask, pilot_mask, bits, pattern)


# ---------------------------------------------------------------------------
# channel

def _per_sample(values, batch_shape, dtype=np.float64):
    v = np.asarray(values, dtype=dtype)
    if v.ndim == 0:
        v = np.broadcast_to(v, batch_shape)
    if v.shape != tuple(batch_shape):
        raise ValueError(f"per-sample values {v.shape} do not match batch {batch_shape}")
    return v


def apply_channel(x, h, snr_db, rng=None, signal_power=None, noise=True):
    """y = H x + n on every RE.

    ``x`` is a complex Tensor (..., S, F, N_in, 2); ``h`` a numpy complex array
    (..., S, F, N_out, N_in).  Leading dims of ``x`` beyond the grid are the
    batch; ``snr_db`` may be scalar or per batch element.  The noise variance
    per receive antenna is ``signal_power / snr``, where ``signal_power``
    defaults to the measured mean |Hx|^2 per antenna over the grid.

    Returns ``(y, noise_var)`` with ``noise_var`` per batch element.
    """
    x = ad.as_tensor(x)
    batch = x.shape[:-4]
    ht = ad.complex_tensor(h)
    clean = ad.complex_matmul(ht, ad.reshape(x, x.shape[:-1] + (1, 2)))
    clean = ad.reshape(clean, clean.shape[:-2] + (2,))
    if signal_power is None:
        p = (clean.data ** 2).sum(axis=-1).mean(axis=(-3, -2, -1))
    else:
        p = _per_sample(signal_power, batch)
    snr = 10.0 ** (_per_sample(snr_db, batch) / 10.0)
    noise_var = np.asarray(p / snr, dtype=np.float64)
    if not noise:
        return clean, noise_var
    if rng is None:
        raise ValueError("rng required when noise is enabled")
    std = np.sqrt(noise_var / 2.0).reshape(batch + (1,) * 4)
    n = rng.standard_normal(clean.shape) * std
    return clean + ad.as_tensor(n), noise_var


# ---------------------------------------------------------------------------
# channel estimation

def ls_estimate(y, pattern, n_layers=2) -> Tensor:
    """Least-squares estimates at the pilot REs.

    ``y`` is a complex Tensor (..., S, F, N_r, 2).  Returns a Tensor
    (..., N_layers, P, F/N_layers, N_r, 2): for layer k and pilot RE on
    subcarrier f, y_r * conj(pilot).
    """
    y = ad.as_tensor(y)
    pattern = pilot_pattern(pattern).fit(y.shape[-4])
    n_sub = y.shape[-3]
    values = pattern.pilot_values(n_sub)
    syms = list(pattern.symbols)
    per_layer = []
    for k in range(n_layers):
        sc = pattern.layer_subcarriers(k, n_sub)
        yk = y[(..., np.array(syms)[:, None], sc[None, :], slice(None), slice(None))]
        p = np.conj(values[:, sc])[..., None]  # (P, Fk, 1)
        conj_pilot = ad.complex_tensor(np.broadcast_to(p, yk.shape[-4:-1]))
        per_layer.append(ad.complex_mul(yk, conj_pilot))
    stacked = ad.concat([ad.reshape(t, t.shape[:-4] + (1,) + t.shape[-4:]) for t in per_layer], axis=-5)
    return stacked


def interpolation_matrix(targets: np.ndarray, sources: np.ndarray, extrapolate: str) -> np.ndarray:
    """Linear interpolation weights from ``sources`` to ``targets`` positions.

    Outside the source range, ``extrapolate`` is ``"linear"`` (continue the
    end segment) or ``"nearest"`` (hold the end value).
    """
    targets = np.asarray(targets, dtype=float)
    sources = np.asarray(sources, dtype=float)
    w = np.zeros((len(targets), len(sources)))
    if len(sources) == 1:
        w[:, 0] = 1.0
        return w
    for i, t in enumerate(targets):
        if t <= sources[0] and extrapolate == "nearest":
            w[i, 0] = 1.0
            continue
        if t >= sources[-1] and extrapolate == "nearest":
            w[i, -1] = 1.0
            continue
        j = int(np.clip(np.searchsorted(sources, t) - 1, 0, len(sources) - 2))
        a = (t - sources[j]) / (sources[j + 1] - sources[j])
        w[i, j] = 1.0 - a
        w[i, j + 1] = a
    return w


@lru_cache(maxsize=None)
def _interp_operators(pattern: PilotPattern, n_symbols: int, n_subcarriers: int):
    time = interpolation_matrix(np.arange(n_symbols), pattern.symbols, "nearest")
    freq = [
        interpolation_matrix(np.arange(n_subcarriers), pattern.layer_subcarriers(k, n_subcarriers), "linear")
        for k in range(pattern.n_layers)
    ]
    return time, freq


def interpolate(raw, pattern, n_symbols, n_subcarriers) -> Tensor:
    """Expand LS estimates to every RE.

    Linear interpolation along frequency within each pilot symbol (linear
    extrapolation at the band edges), then linear interpolation along time
    between pilot symbols, holding the nearest pilot symbol outside them.
    With a single pilot symbol the estimate is constant in time.

    ``raw`` is (..., L, P, Fk, N_r, 2); returns (..., S, F, N_r, L, 2).
    """
    pattern = pilot_pattern(pattern).fit(n_symbols)
    raw = ad.as_tensor(raw)
    if raw.shape[-4] == 0 or len(pattern.symbols) == 0:
        raise ValueError("interpolate: empty pilot set")
    time, freq = _interp_operators(pattern, n_symbols, n_subcarriers)
    nd = raw.ndim
    lead = tuple(range(nd - 5))
    dt = raw.data.dtype
    layers = []
    for k in range(raw.shape[-5]):
        rk = raw[(..., k, slice(None), slice(None), slice(None), slice(None))]  # (..., P, Fk, Nr, 2)
        # (..., Nr, 2, Fk, P) @ (P, S) -> (..., Nr, 2, Fk, S)
        base = len(lead)
        t = ad.transpose(rk, lead + (base + 2, base + 3, base + 1, base))
        t = ad.matmul(t, Tensor(time.T.astype(dt)))
        t = ad.matmul(ad.transpose(t, lead + (base, base + 1, base + 3, base + 2)),
                      Tensor(freq[k].T.astype(dt)))  # (..., Nr, 2, S, F)
        t = ad.transpose(t, lead + (base + 2, base + 3, base, base + 1))  # (..., S, F, Nr, 2)
        layers.append(ad.reshape(t, t.shape[:-1] + (1, 2)))
    return ad.concat(layers, axis=-2)


def estimate_channel(y, pattern, n_layers=2) -> Tensor:
    """LS at pilots followed by interpolation; (..., S, F, N_r, N_layers, 2)."""
    y = ad.as_tensor(y)
    raw = ls_estimate(y, pattern, n_layers)
    return interpolate(raw, pattern, y.shape[-4], y.shape[-3])


# ---------------------------------------------------------------------------
# equalization and demapping

def _eye_like(n, lead_shape, scale, dtype):
    eye = np.zeros(tuple(lead_shape) + (n, n, 2), dtype=dtype)
    idx = np.arange(n)
    eye[..., idx, idx, 0] = scale[..., None]
    return eye


def lmmse_equalize(y, h_hat, noise_var):
    """Rescaled LMMSE equalization on every RE.

    ``y``: (..., N_r, 2); ``h_hat``: (..., N_r, N_l, 2); ``noise_var``: a
    positive scalar or array broadcastable over the leading dims.  Returns
    ``(x_hat, post_var)`` with shapes (..., N_l, 2) and (..., N_l).

    The equalizer is V = (H^H H + s2 I)^-1 H^H, rescaled by D, the inverse of
    diag(V H), so that x_hat = D V y is unbiased.  The post-equalization
    noise variance of layer k is s2 * ||row k of D V||^2.
    """
    y = ad.as_tensor(y)
    h_hat = ad.as_tensor(h_hat)
    lead = h_hat.shape[:-3]
    n_l = h_hat.shape[-2]
    s2 = np.broadcast_to(np.asarray(noise_var, dtype=h_hat.data.dtype), lead)
    if np.any(s2 <= 0):
        raise ValueError("noise_var must be positive")
    hh = ad.hermitian(h_hat)
    gram = ad.complex_matmul(hh, h_hat)
    inv = ad.small_complex_inverse(gram + Tensor(_eye_like(n_l, lead, s2, h_hat.data.dtype)))
    v = ad.complex_matmul(inv, hh)  # (..., N_l, N_r, 2)
    vh = ad.complex_matmul(v, h_hat)
    idx = np.arange(n_l)
    diag = vh[(..., idx, idx, slice(None))]  # (..., N_l, 2)
    diag_pow = ad.abs_squared(diag)
    d = ad.conj(diag) * ad.reshape(ad.reciprocal(diag_pow), diag_pow.shape + (1,))
    vy = ad.complex_matmul(v, ad.reshape(y, y.shape[:-1] + (1, 2)))
    x_hat = ad.complex_mul(d, ad.reshape(vy, vy.shape[:-2] + (2,)))
    row_pow = ad.reduce_sum(ad.abs_squared(v), axis=-1)
    post_var = row_pow * ad.reciprocal(diag_pow) * Tensor(s2[..., None])
    return x_hat, post_var


@lru_cache(maxsize=None)
def _subset_selectors(dtype_str):
    """0/1 matrices (16, 4*8) gathering each bit's 0- and 1-subsets."""
    c = qam16()
    sel = []
    for bit in (0, 1):
        m = np.zeros((c.order, c.bits_per_symbol * c.order // 2))
        for b in range(c.bits_per_symbol):
            for j, idx in enumerate(c.subset(b, bit)):
                m[idx, b * (c.order // 2) + j] = 1.0
        sel.append(m.astype(dtype_str))
    return tuple(sel)


def _log_sum_exp_last(t: Tensor) -> Tensor:
    shift = t.data.max(axis=-1, keepdims=True)
    s = ad.reduce_sum(ad.exp(t - Tensor(shift)), axis=-1)
    return ad.log(s) + Tensor(shift[..., 0])


def compute_llr(x_hat, post_var, constellation: Constellation | None = None) -> Tensor:
    """Exact max-log-free LLRs, log P(bit=0) / P(bit=1).

    ``x_hat``: (..., 2) complex Tensor; ``post_var``: (...) positive.
    Returns (..., 4).  Each subset sum is evaluated as a shifted
    log-sum-exp so very confident symbols stay finite.
    """
    c = constellation or qam16()
    x_hat = ad.as_tensor(x_hat)
    post_var = ad.as_tensor(post_var)
    if np.any(post_var.data <= 0):
        raise ValueError("post-equalization variance must be positive")
    if x_hat.ndim == 1:
        out = compute_llr(ad.reshape(x_hat, (1, 2)), ad.reshape(post_var, (1,)), c)
        return ad.reshape(out, (c.bits_per_symbol,))
    dt = x_hat.data.dtype
    n = c.order
    lead = x_hat.shape[:-1]
    pts = np.stack([c.points.real, c.points.imag], axis=-1).astype(dt)
    xe = ad.expand(ad.reshape(x_hat, lead + (1, 2)), lead + (n, 2))
    dist = ad.abs_squared(xe - Tensor(pts))  # (..., 16)
    metric = -dist * ad.reshape(ad.reciprocal(post_var), lead + (1,))
    sel0, sel1 = _subset_selectors(np.dtype(dt).str)
    half = n // 2
    nb = c.bits_per_symbol
    a0 = ad.reshape(ad.matmul(metric, Tensor(sel0)), lead + (nb, half))
    a1 = ad.reshape(ad.matmul(metric, Tensor(sel1)), lead + (nb, half))
    return _log_sum_exp_last(a0) - _log_sum_exp_last(a1)


def ber(llr, bits) -> float:
    """Fraction of bits whose hard decision (LLR < 0 means 1) is wrong."""
    llr = llr.data if isinstance(llr, Tensor) else np.asarray(llr)
    bits = np.asarray(bits)
    if llr.shape != bits.shape:
        raise ValueError(f"llr shape {llr.shape} != bits shape {bits.shape}")
    return float(np.mean((llr < 0) != (bits == 1)))


def bit_errors(llr, bits) -> int:
    llr = llr.data if isinstance(llr, Tensor) else np.asarray(llr)
    return int(np.count_nonzero((llr < 0) != (np.asarray(bits) == 1)))
