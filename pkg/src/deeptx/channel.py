"""Time-varying tapped-delay-line channels and the on-disk channel database."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
DELAY_SPREAD_RANGE_NS = (10.0, 300.0)
VELOCITY_RANGE_KMH = (0.0, 30.0)
SINUSOIDS_PER_TAP = 32


class ChannelDatabaseError(IOError):
    pass


@dataclass(frozen=True)
class Numerology:
    """OFDM grid of one slot."""

    n_symbols: int = 14
    n_subcarriers: int = 48
    subcarrier_spacing_hz: float = 30e3
    slot_duration_s: float = 0.5e-3
    n_rx: int = 4
    n_tx: int = 2

    @property
    def symbol_duration_s(self) -> float:
        return self.slot_duration_s / self.n_symbols


@dataclass(frozen=True)
class TdlProfile:
    model: str
    delays: np.ndarray  # normalized by the RMS delay spread
    powers_db: np.ndarray

    @property
    def n_taps(self) -> int:
        return len(self.delays)

    def linear_powers(self) -> np.ndarray:
        p = 10.0 ** (np.asarray(self.powers_db) / 10.0)
        return p / p.sum()


# 3GPP TR 38.901 Tables 7.7.2-1..3 (normalized delay, power in dB)
_TDL_TABLES = {
    "A": [
        (0.0000, -13.4), (0.3819, 0.0), (0.4025, -2.2), (0.5868, -4.0),
        (0.4610, -6.0), (0.5375, -8.2), (0.6708, -9.9), (0.5750, -10.5),
        (0.7618, -7.5), (1.5375, -15.9), (1.8978, -6.6), (2.2242, -16.7),
        (2.1718, -12.4), (2.4942, -15.2), (2.5119, -10.8), (3.0582, -11.3),
        (4.0810, -12.7), (4.4579, -16.2), (4.5695, -18.3), (4.7966, -18.9),
        (5.0066, -16.6), (5.3043, -19.9), (9.6586, -29.7),
    ],
    "B": [
        (0.0000, 0.0), (0.1072, -2.2), (0.2155, -4.0), (0.2095, -3.2),
        (0.2870, -9.8), (0.2986, -1.2), (0.3752, -3.4), (0.5055, -5.2),
        (0.3681, -7.6), (0.3697, -3.0), (0.5700, -8.9), (0.5283, -9.0),
        (1.1021, -4.8), (1.2756, -5.7), (1.5474, -7.5), (1.7842, -1.9),
        (2.0169, -7.6), (2.8294, -12.2), (3.0219, -9.8), (3.6187, -11.4),
        (4.1067, -14.9), (4.2790, -9.2), (4.7834, -11.3),
    ],
    "C": [
        (0.0000, -4.4), (0.2099, -1.2), (0.2219, -3.5), (0.2329, -5.2),
        (0.2176, -2.5), (0.6366, 0.0), (0.6448, -2.2), (0.6560, -3.9),
        (0.6584, -7.4), (0.7935, -7.1), (0.8213, -10.7), (0.9336, -11.1),
        (1.2285, -5.1), (1.3083, -6.8), (2.1704, -8.7), (2.7105, -13.2),
        (4.2589, -13.9), (4.6003, -13.9), (5.4902, -15.8), (5.6077, -17.1),
        (6.3065, -16.0), (6.6374, -15.7), (7.0427, -21.6), (8.6523, -22.8),
    ],
}


def tdl_profile(model: str) -> TdlProfile:
    rows = np.array(_TDL_TABLES[model.upper()])
    return TdlProfile(model.upper(), rows[:, 0].copy(), rows[:, 1].copy())


def doppler_hz(velocity_kmh: float, carrier_hz: float) -> float:
    return velocity_kmh / 3.6 * carrier_hz / SPEED_OF_LIGHT


@dataclass
class ChannelRealization:
    """Frequency responses ``h[t]`` of shape (S, F, N_R, N_T) for each slot t."""

    h: np.ndarray  # (n_slots, S, F, N_R, N_T) complex
    model: str
    delay_spread_ns: float
    velocity_kmh: float
    carrier_hz: float
    seed: int
    out_of_range: bool = False

    @property
    def n_slots(self) -> int:
        return self.h.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ChannelRealization):
            return NotImplemented
        return (
            self.model == other.model
            and self.delay_spread_ns == other.delay_spread_ns
            and self.velocity_kmh == other.velocity_kmh
            and self.carrier_hz == other.carrier_hz
            and self.seed == other.seed
            and self.out_of_range == other.out_of_range
            and self.h.dtype == other.h.dtype
            and np.array_equal(self.h, other.h)
        )


def tap_gains(
    n_taps: int,
    n_pairs: int,
    times_s: np.ndarray,
    max_doppler_hz: float,
    rng: np.random.Generator,
    n_sinusoids: int = SINUSOIDS_PER_TAP,
) -> np.ndarray:
    """Unit-power Rayleigh tap gains via Jakes sum-of-sinusoids.

    Returns an array (len(times_s), n_taps, n_pairs).
    """
    angles = rng.uniform(0.0, 2 * np.pi, size=(n_taps, n_pairs, n_sinusoids))
    phases = rng.uniform(0.0, 2 * np.pi, size=(n_taps, n_pairs, n_sinusoids))
    w = 2 * np.pi * max_doppler_hz * np.cos(angles)
    arg = times_s[:, None, None, None] * w[None] + phases[None]
    return np.exp(1j * arg).sum(axis=-1) / np.sqrt(n_sinusoids)


def generate_realization(
    profile: TdlProfile | str,
    delay_spread_ns: float,
    velocity_kmh: float,
    carrier_hz: float = 4e9,
    numerology: Numerology = Numerology(),
    n_slots: int = 7,
    seed: int = 0,
    dtype=np.complex64,
) -> ChannelRealization:
    """Render a TDL channel over ``n_slots`` consecutive slots.

    The channel is constant within each OFDM symbol.  Path gains are scaled
    so that their total power, averaged over all sampled times and antenna
    pairs, is exactly 0 dB.  Responses are stored as ``dtype`` (complex64,
    the database precision, unless asked otherwise).
    """
    if isinstance(profile, str):
        profile = tdl_profile(profile)
    if n_slots < 2:
        raise ValueError("n_slots must be at least 2")
    out_of_range = not (
        DELAY_SPREAD_RANGE_NS[0] <= delay_spread_ns <= DELAY_SPREAD_RANGE_NS[1]
        and VELOCITY_RANGE_KMH[0] <= velocity_kmh <= VELOCITY_RANGE_KMH[1]
    )
    num = numerology
    rng = np.random.default_rng(seed)
    n_pairs = num.n_rx * num.n_tx
    times = np.arange(n_slots * num.n_symbols) * num.symbol_duration_s
    fd = doppler_hz(velocity_kmh, carrier_hz)

    gains = tap_gains(profile.n_taps, n_pairs, times, fd, rng)
    gains *= np.sqrt(profile.linear_powers())[None, :, None]
    gains /= np.sqrt(np.mean(np.sum(np.abs(gains) ** 2, axis=1)))

    delays_s = profile.delays * delay_spread_ns * 1e-9
    freqs = np.arange(num.n_subcarriers) * num.subcarrier_spacing_hz
    steering = np.exp(-2j * np.pi * np.outer(delays_s, freqs))  # (taps, F)
    h = np.einsum("tlp,lf->tfp", gains, steering)
    h = h.reshape(n_slots, num.n_symbols, num.n_subcarriers, num.n_rx, num.n_tx)
    return ChannelRealization(
        h=h.astype(dtype),
        model=profile.model,
        delay_spread_ns=float(delay_spread_ns),
        velocity_kmh=float(velocity_kmh),
        carrier_hz=float(carrier_hz),
        seed=int(seed),
        out_of_range=out_of_range,
    )


def random_realization(rng: np.random.Generator, numerology=Numerology(), n_slots=7,
                       carrier_hz=4e9, velocity_range=VELOCITY_RANGE_KMH,
                       models=("A", "B", "C")) -> ChannelRealization:
    """Draw model, delay spread and velocity uniformly over their ranges."""
    model = models[rng.integers(len(models))]
    ds = rng.uniform(*DELAY_SPREAD_RANGE_NS)
    v = rng.uniform(*velocity_range)
    seed = int(rng.integers(2**63 - 1))
    return generate_realization(model, ds, v, carrier_hz, numerology, n_slots, seed)


def slot_pair(realization: ChannelRealization, tau: int, ul_slot: int = 0):
    """UL response at ``ul_slot`` and the DL response ``tau`` slots later.

    The DL channel is returned in DL orientation, i.e. the per-RE transpose
    (N_T x N_R) of the stored UL-oriented response.
    """
    if not 1 <= tau <= realization.n_slots - 1 - ul_slot:
        raise ValueError(f"tau={tau} outside [1, {realization.n_slots - 1 - ul_slot}]")
    h_ul = realization.h[ul_slot]
    h_dl = np.swapaxes(realization.h[ul_slot + tau], -1, -2)
    return h_ul, h_dl


# ---------------------------------------------------------------------------
# database file
#
# header:  b"DTXC" | version u32 | count u32 | n_slots u32 | S u32 | F u32 | N_R u32 | N_T u32
# record:  model 1s | out_of_range u8 | pad 2x | seed u64 | delay_ns f64 | velocity f64 | carrier f64
#          | complex64 planes (n_slots, S, F, N_R, N_T) interleaved re/im, little endian

MAGIC = b"DTXC"
VERSION = 1
_HEADER = struct.Struct("<4s7I")
_META = struct.Struct("<1sB2xQ3d")


@dataclass
class ChannelDatabase:
    """Read-only view of a channel database file.

    Records are read on demand; nothing beyond the header is loaded at open.
    """

    path: str
    count: int
    n_slots: int
    dims: tuple

    @property
    def record_values(self) -> int:
        return self.n_slots * int(np.prod(self.dims))

    def __len__(self):
        return self.count

    def __getitem__(self, i: int) -> ChannelRealization:
        if not -self.count <= i < self.count:
            raise IndexError(i)
        i %= self.count
        rec_bytes = _META.size + 8 * self.record_values
        offset = _HEADER.size + i * rec_bytes
        with open(self.path, "rb") as fh:
            fh.seek(offset)
            meta = fh.read(_META.size)
            raw = fh.read(8 * self.record_values)
        if len(meta) < _META.size or len(raw) < 8 * self.record_values:
            raise ChannelDatabaseError(f"{self.path}: record {i} truncated")
        model, oor, seed, ds, v, fc = _META.unpack(meta)
        h = np.frombuffer(raw, dtype="<c8").reshape((self.n_slots,) + self.dims)
        return ChannelRealization(h.astype(np.complex64), model.decode(), ds, v, fc, seed, bool(oor))

    def __iter__(self) -> Iterator[ChannelRealization]:
        for i in range(self.count):
            yield self[i]

    def velocities(self) -> np.ndarray:
        """Velocity of every record (km/h), read from the metadata only."""
        rec_bytes = _META.size + 8 * self.record_values
        out = np.empty(self.count)
        with open(self.path, "rb") as fh:
            for i in range(self.count):
                fh.seek(_HEADER.size + i * rec_bytes)
                out[i] = _META.unpack(fh.read(_META.size))[4]
        return out


def save_database(path, realizations: Iterable[ChannelRealization]) -> int:
    """Write realizations to ``path``; returns the number written."""
    realizations = list(realizations)
    if not realizations:
        raise ValueError("no realizations to save")
    first = realizations[0].h
    n_slots, dims = first.shape[0], first.shape[1:]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(realizations), n_slots, *dims))
        for r in realizations:
            if r.h.shape != first.shape:
                raise ValueError(f"realization shape {r.h.shape} != {first.shape}")
            fh.write(_META.pack(r.model.encode(), int(r.out_of_range), r.seed,
                                r.delay_spread_ns, r.velocity_kmh, r.carrier_hz))
            fh.write(np.ascontiguousarray(r.h, dtype="<c8").tobytes())
    return len(realizations)


def load_database(path) -> ChannelDatabase:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise ChannelDatabaseError(f"{path}: file too short for header")
    magic, version, count, n_slots, *dims = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ChannelDatabaseError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ChannelDatabaseError(f"{path}: unsupported version {version}")
    db = ChannelDatabase(str(path), count, n_slots, tuple(dims))
    rec_bytes = _META.size + 8 * db.record_values
    body = size - _HEADER.size
    if body != count * rec_bytes:
        raise ChannelDatabaseError(
            f"{path}: header declares {count} records but body holds {body / rec_bytes:.2f}"
        )
    return db
