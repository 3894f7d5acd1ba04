"""Sample generation, the differentiable downlink chain, losses, LAMB and the training loop."""

from __future__ import annotations

import ast
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import beamforming as bf
from . import model as mdl
from . import phy
from .autodiff import SingularMatrixError, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainingConfig:
    batch_size: int = 8
    iterations: int = 20000
    learning_rate: float = 3.6e-5
    warmup_iterations: int = 1600
    decay_start: float = 0.3
    transition_start: float = 0.90
    transition_end: float = 0.95
    tau_max: int = 6
    tau_min: int = 1
    snr_ul_min: float = 0.0
    snr_ul_max: float = 35.0
    snr_delta_min: float = 1.0
    snr_delta_max: float = 5.0
    activation_weight: float = 1e-4
    scenario: str = "SU"
    ul_pattern: str = "DMRS2"
    zf_mode: str = "exact"
    loss: str = "blend"
    history: int = 1
    optimizer: str = "lamb"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0
    seed: int = 0
    workers: int = 0
    validation_every: int = 1000
    validation_slots: int = 64
    precision: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.transition_start < self.transition_end <= 1.0:
            raise ValueError("need 0 <= transition_start < transition_end <= 1")
        if self.scenario.upper() not in ("SU", "MU"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.loss not in ("blend", "ce", "exp", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")
        parse_zf_mode(self.zf_mode)

    @property
    def total_samples(self) -> int:
        return self.batch_size * self.iterations

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainingConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise KeyError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**values)


def read_config_file(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            values[key] = parse_value(raw)
    return values


def parse_value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def write_config_file(path, cfg) -> None:
    with open(path, "w") as fh:
        for key, value in asdict(cfg).items():
            fh.write(f"{key} = {value!r}\n")


def parse_zf_mode(mode: str):
    """'exact' -> ('exact', None); 'neumann:4' or 'neumann(4)' -> ('neumann', 4); 'none'."""
    m = mode.strip().lower()
    if m in ("exact", "none"):
        return m, None
    for sep in (":", "("):
        if m.startswith("neumann" + sep):
            k = int(m[len("neumann") + 1:].rstrip(")"))
            if k < 1:
                raise ValueError("Neumann term count must be >= 1")
            return "neumann", k
    raise ValueError(f"unknown ZF mode {mode!r}")


# ---------------------------------------------------------------------------
# samples

@dataclass
class Sample:
    h_est: list  # history of UL estimates, oldest first, each (S, F, N_R, N_T) complex
    h_dl: np.ndarray  # true DL channel (S, F, N_T, N_R)
    tau: int
    snr_ul: float
    snr_dl: float
    bits: np.ndarray  # (S_data, F, N_T, 4)
    scenario: str = "SU"
    noise_seed: int = 0
    h_ul_true: np.ndarray | None = None  # UL-oriented true channel at the UL slot
    velocity_kmh: float = 0.0


def realization_index(q: int, n: int, seed: int) -> int:
    """Index of the q-th draw when cycling through reshuffled passes of n items."""
    epoch, pos = divmod(q, n)
    return int(np.random.default_rng([seed, 0xDB, epoch]).permutation(n)[pos])


def ul_estimate(h_ul, pattern, snr_db, rng, noise=True) -> np.ndarray:
    """UL pilots through ``h_ul`` (S, F, N_R, N_T), LS + interpolation."""
    s, f, _, n_t = h_ul.shape
    grid = phy.make_grid(pattern, s, f, rng, n_layers=n_t)
    y, _ = phy.apply_channel(ad.complex_tensor(grid.symbols), h_ul, snr_db, rng, noise=noise)
    return ad.to_complex(phy.estimate_channel(y, pattern, n_layers=n_t))


def generate_sample(db, cfg: TrainingConfig, rng: np.random.Generator, index: int | None = None,
                    tau: int | None = None, snr_dl: float | None = None, ul_noise: bool = True) -> Sample:
    """Offline part of one training sample: channel evolution and the UL chain.

    Draws a realization (or uses ``index``), tau uniform in [tau_min, tau_max],
    UL SNR uniform and DL SNR = UL SNR + uniform delta.  With ``snr_dl``
    given, the UL SNR is derived from it instead.
    """
    if index is None:
        index = int(rng.integers(len(db)))
    real = db[index]
    h_hist = cfg.history
    if real.n_slots < h_hist + cfg.tau_max:
        raise ValueError(f"realization has {real.n_slots} slots; need {h_hist + cfg.tau_max}")
    if tau is None:
        tau = int(rng.integers(cfg.tau_min, cfg.tau_max + 1))
    delta = rng.uniform(cfg.snr_delta_min, cfg.snr_delta_max)
    if snr_dl is None:
        snr_ul = rng.uniform(cfg.snr_ul_min, cfg.snr_ul_max)
        snr_dl = snr_ul + delta
    else:
        snr_ul = snr_dl - delta
    ul_slot = h_hist - 1
    est = [ul_estimate(real.h[t], cfg.ul_pattern, snr_ul, rng, noise=ul_noise) for t in range(h_hist)]
    h_dl = np.swapaxes(real.h[ul_slot + tau], -1, -2)
    s, f = h_dl.shape[:2]
    n_data = len(phy.DMRS2.fit(s).data_symbols(s))
    bits = rng.integers(0, 2, size=(n_data, f, h_dl.shape[-2], phy.BITS_PER_SYMBOL), dtype=np.int8)
    return Sample(
        h_est=[e.astype(np.complex64) for e in est],
        h_dl=h_dl,
        tau=int(tau),
        snr_ul=float(snr_ul),
        snr_dl=float(snr_dl),
        bits=bits,
        scenario=cfg.scenario.upper(),
        noise_seed=int(rng.integers(2**63 - 1)),
        h_ul_true=real.h[ul_slot],
        velocity_kmh=real.velocity_kmh,
    )


def batch_samples(db, cfg: TrainingConfig, iteration: int, pool: ThreadPoolExecutor | None = None) -> list:
    """The deterministic batch for ``iteration`` (independent of thread scheduling)."""
    def one(j):
        q = iteration * cfg.batch_size + j
        rng = np.random.default_rng([cfg.seed, iteration, j])
        return generate_sample(db, cfg, rng, index=realization_index(q, len(db), cfg.seed))

    js = range(cfg.batch_size)
    return list(pool.map(one, js)) if pool is not None else [one(j) for j in js]


def network_input(samples, cfg_or_model) -> np.ndarray:
    mcfg = cfg_or_model.config if isinstance(cfg_or_model, mdl.DeepTxModel) else cfg_or_model
    hist = [np.stack([s.h_est[i] for s in samples]) for i in range(mcfg.history)]
    taus = np.array([s.tau for s in samples])
    return mdl.preprocess(hist, taus, mcfg.tau_max, history=mcfg.history)


# ---------------------------------------------------------------------------
# downlink chain

def dl_grid(samples) -> np.ndarray:
    """DL symbols with DMRS2 pilots and each sample's data bits, (B, S, F, N_T)."""
    b0 = samples[0]
    s, f = b0.h_dl.shape[:2]
    n_t = b0.h_dl.shape[2]
    pat = phy.DMRS2.fit(s)
    grid = np.zeros((len(samples), s, f, n_t), dtype=np.complex128)
    data = pat.data_symbols(s)
    bits = np.stack([sm.bits for sm in samples])
    grid[:, data] = phy.map_bits(bits.reshape(bits.shape[:-2] + (-1,))).reshape(bits.shape[:-1])
    values = pat.pilot_values(f)
    for k in range(n_t):
        sc = pat.layer_subcarriers(k, f)
        for p, sym in enumerate(pat.symbols):
            grid[:, sym, sc, k] = values[p, sc]
    return grid


def _singular_samples(h_dl_pred: np.ndarray, zf: str) -> np.ndarray:
    """Boolean mask of samples whose predicted channel breaks the chosen ZF."""
    z = ad.to_complex(h_dl_pred)
    if zf == "exact":
        a = z @ np.conj(np.swapaxes(z, -1, -2))
        det = np.abs(np.linalg.det(a))
        return (det < ad.INVERSE_DET_FLOOR).reshape(len(z), -1).any(axis=1)
    if zf == "neumann":
        d = (np.abs(z) ** 2).sum(axis=-1)
        return (d == 0).reshape(len(z), -1).any(axis=1)
    return np.zeros(len(z), dtype=bool)


@dataclass
class ChainOutput:
    llr: Tensor  # (B, S_data, F, N_T, 4), log P(0)/P(1)
    bits: np.ndarray
    samples: list
    skipped: int = 0
    prediction: Tensor | None = None


def dl_chain(h_pred, samples, zf_mode="exact", noise=True, dtype=None) -> ChainOutput:
    """Precode with the predicted UL-oriented channel and run the UE receivers.

    ``h_pred`` is a complex Tensor (B, S, F, N_R, N_T, 2).  For zf_mode
    'none' it is used directly as the precoder W.  Samples whose prediction
    makes ZF singular are dropped and counted in ``skipped``.
    """
    zf, k = parse_zf_mode(zf_mode)
    h_pred = ad.as_tensor(h_pred)
    h_dl_pred = ad.transpose(h_pred, (0, 1, 2, 4, 3, 5))
    bad = _singular_samples(h_dl_pred.data, zf)
    skipped = int(bad.sum())
    if skipped:
        keep = np.flatnonzero(~bad)
        log.warning("skipping %d sample(s) with singular ZF input", skipped)
        if len(keep) == 0:
            return ChainOutput(None, np.zeros((0,)), [], skipped, h_pred)
        samples = [samples[i] for i in keep]
        h_pred = h_pred[keep]
        h_dl_pred = h_dl_pred[keep]

    dt = h_pred.data.dtype
    n_s, n_f = h_pred.shape[1:3]
    s = Tensor(ad._to_real(dl_grid(samples), dt))
    if zf == "exact":
        precoder = bf.zf_exact(h_dl_pred)
    elif zf == "neumann":
        precoder = lambda sym: bf.zf_neumann_apply(h_dl_pred, sym, k)  # noqa: E731
    else:
        precoder = h_pred
    x = bf.precode_and_normalize(precoder, s, bf.unit_energy_amplitude(n_s, n_f))

    h_dl = np.stack([sm.h_dl for sm in samples])
    snr = np.array([sm.snr_dl for sm in samples])
    rng = np.random.default_rng([sm.noise_seed for sm in samples])
    y, noise_var = phy.apply_channel(x, h_dl.astype(ad._complex_dtype(dt)), snr, rng,
                                     signal_power=1.0, noise=noise)
    if not noise:
        noise_var = noise_var * 0 + 1e-9
    llr = ue_receive(y, noise_var, samples[0].scenario)
    bits = np.stack([sm.bits for sm in samples])
    return ChainOutput(llr, bits, samples, skipped, h_pred)


def ue_receive(y: Tensor, noise_var: np.ndarray, scenario: str) -> Tensor:
    """DMRS2 estimation of the effective channel, LMMSE and LLRs at the UE(s).

    SU: one UE with two antennas sees a 2x2 effective channel.  MU: UE u has
    antenna u only and equalizes its own layer with a scalar estimate.
    """
    n_s = y.shape[1]
    pat = phy.DMRS2.fit(n_s)
    data = pat.data_symbols(n_s)
    nv = np.asarray(noise_var).reshape(-1, 1, 1, 1)
    if scenario.upper() == "SU":
        h_eff = phy.estimate_channel(y, pat)  # (B, S, F, 2, 2, 2)
        x_hat, var = phy.lmmse_equalize(y[:, data], h_eff[:, data], nv[..., 0])
        return phy.compute_llr(x_hat, var)
    n_ue = y.shape[-2]
    llrs = []
    for u in range(n_ue):
        y_u = y[:, :, :, u:u + 1]
        h_u = phy.estimate_channel(y_u, pat)[:, :, :, :, u:u + 1]
        x_hat, var = phy.lmmse_equalize(y_u[:, data], h_u[:, data], nv[..., 0])
        llrs.append(phy.compute_llr(x_hat, var))
    return ad.concat(llrs, axis=-2)


def dl_forward(samples, model: mdl.DeepTxModel, cfg: TrainingConfig, training=False) -> ChainOutput:
    """Network prediction followed by the DL chain (recorded when a tape is active)."""
    out = mdl.forward(model, network_input(samples, model), training=training)
    return dl_chain(out, samples, cfg.zf_mode)


def reference_prediction(samples, kind: str) -> Tensor:
    """Baseline channel inputs: 'genie' (true DL channel) or 'ul' (UL estimate)."""
    if kind == "genie":
        h = np.stack([np.swapaxes(s.h_dl, -1, -2) for s in samples])
    elif kind == "ul":
        h = np.stack([s.h_est[-1] for s in samples])
    else:
        raise ValueError(kind)
    return ad.complex_tensor(h)


# ---------------------------------------------------------------------------
# losses

def _check_pair(logits, bits):
    if tuple(logits.shape) != tuple(np.shape(bits)):
        raise ValueError(f"logit shape {logits.shape} != bit shape {np.shape(bits)}")


def ce_loss(logits, bits, axis=None) -> Tensor:
    """Binary cross-entropy with b_hat = sigmoid(logits); positive logit favours bit 1.

    Uses softplus(L) - b L, the overflow-free form of the same expression.
    """
    logits = ad.as_tensor(logits)
    _check_pair(logits, bits)
    b = Tensor(np.asarray(bits, dtype=logits.data.dtype))
    return ad.reduce_mean(ad.softplus(logits) - b * logits, axis=axis)


def exp_loss(logits, bits, axis=None) -> Tensor:
    """Mean exp(-y y_hat) with y = 2b - 1 and y_hat = 2 sigmoid(logits) - 1."""
    logits = ad.as_tensor(logits)
    _check_pair(logits, bits)
    y = Tensor(2.0 * np.asarray(bits, dtype=logits.data.dtype) - 1.0)
    y_hat = ad.sigmoid(logits) * 2.0 - 1.0
    return ad.reduce_mean(ad.exp(-(y * y_hat)), axis=axis)


def snr_weight(snr_db):
    """log2(1 + linear SNR)."""
    return np.log2(1.0 + 10.0 ** (np.asarray(snr_db, dtype=float) / 10.0))


def transition_weight(progress: float, start: float, end: float) -> float:
    """CE share of the loss: 0 before ``start``, linear ramp, 1 after ``end``."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must be in [0, 1]")
    return float(np.clip((progress - start) / (end - start), 0.0, 1.0))


def llr_to_logits(llr: Tensor) -> Tensor:
    """Clamp LLRs to +-40 and flip sign so that a positive logit means bit 1."""
    return -ad.clip(llr, -phy.LLR_CLAMP, phy.LLR_CLAMP)


def blended_loss(logits, bits, snr_db, progress: float, cfg: TrainingConfig) -> Tensor:
    """SNR-weighted (1 - w) EXP + w CE, averaged over the batch (first axis)."""
    logits = ad.as_tensor(logits)
    w = transition_weight(progress, cfg.transition_start, cfg.transition_end)
    flat = ad.reshape(logits, (logits.shape[0], -1))
    fb = np.asarray(bits).reshape(flat.shape)
    per_sample = None
    if w < 1.0:
        per_sample = exp_loss(flat, fb, axis=1) * (1.0 - w)
    if w > 0.0:
        ce = ce_loss(flat, fb, axis=1) * w
        per_sample = ce if per_sample is None else per_sample + ce
    weights = Tensor(snr_weight(snr_db).astype(flat.data.dtype))
    return ad.reduce_mean(per_sample * weights)


# ---------------------------------------------------------------------------
# schedule and optimizer

def lr_schedule(iteration: int, cfg: TrainingConfig) -> float:
    """Linear warm-up to the base rate, flat, then linear decay to 0 at the last iteration."""
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    total = cfg.iterations
    warm = min(1.0, iteration / cfg.warmup_iterations) if cfg.warmup_iterations > 0 else 1.0
    start = cfg.decay_start * total
    decay = 1.0 if iteration <= start else max(0.0, (total - iteration) / (total - start))
    return cfg.learning_rate * warm * decay


class Lamb:
    """Adam moments with a per-tensor trust ratio ||theta|| / ||update||.

    ``mode='adam'`` drops the trust ratio.
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-6, weight_decay=0.0, mode="lamb"):
        if mode not in ("lamb", "adam"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.mode = mode
        self.state = {}
        self.last_trust = {}

    def direction(self, name, theta, grad):
        """Advance the moments for one tensor and return (update, trust ratio)."""
        st = self.state.setdefault(name, {"step": 0, "m": np.zeros_like(theta), "v": np.zeros_like(theta)})
        st["step"] += 1
        t = st["step"]
        st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * grad
        st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * grad * grad
        m_hat = st["m"] / (1 - self.beta1 ** t)
        v_hat = st["v"] / (1 - self.beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + self.eps)
        if self.weight_decay:
            update = update + self.weight_decay * theta
        trust = 1.0
        if self.mode == "lamb":
            w_norm = float(np.linalg.norm(theta))
            u_norm = float(np.linalg.norm(update))
            if w_norm > 0 and u_norm > 0:
                trust = w_norm / u_norm
        return update, trust

    def step(self, params: dict, grads, lr: float) -> None:
        for name, p in params.items():
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
            update, trust = self.direction(name, p.data, g)
            self.last_trust[name] = trust
            p.data = (p.data - lr * trust * update).astype(p.data.dtype)

    def state_arrays(self) -> dict:
        out = {}
        for name, st in self.state.items():
            out[f"{name}/m"] = st["m"]
            out[f"{name}/v"] = st["v"]
            out[f"{name}/step"] = np.array(st["step"])
        return out

    def load_state_arrays(self, arrays) -> None:
        names = {k.rsplit("/", 1)[0] for k in arrays}
        self.state = {
            n: {"step": int(arrays[f"{n}/step"]), "m": np.array(arrays[f"{n}/m"]), "v": np.array(arrays[f"{n}/v"])}
            for n in names
        }


def save_optimizer_state(path, opt: Lamb) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **opt.state_arrays())


def load_optimizer_state(path, opt: Lamb) -> None:
    with np.load(path) as data:
        opt.load_state_arrays({k: data[k] for k in data.files})


# ---------------------------------------------------------------------------
# training loop

def training_loss(samples, model, cfg: TrainingConfig, progress: float):
    """Forward pass and loss for one batch; returns (loss, ChainOutput or None)."""
    out = mdl.forward_raw(model, network_input(samples, model), training=True)
    h_pred = mdl.planes_to_complex_tensor(out, model.config.n_rx, model.config.n_tx)
    if cfg.loss == "l2":
        target = np.stack([np.swapaxes(s.h_dl, -1, -2) for s in samples])
        diff = h_pred - ad.complex_tensor(target.astype(ad._complex_dtype(out.data.dtype)))
        return ad.reduce_mean(ad.abs_squared(diff)), None
    chain = dl_chain(h_pred, samples, cfg.zf_mode)
    if chain.llr is None:
        return None, chain
    logits = llr_to_logits(chain.llr)
    snr = np.array([s.snr_dl for s in chain.samples])
    if cfg.loss == "blend":
        loss = blended_loss(logits, chain.bits, snr, progress, cfg)
    else:
        fn = ce_loss if cfg.loss == "ce" else exp_loss
        per = fn(ad.reshape(logits, (logits.shape[0], -1)), chain.bits.reshape(logits.shape[0], -1), axis=1)
        loss = ad.reduce_mean(per * Tensor(snr_weight(snr).astype(out.data.dtype)))
    if cfg.activation_weight:
        loss = loss + mdl.l2_activation_penalty(h_pred, cfg.activation_weight)
    return loss, chain


@dataclass
class TrainingResult:
    model: mdl.DeepTxModel
    history: list = field(default_factory=list)
    skipped: int = 0
    optimizer: Lamb | None = None


def validation_set(db, cfg: TrainingConfig, n_slots: int, seed: int) -> dict:
    """Fixed validation samples per tau, generated once."""
    out = {}
    for tau in range(cfg.tau_min, cfg.tau_max + 1):
        rng = np.random.default_rng([seed, 0xA1, tau])
        out[tau] = [generate_sample(db, cfg, rng, tau=tau) for _ in range(n_slots)]
    return out


def validate(model, val: dict, cfg: TrainingConfig, batch: int = 32) -> dict:
    result = {}
    for tau, samples in val.items():
        errors = bits = 0
        for i in range(0, len(samples), batch):
            chunk = samples[i:i + batch]
            if cfg.loss == "l2":
                chain = dl_chain(mdl.forward(model, network_input(chunk, model)), chunk, "exact")
            else:
                chain = dl_forward(chunk, model, cfg)
            if chain.llr is None:
                continue
            errors += phy.bit_errors(chain.llr, chain.bits)
            bits += chain.bits.size
        result[tau] = errors / bits if bits else float("nan")
    return result


def train(db, model: mdl.DeepTxModel, cfg: TrainingConfig, val_db=None, metrics_path=None,
          checkpoint_path=None, optimizer: Lamb | None = None) -> TrainingResult:
    """Run ``cfg.iterations`` optimizer steps on batches drawn from ``db``.

    Deterministic for a given seed: batch contents depend only on the seed
    and the iteration index, whatever ``cfg.workers`` is.
    """
    if len(db) == 0:
        raise ValueError("empty channel database")
    with ad.precision(cfg.precision):
        model = model.astype(ad.get_dtype())
        opt = optimizer or Lamb(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.optimizer)
        val = validation_set(val_db, cfg, cfg.validation_slots, cfg.seed + 1) if val_db is not None else None
        history = []
        skipped = 0
        last_good = model.copy()
        writer = fh = None
        if metrics_path:
            fh = open(metrics_path, "w", newline="")
            cols = ["iteration", "lr", "loss"]
            if val:
                cols += [f"val_ber_tau{t}" for t in val]
            writer = csv.writer(fh)
            writer.writerow(cols)
        pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 0 else None
        try:
            for it in range(cfg.iterations):
                samples = batch_samples(db, cfg, it, pool)
                progress = it / max(cfg.iterations - 1, 1)
                with ad.Tape() as tape:
                    loss, chain = training_loss(samples, model, cfg, progress)
                if chain is not None:
                    skipped += chain.skipped
                if loss is None:
                    continue
                value = float(loss.data)
                if not math.isfinite(value):
                    if checkpoint_path:
                        mdl.save_checkpoint(checkpoint_path, last_good)
                    raise TrainingDiverged(f"loss became {value} at iteration {it}")
                grads = ad.backprop(tape, loss)
                lr = lr_schedule(it, cfg)
                opt.step(model.params, grads, lr)
                row = {"iteration": it, "lr": lr, "loss": value}
                last = it == cfg.iterations - 1
                if val and ((it + 1) % cfg.validation_every == 0 or last):
                    for tau, b in validate(model, val, cfg).items():
                        row[f"val_ber_tau{tau}"] = b
                    log.info("iter %d loss %.4f val %s", it, value,
                             {k: round(v, 4) for k, v in row.items() if k.startswith("val")})
                    last_good = model.copy()
                history.append(row)
                if writer:
                    writer.writerow([row.get(c, "") for c in cols])
        finally:
            if fh:
                fh.close()
            if pool:
                pool.shutdown()
        if skipped:
            log.warning("%d sample(s) skipped for singular ZF during training", skipped)
        if checkpoint_path:
            mdl.save_checkpoint(checkpoint_path, model)
        return TrainingResult(model, history, skipped, opt)


def with_overrides(cfg: TrainingConfig, **kw) -> TrainingConfig:
    return replace(cfg, **kw)
