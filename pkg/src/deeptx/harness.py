"""Monte-Carlo BER evaluation against the UL-estimate and genie ZF baselines, plus reports."""

from __future__ import annotations

import csv
import io
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from . import model as mdl
from . import phy
from . import training as tr

CSV_COLUMNS = ("method", "tau", "snr_db", "ber", "ci_low", "ci_high", "n_bits")
_METHOD = re.compile(r"^(deeptx|deeptx_no_zf|zf_ul|zf_ul_baseline|zf_genie|deeptx_l2)"
                     r"(?:\+(zf|neumann\((\d+)\)))?$")


class MissingCheckpointError(FileNotFoundError):
    pass


def parse_method(method: str):
    """Split a method name into (channel source, ZF mode string).

    'deeptx+zf' -> ('deeptx', 'exact'), 'zf_ul_baseline' -> ('ul', 'exact'),
    'zf_genie+neumann(4)' -> ('genie', 'neumann:4'), 'deeptx_no_zf' ->
    ('deeptx_no_zf', 'none').
    """
    m = _METHOD.match(method.strip().lower())
    if not m:
        raise ValueError(f"unknown method {method!r}")
    base, suffix, k = m.groups()
    source = {"zf_ul": "ul", "zf_ul_baseline": "ul", "zf_genie": "genie"}.get(base, base)
    if source == "deeptx_no_zf":
        if suffix:
            raise ValueError("deeptx_no_zf takes no ZF suffix")
        return source, "none"
    if suffix and suffix.startswith("neumann"):
        return source, f"neumann:{int(k)}"
    return source, "exact"


def model_key(source: str) -> str | None:
    """Which entry of the model mapping a channel source needs."""
    return source if source.startswith("deeptx") else None


@dataclass
class ExperimentSpec:
    scenario: str = "SU"
    pattern: str = "DMRS2"
    taus: tuple = (1, 2, 3, 4, 5, 6)
    snrs: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    methods: tuple = ("deeptx+zf", "zf_ul_baseline", "zf_genie")
    n_slots: int = 1000
    seed: int = 0
    velocity_min: float | None = None
    velocity_max: float | None = None
    dl_noise: bool = True
    ul_noise: bool = True
    batch: int = 32
    workers: int = 0
    tau_max: int = 6
    history: int = 1
    snr_range: tuple | None = None  # e.g. (20, 25): extra averaged-SNR cell per method and tau

    def __post_init__(self):
        self.taus = tuple(int(t) for t in self.taus)
        self.snrs = tuple(float(s) for s in self.snrs)
        self.methods = tuple(self.methods)
        for m in self.methods:
            parse_method(m)
        if any(not 1 <= t <= self.tau_max for t in self.taus):
            raise ValueError(f"tau list {self.taus} outside [1, {self.tau_max}]")

    def sample_config(self) -> tr.TrainingConfig:
        return tr.TrainingConfig(scenario=self.scenario, ul_pattern=self.pattern, tau_max=self.tau_max,
                                 history=self.history)


@dataclass
class Cell:
    """Per-slot bit error counts of one (method, tau, SNR) cell."""

    method: str
    tau: int
    snr_db: float | str
    errors: np.ndarray
    bits_per_slot: int
    skipped: int = 0

    @property
    def n_bits(self) -> int:
        return int(self.bits_per_slot * len(self.errors))

    @property
    def ber(self) -> float:
        return float(self.errors.sum() / self.n_bits) if self.n_bits else float("nan")

    def ci(self, level: float = 0.95) -> tuple:
        return wilson_interval(int(self.errors.sum()), self.n_bits, level)


@dataclass
class BerTable:
    cells: list = field(default_factory=list)

    def get(self, method, tau, snr_db) -> Cell:
        for c in self.cells:
            if c.method == method and c.tau == tau and c.snr_db == snr_db:
                return c
        raise KeyError((method, tau, snr_db))

    def methods(self):
        return list(dict.fromkeys(c.method for c in self.cells))

    def rows(self):
        for c in self.cells:
            lo, hi = c.ci()
            yield (c.method, c.tau, c.snr_db, c.ber, lo, hi, c.n_bits)


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple:
    """Wilson score interval for k errors in n bits."""
    if n == 0:
        return float("nan"), float("nan")
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


def paired_test(a: np.ndarray, b: np.ndarray) -> float:
    """One-sided p-value that per-slot errors ``a`` are lower on average than ``b``."""
    d = np.asarray(a, float) - np.asarray(b, float)
    if np.all(d == 0):
        return 1.0
    return float(stats.ttest_1samp(d, 0.0, alternative="less").pvalue)


# ---------------------------------------------------------------------------
# slots

def eligible_indices(db, spec: ExperimentSpec) -> np.ndarray:
    idx = np.arange(len(db))
    if spec.velocity_min is None and spec.velocity_max is None:
        return idx
    v = db.velocities() if hasattr(db, "velocities") else np.array([r.velocity_kmh for r in db])
    keep = np.ones(len(db), dtype=bool)
    if spec.velocity_min is not None:
        keep &= v >= spec.velocity_min
    if spec.velocity_max is not None:
        keep &= v <= spec.velocity_max
    if not keep.any():
        raise ValueError("no realization satisfies the velocity filter")
    return idx[keep]


def slot_sample(db, spec: ExperimentSpec, eligible, tau: int, i: int, snr_db: float | None) -> tr.Sample:
    """Evaluation slot i at offset tau.

    The realization, bits, SNR offset and noise shapes depend only on
    (seed, tau, i), so cells at different SNRs and different methods see the
    same slots and noise realizations (paired comparisons).  With
    ``snr_db`` None the DL SNR is drawn from ``spec.snr_range``.
    """
    rng = np.random.default_rng([spec.seed, tau, i])
    index = int(eligible[rng.integers(len(eligible))])
    if snr_db is None:
        snr_db = float(np.random.default_rng([spec.seed, tau, i, 1]).uniform(*spec.snr_range))
    return tr.generate_sample(db, spec.sample_config(), rng, index=index, tau=tau, snr_dl=snr_db,
                              ul_noise=spec.ul_noise)


def _prediction(source: str, samples, models: dict) -> ad.Tensor:
    if source in ("ul", "genie"):
        return tr.reference_prediction(samples, source)
    model = models[source]
    return mdl.forward(model, tr.network_input(samples, model))


def _slot_errors(chain: tr.ChainOutput, n: int, kept) -> np.ndarray:
    """Per-slot error counts; a skipped slot counts every bit as an error."""
    per_slot_bits = chain.bits[0].size if chain.llr is not None else 0
    out = np.full(n, -1, dtype=np.int64)
    if chain.llr is not None:
        wrong = (chain.llr.data < 0).astype(np.int8) != chain.bits
        counts = wrong.reshape(len(chain.bits), -1).sum(axis=1)
        out[kept] = counts
    return out, per_slot_bits


def _evaluate_chunk(samples, sources_modes, models, spec):
    results = {}
    for method, (source, zf) in sources_modes.items():
        chain = tr.dl_chain(_prediction(source, samples, models), samples, zf, noise=spec.dl_noise)
        kept = [i for i, s in enumerate(samples) if any(s is c for c in chain.samples)]
        results[method] = (chain, kept)
    return results


def resolve_models(methods, models: dict | None) -> dict:
    """Load checkpoints named by path and check every needed model is present."""
    models = dict(models or {})
    for method in methods:
        key = model_key(parse_method(method)[0])
        if key is None:
            continue
        if key not in models:
            raise MissingCheckpointError(f"method {method!r} needs a {key!r} model or checkpoint")
        m = models[key]
        if isinstance(m, (str, os.PathLike)):
            if not os.path.isfile(m):
                raise MissingCheckpointError(f"checkpoint not found: {m}")
            models[key] = mdl.load_checkpoint(m)
    return models


def evaluate(spec: ExperimentSpec, models: dict | None, db) -> BerTable:
    """BER of every method at every (tau, SNR) cell on ``spec.n_slots`` slots."""
    models = resolve_models(spec.methods, models)
    for m in models.values():
        if isinstance(m, mdl.DeepTxModel) and max(spec.taus) > m.config.tau_max:
            raise ValueError(f"tau {max(spec.taus)} beyond model tau_max {m.config.tau_max}")
    eligible = eligible_indices(db, spec)
    sources_modes = {m: parse_method(m) for m in spec.methods}
    snr_cells = list(spec.snrs) + ([None] if spec.snr_range else [])
    table = BerTable()
    pool = ThreadPoolExecutor(spec.workers) if spec.workers > 0 else None
    try:
        for tau in spec.taus:
            for snr in snr_cells:
                errors = {m: np.zeros(spec.n_slots, dtype=np.int64) for m in spec.methods}
                skipped = dict.fromkeys(spec.methods, 0)
                bits_per_slot = 0
                chunks = [range(i, min(i + spec.batch, spec.n_slots)) for i in range(0, spec.n_slots, spec.batch)]

                def run(chunk, tau=tau, snr=snr):
                    samples = [slot_sample(db, spec, eligible, tau, i, snr) for i in chunk]
                    return chunk, _evaluate_chunk(samples, sources_modes, models, spec)

                results = pool.map(run, chunks) if pool else map(run, chunks)
                for chunk, res in results:
                    for method, (chain, kept) in res.items():
                        counts, nb = _slot_errors(chain, len(chunk), kept)
                        bits_per_slot = max(bits_per_slot, nb)
                        skipped[method] += int((counts < 0).sum())
                        errors[method][chunk.start:chunk.stop] = counts
                label = snr if snr is not None else f"U({spec.snr_range[0]:g},{spec.snr_range[1]:g})"
                for method in spec.methods:
                    e = errors[method]
                    e[e < 0] = bits_per_slot
                    table.cells.append(Cell(method, tau, label, e, bits_per_slot, skipped[method]))
    finally:
        if pool:
            pool.shutdown()
    return table


# ---------------------------------------------------------------------------
# experiments

def neumann_sweep(spec: ExperimentSpec, models: dict | None, db, ks=(1, 2, 3, 4, 8, 64),
                  source: str = "deeptx", mismatch_k: int = 2) -> BerTable:
    """Exact ZF against k-term Neumann ZF for one channel source.

    When models holds both 'deeptx' (trained with exact ZF) and
    'deeptx_neumann' (trained with the k-term approximation), two more rows
    compare them under the same k-term ZF at test time:
    'mismatch_exact_trained+neumann(k)' and 'matched_neumann_trained+neumann(k)'.
    """
    prefix = {"deeptx": "deeptx", "ul": "zf_ul", "genie": "zf_genie"}[source]
    methods = [f"{prefix}+zf"] + [f"{prefix}+neumann({k})" for k in ks]
    sweep = ExperimentSpec(**{**spec.__dict__, "methods": tuple(methods)})
    table = evaluate(sweep, models, db)
    if models and "deeptx" in models and "deeptx_neumann" in models:
        test = f"deeptx+neumann({mismatch_k})"
        one = ExperimentSpec(**{**spec.__dict__, "methods": (test,)})
        for label, key in (("mismatch_exact_trained", "deeptx"), ("matched_neumann_trained", "deeptx_neumann")):
            for cell in evaluate(one, {"deeptx": models[key]}, db).cells:
                cell.method = f"{label}+neumann({mismatch_k})"
                table.cells.append(cell)
    return table


def prediction_mse(prediction: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(np.abs(prediction - truth) ** 2))


def to_db(value: float, floor_db: float = -300.0) -> float:
    return float(10 * np.log10(value)) if value > 0 else floor_db


@dataclass
class L2Report:
    tau: int
    snr_db: float
    mse_pred_db: float
    mse_ul_db: float
    ber_pred: float
    ber_ul: float
    n_slots: int

    @property
    def improvement_db(self) -> float:
        return self.mse_ul_db - self.mse_pred_db


def ablation_l2_predictor(spec: ExperimentSpec, predictor, db) -> list:
    """Channel-prediction MSE (vs the UL estimate) and ZF BER for a channel predictor.

    ``predictor`` is a DeepTxModel, a checkpoint path, or one of the
    strings 'genie' and 'identity' (output = latest UL estimate).
    """
    if isinstance(predictor, (str, os.PathLike)) and str(predictor) not in ("genie", "identity"):
        predictor = resolve_models(["deeptx+zf"], {"deeptx": predictor})["deeptx"]
    eligible = eligible_indices(db, spec)
    reports = []
    for tau in spec.taus:
        for snr in spec.snrs:
            sq_pred = sq_ul = 0.0
            err_pred = err_ul = nbits = count = 0
            for start in range(0, spec.n_slots, spec.batch):
                samples = [slot_sample(db, spec, eligible, tau, i, snr)
                           for i in range(start, min(start + spec.batch, spec.n_slots))]
                truth = np.stack([np.swapaxes(s.h_dl, -1, -2) for s in samples])
                ul = np.stack([s.h_est[-1] for s in samples])
                if predictor == "genie":
                    pred_t = tr.reference_prediction(samples, "genie")
                elif predictor == "identity":
                    pred_t = tr.reference_prediction(samples, "ul")
                else:
                    pred_t = mdl.forward(predictor, tr.network_input(samples, predictor))
                pred = ul if predictor == "identity" else ad.to_complex(pred_t.data)
                sq_pred += np.sum(np.abs(pred - truth) ** 2)
                sq_ul += np.sum(np.abs(ul - truth) ** 2)
                count += truth.size
                for t, key in ((pred_t, "pred"), (tr.reference_prediction(samples, "ul"), "ul")):
                    chain = tr.dl_chain(t, samples, "exact", noise=spec.dl_noise)
                    e = phy.bit_errors(chain.llr, chain.bits) if chain.llr is not None else 0
                    if key == "pred":
                        err_pred += e
                        nbits += chain.bits.size if chain.llr is not None else 0
                    else:
                        err_ul += e
            reports.append(L2Report(tau, snr, to_db(sq_pred / count), to_db(sq_ul / count),
                                    err_pred / nbits if nbits else float("nan"),
                                    err_ul / nbits if nbits else float("nan"), spec.n_slots))
    return reports


# ---------------------------------------------------------------------------
# output

def table_csv(table: BerTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for method, tau, snr, ber, lo, hi, n in table.rows():
        snr_s = f"{snr:g}" if isinstance(snr, float) else str(snr)
        w.writerow([method, tau, snr_s, f"{ber:.6e}", f"{lo:.6e}", f"{hi:.6e}", n])
    return buf.getvalue()


def read_table_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _plot_tau(table: BerTable, tau: int, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "deeptx", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        for method in table.methods():
            cells = [c for c in table.cells if c.method == method and c.tau == tau and isinstance(c.snr_db, float)]
            if not cells:
                continue
            x = [c.snr_db for c in cells]
            y = [max(c.ber, 1e-7) for c in cells]
            ax.semilogy(x, y, marker="o", label=method)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("uncoded BER")
        ax.set_title(f"tau = {tau}")
        ax.grid(True, which="both", alpha=0.3)
        if ax.lines:
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_outputs(table: BerTable, out_dir, name: str = "ber") -> list:
    """Write ``<name>.csv`` and one ``<name>_tau<k>.svg`` per tau; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    csv_path = os.path.join(out_dir, f"{name}.csv")
    with open(csv_path, "w", newline="") as fh:
        fh.write(table_csv(table))
    paths.append(csv_path)
    for tau in sorted({c.tau for c in table.cells}):
        p = os.path.join(out_dir, f"{name}_tau{tau}.svg")
        _plot_tau(table, tau, p)
        paths.append(p)
    return paths


def l2_report_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "snr_db", "mse_pred_db", "mse_ul_db", "improvement_db", "ber_pred", "ber_ul", "n_slots"])
        for r in reports:
            w.writerow([r.tau, f"{r.snr_db:g}", f"{r.mse_pred_db:.4f}", f"{r.mse_ul_db:.4f}",
                        f"{r.improvement_db:.4f}", f"{r.ber_pred:.6e}", f"{r.ber_ul:.6e}", r.n_slots])
