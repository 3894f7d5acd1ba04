"""Acceptance criteria, one test (or group of tests) per criterion.

Each test carries a ``criterion(n)`` marker; the conftest hook prints one
PASS/FAIL line per criterion in the terminal summary.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from deeptx import autodiff as ad
from deeptx import beamforming as bf
from deeptx import channel as ch
from deeptx import cli
from deeptx import harness as hs
from deeptx import model as mdl
from deeptx import phy
from deeptx import training as tr

from helpers import tiny_db, tiny_model
from test_phy import oracle_llr

ROOT = Path(__file__).resolve().parent.parent
ARTIFACTS = ROOT / "artifacts"
DESK_CONFIG = ARTIFACTS / "xxs_desk.cfg"
DESK_CHECKPOINT = ARTIFACTS / "xxs_desk.dtxm"


def detail(record_property, text):
    record_property("detail", text)
    print(text)


@pytest.fixture(scope="module")
def eval_db(tmp_path_factory):
    """Held-out channels on the default 4-PRB grid, velocities over the full range."""
    path = tmp_path_factory.mktemp("acc") / "eval.dtxc"
    assert cli.main(["generate-channels", "--out", str(path), "--count", "400", "--seed", "77"]) == 0
    return ch.load_database(path)


# 1 ----------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_c01_trained_values_replaced_by_property_suite(record_property):
    """Full-scale trained BER values are not a target; criteria 2-11 stand in for them."""
    here = sys.modules[__name__]
    present = sorted({int(n[6:8]) for n in dir(here) if n.startswith("test_c") and n[6:8].isdigit()})
    assert present == list(range(1, 12))
    detail(record_property, "full-scale BER values not reproduced; replaced by criteria 2-11")


# 2 ----------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c02_differentiability_suite(record_property):
    t0 = time.time()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
         str(ROOT / "tests" / "test_autodiff.py"),
         str(ROOT / "tests" / "test_training.py") + "::test_full_chain_gradient_64bit"],
        capture_output=True, text=True, cwd=ROOT)
    elapsed = time.time() - t0
    last = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-300:]
    detail(record_property, f"per-op and full-chain checks: {last}; {elapsed:.0f} s")
    assert proc.returncode == 0, proc.stdout[-3000:]
    assert elapsed < 120


@pytest.mark.criterion(2)
def test_c02_full_chain_64bit_value(record_property):
    from test_training import TINY, _chain_loss_fn
    from helpers import pack_params

    with ad.precision("float64"):
        db = tiny_db(3, numerology=TINY)
        cfg = tr.TrainingConfig(batch_size=2, precision="float64")
        samples = tr.batch_samples(db, cfg, 0)
        model = tiny_model(seed=1, input_skip=True)
        names, flat = pack_params(model)
        worst = ad.finite_difference_check(_chain_loss_fn(model, samples, cfg, names), flat, epsilon=1e-4)
    detail(record_property, f"full-chain max rel err {worst:.2e} over {flat.size} params (< 1e-5)")
    assert worst < 1e-5


# 3 ----------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_c03_zf_correctness(record_property):
    rng = np.random.default_rng(2024)
    h = (rng.normal(size=(1000, 2, 4)) + 1j * rng.normal(size=(1000, 2, 4))) / np.sqrt(2)
    assert np.all(np.linalg.matrix_rank(h) == 2)
    with ad.precision("float64"):
        w = ad.to_complex(bf.zf_exact(ad.complex_tensor(h)).data)
    inv_err = np.max(np.abs(h @ w - np.eye(2)))
    u, s, vh = np.linalg.svd(h, full_matrices=False)
    pinv = vh.conj().swapaxes(-1, -2) @ (u.conj().swapaxes(-1, -2) / s[..., :, None])
    svd_err = np.max(np.abs(w - pinv))
    detail(record_property, f"max|HW-I| {inv_err:.1e} (< 1e-10), max|W-pinv| {svd_err:.1e} (< 1e-9)")
    assert inv_err < 1e-10 and svd_err < 1e-9


# 4 ----------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_c04_neumann_geometric(record_property):
    rng = np.random.default_rng(7)
    h = (rng.normal(size=(2000, 2, 4)) + 1j * rng.normal(size=(2000, 2, 4))) / np.sqrt(2)
    g = h @ h.conj().swapaxes(-1, -2)
    rho = np.abs(g[:, 0, 1]) / np.sqrt(g[:, 0, 0].real * g[:, 1, 1].real)
    h = h[rho < 1]
    with ad.precision("float64"):
        exact = ad.to_complex(bf.zf_exact(ad.complex_tensor(h)).data)
        errs = [np.linalg.norm(ad.to_complex(bf.zf_neumann_matrix(ad.complex_tensor(h), k).data) - exact,
                               axis=(-2, -1)) for k in (2, 4, 8, 16, 32, 64)]
    errs = np.array(errs)
    decreasing = np.all(errs[1:] <= errs[:-1] + 1e-15)
    # successive even-k errors shrink by rho^(k'-k): geometric, not merely monotone
    ratio = errs[1] / np.maximum(errs[0], 1e-300)
    rho = rho[rho < 1]
    geometric = np.allclose(ratio[errs[0] > 1e-12], (rho ** 2)[errs[0] > 1e-12], rtol=1e-6)
    detail(record_property, f"{len(h)} draws with rho<1: error non-increasing {decreasing}, ratio = rho^2 {geometric}")
    assert decreasing and geometric


@pytest.mark.criterion(4)
def test_c04_neumann_ber(record_property, eval_db):
    t0 = time.time()
    spec = hs.ExperimentSpec(taus=(6,), snrs=(20.0,), n_slots=10_000, seed=404, batch=64,
                             methods=("zf_ul+zf", "zf_ul+neumann(4)", "zf_ul+neumann(64)"))
    table = hs.evaluate(spec, None, eval_db)
    elapsed = time.time() - t0
    exact = table.get("zf_ul+zf", 6, 20.0)
    k4 = table.get("zf_ul+neumann(4)", 6, 20.0)
    k64 = table.get("zf_ul+neumann(64)", 6, 20.0)
    lo, hi = exact.ci()
    width = hi - lo
    # share of REs where 64 terms have not converged (rho^64 > 1e-3), on the predictions being precoded
    elig = hs.eligible_indices(eval_db, spec)
    rho = []
    for i in range(200):
        h = np.swapaxes(hs.slot_sample(eval_db, spec, elig, 6, i, 20.0).h_est[-1], -1, -2)
        g = h @ h.conj().swapaxes(-1, -2)
        rho.append(np.abs(g[..., 0, 1]) / np.sqrt(g[..., 0, 0].real * g[..., 1, 1].real))
    slow = np.mean(np.concatenate(rho) ** 64 > 1e-3)
    p64 = stats.ttest_1samp((k64.errors - exact.errors).astype(float), 0.0).pvalue
    detail(record_property, f"tau=6 20 dB 1e4 slots: exact {exact.ber:.4e} CI [{lo:.4e},{hi:.4e}], "
                            f"k=64 {k64.ber:.4e} (paired p={p64:.1e}), k=4 {k4.ber:.4e} "
                            f"(|d|={abs(k4.ber - exact.ber):.1e} vs 2w={2 * width:.1e}); "
                            f"REs with rho^64>1e-3: {slow:.2%}; {elapsed:.0f} s")
    assert lo <= k64.ber <= hi
    assert abs(k4.ber - exact.ber) <= 2 * width
    assert elapsed < 600


# 5 ----------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_c05_llr_exact(record_property):
    rng = np.random.default_rng(5)
    x = rng.uniform(-1.4, 1.4, 1000) + 1j * rng.uniform(-1.4, 1.4, 1000)
    var = rng.uniform(0.02, 3.0, 1000)
    with ad.precision("float64"):
        got = phy.compute_llr(ad.complex_tensor(x), ad.Tensor(var)).data
    want = np.array([oracle_llr(a, b) for a, b in zip(x, var)])
    err = np.max(np.abs(got - want))
    detail(record_property, f"max |LLR - brute force| {err:.1e} on 1000 inputs (< 1e-9)")
    assert err < 1e-9


# 6 ----------------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_c06_param_counts(record_property):
    full = mdl.param_count(mdl.variant("deeptx"))
    small = mdl.param_count(mdl.variant("64x11"))
    e_full, e_small = abs(full / 963.1e3 - 1), abs(small / 114.7e3 - 1)
    detail(record_property, f"deeptx {full} ({e_full:.1%} off 963.1k), 64x11 {small} ({e_small:.1%} off 114.7k)")
    assert e_full < 0.05 and e_small < 0.05


# 7 ----------------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_c07_genie_sanity(record_property, eval_db):
    snrs = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0)
    quiet = hs.evaluate(hs.ExperimentSpec(taus=(1,), snrs=(20.0,), methods=("zf_genie",), n_slots=10_000,
                                          seed=700, batch=64, dl_noise=False), None, eval_db)
    noisy = hs.evaluate(hs.ExperimentSpec(taus=(1,), snrs=snrs, methods=("zf_genie",), n_slots=10_000,
                                          seed=701, batch=64), None, eval_db)
    zero = quiet.cells[0].errors.sum()
    bers = [noisy.get("zf_genie", 1, s).ber for s in snrs]
    monotone = all(b <= a for a, b in zip(bers, bers[1:]))
    detail(record_property, f"noiseless errors {zero} in {quiet.cells[0].n_bits} bits; noisy BER over "
                            f"{snrs[0]:g}..{snrs[-1]:g} dB: " + ", ".join(f"{b:.2e}" for b in bers))
    assert zero == 0 and monotone


# 8 ----------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_c08_channel_aging(record_property, eval_db):
    spec = hs.ExperimentSpec(taus=(1, 6), snrs=(20.0,), methods=("zf_ul_baseline",), n_slots=3000, seed=800,
                             batch=64, velocity_min=20.0)
    table = hs.evaluate(spec, None, eval_db)
    e1 = table.get("zf_ul_baseline", 1, 20.0).errors
    e6 = table.get("zf_ul_baseline", 6, 20.0).errors
    p = stats.ttest_ind(e6, e1, equal_var=False, alternative="greater").pvalue
    b1, b6 = table.get("zf_ul_baseline", 1, 20.0).ber, table.get("zf_ul_baseline", 6, 20.0).ber
    detail(record_property, f">=20 km/h, 20 dB, 3000 slots: BER tau1 {b1:.3e}, tau6 {b6:.3e}, one-sided p={p:.1e}")
    assert b6 > b1 and p < 0.05


# 9 ----------------------------------------------------------------------------

def _desk_checkpoint(tmp_path_factory) -> Path:
    """The stored desk-scale run, or a fresh one from the same config when absent (hours on one CPU)."""
    if DESK_CHECKPOINT.is_file() and Path(str(DESK_CHECKPOINT) + ".json").is_file():
        return DESK_CHECKPOINT
    work = tmp_path_factory.mktemp("desk")
    db = work / "train.dtxc"
    assert cli.main(["generate-channels", "--out", str(db), "--count", "1000", "--seed", "1"]) == 0
    out = work / "xxs_desk.dtxm"
    assert cli.main(["train", "--db", str(db), "--seed", "0", "--config", str(DESK_CONFIG), "--out", str(out)]) == 0
    return out


@pytest.mark.criterion(9)
def test_c09_desk_scale_learning(record_property, eval_db, tmp_path_factory):
    ckpt = _desk_checkpoint(tmp_path_factory)
    run = json.load(open(str(ckpt) + ".json"))
    model = mdl.load_checkpoint(ckpt)
    n_params = mdl.param_count(model.config)
    assert n_params <= 50_000
    iterations = run.get("total_iterations", run["iterations"])
    seconds = run.get("total_seconds", run["seconds"])
    assert iterations >= 20_000 and run["training"]["tau_max"] == 6 and model.config.tau_max == 6
    assert eval_db.dims[1] == 48  # 4 PRBs
    assert seconds <= 4 * 3600
    spec = hs.ExperimentSpec(taus=(6,), snrs=(15.0, 20.0, 25.0), n_slots=2000, seed=900, batch=64,
                             methods=("deeptx+zf", "zf_ul_baseline", "zf_genie"))
    table = hs.evaluate(spec, {"deeptx": model}, eval_db)
    ok = True
    parts = [f"{n_params} params, {iterations} it, {seconds / 3600:.1f} h"]
    for snr in spec.snrs:
        d = table.get("deeptx+zf", 6, snr)
        u = table.get("zf_ul_baseline", 6, snr)
        p = hs.paired_test(d.errors, u.errors)
        ok &= d.ber < u.ber and p < 0.05
        parts.append(f"{snr:g} dB: deeptx {d.ber:.3e} vs zf_ul {u.ber:.3e} (p={p:.1e})")
    detail(record_property, "; ".join(parts))
    assert ok


@pytest.mark.criterion(9)
def test_c09_genie_bounds_trained_model(record_property, eval_db, tmp_path_factory):
    model = mdl.load_checkpoint(_desk_checkpoint(tmp_path_factory))
    spec = hs.ExperimentSpec(taus=(6,), snrs=(20.0, 25.0), n_slots=2000, seed=901, batch=64,
                             methods=("deeptx+zf", "zf_genie"), velocity_min=20.0)
    table = hs.evaluate(spec, {"deeptx": model}, eval_db)
    ok = True
    for snr in spec.snrs:
        g, d = table.get("zf_genie", 6, snr), table.get("deeptx+zf", 6, snr)
        ok &= g.ber <= d.ber and hs.paired_test(g.errors, d.errors) < 0.05
    detail(record_property, "high velocity: zf_genie below trained model at 20 and 25 dB")
    assert ok


# 10 ---------------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_c10_loss_and_schedule(record_property):
    cfg = tr.TrainingConfig()
    w0 = tr.snr_weight(0.0)
    with ad.precision("float64"):
        e_lim = float(tr.exp_loss(np.array([80.0, -80.0]), np.array([1, 0])).data)
        rng = np.random.default_rng(10)
        logits, bits, snr = rng.normal(size=(2, 32)), rng.integers(0, 2, (2, 32)), np.array([5.0, 20.0])
        grid = np.linspace(0.85, 1.0, 3001)
        vals = np.array([float(tr.blended_loss(logits, bits, snr, p, cfg).data) for p in grid])
        jumps = [abs(float(tr.blended_loss(logits, bits, snr, e + 1e-12, cfg).data)
                     - float(tr.blended_loss(logits, bits, snr, e - 1e-12, cfg).data))
                 for e in (cfg.transition_start, cfg.transition_end)]
    lr800 = tr.lr_schedule(800, cfg)
    detail(record_property, f"snr_weight(0)={w0}, EXP limit {e_lim:.12f} (e^-1={np.exp(-1):.12f}), "
                            f"max edge jump {max(jumps):.1e}, max step {np.max(np.abs(np.diff(vals))):.1e}, "
                            f"lr(800)={lr800:.3e}")
    assert w0 == 1.0
    assert abs(e_lim - np.exp(-1)) < 1e-12
    assert max(jumps) < 1e-9
    assert lr800 == pytest.approx(1.8e-5, rel=1e-12)


# 11 ---------------------------------------------------------------------------

@pytest.mark.criterion(11)
def test_c11_persistence_and_determinism(record_property, tmp_path):
    reals = tiny_db(3)
    ch.save_database(tmp_path / "db.dtxc", reals)
    back = ch.load_database(tmp_path / "db.dtxc")
    db_exact = all(np.array_equal(a.h, b.h) and a.velocity_kmh == b.velocity_kmh for a, b in zip(reals, back))
    model = mdl.DeepTxModel.init(mdl.variant("xxs"), seed=3, dtype=np.float32)
    mdl.save_checkpoint(tmp_path / "m.dtxm", model)
    m2 = mdl.load_checkpoint(tmp_path / "m.dtxm")
    ck_exact = all(np.array_equal(model.params[k].data, m2.params[k].data) for k in model.params) and all(
        np.array_equal(model.buffers[k], m2.buffers[k]) for k in model.buffers)
    mdl.save_checkpoint(tmp_path / "m2.dtxm", m2)
    ck_bytes = (tmp_path / "m.dtxm").read_bytes() == (tmp_path / "m2.dtxm").read_bytes()
    cfg = tr.TrainingConfig(batch_size=2, iterations=5, warmup_iterations=2, tau_max=2, learning_rate=1e-3)
    curves = [[r["loss"] for r in tr.train(reals, tiny_model(dtype=np.float32, tau_max=2), cfg).history]
              for _ in range(2)]
    same = curves[0] == curves[1]
    detail(record_property, f"database bit-exact {db_exact}, checkpoint bit-exact {ck_exact and ck_bytes}, "
                            f"same-seed loss curves identical {same}")
    assert db_exact and ck_exact and ck_bytes and same
