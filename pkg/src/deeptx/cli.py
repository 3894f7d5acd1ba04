"""Command line: deeptx {generate-channels,train,evaluate,neumann-sweep,ablate-l2,report}."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np

from . import channel as ch
from . import harness as hs
from . import model as mdl
from . import training as tr

log = logging.getLogger("deeptx")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = tr.parse_value(raw.strip())
    return out


def _settings(args) -> dict:
    values = tr.read_config_file(args.config) if args.config else {}
    values.update(_overrides(args.set))
    return values


def _split(values: dict, cls) -> tuple:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in values.items() if k in names}, {k: v for k, v in values.items() if k not in names}


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _models(pairs) -> dict:
    out = {}
    for item in pairs or []:
        name, _, path = item.partition("=")
        if not path:
            name, path = "deeptx", name
        out[name] = path
    return out


# ---------------------------------------------------------------------------
# verbs

def cmd_generate_channels(args) -> int:
    values = _settings(args)
    num = ch.Numerology(n_subcarriers=int(values.pop("subcarriers", args.subcarriers)))
    count = int(values.pop("count", args.count))
    n_slots = int(values.pop("slots", args.slots))
    vmax = float(values.pop("velocity_max", args.velocity_max))
    vmin = float(values.pop("velocity_min", args.velocity_min))
    models = tuple(str(values.pop("model", args.model)).upper().split(","))
    if values:
        raise SystemExit(f"unknown generate-channels settings: {sorted(values)}")
    rng = np.random.default_rng(args.seed)
    t0 = time.time()
    reals = (ch.random_realization(rng, num, n_slots, velocity_range=(vmin, vmax), models=models)
             for _ in range(count))
    n = ch.save_database(args.out, reals)
    log.info("wrote %d realizations to %s in %.1f s", n, args.out, time.time() - t0)
    return 0


def cmd_train(args) -> int:
    values = _settings(args)
    values["seed"] = args.seed
    arch = values.pop("arch", args.arch)
    model_seed = int(values.pop("model_seed", args.seed))
    input_skip = bool(values.pop("input_skip", False))
    cfg_values, rest = _split(values, tr.TrainingConfig)
    if rest:
        raise SystemExit(f"unknown training settings: {sorted(rest)}")
    cfg = tr.TrainingConfig.from_mapping(cfg_values)
    db = ch.load_database(args.db)
    val_db = ch.load_database(args.val_db) if args.val_db else None
    if args.init_from:
        model = mdl.load_checkpoint(args.init_from)
        if model.config.tau_max < cfg.tau_max:
            model.config.tau_max = cfg.tau_max
    else:
        mcfg = mdl.variant(arch, tau_max=cfg.tau_max, history=cfg.history, input_skip=input_skip)
        model = mdl.DeepTxModel.init(mcfg, seed=model_seed)
    opt = tr.Lamb(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, cfg.optimizer)
    if args.init_from and args.resume_optimizer:
        tr.load_optimizer_state(args.init_from + ".opt.npz", opt)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    t0 = time.time()
    result = tr.train(db, model, cfg, val_db=val_db, metrics_path=args.metrics, checkpoint_path=args.out,
                      optimizer=opt)
    elapsed = time.time() - t0
    tr.save_optimizer_state(args.out + ".opt.npz", result.optimizer)
    run = {
        "architecture": arch if not args.init_from else f"init-from:{args.init_from}",
        "param_count": mdl.param_count(result.model.config),
        "iterations": cfg.iterations,
        "training": asdict(cfg),
        "skipped_samples": result.skipped,
        "seconds": round(elapsed, 1),
        "database": os.path.abspath(args.db),
    }
    parent = {}
    if args.init_from and os.path.isfile(args.init_from + ".json"):
        with open(args.init_from + ".json") as fh:
            parent = json.load(fh)
        run["parent"] = os.path.abspath(args.init_from)
    run["total_iterations"] = parent.get("total_iterations", parent.get("iterations", 0)) + cfg.iterations
    run["total_seconds"] = round(parent.get("total_seconds", parent.get("seconds", 0.0)) + elapsed, 1)
    with open(args.out + ".json", "w") as fh:
        json.dump(run, fh, indent=2, sort_keys=True)
    log.info("trained %d iterations in %.0f s -> %s", cfg.iterations, elapsed, args.out)
    return 0


def _spec(args, values) -> hs.ExperimentSpec:
    for key, conv in (("taus", _ints), ("snrs", _floats), ("methods", lambda s: tuple(s.split(",")))):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = conv(flag)
        elif key in values and not isinstance(values[key], (tuple, list)):
            values[key] = conv(str(values[key]))
    for key in ("n_slots", "velocity_min", "velocity_max", "scenario", "pattern", "tau_max", "workers"):
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "snr_range", None):
        values["snr_range"] = _floats(args.snr_range)
    elif isinstance(values.get("snr_range"), str):
        values["snr_range"] = _floats(values["snr_range"])
    values["seed"] = args.seed
    spec_values, rest = _split(values, hs.ExperimentSpec)
    if rest:
        raise SystemExit(f"unknown evaluation settings: {sorted(rest)}")
    return hs.ExperimentSpec(**spec_values)


def _print_table(table: hs.BerTable) -> None:
    sys.stdout.write(hs.table_csv(table))


def cmd_evaluate(args) -> int:
    spec = _spec(args, _settings(args))
    models = hs.resolve_models(spec.methods, _models(args.model))
    db = ch.load_database(args.db)
    table = hs.evaluate(spec, models, db)
    _print_table(table)
    if args.out:
        for p in hs.emit_outputs(table, args.out, args.name):
            log.info("wrote %s", p)
    return 0


def cmd_neumann_sweep(args) -> int:
    spec = _spec(args, _settings(args))
    models = _models(args.model)
    if args.source == "deeptx" and "deeptx" not in models:
        raise hs.MissingCheckpointError("neumann-sweep with --source deeptx needs --model deeptx=CHECKPOINT")
    for name, path in models.items():
        if not os.path.isfile(path):
            raise hs.MissingCheckpointError(f"checkpoint not found: {path}")
    models = {name: mdl.load_checkpoint(path) for name, path in models.items()}
    db = ch.load_database(args.db)
    table = hs.neumann_sweep(spec, models, db, ks=_ints(args.ks), source=args.source, mismatch_k=args.mismatch_k)
    _print_table(table)
    if args.out:
        hs.emit_outputs(table, args.out, args.name)
    return 0


def cmd_ablate_l2(args) -> int:
    spec = _spec(args, _settings(args))
    db = ch.load_database(args.db)
    reports = hs.ablation_l2_predictor(spec, args.predictor, db)
    for r in reports:
        print(f"tau={r.tau} snr={r.snr_db:g} dB  MSE pred {r.mse_pred_db:.2f} dB  UL {r.mse_ul_db:.2f} dB  "
              f"gain {r.improvement_db:.2f} dB  BER pred {r.ber_pred:.3e}  UL {r.ber_ul:.3e}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        hs.l2_report_csv(reports, os.path.join(args.out, "ablation_l2.csv"))
    return 0


def cmd_report(args) -> int:
    table = hs.BerTable()
    for path in args.csv:
        for row in hs.read_table_csv(path):
            n = int(row["n_bits"])
            errors = np.array([round(float(row["ber"]) * n)], dtype=np.int64)
            try:
                snr = float(row["snr_db"])
            except ValueError:
                snr = row["snr_db"]
            table.cells.append(hs.Cell(row["method"], int(row["tau"]), snr, errors, n))
    taus = sorted({c.tau for c in table.cells})
    snrs = sorted({c.snr_db for c in table.cells if isinstance(c.snr_db, float)})
    for tau in taus:
        print(f"tau = {tau}")
        print("  method".ljust(34) + "".join(f"{s:>11g}" for s in snrs))
        for method in table.methods():
            cells = {c.snr_db: c for c in table.cells if c.method == method and c.tau == tau}
            line = "".join(f"{cells[s].ber:11.3e}" if s in cells else " " * 11 for s in snrs)
            print(f"  {method:<32}{line}")
    if args.out:
        hs.emit_outputs(table, args.out, args.name)
    return 0


# ---------------------------------------------------------------------------
# parser

def _common(p, seed_required=False):
    p.add_argument("--config", help="flat key = value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)


def _eval_flags(p):
    p.add_argument("--db", required=True, help="channel database file")
    p.add_argument("--model", action="append", metavar="NAME=CHECKPOINT",
                   help="checkpoint for a model key such as deeptx or deeptx_no_zf")
    p.add_argument("--taus")
    p.add_argument("--snrs")
    p.add_argument("--slots", dest="n_slots", type=int)
    p.add_argument("--velocity-min", type=float)
    p.add_argument("--velocity-max", type=float)
    p.add_argument("--scenario")
    p.add_argument("--pattern")
    p.add_argument("--tau-max", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--snr-range", help="lo,hi: add a cell with SNR drawn uniformly per slot")
    p.add_argument("--out", help="output directory for CSV and SVG files")
    p.add_argument("--name", default="ber")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deeptx", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-channels", help="write a channel database")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="A,B,C", help="TDL profiles to draw from, e.g. A or A,B,C")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--slots", type=int, default=7)
    p.add_argument("--subcarriers", type=int, default=48)
    p.add_argument("--velocity-min", type=float, default=ch.VELOCITY_RANGE_KMH[0])
    p.add_argument("--velocity-max", type=float, default=ch.VELOCITY_RANGE_KMH[1])
    p.set_defaults(func=cmd_generate_channels)

    p = sub.add_parser("train", help="train a channel predictor end to end")
    _common(p, seed_required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--val-db")
    p.add_argument("--arch", default="xxs", help="deeptx, xl, l, s, xs, xxs or WIDTHxBLOCKS")
    p.add_argument("--init-from", help="warm-start from this checkpoint")
    p.add_argument("--resume-optimizer", action="store_true", help="also load the optimizer sidecar")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="CSV metrics log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="BER table over tau x SNR")
    _common(p, seed_required=True)
    _eval_flags(p)
    p.add_argument("--methods")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("neumann-sweep", help="BER with k-term Neumann ZF")
    _common(p, seed_required=True)
    _eval_flags(p)
    p.add_argument("--ks", default="1,2,3,4,8,64")
    p.add_argument("--source", choices=("deeptx", "ul", "genie"), default="deeptx")
    p.add_argument("--mismatch-k", type=int, default=2)
    p.set_defaults(func=cmd_neumann_sweep)

    p = sub.add_parser("ablate-l2", help="MSE and BER of a channel predictor")
    _common(p, seed_required=True)
    _eval_flags(p)
    p.add_argument("--predictor", required=True, help="checkpoint path, 'genie' or 'identity'")
    p.set_defaults(func=cmd_ablate_l2)

    p = sub.add_parser("report", help="summarize and re-plot BER CSV files")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out")
    p.add_argument("--name", default="report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ch.ChannelDatabaseError, mdl.CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
