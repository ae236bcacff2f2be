"""Command-line entry point: gen-synthetic, calibrate, train, evaluate, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import re
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .calibration import GridSpec, calibrate_platoon
from .controller import load_params, save_params
from .core import (
    CALIBRATED_PARAMS,
    DivergenceError,
    IdmParams,
    SvoAccError,
    as_phi,
)
from .ingest import (
    Sinusoid,
    ScenarioSpec,
    gen_synthetic,
    load_csv,
    save_csv,
    scenario_from_series,
)
from .metrics import build_table, format_phi, write_plot_data
from .training import DEFAULT_PHI_SET, LossWeights, TrainConfig, rollout_controller, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

SCENARIO_CSV = "scenario.csv"
SCENARIO_JSON = "scenario.json"
CHECKPOINT = "checkpoint.bin"
HISTORY = "history.csv"
TABLE_TXT = "table.txt"
TABLE_CSV = "table.csv"
REPORT = "report.txt"


class CliInputError(SvoAccError, ValueError):
    pass


# small helpers ---------------------------------------------------------------

def parse_phi(text: str) -> float:
    """Parse ``0``, ``0.785``, ``pi/4``, ``3pi/8`` or ``pi`` fractions into radians."""
    t = text.strip().lower().replace(" ", "")
    m = re.fullmatch(r"(\d*\.?\d*)\*?pi(?:/(\d*\.?\d+))?", t)
    try:
        if m:
            num = float(m.group(1)) if m.group(1) else 1.0
            den = float(m.group(2)) if m.group(2) else 1.0
            value = num * math.pi / den
        else:
            value = float(t)
    except ValueError:
        raise CliInputError(f"cannot parse SVO angle {text!r}") from None
    return as_phi(value)


def parse_phi_list(text: str) -> tuple:
    phis = tuple(sorted({parse_phi(p) for p in text.split(",") if p.strip()}))
    if not phis:
        raise CliInputError("empty SVO angle list")
    return phis


def parse_axis(text: str) -> tuple:
    """``a,b,c`` or ``start:stop:step``."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            count = int(round((stop - start) / step)) + 1
            return tuple(float(x) for x in np.round(start + step * np.arange(count), 10))
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise CliInputError(f"bad grid axis {text!r}") from None


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, subcommand: str, config: dict, inputs: List[Path], outputs: List[str],
                   seed: Optional[int]) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": list(outputs),  # relative to the output directory
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _params_from_json(items) -> tuple:
    return tuple(IdmParams(**d) for d in items)


def load_scenario(path, dt: Optional[float] = None):
    """Scenario from a gen-synthetic directory (or its CSV next to ``scenario.json``).

    Returns ``(scenario, input_files)``.
    """
    path = Path(path)
    csv_path = path / SCENARIO_CSV if path.is_dir() else path
    json_path = csv_path.with_name(SCENARIO_JSON)
    if not csv_path.is_file():
        raise CliInputError(f"missing scenario file {csv_path}")
    meta = json.loads(json_path.read_text()) if json_path.is_file() else {}
    series = load_csv(csv_path, resample_dt=dt)
    n = len(series)
    if "follower_params" in meta:
        followers = _params_from_json(meta["follower_params"])
    else:
        followers = tuple(CALIBRATED_PARAMS[k] for k in sorted(CALIBRATED_PARAMS))[: max(n - 2, 0)]
    scenario = scenario_from_series(series, followers,
                                    meta.get("vehicle_length", ScenarioSpec.vehicle_length),
                                    meta.get("min_spacing_floor", ScenarioSpec.min_spacing_floor))
    inputs = [csv_path] + ([json_path] if json_path.is_file() else [])
    return scenario, inputs


# subcommands -------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    spec = ScenarioSpec(
        n_vehicles=args.n_vehicles,
        leader=Sinusoid(args.mean, args.amplitude, args.period, args.phase),
        follower_params=tuple(CALIBRATED_PARAMS[k] for k in sorted(CALIBRATED_PARAMS))[: max(args.n_vehicles - 2, 0)]
        if args.n_vehicles <= 5 else (CALIBRATED_PARAMS[5],) * (args.n_vehicles - 2),
        duration=args.duration, dt=args.dt, seed=args.seed, leader_noise=args.leader_noise,
    ).validate()
    out = Path(args.out)
    meta = {
        "n_vehicles": spec.n_vehicles,
        "leader": {"kind": "sinusoid", **asdict(spec.leader)},
        "follower_params": [p.as_dict() for p in spec.follower_params],
        "av_params": spec.av_params.as_dict(),
        "duration": spec.duration,
        "dt": spec.dt,
        "seed": spec.seed,
        "leader_noise": spec.leader_noise,
        "vehicle_length": spec.vehicle_length,
        "min_spacing_floor": spec.min_spacing_floor,
    }
    write_manifest(out, "gen-synthetic", meta, [], [SCENARIO_CSV, SCENARIO_JSON], spec.seed)
    scenario = gen_synthetic(spec)
    save_csv(out / SCENARIO_CSV, scenario.series())
    (out / SCENARIO_JSON).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / SCENARIO_CSV}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    data = Path(args.data)
    if not data.is_file():
        raise CliInputError(f"missing data file {data}")
    grid = GridSpec(**{name: parse_axis(getattr(args, name)) for name in IdmParams.FIELDS
                       if getattr(args, name) is not None})
    out = Path(args.out)
    config = {"grid": {name: list(getattr(grid, name)) for name in IdmParams.FIELDS},
              "dt": args.dt, "n_jobs": args.n_jobs, "vehicle_length": args.vehicle_length,
              "min_spacing_floor": args.min_spacing_floor}
    write_manifest(out, "calibrate", config, [data], ["calibration.txt", "calibration.json"], args.seed)
    series = sorted(load_csv(data, resample_dt=args.dt), key=lambda s: s.vehicle_id)
    if len(series) < 2:
        raise CliInputError("calibration needs at least two vehicles")
    from .core import SimConfig
    cfg = SimConfig(dt=series[0].dt, vehicle_length=args.vehicle_length,
                    min_spacing_floor=args.min_spacing_floor)
    reports = calibrate_platoon(grid, series, cfg, n_jobs=args.n_jobs)
    header = f"{'vehicle':>7} " + " ".join(f"{n:>7}" for n in IdmParams.FIELDS) + f" {'rmse_m':>10}"
    lines = [header]
    for s, rep in zip(series[1:], reports):
        lines.append(f"{s.vehicle_id:>7} " + " ".join(f"{x:7.2f}" for x in rep.best_params.as_tuple())
                     + f" {rep.rmse:10.4f}")
    lines.append(f"grid points per vehicle: {grid.size}")
    text = "\n".join(lines) + "\n"
    (out / "calibration.txt").write_text(text)
    payload = {str(s.vehicle_id): rep.as_dict() for s, rep in zip(series[1:], reports)}
    (out / "calibration.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def _train_config(args, scenario) -> tuple:
    cfg = TrainConfig(scenario, epochs=args.epochs, lr=args.lr, seed=args.seed,
                      phi_set=parse_phi_list(args.phis) if args.phis else DEFAULT_PHI_SET,
                      hidden_dim=args.hidden_dim, seq_len=args.seq_len, a_lim=args.a_lim,
                      optimizer=args.optimizer, trend_mode=args.trend_mode, collective=args.collective,
                      lr_schedule=args.lr_schedule, clip_norm=args.clip_norm)
    defaults = LossWeights()
    weights = LossWeights(
        alpha=defaults.alpha if args.alpha is None else args.alpha,
        beta=defaults.beta if args.beta is None else args.beta,
        gamma=defaults.gamma if args.gamma is None else args.gamma,
    )
    return cfg, weights


def cmd_train(args) -> int:
    scenario, inputs = load_scenario(args.scenario, args.dt) if args.scenario else _bundled(args)
    cfg, weights = _train_config(args, scenario)
    out = Path(args.out)
    config = {k: v for k, v in cfg.describe().items()}
    config["weights"] = asdict(weights)
    write_manifest(out, "train", config, inputs, [CHECKPOINT, HISTORY], args.seed)

    history_path = out / HISTORY
    with history_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        labels = [format_phi(p) for p in cfg.phi_set]
        writer.writerow(["epoch", "total", "prediction", "cost", "smoothness", "trend", "ramp"]
                        + [f"u_self[{l}]" for l in labels] + [f"u_collective[{l}]" for l in labels])

        def log(epoch, b):
            writer.writerow([epoch] + [repr(float(x)) for x in
                                       (b.total, b.prediction, b.cost, b.smoothness, b.trend, b.ramp)]
                            + [repr(float(x)) for x in b.u_self + b.u_collective])
            fh.flush()

        params, history = train(cfg, weights, log)
    save_params(params, out / CHECKPOINT)
    print(f"epochs {len(history)}: total {history[0].total:.6g} -> {history[-1].total:.6g}")
    return EXIT_OK


def _bundled(args):
    spec = ScenarioSpec(dt=args.dt or ScenarioSpec.dt, seed=args.seed)
    return gen_synthetic(spec), []


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise CliInputError(f"missing checkpoint {ckpt}")
    scenario, inputs = load_scenario(args.scenario, args.dt) if args.scenario else _bundled(args)
    phis = parse_phi_list(args.phis)
    if 0.0 not in phis:
        phis = (0.0,) + phis
    out = Path(args.out)
    config = {"phis": list(phis), "checkpoint": str(ckpt)}
    write_manifest(out, "evaluate", config, [ckpt] + inputs,
                   [TABLE_TXT, TABLE_CSV, "trajectories.csv", "bars.csv"], args.seed)
    params = load_params(ckpt)
    rollouts = {phi: rollout_controller(params, scenario, phi) for phi in phis}
    table = build_table(rollouts, 0.0)
    (out / TABLE_TXT).write_text(table.to_text() + "\n")
    (out / TABLE_CSV).write_text(table.to_csv())
    write_plot_data(rollouts, table, out)
    collided = [format_phi(p) for p, r in rollouts.items() if r.collision]
    if collided:
        print(f"warning: spacing reached zero for phi {', '.join(collided)}")
    print(table.to_text())
    return EXIT_OK


def cmd_report(args) -> int:
    d = Path(args.eval_dir)
    for name in (TABLE_CSV, TABLE_TXT):
        if not (d / name).is_file():
            raise CliInputError(f"missing evaluation artifact {d / name}")
    with (d / TABLE_CSV).open() as fh:
        rows = list(csv.DictReader(fh))
    lines = ["Evaluation summary (changes relative to phi = 0)", ""]
    for r in rows:
        phi = float(r["phi"])
        if phi == 0.0:
            continue
        e = "undefined" if r["energy_pct"] == "" else f"{float(r['energy_pct']):+.2f}%"
        s = "undefined" if r["speed_pct"] == "" else f"{float(r['speed_pct']):+.2f}%"
        lines.append(f"vehicle {r['vehicle_id']} at phi {format_phi(phi)}: energy {e}, average speed {s}")
    lines += ["", (d / TABLE_TXT).read_text().rstrip("\n")]
    text = "\n".join(lines) + "\n"
    (d / REPORT).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# argument parsing ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dt", type=float, default=None, help="time step in seconds")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="out", help="output directory")

    parser = argparse.ArgumentParser(prog="svoacc", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="write the synthetic platoon scenario")
    p.add_argument("--n-vehicles", type=int, default=5)
    p.add_argument("--mean", type=float, default=2.5)
    p.add_argument("--amplitude", type=float, default=1.5)
    p.add_argument("--period", type=float, default=60.0)
    p.add_argument("--phase", type=float, default=Sinusoid.phase, help="leader phase offset in radians")
    p.add_argument("--duration", type=float, default=120.0)
    p.add_argument("--leader-noise", type=float, default=0.0)
    p.set_defaults(func=cmd_gen_synthetic, dt_default=0.1)

    p = sub.add_parser("calibrate", parents=[common], help="grid-search IDM parameters per follower")
    p.add_argument("data", help="trajectory CSV")
    for name in IdmParams.FIELDS:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None,
                       help="comma list or start:stop:step")
    p.add_argument("--n-jobs", type=int, default=1)
    p.add_argument("--vehicle-length", type=float, default=ScenarioSpec.vehicle_length)
    p.add_argument("--min-spacing-floor", type=float, default=ScenarioSpec.min_spacing_floor)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", parents=[common], help="train the SVO-conditioned controller")
    p.add_argument("--scenario", default=None, help="gen-synthetic directory or scenario CSV")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--phis", default=None, help="comma list, e.g. 0,pi/4,pi/2")
    p.add_argument("--hidden-dim", type=int, default=TrainConfig.hidden_dim)
    p.add_argument("--seq-len", type=int, default=TrainConfig.seq_len)
    p.add_argument("--a-lim", type=float, default=TrainConfig.a_lim)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=TrainConfig.optimizer)
    p.add_argument("--trend-mode", choices=("hinge", "symmetric"), default=TrainConfig.trend_mode)
    p.add_argument("--collective", choices=("first", "mean"), default=TrainConfig.collective)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default=TrainConfig.lr_schedule)
    p.add_argument("--clip-norm", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="roll out a checkpoint at several SVO angles")
    p.add_argument("checkpoint")
    p.add_argument("--scenario", default=None)
    p.add_argument("--phis", default="0,pi/4,pi/2")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="summarise an evaluation directory")
    p.add_argument("eval_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "dt", None) is None and args.command == "gen-synthetic":
        args.dt = 0.1
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SvoAccError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
