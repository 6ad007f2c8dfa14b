"""``jcl-lab`` command line: verification suites and training runs.

Exit codes: 0 success, 1 verification or training failure, 2 usage or
config error.

Every command writes ``manifest.json`` into ``--out`` holding the fully
resolved config. Passing that manifest back as ``--config`` replays the run
and reproduces its CSV files byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

from jcl_lab import __version__, infotheory, nn, theory, trainer
from jcl_lab.errors import ContractError, NonFiniteLossError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

THREADS_ENV = "JCL_LAB_THREADS"

BOUNDS_DEFAULTS = {"instances": 1000, "seed": 0, "h_per_instance": 3, "max_points": 8, "max_hypotheses": 32}
INFO_DEFAULTS = {
    "seed": 0, "identity_instances": 500, "dpi_chains": 1000, "infonce_joints": 20,
    "infonce_ks": [1, 8, 64], "infonce_trials": 200,
    # added to the JS side of the identity check; nonzero only for fault injection
    "perturb": 0.0,
}


class ConfigError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    out_dir: str
    seed: int
    version: str = __version__
    config: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# plumbing


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    # a manifest from an earlier run can be replayed directly
    if "command" in obj and "config" in obj:
        obj = obj["config"]
    return obj


def _resolve(defaults, given):
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


def _positive_int(cfg, key, allow_zero=False):
    value = cfg[key]
    if isinstance(value, bool) or not isinstance(value, int) or value < (0 if allow_zero else 1):
        raise ConfigError(f"{key} must be a {'non-negative' if allow_zero else 'positive'} integer, got {value!r}")
    return value


def _threads():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1")
    return n


def _prepare_out(out_dir):
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise ConfigError(f"output directory {out_dir} is not writable")


def _write_atomic(out_dir, name, text):
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, os.path.join(out_dir, name))
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(text.encode()).hexdigest()


def _rows_to_csv(rows, columns):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def _finish(manifest, files, out_dir):
    for name, text in files.items():
        manifest.outputs[name] = _write_atomic(out_dir, name, text)
    _write_atomic(out_dir, "manifest.json", manifest.to_json() + "\n")
    print(manifest.to_json())


# --------------------------------------------------------------------------
# commands


def cmd_verify_bounds(args):
    cfg = _resolve(BOUNDS_DEFAULTS, _load_config(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.instances is not None:
        cfg["instances"] = args.instances
    for key in ("instances", "h_per_instance", "max_points", "max_hypotheses"):
        _positive_int(cfg, key)
    _positive_int(cfg, "seed", allow_zero=True)
    _prepare_out(args.out)

    def one(i):
        return theory.check_random_instance(cfg["seed"], i, cfg["h_per_instance"],
                                            cfg["max_points"], cfg["max_hypotheses"])

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = [r for chunk in pool.map(one, range(cfg["instances"])) for r in chunk]
    violations = sum(not r["holds"] for r in rows)
    manifest = RunManifest("verify-bounds", args.config, args.out, cfg["seed"], config=cfg)
    _finish(manifest, {"bounds.csv": _rows_to_csv(rows, theory.REPORT_COLUMNS)}, args.out)
    if violations:
        print(f"{violations} bound violations", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_verify_info(args):
    cfg = _resolve(INFO_DEFAULTS, _load_config(args.config))
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.instances is not None:
        for key in ("identity_instances", "dpi_chains", "infonce_joints"):
            cfg[key] = args.instances
    for key in ("identity_instances", "dpi_chains", "infonce_joints", "infonce_trials"):
        _positive_int(cfg, key)
    _positive_int(cfg, "seed", allow_zero=True)
    ks = cfg["infonce_ks"]
    if not isinstance(ks, list) or not ks or not all(isinstance(k, int) and k >= 1 for k in ks):
        raise ConfigError("infonce_ks must be a non-empty list of positive integers")
    if not isinstance(cfg["perturb"], (int, float)):
        raise ConfigError("perturb must be a number")
    _prepare_out(args.out)

    seed = cfg["seed"]
    jobs = [
        lambda: infotheory.run_identity_suite(cfg["identity_instances"], seed, float(cfg["perturb"])),
        lambda: infotheory.run_dpi_suite(cfg["dpi_chains"], seed),
        lambda: infotheory.run_infonce_suite(cfg["infonce_joints"], seed, tuple(ks), cfg["infonce_trials"]),
    ]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        rows = [r for part in pool.map(lambda job: job(), jobs) for r in part]
    failures = sum(not r["pass"] for r in rows)
    manifest = RunManifest("verify-info", args.config, args.out, seed, config=cfg)
    _finish(manifest, {"info.csv": _rows_to_csv(rows, infotheory.CHECK_COLUMNS)}, args.out)
    if failures:
        print(f"{failures} information checks failed", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _parse_gammas(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse --gamma-sweep {text!r}") from None
    if not values or any(v < 0 for v in values):
        raise ConfigError("--gamma-sweep needs non-negative comma-separated values")
    return values


def cmd_train(args):
    given = _load_config(args.config)
    sweep = given.pop("gamma_sweep", None)
    if args.gamma_sweep is not None:
        sweep = _parse_gammas(args.gamma_sweep)
    if args.seed is not None:
        given["seed"] = args.seed
    try:
        cfg = trainer.TrainConfig.from_dict(given)
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from exc
    if args.instances is not None:
        raise ConfigError("--instances does not apply to train")
    _prepare_out(args.out)

    resolved = cfg.to_dict()
    files = {}
    if sweep:
        resolved["gamma_sweep"] = sweep
        rows = []
        for g in sweep:
            run = trainer.train_jcl(trainer.TrainConfig.from_dict({**cfg.to_dict(), "gamma": g}))
            files[f"metrics_gamma_{g!r}.csv"] = trainer.metrics_to_csv(run.metrics)
            rows.append({"gamma": g, "seed": cfg.seed, "target_acc": run.final_target_acc,
                         "probe_error": run.probe_error})
        files["sweep.csv"] = _rows_to_csv(rows, ("gamma", "seed", "target_acc", "probe_error"))
    else:
        run = trainer.train_jcl(cfg)
        files["metrics.csv"] = trainer.metrics_to_csv(run.metrics)
        files["features.csv"] = trainer.features_to_csv(run)
        files["checkpoint.json"] = json.dumps(nn.to_checkpoint(run.state), sort_keys=True)
    manifest = RunManifest("train", args.config, args.out, cfg.seed, config=resolved)
    _finish(manifest, files, args.out)
    return EXIT_OK


COMMANDS = {"verify-bounds": cmd_verify_bounds, "verify-info": cmd_verify_info, "train": cmd_train}


def build_parser():
    parser = argparse.ArgumentParser(prog="jcl-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config or a manifest from an earlier run")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--seed", type=int, help="root seed, overrides the config")
        p.add_argument("--instances", type=int, help="number of random instances to check")
        if name == "train":
            p.add_argument("--gamma-sweep", help='comma-separated gamma values, e.g. "0.1,0.5,1,2"')
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
