"""Command line interface: synthesize data, partition, estimate similarity,
run federated training, evaluate checkpoints, and run the check suite.

Configuration precedence is CLI flag > config file > built-in default; the
resolved set is frozen into ``manifest.ini`` before round 0, and re-running
with that manifest reproduces ``metrics.csv`` byte for byte.  Exit codes:
0 completion, 1 usage or input error, 2 training divergence, 3 partition
failure.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from fedzsl import __version__
from fedzsl.dataset import (
    FeatureDataset,
    SyntheticSpec,
    generate_synthetic,
    load_attributes,
    load_dataset,
    save_dataset,
    split_train_test,
)
from fedzsl.evaluation import evaluate
from fedzsl.fed import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_DELTA_SCALE,
    DEFAULT_EVAL_EVERY,
    DEFAULT_LOCAL_EPOCHS,
    DEFAULT_NUM_CLIENTS,
    DEFAULT_ROUNDS,
    DEFAULT_SAMPLE_FRACTION,
    DEFAULT_SERVER_LR,
    TrainConfig,
    TrainingDivergedError,
    metrics_to_csv,
    run_simulation,
)
from fedzsl.glasso import (
    DEFAULT_DELTA,
    DEFAULT_MAX_SWEEPS,
    DEFAULT_TOL,
    GlassoConfig,
    distill_targets,
    graphical_lasso,
    sample_covariance,
)
from fedzsl.losses import (
    DEFAULT_TAU,
    DEFAULT_W_AD,
    DEFAULT_W_BC,
    DEFAULT_W_KL,
    AblationFlags,
    DistillConfig,
    LossWeights,
)
from fedzsl.model import (
    ATTRIBUTE_BASED,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MOMENTUM,
    DEFAULT_WEIGHT_DECAY,
    MODES,
    load_model,
    save_model,
)
from fedzsl.partition import (
    PCCD,
    SCHEMES,
    PartitionError,
    PartitionSpec,
    partition,
    partition_summary,
)
from fedzsl.theory import run_check_suite

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2
EXIT_PARTITION = 3

GAMMA_SOURCES = ("covariance", "precision")
ABLATION_TERMS = ("sce", "bc", "kl", "ad")

MANIFEST_FILE = "manifest.ini"
METRICS_FILE = "metrics.csv"
FINAL_MODEL_FILE = "final_model.csv"
GAMMA_FILE = "gamma.csv"
THETA_FILE = "theta.csv"
PARTITION_FILE = "partition.csv"
PARTITION_SUMMARY_FILE = "partition_summary.csv"

# section -> key -> (type tag, default); the single source of run configuration.
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "train": {
        "rounds": ("int", DEFAULT_ROUNDS),
        "num_clients": ("int", DEFAULT_NUM_CLIENTS),
        "local_epochs": ("int", DEFAULT_LOCAL_EPOCHS),
        "batch_size": ("int", DEFAULT_BATCH_SIZE),
        "local_lr": ("float", DEFAULT_LEARNING_RATE),
        "server_lr": ("float", DEFAULT_SERVER_LR),
        "delta_scale": ("float", DEFAULT_DELTA_SCALE),
        "sample_fraction": ("float", DEFAULT_SAMPLE_FRACTION),
        "seed": ("int", 0),
        "eval_every": ("int", DEFAULT_EVAL_EVERY),
    },
    "losses": {
        "w_bc": ("float", DEFAULT_W_BC),
        "w_kl": ("float", DEFAULT_W_KL),
        "w_ad": ("float", DEFAULT_W_AD),
        "tau": ("float", DEFAULT_TAU),
        "sce": ("bool", True),
        "bc": ("bool", True),
        "kl": ("bool", True),
        "ad": ("bool", True),
        "bc_squared": ("bool", True),
    },
    "partition": {
        "scheme": ("str", PCCD),
        "alpha": ("optfloat", None),
        "local_data_ratio": ("float", 1.0),
    },
    "glasso": {
        "delta": ("float", DEFAULT_DELTA),
        "tol": ("float", DEFAULT_TOL),
        "max_sweeps": ("int", DEFAULT_MAX_SWEEPS),
        "standardize": ("bool", True),
        "gamma_source": ("str", "covariance"),
    },
    "model": {
        "mode": ("str", ATTRIBUTE_BASED),
        "momentum": ("float", DEFAULT_MOMENTUM),
        "weight_decay": ("float", DEFAULT_WEIGHT_DECAY),
    },
}

# run-subcommand flag dest -> (section, key)
_OVERRIDES: dict[str, tuple[str, str]] = {
    "rounds": ("train", "rounds"),
    "clients": ("train", "num_clients"),
    "local_epochs": ("train", "local_epochs"),
    "batch_size": ("train", "batch_size"),
    "local_lr": ("train", "local_lr"),
    "server_lr": ("train", "server_lr"),
    "delta_scale": ("train", "delta_scale"),
    "sample_fraction": ("train", "sample_fraction"),
    "seed": ("train", "seed"),
    "eval_every": ("train", "eval_every"),
    "w_bc": ("losses", "w_bc"),
    "w_kl": ("losses", "w_kl"),
    "w_ad": ("losses", "w_ad"),
    "tau": ("losses", "tau"),
    "scheme": ("partition", "scheme"),
    "alpha": ("partition", "alpha"),
    "local_data_ratio": ("partition", "local_data_ratio"),
    "glasso_delta": ("glasso", "delta"),
    "glasso_tol": ("glasso", "tol"),
    "glasso_max_sweeps": ("glasso", "max_sweeps"),
    "standardize": ("glasso", "standardize"),
    "gamma_source": ("glasso", "gamma_source"),
    "mode": ("model", "mode"),
    "momentum": ("model", "momentum"),
    "weight_decay": ("model", "weight_decay"),
}

_BOOL_WORDS = {
    "true": True,
    "false": False,
    "yes": True,
    "no": False,
    "on": True,
    "off": False,
    "1": True,
    "0": False,
}


class CliError(ValueError):
    """Bad command line or config file input."""


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit 1 instead of argparse's 2."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_ERROR)


def _fmt(x: float) -> str:
    return repr(float(x))


def _ini_value(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _fmt(value)
    return str(value)


def _coerce(section: str, key: str, kind: str, raw: str) -> object:
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "optfloat":
            return None if raw == "" else float(raw)
        if kind == "bool":
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(raw)
            return _BOOL_WORDS[raw.lower()]
        return raw
    except ValueError:
        raise CliError(f"config [{section}] {key}: cannot parse '{raw}' as {kind}") from None


def _default_config() -> dict[str, dict[str, object]]:
    return {section: {k: spec[1] for k, spec in keys.items()} for section, keys in _SCHEMA.items()}


def _load_config_file(path: Path, resolved: dict[str, dict[str, object]]) -> None:
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise CliError(f"config file {path}: {exc}") from None
    for section in parser.sections():
        if section == "meta":
            continue
        if section not in _SCHEMA:
            raise CliError(f"config file {path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise CliError(f"config file {path}: unknown key '{key}' in [{section}]")
            kind = _SCHEMA[section][key][0]
            resolved[section][key] = _coerce(section, key, kind, raw)


def _parse_ablation(text: str) -> dict[str, bool]:
    cleaned = text.strip().lower()
    if cleaned in ("full", "all"):
        return {term: True for term in ABLATION_TERMS}
    if cleaned.endswith("-only"):
        cleaned = cleaned[: -len("-only")]
    parts = [p.strip() for p in cleaned.split(",") if p.strip()]
    if not parts:
        raise CliError(f"--ablation got '{text}'; expected 'full' or terms from {ABLATION_TERMS}")
    for part in parts:
        if part not in ABLATION_TERMS:
            raise CliError(f"--ablation term '{part}' is not one of {ABLATION_TERMS}")
    return {term: term in parts for term in ABLATION_TERMS}


def _resolve_run_config(args: argparse.Namespace) -> dict[str, dict[str, object]]:
    resolved = _default_config()
    if args.config is not None:
        _load_config_file(Path(args.config), resolved)
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            resolved[section][key] = value
    if args.ablation is not None:
        for term, enabled in _parse_ablation(args.ablation).items():
            resolved["losses"][term] = enabled
    if resolved["glasso"]["gamma_source"] not in GAMMA_SOURCES:
        raise CliError(
            f"gamma_source must be one of {GAMMA_SOURCES}, "
            f"got '{resolved['glasso']['gamma_source']}'"
        )
    return resolved


def _write_manifest(
    path: Path, resolved: dict[str, dict[str, object]], meta: dict[str, object]
) -> None:
    parser = configparser.ConfigParser()
    parser["meta"] = {k: _ini_value(v) for k, v in meta.items()}
    for section, keys in resolved.items():
        parser[section] = {k: _ini_value(v) for k, v in keys.items()}
    with path.open("w") as handle:
        parser.write(handle)


def _write_square_csv(path: Path, matrix: np.ndarray) -> None:
    n = matrix.shape[0]
    lines = [str(n)]
    lines += [",".join(_fmt(v) for v in row) for row in matrix]
    path.write_text("\n".join(lines) + "\n")


def _build_train_config(resolved: dict[str, dict[str, object]]) -> TrainConfig:
    t, l, p, m = resolved["train"], resolved["losses"], resolved["partition"], resolved["model"]
    spec = PartitionSpec(
        scheme=str(p["scheme"]),
        num_clients=int(t["num_clients"]),
        alpha=p["alpha"],
        local_data_ratio=float(p["local_data_ratio"]),
        seed=int(t["seed"]),
    )
    return TrainConfig(
        rounds=int(t["rounds"]),
        num_clients=int(t["num_clients"]),
        local_epochs=int(t["local_epochs"]),
        batch_size=int(t["batch_size"]),
        local_lr=float(t["local_lr"]),
        server_lr=float(t["server_lr"]),
        delta_scale=float(t["delta_scale"]),
        sample_fraction=float(t["sample_fraction"]),
        seed=int(t["seed"]),
        weights=LossWeights(w_bc=float(l["w_bc"]), w_kl=float(l["w_kl"]), w_ad=float(l["w_ad"])),
        distill=None,
        mode=str(m["mode"]),
        ablation=AblationFlags(
            sce=bool(l["sce"]), bc=bool(l["bc"]), kl=bool(l["kl"]), ad=bool(l["ad"])
        ),
        partition=spec,
        eval_every=int(t["eval_every"]),
        momentum=float(m["momentum"]),
        weight_decay=float(m["weight_decay"]),
        bc_squared=bool(l["bc_squared"]),
    )


def _metric_text(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def cmd_synth(args: argparse.Namespace) -> int:
    overrides = {
        name: getattr(args, name)
        for name in (
            "num_seen",
            "num_unseen",
            "d_a",
            "d_v",
            "samples_per_class",
            "attribute_sparsity",
            "noise_std",
            "group_count",
        )
        if getattr(args, name) is not None
    }
    spec = SyntheticSpec(**overrides)
    ds, attrs = generate_synthetic(spec, args.seed)
    out = Path(args.out)
    save_dataset(out, ds, attrs, binary=args.binary)
    print(
        f"wrote {spec.num_seen}+{spec.num_unseen} classes, "
        f"{ds.num_samples} samples, d_v={spec.d_v}, d_a={spec.d_a} to {out}"
    )
    return EXIT_OK


def cmd_partition(args: argparse.Namespace) -> int:
    ds, _ = load_dataset(args.data)
    train, _, _ = split_train_test(ds, args.seed)
    spec = PartitionSpec(
        scheme=args.scheme,
        num_clients=args.clients,
        alpha=args.alpha,
        local_data_ratio=args.local_data_ratio,
        seed=args.seed,
    )
    part = partition(train, spec)
    for k, idx in enumerate(part.assignments):
        print(f"client {k}: {len(part.local_classes[k])} classes, {idx.size} samples")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = ["client_id,sample_index"]
        for k, idx in enumerate(part.assignments):
            rows += [f"{k},{int(i)}" for i in idx]
        (out / PARTITION_FILE).write_text("\n".join(rows) + "\n")
        rows = ["client_id,class_id,count"]
        rows += [f"{k},{c},{n}" for k, c, n in partition_summary(part, train.labels)]
        (out / PARTITION_SUMMARY_FILE).write_text("\n".join(rows) + "\n")
        print(f"wrote {PARTITION_FILE} and {PARTITION_SUMMARY_FILE} to {out}")
    return EXIT_OK


def cmd_glasso(args: argparse.Namespace) -> int:
    attrs = load_attributes(args.data)
    cfg = GlassoConfig(
        delta=args.delta,
        tol=args.tol,
        max_sweeps=args.max_sweeps,
        standardize=args.standardize if args.standardize is not None else True,
    )
    S = sample_covariance(attrs, standardize=cfg.standardize)
    sim = graphical_lasso(S, cfg)
    source = sim.gamma if args.gamma_source == "covariance" else sim.theta
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_square_csv(out / GAMMA_FILE, sim.gamma)
    _write_square_csv(out / THETA_FILE, sim.theta)
    edges = int(np.count_nonzero(np.triu(sim.theta, k=1)))
    print(
        f"solved {sim.num_classes} classes in {sim.sweeps} sweeps "
        f"(converged={sim.converged}), {edges} off-diagonal edges, "
        f"objective {sim.objective[-1]:.6f}"
    )
    print(f"similarity source: {args.gamma_source} ({source.shape[0]}x{source.shape[0]})")
    print(f"wrote {GAMMA_FILE} and {THETA_FILE} to {out}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    resolved = _resolve_run_config(args)
    ds, attrs = load_dataset(args.data)
    cfg = _build_train_config(resolved)
    if cfg.kl_enabled:
        gl = resolved["glasso"]
        gcfg = GlassoConfig(
            delta=float(gl["delta"]),
            tol=float(gl["tol"]),
            max_sweeps=int(gl["max_sweeps"]),
            standardize=bool(gl["standardize"]),
        )
        S = sample_covariance(attrs, standardize=gcfg.standardize)
        sim = graphical_lasso(S, gcfg)
        source = sim.gamma if gl["gamma_source"] == "covariance" else sim.theta
        tau = float(resolved["losses"]["tau"])
        cfg.distill = DistillConfig(tau=tau, targets=distill_targets(source, tau))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(),
        "command": "run",
        "data": str(Path(args.data).resolve()),
        "out": str(out.resolve()),
        "threads": args.threads,
    }
    _write_manifest(out / MANIFEST_FILE, resolved, meta)
    trace = run_simulation(ds, attrs, cfg, threads=args.threads)
    (out / METRICS_FILE).write_text(metrics_to_csv(trace))
    save_model(out / FINAL_MODEL_FILE, trace.final_params)
    last = trace[-1]
    print(
        f"finished {cfg.rounds} rounds: acc_c={_metric_text(last.acc_c)} "
        f"acc_u={_metric_text(last.acc_u)} acc_s={_metric_text(last.acc_s)} "
        f"acc_h={_metric_text(last.acc_h)} global_loss={last.global_loss:.6f}"
    )
    print(f"wrote {MANIFEST_FILE}, {METRICS_FILE}, {FINAL_MODEL_FILE} to {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ds, attrs = load_dataset(args.data)
    did_something = False
    if args.stats:
        did_something = True
        print(f"samples={ds.num_samples} d_v={ds.d_v} classes={ds.split.num_classes} "
              f"seen={len(ds.split.seen)} unseen={len(ds.split.unseen)}")
        for c in np.unique(ds.labels):
            rows = ds.features[ds.labels == c]
            # Shift by the first row before var() so a class of identical
            # rows reports exactly 0.0 instead of summation round-off.
            variance = float((rows - rows[0]).var(axis=0).mean())
            print(f"class {int(c)}: {rows.shape[0]} samples, within-class variance {_fmt(variance)}")
    if args.model is not None:
        did_something = True
        params = load_model(args.model)
        _, test_seen, test_unseen = split_train_test(ds, args.seed)
        metrics = evaluate(params, test_seen, test_unseen, attrs, ds.split)
        print(f"acc_c={_metric_text(metrics.acc_c)}")
        print(f"acc_u={_metric_text(metrics.acc_u)}")
        print(f"acc_s={_metric_text(metrics.acc_s)}")
        print(f"acc_h={_metric_text(metrics.acc_h)}")
    if not did_something:
        raise CliError("eval needs --model and/or --stats")
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    results = run_check_suite(trials=args.trials, seed=args.seed)
    print(f"{'check':<20} {'trials':>8} {'violations':>11} {'max_slack':>12}")
    failures = 0
    for row in results:
        failures += row.violations
        print(f"{row.name:<20} {row.trials:>8} {row.violations:>11} {row.max_slack:>12.3e}")
    if failures:
        sys.stderr.write(f"{failures} violation(s) found\n")
        return EXIT_ERROR
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="fedzsl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-seen", type=int, default=None)
    p.add_argument("--num-unseen", type=int, default=None)
    p.add_argument("--d-a", type=int, default=None)
    p.add_argument("--d-v", type=int, default=None)
    p.add_argument("--samples-per-class", type=int, default=None)
    p.add_argument("--attribute-sparsity", type=float, default=None)
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--group-count", type=int, default=None)
    p.add_argument("--binary", action="store_true", help="write features.bin instead of CSV")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("partition", help="partition the training split across clients")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--scheme", choices=SCHEMES, default=PCCD)
    p.add_argument("-k", "--clients", type=int, default=DEFAULT_NUM_CLIENTS)
    p.add_argument("--alpha", type=float, default=None, help="dirichlet concentration")
    p.add_argument("--local-data-ratio", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="directory for partition CSV files")
    p.set_defaults(handler=cmd_partition)

    p = sub.add_parser("glasso", help="estimate the class similarity matrix")
    p.add_argument("--data", required=True, help="dataset directory (attributes are read)")
    p.add_argument("--delta", type=float, default=DEFAULT_DELTA)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)
    p.add_argument("--max-sweeps", type=int, default=DEFAULT_MAX_SWEEPS)
    p.add_argument(
        "--no-standardize",
        dest="standardize",
        action="store_const",
        const=False,
        default=None,
        help="use raw covariance instead of correlations",
    )
    p.add_argument("--gamma-source", choices=GAMMA_SOURCES, default="covariance")
    p.add_argument("--out", default=".", help="directory for gamma.csv and theta.csv")
    p.set_defaults(handler=cmd_glasso)

    p = sub.add_parser("run", help="run the federated training simulation")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="INI config file (a manifest works)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("-k", "--clients", type=int, default=None)
    p.add_argument("--local-epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--local-lr", type=float, default=None)
    p.add_argument("--server-lr", type=float, default=None)
    p.add_argument("--delta-scale", type=float, default=None)
    p.add_argument("--sample-fraction", type=float, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--w-bc", type=float, default=None)
    p.add_argument("--w-kl", type=float, default=None)
    p.add_argument("--w-ad", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument(
        "--ablation",
        default=None,
        help="'full' or enabled terms, e.g. 'sce-only' or 'sce,bc'",
    )
    p.add_argument("--scheme", choices=SCHEMES, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--local-data-ratio", type=float, default=None)
    p.add_argument("--glasso-delta", type=float, default=None)
    p.add_argument("--glasso-tol", type=float, default=None)
    p.add_argument("--glasso-max-sweeps", type=int, default=None)
    p.add_argument(
        "--no-standardize",
        dest="standardize",
        action="store_const",
        const=False,
        default=None,
    )
    p.add_argument("--gamma-source", choices=GAMMA_SOURCES, default=None)
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("eval", help="evaluate a checkpoint and/or print dataset stats")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", default=None, help="model checkpoint CSV")
    p.add_argument("--seed", type=int, default=0, help="train/test split seed")
    p.add_argument("--stats", action="store_true", help="print per-class statistics")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("check", help="run the verification suite")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except TrainingDivergedError as exc:
        sys.stderr.write(f"training diverged: {exc}\n")
        return EXIT_DIVERGED
    except PartitionError as exc:
        sys.stderr.write(f"partition failed: {exc}\n")
        return EXIT_PARTITION
    except (ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
