"""Experiment runner.

Configs are flat JSON objects; every key is optional except where noted and
unknown keys are rejected.  Subcommands:

    fedamp run --config exp.json [--seed N] [--out DIR] [--threads N]
    fedamp validate --config exp.json
    fedamp presets
    fedamp oracle-check

Exit codes: 0 ok, 2 configuration error, 3 runtime or numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import federation as fed
from . import metrics
from .attention import ATTENTION_KINDS, MODES, Linear, NegExp, make_attention
from .errors import ConfigError, FedAMPError, FormatError
from .models import MLP, LogisticRegression, Quadratic
from .optim import SOLVER_METHODS, ConstantTheory, Diminishing, StepDecay, SolverConfig

log = logging.getLogger("fedamp")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

ALGORITHMS = ("fedamp", "heurfedamp", "fedavg", "fedprox", "fedavg_ft", "fedprox_ft", "separate")
SCHEDULES = ("step_decay", "constant_theory", "diminishing")
MODELS = ("logistic", "mlp")
DATA_SOURCES = ("synthetic", "idx")
PARTITIONS = ("iid", "pathological", "practical")


@dataclass
class ExperimentConfig:
    algorithm: str = "fedamp"
    attention: str = "negexp"
    sigma: float = 100.0
    theta: float | None = None
    weight_mode: str = "clamped"
    lam: float = 1.0
    heur_sigma: float = 25.0
    self_weight: float | list | str = "group"
    mu: float = 0.01
    finetune_epochs: int = 1
    schedule: str = "step_decay"
    alpha0: float = 1e4
    decay_factor: float = 0.1
    decay_period: int = 30
    diminishing_a: float = 1.0
    data: str = "synthetic"
    groups: int = 3
    classes: int = 6
    features: int = 10
    clients_per_group: int | list = 5
    train_samples: int | list = 100
    test_samples: int = 100
    dominance: float = 0.8
    noise: float = 1.0
    mean_scale: float = 1.0
    data_seed: int | None = None
    idx_images: str | None = None
    idx_labels: str | None = None
    partition: str = "practical"
    clients: int | None = None
    preset: str | None = None
    superclasses: str | None = None
    test_fraction: float = 0.2
    model: str = "logistic"
    hidden: int = 4
    epochs: int = 10
    batch_size: int = 100
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    drop_rate: float = 0.0
    epoch_jitter: list | None = None
    exclude_dropped: bool = False
    rounds: int = 90
    seed: int = 0
    out: str = "runs"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


# key -> accepted JSON types
_TYPES = {
    "float": (int, float),
    "int": (int,),
    "str": (str,),
    "bool": (bool,),
}
_SCHEMA = {
    "algorithm": "str", "attention": "str", "sigma": "float", "theta": "float?",
    "weight_mode": "str", "lam": "float", "heur_sigma": "float", "self_weight": "any",
    "mu": "float", "finetune_epochs": "int", "schedule": "str", "alpha0": "float",
    "decay_factor": "float", "decay_period": "int", "diminishing_a": "float",
    "data": "str", "groups": "int", "classes": "int", "features": "int",
    "clients_per_group": "intlist", "train_samples": "intlist", "test_samples": "int",
    "dominance": "float", "noise": "float", "mean_scale": "float", "data_seed": "int?",
    "idx_images": "str?", "idx_labels": "str?", "partition": "str", "clients": "int?",
    "preset": "str?", "superclasses": "str?", "test_fraction": "float", "model": "str",
    "hidden": "int", "epochs": "int", "batch_size": "int", "learning_rate": "float",
    "optimizer": "str", "drop_rate": "float", "epoch_jitter": "pair?",
    "exclude_dropped": "bool", "rounds": "int", "seed": "int", "out": "str",
}


def _check_type(key, value, kind):
    if kind.endswith("?"):
        if value is None:
            return value
        kind = kind[:-1]
    if kind == "any":
        return value
    if kind == "intlist":
        if isinstance(value, list):
            if not value or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError("expected an integer or a non-empty list of integers", key)
            return value
        kind = "int"
    if kind == "pair":
        if (
            not isinstance(value, list)
            or len(value) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        ):
            raise ConfigError("expected [lo, hi] integers", key)
        return value
    ok = isinstance(value, _TYPES[kind]) and not (kind != "bool" and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"expected {kind}, got {type(value).__name__}", key)
    return float(value) if kind == "float" else value


def _choice(cfg, key, options):
    if getattr(cfg, key) not in options:
        raise ConfigError(f"must be one of {', '.join(options)}", key)


def _positive(cfg, *keys):
    for key in keys:
        v = getattr(cfg, key)
        if v is not None and not v > 0:
            raise ConfigError("must be > 0", key)


def num_clients(cfg: ExperimentConfig) -> int | None:
    if cfg.data == "synthetic":
        cpg = cfg.clients_per_group
        return sum(cpg) if isinstance(cpg, list) else cfg.groups * cpg
    if cfg.partition == "practical":
        if cfg.preset == "CIFAR100-100":
            return 100
        return data_mod.PRESETS[cfg.preset].num_clients if cfg.preset in data_mod.PRESETS else None
    return cfg.clients


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    _choice(cfg, "algorithm", ALGORITHMS)
    _choice(cfg, "attention", tuple(ATTENTION_KINDS))
    _choice(cfg, "weight_mode", MODES)
    _choice(cfg, "schedule", SCHEDULES)
    _choice(cfg, "data", DATA_SOURCES)
    _choice(cfg, "partition", PARTITIONS)
    _choice(cfg, "model", MODELS)
    _choice(cfg, "optimizer", tuple(m for m in SOLVER_METHODS if m != "exact"))
    _positive(cfg, "sigma", "lam", "mu", "alpha0", "decay_factor", "diminishing_a", "learning_rate",
              "finetune_epochs", "decay_period", "groups", "features", "test_samples", "hidden",
              "epochs", "batch_size", "theta")
    if cfg.heur_sigma < 0:
        raise ConfigError("must be >= 0", "heur_sigma")
    if cfg.decay_factor > 1:
        raise ConfigError("must be <= 1", "decay_factor")
    if cfg.classes < 2:
        raise ConfigError("need at least two classes", "classes")
    if not 0 < cfg.dominance <= 1:
        raise ConfigError("must lie in (0, 1]", "dominance")
    if cfg.noise < 0 or cfg.mean_scale < 0:
        raise ConfigError("must be >= 0", "noise" if cfg.noise < 0 else "mean_scale")
    if not 0 <= cfg.test_fraction < 1:
        raise ConfigError("must lie in [0, 1)", "test_fraction")
    if not 0 <= cfg.drop_rate <= 1:
        raise ConfigError("must lie in [0, 1]", "drop_rate")
    if cfg.epoch_jitter is not None and not 1 <= cfg.epoch_jitter[0] <= cfg.epoch_jitter[1]:
        raise ConfigError("must satisfy 1 <= lo <= hi", "epoch_jitter")
    if cfg.rounds < 0:
        raise ConfigError("must be >= 0", "rounds")
    if cfg.attention in ("mcp", "scad") and cfg.theta is not None and cfg.theta <= 2:
        raise ConfigError("must be > 2", "theta")
    if cfg.schedule == "constant_theory" and cfg.rounds < 1:
        raise ConfigError("constant_theory needs rounds >= 1", "schedule")
    for key in ("clients_per_group", "train_samples"):
        v = getattr(cfg, key)
        vals = v if isinstance(v, list) else [v]
        if min(vals) < 1:
            raise ConfigError("values must be >= 1", key)
        if isinstance(v, list) and len(v) != cfg.groups:
            raise ConfigError(f"needs one value per group ({cfg.groups})", key)
    if cfg.data == "idx":
        for key in ("idx_images", "idx_labels"):
            if not getattr(cfg, key):
                raise ConfigError("required when data is idx", key)
        if cfg.partition == "practical":
            if cfg.preset is None:
                raise ConfigError("required for the practical partition", "preset")
            if cfg.preset not in data_mod.PRESET_NAMES:
                raise ConfigError(f"unknown preset; known: {', '.join(data_mod.PRESET_NAMES)}", "preset")
            if cfg.preset == "CIFAR100-100" and not cfg.superclasses:
                raise ConfigError("CIFAR100-100 needs a superclass table", "superclasses")
        elif cfg.clients is None or cfg.clients < 1:
            raise ConfigError("required (>= 1) for iid and pathological partitions", "clients")
    sw = cfg.self_weight
    if isinstance(sw, str):
        if sw != "group":
            raise ConfigError('expected a number, a list of numbers or "group"', "self_weight")
    else:
        vals = sw if isinstance(sw, list) else [sw]
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and 0 <= v < 1 for v in vals):
            raise ConfigError("values must lie in [0, 1)", "self_weight")
        m = num_clients(cfg)
        if isinstance(sw, list) and m is not None and len(sw) != m:
            raise ConfigError(f"needs {m} values", "self_weight")
    m = num_clients(cfg)
    if cfg.algorithm == "heurfedamp" and m is not None and m < 2:
        raise ConfigError("heurfedamp needs at least two clients", "algorithm")
    return cfg


def parse_config(text: str | bytes) -> ExperimentConfig:
    """Parse and validate a JSON config, filling defaults and rejecting unknown keys."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"config is not UTF-8: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    kwargs = {}
    for key, value in doc.items():
        name = "lam" if key == "lambda" else key
        if name not in known or key == "lam":
            raise ConfigError("unknown key", key)
        kwargs[name] = _check_type(key, value, _SCHEMA[name])
    return validate_config(ExperimentConfig(**kwargs))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


# -- building an experiment -----------------------------------------------------


def build_schedule(cfg: ExperimentConfig):
    if cfg.schedule == "step_decay":
        return StepDecay(cfg.alpha0, cfg.decay_factor, cfg.decay_period)
    if cfg.schedule == "constant_theory":
        return ConstantTheory(cfg.lam, cfg.rounds)
    return Diminishing(cfg.diminishing_a)


def build_attention(cfg: ExperimentConfig):
    return make_attention(cfg.attention, cfg.sigma, cfg.theta)


def self_weights(cfg: ExperimentConfig, groups) -> tuple[float, ...]:
    """HeurFedAMP self weights; ``"group"`` gives ``1 / (N_i + 1)`` with ``N_i``
    the number of other clients sharing client ``i``'s ground-truth group."""
    if cfg.self_weight == "group":
        g = np.asarray(groups)
        sizes = np.array([np.sum(g == gi) for gi in g])
        if np.any(sizes < 2):
            raise ConfigError('"group" self weights need at least two clients per group', "self_weight")
        return tuple(float(1.0 / n) for n in sizes)
    if isinstance(cfg.self_weight, list):
        return tuple(float(v) for v in cfg.self_weight)
    return tuple(float(cfg.self_weight) for _ in groups)


def build_algorithm(cfg: ExperimentConfig, groups):
    schedule = build_schedule(cfg)
    a = cfg.algorithm
    if a == "fedamp":
        return fed.FedAMP(build_attention(cfg), schedule, cfg.weight_mode, cfg.lam)
    if a == "heurfedamp":
        return fed.HeurFedAMP(cfg.heur_sigma, self_weights(cfg, groups), schedule, cfg.lam)
    if a == "fedavg":
        return fed.FedAvg()
    if a == "fedprox":
        return fed.FedProx(cfg.mu)
    if a == "fedavg_ft":
        return fed.FedAvgFT(cfg.finetune_epochs)
    if a == "fedprox_ft":
        return fed.FedProxFT(cfg.mu, cfg.finetune_epochs)
    return fed.Separate()


def build_datasets(cfg: ExperimentConfig, seed: int):
    data_seed = seed if cfg.data_seed is None else cfg.data_seed
    if cfg.data == "synthetic":
        spec = data_mod.SyntheticSpec(
            groups=cfg.groups,
            classes=cfg.classes,
            features=cfg.features,
            clients_per_group=tuple(cfg.clients_per_group) if isinstance(cfg.clients_per_group, list) else cfg.clients_per_group,
            train_samples=tuple(cfg.train_samples) if isinstance(cfg.train_samples, list) else cfg.train_samples,
            test_samples=cfg.test_samples,
            dominance=cfg.dominance,
            noise=cfg.noise,
            mean_scale=cfg.mean_scale,
            seed=data_seed,
        )
        return data_mod.gen_synthetic(spec)
    pool = data_mod.load_idx_dataset(cfg.idx_images, cfg.idx_labels)
    if cfg.partition == "iid":
        return data_mod.partition_iid(pool, cfg.clients, data_seed, cfg.test_fraction)
    if cfg.partition == "pathological":
        return data_mod.partition_pathological(pool, cfg.clients, data_seed, cfg.test_fraction)
    preset = data_mod.get_preset(cfg.preset, cfg.superclasses)
    return data_mod.partition_practical(pool, preset, data_seed)


def build_model(cfg: ExperimentConfig, num_features: int, num_classes: int):
    if cfg.model == "mlp":
        return MLP(num_features, cfg.hidden, num_classes)
    return LogisticRegression(num_features, num_classes)


@dataclass
class Experiment:
    config: ExperimentConfig
    seed: int
    algorithm: object
    clients: list
    groups: list
    solver: SolverConfig
    faults: fed.FaultModel
    objective: fed.ObjectiveSpec


def build_experiment(cfg: ExperimentConfig, seed: int | None = None) -> Experiment:
    seed = cfg.seed if seed is None else seed
    datasets = build_datasets(cfg, seed)
    groups = [d.group_id for d in datasets]
    if cfg.algorithm == "heurfedamp" and len(datasets) < 2:
        raise ConfigError("heurfedamp needs at least two clients", "algorithm")
    if isinstance(cfg.self_weight, list) and len(cfg.self_weight) != len(datasets):
        raise ConfigError(f"needs {len(datasets)} values", "self_weight")
    first = datasets[0].train
    model = build_model(cfg, first.num_features, first.num_classes)
    algorithm = build_algorithm(cfg, groups)
    solver = SolverConfig(cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.optimizer)
    faults = fed.FaultModel(
        cfg.drop_rate,
        tuple(cfg.epoch_jitter) if cfg.epoch_jitter else None,
        cfg.exclude_dropped,
    )
    lam = fed.descent_lambda(cfg.lam) if cfg.algorithm in ("fedamp", "heurfedamp") else cfg.lam
    objective = fed.ObjectiveSpec(build_attention(cfg), lam)
    return Experiment(cfg, seed, algorithm, [(model, d) for d in datasets], groups, solver, faults, objective)


def execute(exp: Experiment, threads: int = 1):
    return fed.run_experiment(
        exp.algorithm,
        exp.clients,
        exp.config.rounds,
        exp.solver,
        exp.faults,
        seed=exp.seed,
        objective=exp.objective,
        threads=threads,
    )


def write_outputs(exp: Experiment, history, state, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(history, out_dir / "metrics.csv")
    Xi = history[-1].collab if history else fed.server_step(state.W, exp.algorithm, 1, fed._train_sizes(exp.clients))[0]
    metrics.export_collab_matrix(Xi, out_dir / "collab.json", exp.groups)
    accs = [r.mean_test_acc for r in history if r.mean_test_acc is not None]
    summary = {
        "algorithm": exp.config.algorithm,
        "seed": exp.seed,
        "rounds": len(history),
        "bmta": metrics.bmta(history) if accs else None,
        "bmta_round": int(history[int(np.argmax(accs))].round) if accs else None,
        "final_G": history[-1].objective if history else state.initial.objective,
        "final_mean_test_acc": history[-1].mean_test_acc if history else state.initial.mean_test_acc,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return summary


# -- oracle check ---------------------------------------------------------------


def oracle_check(instances: int = 10, seed: int = 0) -> float:
    """Max per-entry deviation between message-passing rounds and the dense
    general method over random Quadratic instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in range(instances):
        m = int(rng.integers(1, 6))
        d = int(rng.integers(1, 5))
        K = int(rng.integers(1, 21))
        A = NegExp(float(rng.uniform(0.5, 5.0))) if n % 2 == 0 else Linear()
        lam = float(rng.uniform(0.1, 1.0))
        # strict mode needs alpha * (m - 1) * A'(0) <= 1
        lam = min(lam, np.sqrt(K) / (max(m - 1, 1) * float(A.deriv(0.0))) * 0.9)
        schedule = ConstantTheory(lam, K)
        C = rng.standard_normal((d, m))
        clients = [(Quadratic(C[:, i]), None) for i in range(m)]
        W0 = rng.uniform(-1, 1, (d, m))
        ref = fed.general_method_oracle(W0, clients, A, lam, schedule, K)
        algorithm = fed.FedAMP(A, schedule, "strict", lam)
        state = fed.initial_state(clients, 0, fed.ObjectiveSpec(A, lam), W0)
        for k in range(K):
            state = fed.run_round(state, algorithm, clients, fed.FaultModel(), SolverConfig(method="exact"), 0,
                                  fed.ObjectiveSpec(A, lam), record_collab=False)
            worst = max(worst, float(np.max(np.abs(state.W - ref[k + 1]))))
    return worst


# -- entry point ----------------------------------------------------------------


def _error(exc: Exception, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if getattr(exc, "key", None):
        payload["key"] = exc.key
    print(json.dumps(payload), file=sys.stderr)
    return code


def _load_config(path) -> ExperimentConfig:
    if path is None:
        raise ConfigError("--config is required")
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(raw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedamp", description="Personalized federated learning simulator")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None)
    run.add_argument("--threads", type=int, default=1)
    val = sub.add_parser("validate", help="parse and validate a config")
    val.add_argument("--config", required=True)
    sub.add_parser("presets", help="list the published partition presets")
    oc = sub.add_parser("oracle-check", help="compare message passing with the dense general method")
    oc.add_argument("--instances", type=int, default=10)
    oc.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        if args.command == "validate":
            cfg = _load_config(args.config)
            print(dump_config(cfg), end="")
            return EXIT_OK
        if args.command == "presets":
            for name in data_mod.PRESET_NAMES:
                if name == "CIFAR100-100":
                    print(f"{name}: 100 clients in 20 groups of 5, train counts 500/400/300/200/100 "
                          "per 20-client band, dominating classes from a superclass table")
                    continue
                p = data_mod.PRESETS[name]
                print(f"{name}: {p.num_clients} clients, groups {list(p.group_sizes)}, "
                      f"train counts {list(p.train_counts)}, {p.test_samples} test samples per client")
            return EXIT_OK
        if args.command == "oracle-check":
            dev = oracle_check(args.instances, args.seed)
            ok = dev < 1e-10
            print(f"oracle-check: max deviation {dev:.3e} ({'pass' if ok else 'FAIL'})")
            return EXIT_OK if ok else EXIT_RUNTIME
        cfg = _load_config(args.config)
        if args.threads < 1:
            raise ConfigError("must be >= 1", "threads")
        exp = build_experiment(cfg, args.seed)
        history, state = execute(exp, args.threads)
        out = Path(args.out if args.out is not None else cfg.out)
        summary = write_outputs(exp, history, state, out)
        log.info("wrote %s (bmta=%s)", out, summary["bmta"])
        return EXIT_OK
    except (ConfigError, FormatError) as exc:
        return _error(exc, EXIT_CONFIG)
    except (FedAMPError, ArithmeticError, ValueError) as exc:
        return _error(exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
