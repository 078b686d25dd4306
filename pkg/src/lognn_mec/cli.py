"""Command-line entry point.

Configuration is one JSON file with a section per concern::

    {"train": {...TrainConfig fields..., "backbone": "lognn", "data_dir": "..."},
     "ga": {...GaConfig fields...},
     "sweep": {...SweepSpec fields..., "models": {"lognn": "...", "mlp_di": "...", "mlp_tr": {"2": "..."}}},
     "eval": {"model": "...", "data_dir": "..."},
     "bench": {"model": "...", "n_servers": 10, "instances": 5, "repetitions": 5},
     "gradcheck": {"instances": 5, "n_users": 4, "n_servers": 2, "step": 1e-5}}

Every subcommand writes its outputs and a ``manifest.json`` under ``--out``.
Exit codes: 0 success, 1 validation, 2 numeric, 3 I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .baselines import GaConfig, MlpModel, init_mlp, mlp_forward
from .core import check_feasibility, total_delay
from .errors import ConfigurationError, InvalidArgumentError, NumericError
from .harness import (
    SweepArtifacts, SweepSpec, measure_inference, read_dataset, run_gradcheck, run_sweep, solver_for,
    write_dataset,
)
from .lognn import LognnModel, allocate, init_model
from .trainer import TrainConfig, held_out_dataset, make_dataset, train

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
SECTIONS = ("train", "ga", "sweep", "eval", "bench", "gradcheck")
TRAIN_EXTRA = {"backbone", "data_dir"}
SWEEP_EXTRA = {"models", "full"}
EVAL_KEYS = {"model", "data_dir"}
BENCH_KEYS = {"model", "n_servers", "instances", "repetitions", "ga_generations"}
GRADCHECK_KEYS = {"instances", "n_users", "n_servers", "step"}

log = logging.getLogger("lognn_mec")


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(section: str, given: dict, allowed: set[str]) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    _reject_unknown("top level", data, set(SECTIONS))
    for section, allowed in (("train", _field_names(TrainConfig) | TRAIN_EXTRA), ("ga", _field_names(GaConfig)),
                             ("sweep", _field_names(SweepSpec) | SWEEP_EXTRA), ("eval", EVAL_KEYS),
                             ("bench", BENCH_KEYS), ("gradcheck", GRADCHECK_KEYS)):
        _reject_unknown(section, data.get(section, {}), allowed)
    return data


def train_config(cfg: dict, seed: int | None) -> TrainConfig:
    section = {k: v for k, v in cfg.get("train", {}).items() if k not in TRAIN_EXTRA}
    if seed is not None:
        section["seed"] = seed
    if section.get("method") == "supervised":
        if "ga" not in cfg:
            raise ConfigurationError("method=supervised needs a [ga] section for label generation")
        ga = GaConfig(**cfg["ga"])
        section["label_generations"] = ga.generations
        section["label_population"] = ga.population
    return TrainConfig(**section)


def _out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _write_manifest(out: Path, command: str, cfg: dict, seed, extra: dict) -> None:
    manifest = {"command": command, "config": cfg, "seed": seed, **extra}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def load_model(path):
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read model file {path}: {exc}") from exc
    kind = data.get("kind")
    if kind == "lognn":
        return LognnModel.from_dict(data)
    if kind == "mlp":
        return MlpModel.from_dict(data)
    raise ConfigurationError(f"model file {path} has unknown kind {kind!r}")


# --- subcommands -------------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    config = train_config(cfg, args.seed)
    out = _out(args)
    dataset = make_dataset(config.n_train_samples, config.size_distribution, config.seed)
    manifest = write_dataset(dataset, out / "data", {"config": config.to_dict()})
    _write_manifest(out, "gen-data", cfg, config.seed, {"dataset_hash": manifest["dataset_hash"]})
    print(f"wrote {manifest['n_instances']} instances to {out / 'data'} (hash {manifest['dataset_hash'][:16]})")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    config = train_config(cfg, args.seed)
    section = cfg.get("train", {})
    backbone = section.get("backbone", "lognn")
    if backbone not in ("lognn", "mlp"):
        raise ConfigurationError(f"backbone must be lognn or mlp, got {backbone!r}")
    data_dir = Path(section.get("data_dir", Path(args.out) / "data"))
    if not (data_dir / "manifest.json").exists():
        raise ConfigurationError(f"no dataset at {data_dir}; run gen-data first or set train.data_dir")
    out = _out(args)
    dataset = read_dataset(data_dir)
    if backbone == "lognn":
        model = init_model(config.seed)
    else:
        sizes = {(i.n_users, i.n_servers) for i in dataset.instances}
        if len(sizes) != 1:
            raise ConfigurationError(f"the MLP backbone needs a single instance size, dataset has {sorted(sizes)}")
        model = init_mlp(*sizes.pop(), config.seed)
    model.metadata = {"train_config": config.to_dict(), "dataset_hash": dataset.content_hash()}
    try:
        model, train_log = train(model, dataset, config, held_out_dataset(config))
    except NumericError as exc:
        partial = getattr(exc, "train_log", None)
        if partial is not None:
            partial.write_csv(out / "train_log.csv")
        raise
    model.save(out / "model.json")
    train_log.write_csv(out / "train_log.csv")
    _write_manifest(out, "train", cfg, config.seed, {"model_hash": model.content_hash(),
                                                     "dataset_hash": dataset.content_hash(),
                                                     "config_digest": config.digest()})
    last = train_log.records[-1]
    print(f"trained {backbone} for {len(train_log.records)} epochs: train {last.train_obj:.4f} "
          f"held-out {last.test_obj:.4f}; model {out / 'model.json'}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    section = cfg.get("eval", {})
    if "model" not in section or "data_dir" not in section:
        raise ConfigurationError("eval needs [eval] model and data_dir")
    model = load_model(section["model"])
    dataset = read_dataset(section["data_dir"])
    out = _out(args)
    delays, worst = [], 0.0
    for inst in dataset.instances:
        alloc = allocate(model, inst) if model.kind == "lognn" else _mlp_alloc(model, inst)
        worst = max(worst, check_feasibility(inst, alloc).max_violation)
        delays.append(total_delay(inst, alloc))
    report = {"mean_delay": float(np.mean(delays)), "n_instances": len(delays), "max_violation": worst,
              "model_hash": model.content_hash()}
    (out / "eval.json").write_text(json.dumps(report, indent=2))
    _write_manifest(out, "eval", cfg, args.seed, report)
    print(f"mean delay {report['mean_delay']:.4f} over {len(delays)} instances (max violation {worst:.2e})")
    return EXIT_OK


def _mlp_alloc(model, inst):
    exact = (inst.n_users, inst.n_servers) == (model.n_users, model.n_servers)
    return mlp_forward(model, inst, "exact" if exact else "DI")


def sweep_spec(cfg: dict, args) -> tuple[SweepSpec, SweepArtifacts]:
    section = dict(cfg.get("sweep", {}))
    models = section.pop("models", {})
    full = section.pop("full", False) and not args.desk_scale
    if args.seed is not None:
        section["seed"] = args.seed
    if "server_counts" not in section:
        spec = SweepSpec.full(**section) if full else SweepSpec.desk(**section)
    else:
        spec = SweepSpec(**section)
    artifacts = SweepArtifacts()
    if "lognn" in models:
        artifacts.lognn = _typed_model(models["lognn"], "lognn", "lognn")
    if "mlp_di" in models:
        artifacts.mlp_di = _typed_model(models["mlp_di"], "mlp", "mlp_di")
    for m, path in models.get("mlp_tr", {}).items():
        artifacts.mlp_tr[int(m)] = _typed_model(path, "mlp", f"mlp_tr[{m}]")
    return spec, artifacts


def _typed_model(path, kind: str, method: str):
    if not Path(path).exists():
        raise ConfigurationError(f"{method}: model file {path} does not exist")
    model = load_model(path)
    if model.kind != kind:
        raise ConfigurationError(f"{method}: {path} holds a {model.kind} model, expected {kind}")
    return model


def cmd_sweep(args, cfg) -> int:
    spec, artifacts = sweep_spec(cfg, args)
    out = _out(args)
    result = run_sweep(spec, artifacts)
    result.write_csv(out / "sweep.csv")
    result.write_per_instance_csv(out / "sweep_instances.csv")
    _write_manifest(out, "sweep", cfg, spec.seed, result.manifest)
    print(result.summary())
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    section = cfg.get("bench", {})
    if "model" not in section:
        raise ConfigurationError("bench needs [bench] model (a LOGNN model file)")
    model = _typed_model(section["model"], "lognn", "lognn")
    m = int(section.get("n_servers", 10))
    count = int(section.get("instances", 5))
    reps = int(section.get("repetitions", 5))
    seed = args.seed if args.seed is not None else 0
    spec = SweepSpec(server_counts=[m], instances_per_size=count, methods=["lognn", "ga"], seed=seed,
                     ga_generations=int(section.get("ga_generations", 100)))
    artifacts = SweepArtifacts(lognn=model)
    out = _out(args)
    rows = []
    for inst in spec.instances(m):
        row = {"seed": inst.seed}
        for method in ("lognn", "ga"):
            row[method] = measure_inference(solver_for(method, spec, artifacts, m), inst, reps)
        rows.append(row)
    lognn_t = float(np.median([r["lognn"] for r in rows]))
    ga_t = float(np.median([r["ga"] for r in rows]))
    report = {"M": m, "N": spec.user_factor * m, "median_lognn_seconds": lognn_t, "median_ga_seconds": ga_t,
              "speedup": ga_t / max(lognn_t, 1e-12), "per_instance": rows}
    (out / "bench.json").write_text(json.dumps(report, indent=2))
    _write_manifest(out, "bench", cfg, seed, {"model_hash": model.content_hash()})
    print(f"M={m}: LOGNN {lognn_t * 1e3:.2f} ms, GA {ga_t * 1e3:.1f} ms, speedup {report['speedup']:.0f}x")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    section = cfg.get("gradcheck", {})
    seed = args.seed if args.seed is not None else 0
    report = run_gradcheck(seed, int(section.get("instances", 5)), int(section.get("n_users", 4)),
                           int(section.get("n_servers", 2)), float(section.get("step", 1e-5)))
    out = _out(args)
    (out / "gradcheck.json").write_text(json.dumps(report.to_dict(), indent=2))
    _write_manifest(out, "gradcheck", cfg, seed, {"passed": report.passed})
    name, err = report.worst
    status = "PASS" if report.passed else "FAIL"
    print(f"gradcheck {status}: max relative error {report.max_error:.3e} (worst {name}: {err:.3e}, "
          f"tolerance {report.tolerance:.0e})")
    if report.failing_ops:
        print("ops with wrong reverse rules: " + ", ".join(
            f"{op} ({report.op_errors[op]:.3e})" for op in report.failing_ops))
    return EXIT_OK if report.passed else EXIT_NUMERIC


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lognn-mec", description="Learned MEC resource allocation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--desk-scale", action="store_true", help="use the reduced sweep grid")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ConfigurationError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
