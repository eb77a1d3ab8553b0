"""``prefopt`` command line: gen-data, train, eval, ablate, compare, gradcheck, plot.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 I/O failure. Hyperparameters resolve as flag > ``--config`` file > built-in
default, and the environment variable PREFOPT_SEED overrides ``--seed``.
Every command that writes artifacts first writes a JSON run manifest with
the resolved configuration and input hashes, then adds output hashes once
the artifacts exist.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as datamod
from .errors import CheckpointError, ConfigError, NumericalError, PrefOptError
from .evaluator import evaluate, write_report
from .experiments import DEFAULT_STEPS, Experiment, probe_set, run_experiment
from .fileio import atomic_write_text, sha256_file
from .gradcheck import format_results, run_suite
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .objectives import METHOD_ORDER, Method, ObjectiveConfig
from .plot import write_svg
from .trainer import TrainConfig, make_reference, read_trace, train, train_with_reference, write_trace

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
SEED_ENV = "PREFOPT_SEED"

# built-in defaults for every key a config file may set, per command
DEFAULTS: dict[str, dict[str, object]] = {
    "gen-data": {"seed": 0, "n_per_sensor": 200, "k": 3, "bias_strength": 0.8,
                 "n_eval_per_sensor": 100, "n_neutral_per_sensor": 50},
    "train": {"method": "saft", "alpha": 2.0, "beta": 0.2, "k": 3, "lr": 3e-4, "steps": DEFAULT_STEPS,
              "seed": 0, "batch_size": 8, "probe_every": 10, "dpo_beta": 0.1, "ipo_tau": 0.1,
              "simpo_beta": 2.0, "simpo_gamma": 0.2, "ref_fraction": 0.5,
              "d_model": 64, "n_layers": 2, "n_heads": 4},
    "eval": {},
    "ablate": {"method": "saft", "seeds": "0,1,2", "steps": DEFAULT_STEPS, "lr": 3e-4,
               "n_per_sensor": 200, "k": 3, "bias_strength": 0.8},
    "compare": {"methods": ",".join(m.value for m in METHOD_ORDER), "seeds": "0,1,2",
                "steps": DEFAULT_STEPS, "lr": 3e-4, "n_per_sensor": 200, "k": 3, "bias_strength": 0.8},
    "gradcheck": {"seed": 0, "sample": 256},
    "plot": {},
}
_KNOWN_KEYS = {key for table in DEFAULTS.values() for key in table}


class UsageError(PrefOptError):
    pass


# ---------------------------------------------------------------------------
# configuration


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; dashes and underscores are interchangeable."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config file {path}: {exc.strerror}") from exc
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
        values[key] = value
    return values


def _coerce(key: str, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        try:
            return type(default)(value)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return value


def resolve(command: str, args: argparse.Namespace) -> dict[str, object]:
    """Materialise every configurable key: flag, then config file, then default."""
    from_file = read_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, default in DEFAULTS[command].items():
        flag = getattr(args, key, None)
        value = flag if flag is not None else from_file.get(key, default)
        resolved[key] = _coerce(key, value, default)
    if "seed" in resolved and os.environ.get(SEED_ENV):
        resolved["seed"] = _coerce("seed", os.environ[SEED_ENV], 0)
    for key in ("steps", "batch_size", "probe_every", "n_per_sensor", "k", "sample"):
        if key in resolved and resolved[key] < 1:
            raise ConfigError(f"{key} must be at least 1, got {resolved[key]}")
    return resolved


def _int_list(text: str, name: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{name}: at least one value is required")
    return values


def _methods(text: str) -> list[Method]:
    methods = [Method.parse(v) for v in str(text).split(",") if v.strip()]
    if not methods:
        raise ConfigError("methods: at least one method is required")
    return methods


# ---------------------------------------------------------------------------
# manifests


def _hashes(paths) -> dict[str, str | None]:
    return {str(p): (sha256_file(p) if Path(p).is_file() else None) for p in paths}


class RunManifest:
    """Written before computation, completed with output hashes afterwards."""

    def __init__(self, path, command: str, config: dict, inputs=(), outputs=()):
        self.path = Path(path)
        self.record = {
            "command": command,
            "config": config,
            "seed": config.get("seed"),
            "inputs": _hashes(inputs),
            "outputs": {str(p): None for p in outputs},
        }
        self._write()

    def _write(self) -> None:
        atomic_write_text(self.path, json.dumps(self.record, indent=2, sort_keys=True) + "\n")

    def complete(self) -> None:
        self.record["outputs"] = _hashes(self.record["outputs"])
        self._write()


def _manifest_path(artifact) -> Path:
    artifact = Path(artifact)
    return artifact.with_name(artifact.name + ".manifest.json")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolve("gen-data", args)
    out = Path(args.out)
    gen = datamod.GeneratorConfig(seed=cfg["seed"], n_per_sensor=cfg["n_per_sensor"], k=cfg["k"],
                                  bias_strength=cfg["bias_strength"],
                                  n_eval_per_sensor=cfg["n_eval_per_sensor"],
                                  n_neutral_per_sensor=cfg["n_neutral_per_sensor"])
    files = {name: out / f"{name}.jsonl" for name in ("train", "eval", "neutral")}
    manifest = RunManifest(out / "manifest.json", "gen-data", cfg, outputs=files.values())
    splits = datamod.generate(gen)
    for name, path in files.items():
        datamod.save(getattr(splits, name), path)
    manifest.complete()
    print(f"wrote {len(splits.train)} train, {len(splits.eval)} eval, "
          f"{len(splits.neutral)} neutral records to {out}")
    return EXIT_OK


def _load_data(path, config: ModelConfig):
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return datamod.load(path, max_seq_len=config.max_seq_len, vocab_size=config.vocab_size)


def cmd_train(args) -> int:
    cfg = resolve("train", args)
    method = Method.parse(cfg["method"])
    if method.needs_reference and not (args.ref_ckpt or args.auto_ref):
        raise UsageError(f"--method {method.value} needs --ref-ckpt PATH or --auto-ref")
    objective = ObjectiveConfig(method=method, alpha=cfg["alpha"], beta_margin=cfg["beta"], k=cfg["k"],
                                dpo_beta=cfg["dpo_beta"], ipo_tau=cfg["ipo_tau"],
                                simpo_beta=cfg["simpo_beta"], simpo_gamma=cfg["simpo_gamma"])
    config = TrainConfig(objective=objective, learning_rate=cfg["lr"], steps=cfg["steps"],
                         batch_size=cfg["batch_size"], seed=cfg["seed"], probe_every=cfg["probe_every"],
                         checkpoint_path=args.out_ckpt, ref_fraction=cfg["ref_fraction"])
    model_config = ModelConfig(d_model=cfg["d_model"], n_layers=cfg["n_layers"], n_heads=cfg["n_heads"],
                               init_seed=cfg["seed"])
    inputs = [args.data] + [p for p in (args.probe, args.ref_ckpt) if p]
    outputs = [args.out_ckpt] + ([args.trace] if args.trace else [])
    manifest = RunManifest(_manifest_path(args.out_ckpt), "train", cfg, inputs, outputs)

    reference = None
    if args.ref_ckpt:
        reference = make_reference(load_checkpoint(args.ref_ckpt, requires_grad=False))
        model_config = reference.config
    dataset = _load_data(args.data, model_config)
    probe = probe_set(_load_data(args.probe, model_config) if args.probe else dataset)

    if reference is not None:
        # the policy starts from the reference, so the preference term starts at its neutral value
        params, trace = train(reference.copy(), dataset, config, probe, reference=reference)
    elif method.needs_reference:
        params, trace, _ = train_with_reference(init_model(model_config), dataset, config, probe)
    else:
        params, trace = train(init_model(model_config), dataset, config, probe)

    save_checkpoint(params, args.out_ckpt)
    if args.trace:
        write_trace(trace, args.trace)
    manifest.complete()
    last = trace.rows[-1]
    print(f"{method.value}: {config.steps} steps, final loss {last.total_loss:.6f}, "
          f"probe pos {last.probe_pos_alp:.4f} neg {last.probe_neg_alp:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = {"ckpt": args.ckpt, "data": args.data}
    manifest = RunManifest(_manifest_path(args.report), "eval", cfg, [args.ckpt, args.data], [args.report])
    params = load_checkpoint(args.ckpt, requires_grad=False)
    dataset = _load_data(args.data, params.config)
    report = evaluate(params, dataset)
    write_report(report, args.report)
    manifest.complete()
    print(report.summary())
    return EXIT_OK


def _write_cell(cell_dir: Path, result) -> None:
    write_report(result.eval_report, cell_dir / "report.csv")
    write_report(result.neutral_report, cell_dir / "neutral_report.csv")
    write_trace(result.trace, cell_dir / "trace.csv")


def _run_cells(out_dir: Path, cells) -> tuple[dict, int]:
    """Run (label, experiment) cells; returns per-label results and the worst exit code."""
    results: dict[str, list] = {}
    code = EXIT_OK
    for label, exp in cells:
        cell_dir = out_dir / f"{label}_seed{exp.seed}"
        print(f"running {label} seed {exp.seed}", file=sys.stderr, flush=True)
        try:
            result = run_experiment(exp)
            _write_cell(cell_dir, result)
        except PrefOptError as exc:
            print(f"cell {label} seed {exp.seed} failed: {exc}", file=sys.stderr)
            result = None
            code = max(code, _exit_code(exc))
        results.setdefault(label, []).append(result)
    return results, code


def _summary_fields(runs: list) -> list[str]:
    ok = [r for r in runs if r is not None]
    status = "ok" if len(ok) == len(runs) else "failed"
    if not ok:
        return [str(len(runs)), "0", "nan", "nan", "nan", status]
    acc = np.mean([r.eval_report.overall for r in ok])
    neutral = np.mean([r.neutral_report.overall for r in ok])
    margin = np.mean([r.trace.rows[-1].probe_margin for r in ok])
    return [str(len(runs)), str(len(ok)), f"{acc:.6f}", f"{neutral:.6f}", f"{margin:.6f}", status]


_SUMMARY_TAIL = "n_seeds,n_ok,mean_accuracy,mean_neutral_accuracy,mean_final_probe_margin,status"


def _base_experiment(cfg: dict) -> Experiment:
    return Experiment(method=cfg.get("method", "saft"), n_per_sensor=cfg["n_per_sensor"], k=cfg["k"],
                      bias_strength=cfg["bias_strength"], steps=cfg["steps"], learning_rate=cfg["lr"])


def cmd_ablate(args) -> int:
    cfg = resolve("ablate", args)
    cfg["param"] = args.param
    cfg["values"] = args.values
    values = _int_list(args.values, "values")
    seeds = _int_list(cfg["seeds"], "seeds")
    base = _base_experiment(cfg)
    field = {"k": "k", "n": "n_per_sensor"}[args.param]
    if args.param == "k" and not all(1 <= v <= 3 for v in values):
        raise ConfigError("k values must lie in 1..3")
    out_dir = Path(args.out_dir)
    manifest = RunManifest(out_dir / "manifest.json", "ablate", cfg, outputs=[out_dir / "summary.csv"])
    cells = [(f"{args.param}{v}", replace(base, seed=s, **{field: v})) for v in values for s in seeds]
    results, code = _run_cells(out_dir, cells)
    lines = [f"param,value,{_SUMMARY_TAIL}"]
    for v in values:
        lines.append(",".join([args.param, str(v)] + _summary_fields(results[f"{args.param}{v}"])))
    atomic_write_text(out_dir / "summary.csv", "\n".join(lines) + "\n")
    manifest.complete()
    print("\n".join(lines))
    return code


def cmd_compare(args) -> int:
    cfg = resolve("compare", args)
    wanted = set(_methods(cfg["methods"]))
    methods = [m for m in METHOD_ORDER if m in wanted]
    seeds = _int_list(cfg["seeds"], "seeds")
    base = _base_experiment(cfg)
    out_dir = Path(args.out_dir)
    manifest = RunManifest(out_dir / "manifest.json", "compare", cfg, outputs=[out_dir / "summary.csv"])
    cells = [(m.value, replace(base, method=m, seed=s)) for m in methods for s in seeds]
    results, code = _run_cells(out_dir, cells)
    lines = [f"method,{_SUMMARY_TAIL}"]
    for m in methods:
        lines.append(",".join([m.value] + _summary_fields(results[m.value])))
    atomic_write_text(out_dir / "summary.csv", "\n".join(lines) + "\n")
    manifest.complete()
    print("\n".join(lines))
    return code


def cmd_gradcheck(args) -> int:
    cfg = resolve("gradcheck", args)
    results = run_suite(seed=cfg["seed"], sample=cfg["sample"])
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def cmd_plot(args) -> int:
    manifest = RunManifest(_manifest_path(args.out_svg), "plot", {"trace": args.trace}, [args.trace],
                           [args.out_svg])
    write_svg(read_trace(args.trace), args.out_svg)
    manifest.complete()
    print(f"wrote {args.out_svg}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="prefopt", description="Preference fine-tuning experiments on a synthetic sensor-QA corpus.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value file; flags override it")
        return p

    p = add("gen-data", "generate train/eval/neutral splits")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-per-sensor", dest="n_per_sensor", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--bias-strength", dest="bias_strength", type=float)
    p.add_argument("--n-eval-per-sensor", dest="n_eval_per_sensor", type=int)
    p.add_argument("--n-neutral-per-sensor", dest="n_neutral_per_sensor", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = add("train", "fine-tune a model and write a checkpoint and trace")
    p.add_argument("--data", required=True, help="training .jsonl file")
    p.add_argument("--probe", help="held-out .jsonl for trace probes (default: the training data)")
    p.add_argument("--method", help="sft, saft, sft-dpo, sft-ipo or sft-simpo")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float, help="DNA margin")
    p.add_argument("--k", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--probe-every", dest="probe_every", type=int)
    p.add_argument("--out-ckpt", dest="out_ckpt", required=True)
    p.add_argument("--trace")
    p.add_argument("--ref-ckpt", dest="ref_ckpt", help="frozen reference for sft-dpo/sft-ipo")
    p.add_argument("--auto-ref", dest="auto_ref", action="store_true",
                   help="build the reference with an SFT warm-up inside the step budget")
    p.set_defaults(func=cmd_train)

    p = add("eval", "score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = add("ablate", "sweep k or n over seeds")
    p.add_argument("--param", required=True, choices=("k", "n"))
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--seeds")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--method")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_ablate)

    p = add("compare", "compare objectives over seeds")
    p.add_argument("--methods")
    p.add_argument("--seeds")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--n-per-sensor", dest="n_per_sensor", type=int)
    p.set_defaults(func=cmd_compare)

    p = add("gradcheck", "finite-difference check of every op and objective")
    p.add_argument("--seed", type=int)
    p.add_argument("--sample", type=int, help="coordinates probed per objective")
    p.set_defaults(func=cmd_gradcheck)

    p = add("plot", "render a trace as SVG")
    p.add_argument("--trace", required=True)
    p.add_argument("--out-svg", dest="out_svg", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (CheckpointError, OSError)):
        return EXIT_IO
    return EXIT_USAGE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        where = f" at step {exc.step}" if exc.step is not None else ""
        print(f"prefopt: numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (PrefOptError, OSError) as exc:
        print(f"prefopt: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
