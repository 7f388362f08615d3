"""Command line entry point: simulate, stats, fit-hawkes, gof, train, cv, evaluate, trace.

Every run writes a manifest JSON next to its primary output with the fully
resolved configuration, the seed and the artifact version; rerunning with an
identical manifest reproduces the primary outputs byte for byte.

Exit codes: 0 success, 2 usage error, 3 data validation error, 4 numerical
failure.
"""

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

import tppkit
from tppkit import evaluation, hawkes, training
from tppkit.autodiff import NumericalError
from tppkit.data import DataError, dataset_stats, kfold_split, load_jsonl, normalize_times, save_jsonl
from tppkit.models import (
    CLI_MODEL_NAMES,
    DecoderConfig,
    EncoderConfig,
    ModelConfig,
    NeuralTppModel,
    load_checkpoint,
    save_checkpoint,
)


class UsageError(ValueError):
    pass


def _write_json(path, payload) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _write_manifest(primary_out, subcommand: str, config: dict, seed, outputs, t0: float) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "artifact_version": tppkit.__version__,
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": round(time.perf_counter() - t0, 3),
    }
    _write_json(str(primary_out) + ".manifest.json", manifest)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return obj


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    cfg_dict = _load_config_file(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    try:
        config = hawkes.GenerationConfig.from_dict(cfg_dict)
    except ValueError as exc:
        raise UsageError(f"invalid generation config: {exc}") from exc
    dataset = hawkes.generate_dataset(config, threads=args.threads)
    save_jsonl(dataset, args.out)
    print(dataset_stats(dataset).format_table())
    _write_manifest(args.out, "simulate", config.to_dict(), config.seed, [args.out], t0)
    return 0


def cmd_stats(args) -> int:
    t0 = time.perf_counter()
    dataset = load_jsonl(args.data)
    splits = {}
    if len(dataset) >= 6:
        # default presentation split: 2/3 train, 1/6 valid, 1/6 test
        train, valid, test = kfold_split(dataset, 6, 0, valid_fraction=0.2, seed=args.seed)
        splits = {"train": train, "valid": valid, "test": test}
    report = dataset_stats(dataset, splits)
    print(report.format_table())
    if args.out:
        _write_json(args.out, report.to_dict())
        _write_manifest(args.out, "stats", {"data": str(args.data)}, args.seed, [args.out], t0)
    return 0


def cmd_fit_hawkes(args) -> int:
    t0 = time.perf_counter()
    dataset = load_jsonl(args.data)
    result = hawkes.hawkes_fit(dataset, max_iterations=args.max_iterations)
    payload = {
        "mu": result.params.mu.tolist(),
        "alpha": result.params.alpha.tolist(),
        "beta": result.params.beta.tolist(),
        "loglik": result.loglik,
        "converged": result.converged,
        "n_iterations": result.n_iterations,
        "grad_norm": result.grad_norm,
    }
    _write_json(args.out, payload)
    print(f"fitted {dataset.class_count}-type model, loglik {result.loglik:.2f}, "
          f"converged={result.converged} after {result.n_iterations} iterations")
    _write_manifest(args.out, "fit-hawkes",
                    {"data": str(args.data), "max_iterations": args.max_iterations},
                    None, [args.out], t0)
    return 0


def cmd_gof(args) -> int:
    t0 = time.perf_counter()
    dataset = load_jsonl(args.data)
    with open(args.params, "r", encoding="utf-8") as fh:
        p = json.load(fh)
    params = hawkes.HawkesParams(mu=np.array(p["mu"]), alpha=np.array(p["alpha"]),
                                 beta=np.array(p["beta"]))
    stat, pvalue, n = hawkes.time_rescale_gof(params, dataset.sequences)
    payload = {"n_increments": n, "ks_statistic": stat, "p_value": pvalue}
    print(f"time-rescaling GOF (censoring-adjusted): n={n}, KS={stat:.5f}, p={pvalue:.5f}")
    if args.out:
        _write_json(args.out, payload)
        _write_manifest(args.out, "gof", {"data": str(args.data), "params": str(args.params)},
                        None, [args.out], t0)
    return 0


def _model_config_from_args(args, dataset) -> ModelConfig:
    if args.model not in CLI_MODEL_NAMES:
        raise UsageError(
            f"unknown model {args.model!r}; choose one of {', '.join(sorted(CLI_MODEL_NAMES))}"
        )
    static_dim = None
    if args.static_features:
        static_dim = dataset.static_dim
        if static_dim is None:
            raise DataError("--static-features requires 'static' fields in the data")
    encoder = EncoderConfig(kind=args.encoder, d_model=args.d_model, n_layers=args.n_layers,
                            n_heads=args.n_heads, dropout=args.dropout,
                            max_context=args.max_context)
    decoder = DecoderConfig(kind=CLI_MODEL_NAMES[args.model])
    return ModelConfig(class_count=dataset.class_count, encoder=encoder, decoder=decoder,
                       static_dim=static_dim, seed=args.seed)


def _train_config_from_args(args) -> training.TrainConfig:
    file_cfg = _load_config_file(args.config)
    base = training.TrainConfig()
    merged = {
        "batch_size": args.batch_size if args.batch_size is not None else file_cfg.get("batch_size", base.batch_size),
        "max_epochs": args.epochs if args.epochs is not None else file_cfg.get("max_epochs", base.max_epochs),
        "learning_rate": args.learning_rate if args.learning_rate is not None else file_cfg.get("learning_rate", base.learning_rate),
        "patience": args.patience if args.patience is not None else file_cfg.get("patience", base.patience),
        "seed": args.seed,
        "n_folds": getattr(args, "folds", None) or file_cfg.get("n_folds", base.n_folds),
        "valid_fraction": file_cfg.get("valid_fraction", base.valid_fraction),
    }
    return training.TrainConfig(**merged)


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    dataset = load_jsonl(args.data)
    model_config = _model_config_from_args(args, dataset)
    train_config = _train_config_from_args(args)
    os.makedirs(args.out, exist_ok=True)

    train_ds, valid_ds, _ = kfold_split(dataset, max(train_config.n_folds, 2), 0,
                                        train_config.valid_fraction, train_config.seed)
    valid_ds = normalize_times(valid_ds, reference=train_ds)
    train_ds = normalize_times(train_ds)

    model = NeuralTppModel(model_config)
    model, report = training.train(model, train_ds, valid_ds, train_config)
    ckpt = os.path.join(args.out, "model.json")
    save_checkpoint(model, ckpt)
    _write_json(os.path.join(args.out, "train_report.json"), report.to_dict())
    print(report.format_table())
    _write_manifest(ckpt, "train",
                    {"model": args.model, "data": str(args.data),
                     "model_config": json.loads(json.dumps(model_config, default=lambda o: o.__dict__)),
                     "train_config": train_config.__dict__},
                    train_config.seed, [ckpt], t0)
    if report.diverged:
        print("training diverged; checkpoint holds the last finite best parameters",
              file=sys.stderr)
        return 4
    return 0


def cmd_cv(args) -> int:
    t0 = time.perf_counter()
    dataset = load_jsonl(args.data)
    model_config = _model_config_from_args(args, dataset)
    train_config = _train_config_from_args(args)
    os.makedirs(args.out, exist_ok=True)

    result = training.cross_validate(model_config, dataset, train_config)
    payload = {
        "mean_accuracy": result["mean_accuracy"],
        "std_accuracy": result["std_accuracy"],
        "mean_weighted_f1": result["mean_weighted_f1"],
        "std_weighted_f1": result["std_weighted_f1"],
        "folds": [r.to_dict() for r in result["fold_reports"]],
    }
    out = os.path.join(args.out, "cv_report.json")
    _write_json(out, payload)
    for i, rep in enumerate(result["fold_reports"]):
        print(f"fold {i}: accuracy {rep.accuracy:.4f}, weighted F1 {rep.weighted_f1:.4f}")
    print(f"mean accuracy {result['mean_accuracy']:.4f} +- {result['std_accuracy']:.4f}, "
          f"mean weighted F1 {result['mean_weighted_f1']:.4f} +- {result['std_weighted_f1']:.4f}")
    _write_manifest(out, "cv",
                    {"model": args.model, "data": str(args.data),
                     "train_config": train_config.__dict__},
                    train_config.seed, [out], t0)
    return 0


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    model = load_checkpoint(args.model_path)
    dataset = load_jsonl(args.data)
    if args.normalize:
        dataset = normalize_times(dataset)
    report = evaluation.evaluate_next_mark(model, dataset)
    print(report.format_table())
    if args.out:
        _write_json(args.out, report.to_dict())
        _write_manifest(args.out, "evaluate",
                        {"model_path": str(args.model_path), "data": str(args.data),
                         "normalize": args.normalize},
                        None, [args.out], t0)
    return 0


def cmd_trace(args) -> int:
    t0 = time.perf_counter()
    model = load_checkpoint(args.model_path)
    dataset = load_jsonl(args.data)
    if args.normalize:
        dataset = normalize_times(dataset)
    if not (0 <= args.seq_index < len(dataset)):
        raise UsageError(f"--seq-index {args.seq_index} out of range (0..{len(dataset)-1})")
    seq = dataset.sequences[args.seq_index]
    grid = np.linspace(0.0, seq.t_end, args.grid_points + 1)[1:]
    trace = evaluation.intensity_trace(model, seq, grid)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, f"trace_{args.seq_index}.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(trace.to_csv())
    outputs = [csv_path]
    if args.svg:
        svg_path = os.path.join(args.out, f"trace_{args.seq_index}.svg")
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(trace.to_svg())
        outputs.append(svg_path)
    print(f"wrote {', '.join(outputs)}")
    _write_manifest(csv_path, "trace",
                    {"model_path": str(args.model_path), "data": str(args.data),
                     "seq_index": args.seq_index, "grid_points": args.grid_points,
                     "normalize": args.normalize},
                    None, outputs, t0)
    return 0


# -- parser --------------------------------------------------------------------

def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True,
                   help=f"one of: {', '.join(sorted(CLI_MODEL_NAMES))}")
    p.add_argument("--encoder", default="self_attention",
                   choices=["self_attention", "recurrent"])
    p.add_argument("--static-features", action="store_true",
                   help="condition on per-sequence static feature vectors")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=2)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--max-context", type=int, default=128)
    p.add_argument("--config", help="train config JSON (flags take precedence)")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tppkit",
                                     description="Temporal point process toolkit")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-sequence parallel steps")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", help="generation config JSON (defaults ship in-package)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stats", help="dataset statistics table")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("fit-hawkes", help="maximum-likelihood calibration")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-iterations", type=int, default=500)
    p.set_defaults(func=cmd_fit_hawkes)

    p = sub.add_parser("gof", help="time-rescaling goodness of fit")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True, help="fitted params JSON")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gof)

    p = sub.add_parser("train", help="train one model")
    _add_model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    _add_model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("evaluate", help="next-mark metrics for a checkpoint")
    p.add_argument("--model-path", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--normalize", action="store_true",
                   help="normalize times by the dataset mean inter-event time")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("trace", help="intensity trace CSV/SVG for one sequence")
    p.add_argument("--model-path", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seq-index", type=int, default=0)
    p.add_argument("--grid-points", type=int, default=200)
    p.add_argument("--svg", action="store_true")
    p.add_argument("--normalize", action="store_true")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data validation error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
