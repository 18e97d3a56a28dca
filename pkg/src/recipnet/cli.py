"""Command-line interface.

Subcommands: train, eval, predict, inspect-experts, validate-data,
gradcheck, ablate.  Configuration comes from one TOML file with [model],
[train], and [data] sections; common values can be overridden with
--set section.key=value flags.  Exit codes: 0 success, 1 validation
failure, 2 runtime error.

Heavy imports are deferred until after --threads is applied, so BLAS
thread pools can be pinned for bitwise-reproducible runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _apply_threads(argv):
    threads = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is not None:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ[var] = str(threads)


def _load_toml(path):
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _coerce(text):
    """Parse an override value: JSON first, bare string as fallback."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(config: dict, overrides):
    for item in overrides or ():
        if "=" not in item:
            raise SystemExit(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = config
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = _coerce(raw)
    return config


def _build_configs(args):
    from .embeddings import EdgeFeatureConfig
    from .model import ModelConfig, MoeConfig
    from .training import TrainConfig

    raw = _load_toml(args.config) if args.config else {}
    _apply_overrides(raw, getattr(args, "set", None))

    model_raw = dict(raw.get("model", {}))
    if args.seed is not None:
        model_raw["seed"] = args.seed
    if args.float64:
        model_raw["dtype"] = "float64"
    if model_raw.get("moe") is not None:
        model_raw["moe"] = MoeConfig(**model_raw["moe"])
    if "edge" in model_raw:
        model_raw["edge"] = EdgeFeatureConfig(**model_raw["edge"])
    if "tasks" not in model_raw:
        model_raw["tasks"] = ["target"]
    model_config = ModelConfig(**model_raw)

    train_raw = dict(raw.get("train", {}))
    if args.seed is not None:
        train_raw["seed"] = args.seed
    if "betas" in train_raw:
        train_raw["betas"] = tuple(train_raw["betas"])
    train_config = TrainConfig(**train_raw)

    return model_config, train_config, dict(raw.get("data", {}))


def _load_splits(args, data_raw, tasks):
    from .data import SplitSpec, load_dataset, split_dataset

    dataset_path = args.dataset or data_raw.get("dataset")
    if not dataset_path:
        raise SystemExit("no dataset given: pass --dataset or set data.dataset")
    records = load_dataset(dataset_path, strict=bool(data_raw.get("strict", False)))
    split_raw = data_raw.get("split", {"train": 0.8, "val": 0.1, "test": 0.1})
    spec = SplitSpec(
        train=split_raw.get("train", 0.8),
        val=split_raw.get("val", 0.1),
        test=split_raw.get("test", 0.1),
        seed=int(data_raw.get("split_seed", 0)),
    )
    return split_dataset(records, spec)


def cmd_train(args):
    from .checkpoint import load_checkpoint, save_checkpoint
    from .training import train

    model_config, train_config, data_raw = _build_configs(args)
    train_records, val_records, _ = _load_splits(args, data_raw, model_config.tasks)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(
        model_config,
        train_config,
        train_records,
        val_records,
        checkpoint_path=args.output,
        resume_from=resume,
        metrics_path=args.metrics,
    )
    save_checkpoint(args.output, result.best_checkpoint)
    final = result.history[-1] if result.history else {}
    print(f"trained {result.checkpoint.epoch} epochs; checkpoint -> {args.output}")
    if final.get("val_mae"):
        for task, mae in final["val_mae"].items():
            print(f"  val MAE {task}: {mae:.6f}")
    return 0


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .training import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    data_raw = _load_toml(args.config).get("data", {}) if args.config else {}
    splits = _load_splits(args, data_raw, ckpt.config.tasks)
    split = {"train": 0, "val": 1, "test": 2}[args.split]
    maes = evaluate(ckpt, splits[split], batch_size=args.batch_size)
    for task in ckpt.config.tasks:
        if task in maes:
            print(f"{args.split} MAE {task}: {maes[task]:.6f}")
        else:
            print(f"{args.split} MAE {task}: (no labels)")
    return 0


def cmd_predict(args):
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .model import predict_structures

    ckpt = load_checkpoint(args.checkpoint)
    records = load_dataset(args.structures, strict=True)
    structures = [r.to_structure(ckpt.config.tasks) for r in records]
    preds = predict_structures(structures, ckpt.params, ckpt.config)
    preds = ckpt.normalization.destandardize(preds)
    out = [
        {"id": r.id, "predictions": {t: float(preds[i, j])
                                     for j, t in enumerate(ckpt.config.tasks)}}
        for i, r in enumerate(records)
    ]
    print(json.dumps(out, indent=2))
    return 0


def cmd_inspect_experts(args):
    from .checkpoint import load_checkpoint
    from .data import load_dataset
    from .training import collect_expert_usage

    ckpt = load_checkpoint(args.checkpoint)
    records = load_dataset(args.dataset, strict=False)
    usage = collect_expert_usage(ckpt, records, indicator=args.indicator)
    payload = usage.to_dict()
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(payload, fh, indent=2)
        print(f"expert usage -> {args.output}")
    else:
        print(json.dumps(payload, indent=2))

    n = len(next(iter(usage.frequencies.values())))
    header = "task".ljust(18) + " ".join(f"e{i:<6d}" for i in range(n))
    print(header)
    for task in usage.tasks:
        row = " ".join(f"{v:.4f} " for v in usage.frequencies[task])
        print(task.ljust(18) + row)
    print("cosine similarity:")
    for i, task in enumerate(usage.tasks):
        row = " ".join(f"{v:.3f}" for v in usage.similarity[i])
        print(f"  {task.ljust(16)} {row}")
    return 0


def cmd_validate_data(args):
    from .data import scan_dataset

    problems = scan_dataset(args.dataset)
    if not problems:
        print("0 violations")
        return 0
    for line, record_id, violations in problems:
        for v in violations:
            print(f"line {line} ({record_id}): {v}")
    print(f"{sum(len(v) for _, _, v in problems)} violations in {len(problems)} records")
    return 1


def cmd_gradcheck(args):
    from .gradcheck_suite import run_suite

    results = run_suite(seed=args.seed if args.seed is not None else 0)
    failed = False
    for name, err, threshold in results:
        status = "ok" if err < threshold else "FAIL"
        if err >= threshold:
            failed = True
        print(f"{name:<28} max rel err {err:.3e}  (threshold {threshold:.0e})  {status}")
    return 1 if failed else 0


def cmd_ablate(args):
    from .training import TrainConfig, train

    model_config, train_config, data_raw = _build_configs(args)
    train_records, val_records, _ = _load_splits(args, data_raw, model_config.tasks)
    seeds = [int(s) for s in args.seeds.split(",")]
    wins = 0
    rows = []
    for seed in seeds:
        scores = {}
        for use_reciprocal in (True, False):
            cfg_dict = model_config.to_dict()
            cfg_dict["use_reciprocal"] = use_reciprocal
            cfg_dict["seed"] = seed
            from .model import ModelConfig

            cfg = ModelConfig.from_dict(cfg_dict)
            tc = TrainConfig(**{**vars(train_config), "seed": seed})
            result = train(cfg, tc, train_records, val_records)
            entry = result.history[-1]
            maes = entry.get("val_mae") or entry["train_mae"]
            scores[use_reciprocal] = sum(maes.values()) / len(maes)
        better = scores[True] < scores[False]
        wins += int(better)
        rows.append((seed, scores[True], scores[False], better))
    print(f"{'seed':<6}{'with-reciprocal':<18}{'without':<18}better")
    for seed, with_r, without_r, better in rows:
        print(f"{seed:<6}{with_r:<18.6f}{without_r:<18.6f}{'yes' if better else 'no'}")
    print(f"reciprocal block lowered validation MAE in {wins}/{len(seeds)} seeds")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="recipnet",
        description="Crystal property prediction with reciprocal-space features",
    )
    parser.add_argument("--seed", type=int, default=None, help="override all seeds")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS/OpenMP thread cap (1 for bitwise reproducibility)")
    parser.add_argument("--float64", action="store_true",
                        help="force float64 parameters regardless of config")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--dataset", help="JSON-lines dataset (overrides config)")
    p.add_argument("--output", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-epoch metrics CSV path")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override a config value (JSON-encoded)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="TOML config (for the data section)")
    p.add_argument("--dataset", help="JSON-lines dataset")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict properties for structures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("structures", help="JSON-lines file of structures")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect-experts", help="expert usage for a multi-task checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", help="write the JSON report here")
    p.add_argument("--indicator", action="store_true",
                   help="count hard selections instead of averaging weights")
    p.set_defaults(func=cmd_inspect_experts)

    p = sub.add_parser("validate-data", help="scan a dataset for violations")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_validate_data)

    p = sub.add_parser("gradcheck", help="finite-difference checks per module")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="paired runs with/without the reciprocal block")
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--dataset", help="JSON-lines dataset (overrides config)")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    _apply_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        from .errors import ParseError, RecipnetError, ValidationError

        kind = "error" if isinstance(exc, RecipnetError) else type(exc).__name__
        print(f"{kind}: {exc}", file=sys.stderr)
        # 1: the input data failed validation; 2: everything else
        return 1 if isinstance(exc, (ParseError, ValidationError)) else 2


if __name__ == "__main__":
    sys.exit(main())
