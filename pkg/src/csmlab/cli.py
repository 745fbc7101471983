"""Experiment runner: train, sweep, intervene, inspect, gen-data.

Configuration comes from a JSON file plus flag overrides (flags win). Every
command with the same configuration and seed writes byte-identical reports:
runs are seeded end to end and no report contains timestamps.

CSV schemas (documented contract, see README):
  history.csv: epoch, loss_task, loss_concept, loss_sis, val_acc, val_sis
  pareto.csv:  arch, beta, emb_size, accuracy, sis, sis_lo, sis_hi, pareto_flag
  curve.csv:   k, accuracy
  inspect.csv: task, rank, name, weight
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

from .checkpoint import (
    CheckpointError,
    dump_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .datasets import (
    GENERATORS,
    DatasetFormatError,
    export_dataset,
    import_dataset,
    make_dataset,
    regenerate,
)
from .metrics import (
    ParetoPoint,
    accuracy_score,
    inspect_linear_weights,
    intervenability_curve,
    pareto_front,
    sis_score,
    threshold_predictions,
)
from .model import infer_bottleneck, infer_default
from .training import TrainConfig, TrainingDivergedError, fit
from .zoo import ARCHITECTURES

OUT_DIR_ENV = "CSMLAB_OUT"

DEFAULT_CONFIG = {
    "dataset": {"name": "xor", "params": {"n": 10000, "noise_std": 0.1}, "seed": 7},
    "arch": "LRM",
    "model": {"emb_size": 32, "c_emb": 8, "n_rules": 4, "rule_emb": 16},
    "train": {},
    "sweep": {"beta": [0.0], "emb_size": []},
    "delta": 0.05,
    "out_dir": None,
}


class ConfigError(ValueError):
    pass


def _merge(base, override, path=""):
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config field '{where}'")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where)
        else:
            base[key] = value


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return raw


def resolve_config(args):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    # The seeded train defaults live in TrainConfig; mirror them here so the
    # config file can override any subset.
    cfg["train"] = {k: v for k, v in vars(TrainConfig()).items()}
    if args.config:
        file_cfg = load_config(args.config)
        if "dataset" in file_cfg:
            # Dataset specs are replaced wholesale: generator params differ
            # per generator, so a key-merge against the default would reject
            # them.
            cfg["dataset"] = file_cfg.pop("dataset")
        _merge(cfg, file_cfg)
    if getattr(args, "arch", None):
        cfg["arch"] = args.arch
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
    if getattr(args, "delta", None) is not None:
        cfg["delta"] = args.delta
    if getattr(args, "out", None):
        cfg["out_dir"] = args.out
    if getattr(args, "beta", None):
        values = _parse_beta_list(args.beta)
        if not values:
            raise ConfigError("--beta expects at least one value")
        if args.command == "train" and len(values) > 1:
            raise ConfigError("train expects a single --beta value; lists are for pareto")
        cfg["sweep"]["beta"] = values
        if len(values) == 1:
            cfg["train"]["beta"] = values[0]
    validate_config(cfg, command=args.command)
    return cfg


def _parse_beta_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"--beta expects a comma-separated float list, got {text!r}") from None


def validate_config(cfg, command):
    if cfg["arch"] not in ARCHITECTURES:
        raise ConfigError(
            f"arch: unknown architecture tag {cfg['arch']!r}; expected one of {sorted(ARCHITECTURES)}"
        )
    dataset = cfg["dataset"]
    if "file" not in dataset:
        if dataset.get("name") not in GENERATORS:
            raise ConfigError(
                f"dataset.name: unknown generator {dataset.get('name')!r}; expected one of {sorted(GENERATORS)}"
            )
        if not isinstance(dataset.get("params", {}), dict):
            raise ConfigError("dataset.params: must be an object of generator arguments")
    if not 0.0 < cfg["delta"] < 1.0:
        raise ConfigError(f"delta: must be in (0, 1), got {cfg['delta']}")
    for key in ("emb_size", "c_emb", "n_rules", "rule_emb"):
        if cfg["model"][key] < 1:
            raise ConfigError(f"model.{key}: must be >= 1, got {cfg['model'][key]}")
    if command == "pareto":
        if not cfg["sweep"]["beta"]:
            raise ConfigError("sweep.beta: must be a non-empty list for the pareto command")
    try:
        _train_config(cfg).validate()
    except ValueError as err:
        raise ConfigError(str(err)) from None


def _train_config(cfg):
    return TrainConfig(**cfg["train"])


def resolve_out_dir(cfg):
    out = cfg.get("out_dir") or os.environ.get(OUT_DIR_ENV) or "csmlab-out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def resolve_dataset(cfg):
    spec = cfg["dataset"]
    if "file" in spec:
        return import_dataset(spec["file"])
    return make_dataset(spec["name"], spec.get("params", {}), spec.get("seed", 0))


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return path


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def evaluate_split(model, dataset, split, delta):
    x, _, y = dataset.split(split)
    preds_d = threshold_predictions(infer_default(model, x).probs.data, model.exclusive_groups)
    preds_b = threshold_predictions(infer_bottleneck(model, x).probs.data, model.exclusive_groups)
    report = sis_score(preds_d, preds_b, dataset.y_groups, delta=delta)
    accuracy = accuracy_score(preds_d, y, dataset.y_groups)
    return {"split": split, "accuracy": accuracy, "sis": report.to_dict()}


# ---- commands ---------------------------------------------------------------


def cmd_gen_data(args):
    cfg = resolve_config(args)
    out = resolve_out_dir(cfg)
    dataset = resolve_dataset(cfg)
    path = export_dataset(dataset, out / "dataset.csmd")
    print(path)
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    out = resolve_out_dir(cfg)
    dataset = resolve_dataset(cfg)
    train_cfg = _train_config(cfg)
    try:
        model, history = fit(dataset, cfg["arch"], train_cfg, **cfg["model"])
    except TrainingDivergedError as err:
        _write_history_csv(out / "history.csv", err.history)
        write_json(out / "summary.json", {"error": str(err), "config": cfg})
        raise
    save_checkpoint(
        model, out / "checkpoint.csmc",
        dataset_fingerprint=dataset.fingerprint,
        history_summary=history.summary(),
    )
    dump_parameters(model, out / "checkpoint_params.txt")
    _write_history_csv(out / "history.csv", history)
    test_eval = evaluate_split(model, dataset, "test", cfg["delta"])
    write_json(out / "sis_report.json", test_eval)
    write_json(out / "summary.json", {
        "arch": cfg["arch"],
        "config": cfg,
        "history": history.summary(),
        "test": test_eval,
    })
    print(f"accuracy={test_eval['accuracy']!r} sis={test_eval['sis']['sis_hat']!r}")
    return 0


def _write_history_csv(path, history):
    rows = [
        [epoch, history.task_loss[epoch], history.concept_loss[epoch],
         history.sis_loss[epoch], history.val_accuracy[epoch], history.val_sis[epoch]]
        for epoch in range(history.n_epochs)
    ]
    write_csv(path, ["epoch", "loss_task", "loss_concept", "loss_sis", "val_acc", "val_sis"], rows)


def cmd_pareto(args):
    cfg = resolve_config(args)
    out = resolve_out_dir(cfg)
    dataset = resolve_dataset(cfg)
    betas = sorted(cfg["sweep"]["beta"])
    embs = sorted(cfg["sweep"]["emb_size"]) or [cfg["model"]["emb_size"]]
    rows = []
    points = []
    failures = {}
    for beta in betas:
        for emb in embs:
            train_cfg = _train_config(cfg)
            train_cfg.beta = beta
            model_cfg = dict(cfg["model"], emb_size=emb)
            key = (beta, emb)
            try:
                model, _ = fit(dataset, cfg["arch"], train_cfg, **model_cfg)
                test_eval = evaluate_split(model, dataset, "test", cfg["delta"])
            except (TrainingDivergedError, ValueError) as err:
                failures[key] = str(err)
                continue
            points.append(ParetoPoint(
                config_id=f"beta={beta!r},emb_size={emb}",
                accuracy=test_eval["accuracy"],
                sis=test_eval["sis"]["sis_hat"],
                beta=beta,
                arch=cfg["arch"],
                extra={
                    "emb_size": emb,
                    "sis_lo": test_eval["sis"]["interval"][0],
                    "sis_hi": test_eval["sis"]["interval"][1],
                },
            ))
    front = {p.config_id for p in pareto_front(points)}
    by_key = {(p.beta, p.extra["emb_size"]): p for p in points}
    for beta in betas:
        for emb in embs:
            p = by_key.get((beta, emb))
            if p is None:
                rows.append([cfg["arch"], beta, emb, None, None, None, None, "failed"])
            else:
                rows.append([
                    cfg["arch"], beta, emb, p.accuracy, p.sis,
                    p.extra["sis_lo"], p.extra["sis_hi"],
                    1 if p.config_id in front else 0,
                ])
    write_csv(out / "pareto.csv",
              ["arch", "beta", "emb_size", "accuracy", "sis", "sis_lo", "sis_hi", "pareto_flag"],
              rows)
    write_json(out / "pareto_summary.json", {
        "config": cfg,
        "grid": {"beta": betas, "emb_size": embs},
        "failures": {f"beta={k[0]!r},emb_size={k[1]}": v for k, v in failures.items()},
        "front": sorted(front),
    })
    print(out / "pareto.csv")
    return 0


def cmd_intervene(args):
    cfg = resolve_config(args)
    out = resolve_out_dir(cfg)
    model, meta = load_checkpoint(args.checkpoint)
    if args.data:
        dataset = import_dataset(args.data)
    else:
        fingerprint = meta.get("dataset_fingerprint")
        if not fingerprint:
            raise ConfigError(
                "checkpoint has no dataset fingerprint; pass --data FILE instead"
            )
        dataset = regenerate(fingerprint)
    x, c, y = dataset.split("test")
    if c.size == 0:
        raise ConfigError("dataset has no concept labels; cannot intervene")
    curve = intervenability_curve(model, x, c, y, args.order_seed, grouping=dataset.y_groups)
    write_csv(out / "curve.csv", ["k", "accuracy"], list(enumerate(curve)))
    print(out / "curve.csv")
    return 0


def cmd_inspect(args):
    cfg = resolve_config(args)
    out = resolve_out_dir(cfg)
    model, meta = load_checkpoint(args.checkpoint)
    report = inspect_linear_weights(model)
    rows = []
    for task in report["tasks"]:
        for rank, (name, weight) in enumerate(task["entries"][:10], start=1):
            rows.append([task["task"], rank, name, weight])
    write_csv(out / "inspect.csv", ["task", "rank", "name", "weight"], rows)
    write_json(out / "inspect.json", report)
    print(out / "inspect.json")
    return 0


# ---- entry point -------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="csmlab",
        description="Train and evaluate concept sidechannel models on synthetic data.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="training seed override")
    common.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or ./csmlab-out)")
    common.add_argument("--beta", help="comma-separated divergence weight(s)")
    common.add_argument("--arch", choices=sorted(ARCHITECTURES), help="architecture tag")
    common.add_argument("--delta", type=float, help="confidence delta for score intervals")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate and export a dataset")
    sub.add_parser("train", parents=[common], help="train one configuration")
    sub.add_parser("pareto", parents=[common], help="sweep beta x emb_size and flag the front")
    p_int = sub.add_parser("intervene", parents=[common], help="write an intervention curve")
    p_int.add_argument("--checkpoint", required=True)
    p_int.add_argument("--data", help="dataset file (default: regenerate from checkpoint)")
    p_int.add_argument("--order-seed", type=int, default=0)
    p_ins = sub.add_parser("inspect", parents=[common], help="rank linear head weights")
    p_ins.add_argument("--checkpoint", required=True)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "pareto": cmd_pareto,
    "intervene": cmd_intervene,
    "inspect": cmd_inspect,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetFormatError, CheckpointError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingDivergedError as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        return 3
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
