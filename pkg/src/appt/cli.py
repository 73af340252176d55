"""Command-line entry point.

Commands: gen, train, eval, erf, flops, selftest. Every command is a pure
function of its config and seeds; artifacts are written atomically so a
failed run never leaves partial files. Exit codes: 0 success, 1 check or
runtime failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import selftest as selftest_mod
from .analysis import count_flops, erf_radius, network_erf_map
from .errors import (ApptError, ConfigurationError, FileFormatError,
                     InputError, MissingParameterError, ParseError,
                     RangeError)
from .ioutil import atomic_write_text
from .network import (Network, NetworkConfig, config_from_dict,
                      load_checkpoint, save_checkpoint)
from .pointcloud import (SYNTHETIC_KINDS, cloud_class, generate_synthetic,
                         load_cloud, save_cloud)
from .rng import SplitMix64
from .training import (DatasetSpec, Sample, TrainConfig, evaluate,
                       history_csv, train_loop)

_USAGE_ERRORS = (ConfigurationError, InputError, RangeError, FileFormatError,
                 ParseError, MissingParameterError)

CONFIG_SCHEMA_VERSION = 1


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _ensure_out_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write-probe~")
    try:
        with open(probe, "w") as fh:
            fh.write("")
        os.unlink(probe)
    except OSError as exc:
        raise InputError(f"output directory {path!r} is not writable: {exc}")
    return path


def _write_json(path: str, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# config files


def load_config_document(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path!r}: {exc}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    version = doc.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigurationError(
            f"{path}: schema_version must be {CONFIG_SCHEMA_VERSION}, got {version}")
    return doc


def network_config_from_document(doc: dict, path: str) -> NetworkConfig:
    if "network" not in doc:
        raise ConfigurationError(f"{path}: missing 'network' section")
    try:
        return config_from_dict(doc["network"])
    except ApptError as exc:
        raise ConfigurationError(f"{path}: network: {exc}") from None


def train_config_from_document(doc: dict, path: str,
                               seed_override=None) -> TrainConfig:
    if "training" not in doc:
        raise ConfigurationError(f"{path}: missing 'training' section")
    t = doc["training"]

    def need(key, caster):
        if key not in t:
            raise ConfigurationError(f"{path}: training.{key} is required")
        try:
            return caster(t[key])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{path}: training.{key}: {exc}") from None

    d = t.get("dataset")
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path}: training.dataset must be an object")
    try:
        dataset = DatasetSpec(
            kinds=tuple(d.get("kinds", ())),
            train_per_kind=int(d.get("train_per_kind", 0)),
            test_per_kind=int(d.get("test_per_kind", 0)),
            points=int(d.get("points", 0)),
        )
    except ApptError as exc:
        raise ConfigurationError(f"{path}: training.dataset: {exc}") from None
    seed = need("seed", int) if seed_override is None else int(seed_override)
    target = t.get("target_metric")
    try:
        return TrainConfig(
            learning_rate=need("learning_rate", float),
            momentum=need("momentum", float),
            weight_decay=need("weight_decay", float),
            epochs=need("epochs", int),
            seed=seed,
            task=need("task", str),
            dataset=dataset,
            target_metric=None if target is None else float(target),
        )
    except ApptError as exc:
        raise ConfigurationError(f"{path}: training: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    out = _ensure_out_dir(args.out)
    base = SplitMix64(args.seed)
    entries = []
    for i in range(args.count):
        seed = int(base.derive(f"data/{args.kind}/{args.split}/{i}").seed)
        cloud = generate_synthetic(args.kind, args.n, seed)
        fname = f"{args.kind}_{args.split}_{i:03d}.txt"
        save_cloud(cloud, os.path.join(out, fname))
        entry = {"file": fname, "kind": args.kind, "n": cloud.n}
        if args.kind == "two_planes":
            entry["labels"] = "per_point"
        else:
            entry["labels"] = "cloud"
            entry["class"] = cloud_class(cloud)
        entries.append(entry)
    _write_json(os.path.join(out, "manifest.json"), {
        "kind": args.kind, "count": args.count, "n": args.n,
        "seed": args.seed, "split": args.split, "files": entries,
    })
    print(f"wrote {args.count} cloud(s) and manifest.json to {out}")
    return 0


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigurationError("train needs --config")
    doc = load_config_document(args.config)
    net_cfg = network_config_from_document(doc, args.config)
    train_cfg = train_config_from_document(doc, args.config,
                                           seed_override=args.seed)
    net = Network(net_cfg)
    if args.dry_run:
        params = net.init_params(seed=train_cfg.seed)
        print(f"dry-run ok: param_count={params.total_parameters()}")
        return 0
    out = _ensure_out_dir(args.out)
    result = train_loop(net_cfg, train_cfg)
    save_checkpoint(os.path.join(out, "checkpoint.appt"), net_cfg, result.params)
    atomic_write_text(os.path.join(out, "history.csv"),
                      history_csv(result.history))
    _write_json(os.path.join(out, "final_metrics.json"),
                result.final_metrics.to_json())
    last = result.history[-1]
    print(f"trained {last.epoch} epoch(s): train_loss={last.train_loss:.6f} "
          f"eval_metric={last.eval_metric:.6f}")
    print(f"artifacts in {out}: checkpoint.appt history.csv final_metrics.json")
    return 0


def _load_labelled_clouds(paths) -> list:
    files = []
    for p in paths:
        if os.path.isdir(p):
            files += sorted(
                os.path.join(p, f) for f in os.listdir(p) if f.endswith(".txt"))
        else:
            files.append(p)
    if not files:
        raise InputError("no cloud files found under --data")
    clouds = []
    for f in files:
        cloud = load_cloud(f)
        if cloud.labels is None:
            raise InputError(f"{f}: cloud carries no labels; cannot evaluate")
        clouds.append((f, cloud))
    return clouds


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigurationError("eval needs --checkpoint")
    if not args.data:
        raise ConfigurationError("eval needs --data")
    cfg, params = load_checkpoint(args.checkpoint)
    net = Network(cfg)
    samples = []
    from .network import prepare_geometry
    for fname, cloud in _load_labelled_clouds(args.data):
        if cloud.feature_width != cfg.input_width:
            raise ConfigurationError(
                f"{fname}: cloud has {cloud.feature_width} features but the "
                f"checkpoint expects {cfg.input_width}")
        if cfg.task == "classification":
            labels = np.array([cloud_class(cloud)], dtype=np.int64)
        else:
            labels = cloud.labels
        if labels.max() >= cfg.num_classes:
            raise ConfigurationError(
                f"{fname}: label {labels.max()} out of range for "
                f"{cfg.num_classes} classes")
        samples.append(Sample(cloud, prepare_geometry(cfg, cloud), labels))
    report = evaluate(net, params, samples)
    out = _ensure_out_dir(args.out)
    _write_json(os.path.join(out, "metrics.json"), report.to_json())
    atomic_write_text(os.path.join(out, "metrics.csv"), report.to_csv())
    print(f"miou={report.miou:.6f} macc={report.macc:.6f} oa={report.oa:.6f}")
    return 0


def cmd_erf(args) -> int:
    if not args.checkpoint:
        raise ConfigurationError("erf needs --checkpoint")
    if not args.cloud:
        raise ConfigurationError("erf needs --cloud")
    cfg, params = load_checkpoint(args.checkpoint)
    cloud = load_cloud(args.cloud)
    if cloud.feature_width != cfg.input_width:
        raise ConfigurationError(
            f"cloud has {cloud.feature_width} features but the checkpoint "
            f"expects {cfg.input_width}")
    emap = network_erf_map(cfg, params, cloud, args.point_index)
    radius = erf_radius(emap, cloud, 0.95)
    out = _ensure_out_dir(args.out)
    atomic_write_text(os.path.join(out, "erf.csv"), emap.to_csv(cloud))
    _write_json(os.path.join(out, "erf_summary.json"), {
        "point_index": emap.point_index,
        "total_mass": emap.total,
        "coverage": 0.95,
        "radius": radius,
        "nonzero_points": int(np.count_nonzero(emap.mass)),
    })
    print(f"erf radius at 95% coverage: {radius:.6f} "
          f"({int(np.count_nonzero(emap.mass))} points with mass)")
    return 0


def cmd_flops(args) -> int:
    if not args.config:
        raise ConfigurationError("flops needs --config")
    doc = load_config_document(args.config)
    cfg = network_config_from_document(doc, args.config)
    n_list = args.n or [1024]
    for n in n_list:
        if n <= 0:
            raise RangeError(f"point count must be positive, got {n}")
    out = _ensure_out_dir(args.out)
    summary = []
    for n in n_list:
        report = count_flops(cfg, n)
        atomic_write_text(os.path.join(out, f"flops_n{n}.csv"), report.to_csv())
        doubled = NetworkConfig(
            task=cfg.task,
            schedule=type(cfg.schedule)(
                cfg.schedule.depths, cfg.schedule.channels,
                cfg.schedule.global_channel_ratios,
                tuple(min(1.0, 2.0 * r) for r in cfg.schedule.sampling_ratios),
                cfg.schedule.downsample_strides),
            input_width=cfg.input_width, num_classes=cfg.num_classes,
            neighbor_count=cfg.neighbor_count, arrangement=cfg.arrangement,
            fusion=cfg.fusion, seed=cfg.seed)
        base_global = report.totals_by_category()["attention-global"]
        doubled_global = count_flops(doubled, n).totals_by_category()["attention-global"]
        summary.append({
            "n": n,
            "total": report.total,
            "by_category": report.totals_by_category(),
            "full_attention_total": count_flops(cfg, n, full_attention=True).total,
            "global_attention_doubled_sr_ratio": (
                None if base_global == 0 else doubled_global / base_global),
        })
        print(f"n={n}: total={report.total} "
              f"global={base_global}")
    _write_json(os.path.join(out, "flops_summary.json"), {"reports": summary})
    return 0


def cmd_selftest(args) -> int:
    results = selftest_mod.run_all(checkpoint=args.checkpoint)
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        status = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail and not ok else ""
        print(f"{status} {name}{suffix}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--dry-run", action="store_true",
                        help="validate and report without writing artifacts")

    parser = argparse.ArgumentParser(
        prog="appt",
        description="point transformer with parallel local/global attention "
                    "branches: data generation, training, evaluation, and "
                    "FLOPs / receptive-field analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common],
                       help="write synthetic point-cloud files + manifest")
    p.add_argument("--kind", required=True,
                   help=f"one of {', '.join(SYNTHETIC_KINDS)}")
    p.add_argument("--n", type=int, default=256, help="points per cloud")
    p.add_argument("--count", type=int, default=1, help="number of clouds")
    p.add_argument("--split", choices=("train", "test"), default="train",
                   help="which seeded split to materialize")
    p.set_defaults(func=cmd_gen, needs_seed=True)

    p = sub.add_parser("train", parents=[common],
                       help="train per config; writes checkpoint + history")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on labelled cloud files")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--data", nargs="+", help="cloud files or directories")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("erf", parents=[common],
                       help="effective-receptive-field map for one point")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--cloud", help="cloud file")
    p.add_argument("--point-index", type=int, default=0)
    p.set_defaults(func=cmd_erf)

    p = sub.add_parser("flops", parents=[common],
                       help="analytic per-layer FLOPs reports")
    p.add_argument("--n", type=int, action="append",
                   help="point count (repeatable)")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("selftest", parents=[common],
                       help="run the built-in oracle/property suite")
    p.add_argument("--checkpoint", default=None,
                   help="optionally verify a checkpoint file's integrity")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "needs_seed", False) and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        return _fail(str(exc), 2)
    except ApptError as exc:
        return _fail(str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
