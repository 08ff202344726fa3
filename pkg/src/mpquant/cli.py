"""Command-line interface.

Each verb reads one JSON config file (see pipeline.parse_config for the
schema) plus optional --seed / --out overrides, runs a single pipeline
stage, and writes inspectable artifacts.  Exit code 0 on success; failures
print a stage-tagged message on stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .model import evaluate
from .model_io import container_from_model, memory_report
from .pipeline import (
    PipelineError,
    RunConfig,
    _stage,
    _write_json,
    allocate_plan,
    analyze,
    build_dataset,
    build_model,
    compare,
    comparison_text,
    load_config,
    parse_config,
    plan_from_dict,
    plan_to_dict,
    profile_from_dict,
    profile_to_dict,
    run,
    save_dataset,
)
from .quant import apply_plan


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.raw = dict(cfg.raw, seed=args.seed)
    if args.out is not None:
        cfg.out_dir = args.out
        cfg.raw = dict(cfg.raw, out_dir=args.out)
    return cfg


def _out_dir(cfg: RunConfig) -> str:
    out = cfg.out_dir or "out"
    os.makedirs(out, exist_ok=True)
    return out


def _cmd_gen_data(args):
    cfg = _load_cfg(args)
    with _stage("data"):
        ds = build_dataset(cfg.data, cfg.seed, 1)
    path = os.path.join(_out_dir(cfg), "dataset.json")
    save_dataset(ds, path)
    print(f"wrote {path} ({ds.n_samples} samples, task {ds.task})")


def _cmd_train(args):
    cfg = _load_cfg(args)
    with _stage("data"):
        ds = build_dataset(cfg.data, cfg.seed, 1)
    with _stage("model"):
        model, log = build_model(cfg, ds)
    out = _out_dir(cfg)
    path = os.path.join(out, "model.mpqw")
    container_from_model(model).save(path)
    if log is not None:
        _write_json({"epochs": log.epochs}, os.path.join(out, "trainlog.json"))
        print(f"wrote {path} (final {log.final})")
    else:
        print(f"wrote {path}")


def _build_model_and_sets(cfg: RunConfig):
    train_data = build_dataset(cfg.data, cfg.seed, 1) if cfg.data else None
    eval_set = build_dataset(cfg.eval_data, cfg.seed, 2) if cfg.eval_data else train_data
    calib = build_dataset(cfg.calib, cfg.seed, 3) if cfg.calib else eval_set
    model, _ = build_model(cfg, train_data)
    return model, eval_set, calib


def _cmd_analyze(args):
    cfg = _load_cfg(args)
    with _stage("analyze"):
        model, eval_set, calib = _build_model_and_sets(cfg)
        profile = analyze(cfg, model, calib, eval_set, None)
    path = os.path.join(_out_dir(cfg), "profile.json")
    _write_json(profile_to_dict(profile), path)
    print(f"wrote {path} (method {profile.method})")


def _cmd_plan(args):
    cfg = _load_cfg(args)
    with _stage("plan"):
        if not cfg.profile_path:
            raise PipelineError("plan: config needs profile_path")
        with open(cfg.profile_path, "r", encoding="utf-8") as fh:
            profile = profile_from_dict(json.load(fh))
        model, _, _ = _build_model_and_sets(cfg)
        plan = allocate_plan(cfg, profile, model)
    path = os.path.join(_out_dir(cfg), "plan.json")
    _write_json(plan_to_dict(plan, run_config=cfg.raw, seed=cfg.seed), path)
    print(f"wrote {path} (bits {plan.bits_per_layer})")


def _cmd_quantize(args):
    cfg = _load_cfg(args)
    with _stage("quantize"):
        if not cfg.plan_path:
            raise PipelineError("quantize: config needs plan_path")
        with open(cfg.plan_path, "r", encoding="utf-8") as fh:
            plan = plan_from_dict(json.load(fh))
        model, _, _ = _build_model_and_sets(cfg)
        container, _ = apply_plan(model, plan)
        mem = memory_report(container_from_model(model), container)
    out = _out_dir(cfg)
    path = os.path.join(out, "quantized.mpqw")
    container.save(path)
    _write_json(
        {"m_o_bytes": mem.m_o_bytes, "m_q_bytes": mem.m_q_bytes,
         "cr": mem.cr, "fpr_percent": mem.fpr_percent},
        os.path.join(out, "memory.json"),
    )
    print(f"wrote {path} (cr {mem.cr:.3f})")


def _cmd_eval(args):
    cfg = _load_cfg(args)
    with _stage("evaluate"):
        model, eval_set, _ = _build_model_and_sets(cfg)
        metric = evaluate(model, eval_set)
    kind = "accuracy" if model.config.task == "classification" else "perplexity"
    print(json.dumps({kind: metric}))


def _cmd_run(args):
    cfg = _load_cfg(args)
    if cfg.out_dir is None:
        cfg.out_dir = "out"
    report = run(cfg)
    print(f"wrote {os.path.join(cfg.out_dir, 'report.json')} "
          f"(drop {report.drop:.4f}, cr {report.cr:.3f})")


def _cmd_compare(args):
    with open(args.config, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    if not isinstance(spec, dict) or "runs" not in spec:
        raise PipelineError("compare: config must be an object with a 'runs' list")
    configs = []
    for entry in spec["runs"]:
        if isinstance(entry, str):
            configs.append(load_config(entry))
        else:
            configs.append(parse_config(entry))
    if args.seed is not None:
        for c in configs:
            c.seed = args.seed
            c.raw = dict(c.raw, seed=args.seed)
    result = compare(configs)
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    _write_json(result, os.path.join(out, "comparison.json"))
    print(comparison_text(result))


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "analyze": _cmd_analyze,
    "plan": _cmd_plan,
    "quantize": _cmd_quantize,
    "eval": _cmd_eval,
    "run": _cmd_run,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mpquant",
        description="mixed-precision post-training quantization toolkit",
    )
    parser.add_argument("--version", action="version", version=f"mpquant {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to a JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
    args = parser.parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"mpquant {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
