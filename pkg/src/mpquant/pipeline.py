"""End-to-end orchestration: configs, data ingestion, runs, and reports.

A run is fully described by one JSON config (validated fail-closed: unknown
keys are rejected) and proceeds load-or-train -> sensitivity analysis ->
bit-width allocation -> quantization -> evaluation -> report.  Every
stochastic step draws from streams derived from the single mandatory seed,
so a config determines every output byte; reports carry no timestamps.

Byte-level tokenization is used for ingested text: ids 0..255 are raw bytes
and id 256 pads short classification lines (no attention masking; the pad id
is an ordinary token at desk scale).
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .allocate import (
    PrecisionPlan,
    budgeted_plan,
    kmeans_plan,
    uniform_plan,
)
from .model import (
    Batch,
    Dataset,
    ModelConfig,
    TransformerModel,
    evaluate,
    gen_classification,
    gen_lm,
    train,
)
from .model_io import WeightContainer, container_from_model, memory_report, model_from_container
from .quant import apply_plan
from .rng import Rng
from .sensitivity import (
    DEFAULT_CCA_DIM_CAP,
    DEFAULT_SPARSITY_LEVELS,
    PerturbationSpec,
    SensitivityProfile,
    correlation_sensitivity,
    perturbation_sensitivity,
    pruning_sensitivity,
    segment_stats,
)

PAD_ID = 256
BYTE_VOCAB_SIZE = 257
SCHEMA_VERSION = 1

METHODS = ("cmpq", "pmpq", "tdmpq")

# child-stream indices off the master seed, one per pipeline stage
_STREAM_DATA, _STREAM_EVAL, _STREAM_CALIB, _STREAM_TRAIN, _STREAM_ANALYZE, _STREAM_ALLOC = range(1, 7)
_STREAM_TRAIN_SHUFFLE = _STREAM_TRAIN + 100  # init and shuffling never share a stream


class ConfigError(ValueError):
    pass


class ComparisonError(ValueError):
    pass


class PipelineError(RuntimeError):
    """A stage failed; the message is prefixed with the stage name."""


@contextmanager
def _stage(name: str):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(f"{name}: {exc}") from exc


# ---------------------------------------------------------------------------
# Config parsing (fail-closed)
# ---------------------------------------------------------------------------


def _check_keys(d: dict, where: str, required: tuple = (), optional: tuple = ()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(d)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


_GEN_CLS_KEYS = ("kind", "n", "seq_len", "vocab_size", "batch_size", "token_a", "token_b", "seed")
_GEN_LM_KEYS = ("kind", "n_tokens", "vocab_size", "seq_len", "batch_size", "alpha", "seed")
_TRAIN_KEYS = ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len",
               "n_classes", "epochs", "lr", "batch_size")


def _validate_data_spec(spec: dict, where: str):
    _check_keys(spec, where, optional=("generate", "text", "tsv", "path"))
    if len(spec) != 1:
        raise ConfigError(f"{where}: give exactly one of generate/text/tsv/path")
    if "generate" in spec:
        gen = spec["generate"]
        _check_keys(gen, f"{where}.generate", required=("kind",),
                    optional=tuple(set(_GEN_CLS_KEYS + _GEN_LM_KEYS) - {"kind"}))
        if gen["kind"] == "classification":
            _check_keys(gen, f"{where}.generate", required=("kind", "n"),
                        optional=tuple(k for k in _GEN_CLS_KEYS if k not in ("kind", "n")))
        elif gen["kind"] == "lm":
            _check_keys(gen, f"{where}.generate", required=("kind", "n_tokens"),
                        optional=tuple(k for k in _GEN_LM_KEYS if k not in ("kind", "n_tokens")))
        else:
            raise ConfigError(f"{where}.generate: unknown kind {gen['kind']!r}")
    elif "text" in spec:
        _check_keys(spec["text"], f"{where}.text", required=("path", "seq_len", "batch_size"))
    elif "tsv" in spec:
        _check_keys(spec["tsv"], f"{where}.tsv", required=("path", "seq_len", "batch_size"))


@dataclass
class RunConfig:
    seed: int
    task: str | None = None
    model: dict | None = None
    data: dict | None = None
    eval_data: dict | None = None
    calib: dict | None = None
    method: str | None = None
    method_params: dict = field(default_factory=dict)
    allocator: dict = field(default_factory=lambda: {"kind": "kmeans"})
    lam: float = 0.01
    profile_path: str | None = None
    plan_path: str | None = None
    out_dir: str | None = None
    raw: dict = field(default_factory=dict)


def parse_config(cfg: dict) -> RunConfig:
    """Validate a raw config dict; unknown keys anywhere are rejected."""
    _check_keys(
        cfg, "config", required=("seed",),
        optional=("task", "model", "data", "eval", "calib", "method", "method_params",
                  "allocator", "lambda", "profile_path", "plan_path", "out_dir"),
    )
    if not isinstance(cfg["seed"], int):
        raise ConfigError("config: seed must be an integer")
    task = cfg.get("task")
    if task is not None and task not in ("classification", "lm"):
        raise ConfigError(f"config: unknown task {task!r}")

    model_spec = cfg.get("model")
    if model_spec is not None:
        _check_keys(model_spec, "model", optional=("path", "train"))
        if len(model_spec) != 1:
            raise ConfigError("model: give exactly one of path/train")
        if "train" in model_spec:
            _check_keys(model_spec["train"], "model.train",
                        required=("n_layers", "d_model", "n_heads", "d_ff",
                                  "vocab_size", "max_seq_len"),
                        optional=("n_classes", "epochs", "lr"))

    for key in ("data", "eval", "calib"):
        if cfg.get(key) is not None:
            _validate_data_spec(cfg[key], key)

    method = cfg.get("method")
    if method is not None and method not in METHODS:
        raise ConfigError(f"config: unknown method {method!r}")
    _check_keys(cfg.get("method_params", {}), "method_params",
                optional=("sparsity_levels", "delta", "mode", "cca_dim_cap"))

    allocator = cfg.get("allocator", {"kind": "kmeans"})
    _check_keys(allocator, "allocator", required=("kind",),
                optional=("budget_bytes", "bits"))
    if allocator["kind"] == "kmeans":
        _check_keys(allocator, "allocator", required=("kind",))
    elif allocator["kind"] == "budgeted":
        _check_keys(allocator, "allocator", required=("kind", "budget_bytes"))
    elif allocator["kind"] == "uniform":
        _check_keys(allocator, "allocator", required=("kind", "bits"))
        if allocator["bits"] not in (4, 8, 16):
            raise ConfigError("allocator: uniform bits must be 4, 8, or 16")
    else:
        raise ConfigError(f"allocator: unknown kind {allocator['kind']!r}")

    return RunConfig(
        seed=cfg["seed"],
        task=task,
        model=model_spec,
        data=cfg.get("data"),
        eval_data=cfg.get("eval"),
        calib=cfg.get("calib"),
        method=method,
        method_params=dict(cfg.get("method_params", {})),
        allocator=dict(allocator),
        lam=float(cfg.get("lambda", 0.01)),
        profile_path=cfg.get("profile_path"),
        plan_path=cfg.get("plan_path"),
        out_dir=cfg.get("out_dir"),
        raw=cfg,
    )


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(json.load(fh))


# ---------------------------------------------------------------------------
# Data ingestion and dataset serialization
# ---------------------------------------------------------------------------


def _batchify(tokens: np.ndarray, labels: np.ndarray, batch_size: int) -> list[Batch]:
    return [
        Batch(tokens[i:i + batch_size], labels[i:i + batch_size])
        for i in range(0, tokens.shape[0], batch_size)
    ]


def ingest_text(path: str, seq_len: int, batch_size: int) -> Dataset:
    """Byte-level language-modeling dataset: fixed-length chunks with
    next-byte targets."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data:
        raise ValueError(f"{path}: empty file")
    stream = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    n_seq = (stream.size - 1) // seq_len
    if n_seq < 1:
        raise ValueError(f"{path}: need at least {seq_len + 1} bytes for one sequence")
    tokens = np.empty((n_seq, seq_len), dtype=np.int64)
    labels = np.empty((n_seq, seq_len), dtype=np.int64)
    for i in range(n_seq):
        tokens[i] = stream[i * seq_len:(i + 1) * seq_len]
        labels[i] = stream[i * seq_len + 1:(i + 1) * seq_len + 1]
    return Dataset(_batchify(tokens, labels, batch_size), n_seq, "lm", BYTE_VOCAB_SIZE)


def ingest_labeled(path: str, seq_len: int, batch_size: int) -> Dataset:
    """Binary-classification dataset from tab-separated `label<TAB>text` lines.

    Text is byte-level tokenized, truncated to seq_len, and short lines are
    filled with the pad id (an ordinary token, no masking).
    """
    tokens_rows = []
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2 or parts[0] not in ("0", "1"):
                raise ValueError(f"{path}: line {lineno}: expected 'label<TAB>text' with label 0 or 1")
            ids = list(parts[1].encode("utf-8"))[:seq_len]
            ids += [PAD_ID] * (seq_len - len(ids))
            tokens_rows.append(ids)
            labels.append(int(parts[0]))
    if not tokens_rows:
        raise ValueError(f"{path}: no examples")
    tokens = np.array(tokens_rows, dtype=np.int64)
    labels_arr = np.array(labels, dtype=np.int64)
    return Dataset(_batchify(tokens, labels_arr, batch_size), len(labels),
                   "classification", BYTE_VOCAB_SIZE)


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "task": ds.task,
        "vocab_size": ds.vocab_size,
        "n_samples": ds.n_samples,
        "meta": ds.meta,
        "batches": [
            {"tokens": b.tokens.tolist(), "labels": b.labels.tolist()} for b in ds.batches
        ],
    }


def dataset_from_dict(d: dict) -> Dataset:
    _check_keys(d, "dataset", required=("task", "vocab_size", "n_samples", "batches"),
                optional=("meta",))
    batches = [
        Batch(np.array(b["tokens"], dtype=np.int64), np.array(b["labels"], dtype=np.int64))
        for b in d["batches"]
    ]
    return Dataset(batches, d["n_samples"], d["task"], d["vocab_size"], d.get("meta", {}))


def save_dataset(ds: Dataset, path: str) -> None:
    _write_json(dataset_to_dict(ds), path)


def load_dataset(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        return dataset_from_dict(json.load(fh))


def _write_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True))
        fh.write("\n")


# ---------------------------------------------------------------------------
# Stage builders
# ---------------------------------------------------------------------------


def build_dataset(spec: dict, seed: int, stream_index: int) -> Dataset:
    """Materialize a data section: generate, ingest, or load."""
    if "generate" in spec:
        gen = dict(spec["generate"])
        kind = gen.pop("kind")
        rng = Rng(gen.pop("seed")) if "seed" in gen else Rng(seed).spawn(stream_index)
        if kind == "classification":
            return gen_classification(rng, **gen)
        return gen_lm(rng, **gen)
    if "text" in spec:
        t = spec["text"]
        return ingest_text(t["path"], t["seq_len"], t["batch_size"])
    if "tsv" in spec:
        t = spec["tsv"]
        return ingest_labeled(t["path"], t["seq_len"], t["batch_size"])
    return load_dataset(spec["path"])


def build_model(cfg: RunConfig, train_data: Dataset | None):
    """Load a container or train from a recipe; returns (model, train_log)."""
    if cfg.model is None:
        raise ConfigError("config: model section is required")
    if "path" in cfg.model:
        return model_from_container(WeightContainer.load(cfg.model["path"])), None
    recipe = dict(cfg.model["train"])
    epochs = recipe.pop("epochs", 20)
    lr = recipe.pop("lr", 0.01)
    task = cfg.task or "classification"
    config = ModelConfig(task=task, **recipe)
    if train_data is None:
        raise ConfigError("config: training requires a data section")
    if train_data.vocab_size > config.vocab_size:
        raise ConfigError(
            f"model vocab_size {config.vocab_size} is smaller than the dataset's "
            f"{train_data.vocab_size}"
        )
    model = TransformerModel.init(config, Rng(cfg.seed).spawn(_STREAM_TRAIN))
    log = train(model, train_data, epochs=epochs, lr=lr,
                rng=Rng(cfg.seed).spawn(_STREAM_TRAIN_SHUFFLE))
    return model, log


def analyze(cfg: RunConfig, model: TransformerModel, calib: Dataset,
            eval_set: Dataset, base_metric: float | None) -> SensitivityProfile:
    mp = cfg.method_params
    if cfg.method == "cmpq":
        return correlation_sensitivity(model, calib,
                                       cca_dim_cap=mp.get("cca_dim_cap", DEFAULT_CCA_DIM_CAP))
    if cfg.method == "pmpq":
        return pruning_sensitivity(model, eval_set,
                                   sparsity_levels=mp.get("sparsity_levels",
                                                          list(DEFAULT_SPARSITY_LEVELS)),
                                   base_metric=base_metric)
    if cfg.method == "tdmpq":
        spec = PerturbationSpec(delta=mp.get("delta", 0.01),
                                seed=Rng(cfg.seed).spawn(_STREAM_ANALYZE).seed)
        return perturbation_sensitivity(model, eval_set, spec,
                                        mode=mp.get("mode", "delta"))
    raise ConfigError(f"config: method is required (one of {METHODS})")


def allocate_plan(cfg: RunConfig, profile: SensitivityProfile,
                  model: TransformerModel) -> PrecisionPlan:
    kind = cfg.allocator["kind"]
    if kind == "kmeans":
        return kmeans_plan(profile, Rng(cfg.seed).spawn(_STREAM_ALLOC))
    if kind == "budgeted":
        return budgeted_plan(profile, model, int(cfg.allocator["budget_bytes"]))
    return uniform_plan(model.config.n_layers, int(cfg.allocator["bits"]))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class QuantReport:
    method: str
    sensitivities: list[float]
    plan: list[int]
    m_o_bytes: int
    m_q_bytes: int
    cr: float
    fpr_percent: float
    base_metric: float
    quant_metric: float
    drop: float
    segment_stats: dict
    metric: str                    # "accuracy" | "perplexity"
    allocator: str
    config: dict
    toolkit_version: str = __version__
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "sensitivities": self.sensitivities,
            "plan": self.plan,
            "m_o_bytes": self.m_o_bytes,
            "m_q_bytes": self.m_q_bytes,
            "cr": self.cr,
            "fpr_percent": self.fpr_percent,
            "base_metric": self.base_metric,
            "quant_metric": self.quant_metric,
            "drop": self.drop,
            "segment_stats": self.segment_stats,
            "metric": self.metric,
            "allocator": self.allocator,
            "config": self.config,
            "toolkit_version": self.toolkit_version,
            "schema_version": self.schema_version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def profile_to_dict(profile: SensitivityProfile) -> dict:
    return {
        "method": profile.method,
        "scores": [float(s) for s in profile.scores],
        "config": profile.config,
        "seed": profile.seed,
        "toolkit_version": __version__,
    }


def profile_from_dict(d: dict) -> SensitivityProfile:
    _check_keys(d, "profile", required=("method", "scores"),
                optional=("config", "seed", "toolkit_version"))
    return SensitivityProfile(d["method"], np.array(d["scores"], dtype=np.float64),
                              d.get("config", {}), d.get("seed"))


def plan_to_dict(plan: PrecisionPlan, run_config: dict | None = None,
                 seed: int | None = None) -> dict:
    out = {
        "bits_per_layer": list(plan.bits_per_layer),
        "provenance": plan.provenance,
        "method": plan.method,
        "toolkit_version": __version__,
    }
    if run_config is not None:
        out["config"] = run_config
    if seed is not None:
        out["seed"] = seed
    return out


def plan_from_dict(d: dict) -> PrecisionPlan:
    _check_keys(d, "plan", required=("bits_per_layer",),
                optional=("provenance", "method", "toolkit_version", "config", "seed"))
    return PrecisionPlan(list(d["bits_per_layer"]), d.get("provenance", "loaded"),
                         d.get("method"))


# ---------------------------------------------------------------------------
# End-to-end run and comparison
# ---------------------------------------------------------------------------


def _declared_paths(cfg: RunConfig) -> list[str]:
    paths = []
    if cfg.model and "path" in cfg.model:
        paths.append(cfg.model["path"])
    for spec in (cfg.data, cfg.eval_data, cfg.calib):
        if not spec:
            continue
        if "path" in spec:
            paths.append(spec["path"])
        elif "text" in spec:
            paths.append(spec["text"]["path"])
        elif "tsv" in spec:
            paths.append(spec["tsv"]["path"])
    if cfg.profile_path:
        paths.append(cfg.profile_path)
    if cfg.plan_path:
        paths.append(cfg.plan_path)
    return paths


def run(cfg: RunConfig) -> QuantReport:
    """Full pipeline; writes report/profile/plan/container when out_dir is set."""
    with _stage("config"):
        for p in _declared_paths(cfg):
            if not os.path.exists(p):
                raise ConfigError(f"referenced path does not exist: {p}")

    with _stage("data"):
        if cfg.data is None:
            raise ConfigError("config: data section is required")
        train_data = build_dataset(cfg.data, cfg.seed, _STREAM_DATA)
        eval_set = (build_dataset(cfg.eval_data, cfg.seed, _STREAM_EVAL)
                    if cfg.eval_data else train_data)
        calib = (build_dataset(cfg.calib, cfg.seed, _STREAM_CALIB)
                 if cfg.calib else eval_set)

    with _stage("model"):
        model, train_log = build_model(cfg, train_data)

    with _stage("evaluate-base"):
        base_metric = evaluate(model, eval_set)

    with _stage("analyze"):
        if cfg.profile_path:
            with open(cfg.profile_path, "r", encoding="utf-8") as fh:
                profile = profile_from_dict(json.load(fh))
        else:
            profile = analyze(cfg, model, calib, eval_set, base_metric)

    with _stage("plan"):
        if cfg.plan_path:
            with open(cfg.plan_path, "r", encoding="utf-8") as fh:
                plan = plan_from_dict(json.load(fh))
        else:
            plan = allocate_plan(cfg, profile, model)

    with _stage("quantize"):
        container, simulated = apply_plan(model, plan)
        report_mem = memory_report(container_from_model(model), container)

    with _stage("evaluate-quantized"):
        quant_metric = evaluate(simulated, eval_set)

    with _stage("report"):
        is_cls = model.config.task == "classification"
        drop = base_metric - quant_metric if is_cls else quant_metric - base_metric
        report = QuantReport(
            method=profile.method,
            sensitivities=[float(s) for s in profile.scores],
            plan=list(plan.bits_per_layer),
            m_o_bytes=report_mem.m_o_bytes,
            m_q_bytes=report_mem.m_q_bytes,
            cr=report_mem.cr,
            fpr_percent=report_mem.fpr_percent,
            base_metric=float(base_metric),
            quant_metric=float(quant_metric),
            drop=float(drop),
            segment_stats=segment_stats(profile),
            metric="accuracy" if is_cls else "perplexity",
            allocator=plan.provenance,
            config=cfg.raw,
        )
        if cfg.out_dir:
            os.makedirs(cfg.out_dir, exist_ok=True)
            with open(os.path.join(cfg.out_dir, "report.json"), "w", encoding="utf-8") as fh:
                fh.write(report.to_json())
            _write_json(profile_to_dict(profile), os.path.join(cfg.out_dir, "profile.json"))
            _write_json(plan_to_dict(plan, run_config=cfg.raw, seed=cfg.seed),
                        os.path.join(cfg.out_dir, "plan.json"))
            container.save(os.path.join(cfg.out_dir, "quantized.mpqw"))
            if train_log is not None:
                container_from_model(model).save(os.path.join(cfg.out_dir, "model.mpqw"))
                _write_json({"epochs": train_log.epochs},
                            os.path.join(cfg.out_dir, "trainlog.json"))
    return report


def compare(configs: list[RunConfig]) -> dict:
    """Run several configs over the same model and data; tabulate drops and
    compression."""
    if not configs:
        raise ComparisonError("no configs to compare")
    first = configs[0]
    for c in configs[1:]:
        if c.model != first.model or c.data != first.data or c.eval_data != first.eval_data:
            raise ComparisonError("compare requires identical model and data sections")
    rows = []
    for c in configs:
        report = run(c)
        rows.append({
            "method": report.method,
            "allocator": report.allocator,
            "metric": report.metric,
            "base_metric": report.base_metric,
            "quant_metric": report.quant_metric,
            "drop": report.drop,
            "cr": report.cr,
        })
    rows.sort(key=lambda r: (r["method"], r["allocator"]))
    return {"rows": rows}


def comparison_text(result: dict) -> str:
    headers = ["method", "allocator", "metric", "base", "quantized", "drop", "cr"]
    lines = []
    table = [[r["method"], r["allocator"], r["metric"], f"{r['base_metric']:.4f}",
              f"{r['quant_metric']:.4f}", f"{r['drop']:.4f}", f"{r['cr']:.3f}"]
             for r in result["rows"]]
    widths = [max(len(h), *(len(row[i]) for row in table)) if table else len(h)
              for i, h in enumerate(headers)]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    for row in table:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)
