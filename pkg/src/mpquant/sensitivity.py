"""Per-layer sensitivity analysis.

Three independent analyzers score how much each transformer block matters,
on a shared "higher score = needs more precision" scale:

* correlation_sensitivity ("cmpq"): capture every block's output on a
  calibration set and score each layer by how weakly it correlates with the
  other layers (first canonical correlation); weakly correlated layers carry
  information no other layer reproduces.
* pruning_sensitivity ("pmpq"): magnitude-prune one layer at a time at fixed
  sparsity levels and score by the resulting accuracy drop (classification)
  or relative perplexity increase (lm).
* perturbation_sensitivity ("tdmpq"): add seeded Gaussian noise to one
  weight tensor per layer and score by the change in summed batch loss,
  normalized by dataset size.

All three restore the model bit-exactly and are deterministic given
(model, dataset, seed, config).
"""

from __future__ import annotations

import concurrent.futures
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, TransformerModel, evaluate, forward, loss
from .quant import layer_weight_names
from .rng import Rng
from .tensor import DomainError, quantile, svd_top

DEFAULT_SPARSITY_LEVELS = (0.3, 0.5, 0.7)
DEFAULT_CCA_DIM_CAP = 64
PERTURB_TARGET = "attn.q"  # first weight tensor in each block's parameter order


@dataclass
class SensitivityProfile:
    method: str                    # "cmpq" | "pmpq" | "tdmpq"
    scores: np.ndarray             # float64, one entry per layer
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("sensitivity scores must be finite")


@dataclass
class PerturbationSpec:
    delta: float                   # relative noise scale; sigma = delta * std(W)
    seed: int

    def __post_init__(self):
        if self.delta < 0:
            raise DomainError("delta must be nonnegative")


@dataclass
class PruneMask:
    mask: np.ndarray               # same shape as the weights, values in {0, 1}
    sparsity_level: float
    threshold: float


@dataclass
class CCAResult:
    rho1: float
    eps_x: float
    eps_y: float
    dims: tuple[int, int]


def _inv_sqrt_psd(mat: np.ndarray) -> np.ndarray:
    w, vecs = np.linalg.eigh(mat)
    w = np.maximum(w, np.finfo(np.float64).tiny)
    return (vecs / np.sqrt(w)) @ vecs.T


def cca_rho1(x: np.ndarray, y: np.ndarray) -> CCAResult:
    """First canonical correlation between two feature matrices.

    Columns are centered; covariances get a relative ridge
    (1e-6 * trace / dim) so rank-deficient captures stay solvable.  rho1 is
    the top singular value of Cxx^(-1/2) Cxy Cyy^(-1/2), clipped to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise DomainError("cca_rho1 expects rank-2 feature matrices")
    n = x.shape[0]
    if y.shape[0] != n:
        raise DomainError(f"row counts differ: {n} vs {y.shape[0]}")
    if n < 2:
        raise DomainError("cca_rho1 needs at least 2 rows")
    p, q = x.shape[1], y.shape[1]
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    cxx = xc.T @ xc / (n - 1)
    cyy = yc.T @ yc / (n - 1)
    cxy = xc.T @ yc / (n - 1)
    eps_x = 1e-6 * float(np.trace(cxx)) / p or 1e-6
    eps_y = 1e-6 * float(np.trace(cyy)) / q or 1e-6
    cxx += eps_x * np.eye(p)
    cyy += eps_y * np.eye(q)
    m = _inv_sqrt_psd(cxx) @ cxy @ _inv_sqrt_psd(cyy)
    rho = svd_top(m)
    return CCAResult(rho1=min(max(rho, 0.0), 1.0), eps_x=eps_x, eps_y=eps_y, dims=(p, q))


def _subsample_columns(mat: np.ndarray, cap: int) -> np.ndarray:
    d = mat.shape[1]
    if d <= cap:
        return mat
    stride = -(-d // cap)  # ceil
    return mat[:, ::stride]


def correlation_sensitivity(model: TransformerModel, calib: Dataset,
                            cca_dim_cap: int = DEFAULT_CCA_DIM_CAP) -> SensitivityProfile:
    """Score layers by 1 - mean first canonical correlation with other layers."""
    if not calib.batches:
        raise DomainError("calibration set is empty")
    n_layers = model.config.n_layers
    captured: list[list[np.ndarray]] = [[] for _ in range(n_layers)]
    for batch in calib.batches:
        _, outs = forward(model, batch, capture=True)
        for l, out in enumerate(outs):
            captured[l].append(out)
    features = [_subsample_columns(np.concatenate(chunks, axis=0), cca_dim_cap)
                for chunks in captured]

    cfg = {
        "cca_dim_cap": cca_dim_cap,
        "feature_dims": features[0].shape[1],
        "n_rows": features[0].shape[0],
    }
    if n_layers == 1:
        warnings.warn("single-layer model: correlation sensitivity is degenerate")
        return SensitivityProfile("cmpq", np.zeros(1), cfg)

    rho = np.ones((n_layers, n_layers))
    for l in range(n_layers):
        for m in range(l + 1, n_layers):
            r = cca_rho1(features[l], features[m]).rho1
            rho[l, m] = rho[m, l] = r
    scores = np.empty(n_layers)
    for l in range(n_layers):
        others = [rho[l, m] for m in range(n_layers) if m != l]
        scores[l] = 1.0 - float(np.mean(others))
    return SensitivityProfile("cmpq", scores, cfg)


def prune_mask(w: np.ndarray, sparsity: float) -> PruneMask:
    """Magnitude mask: keep entries whose |w| strictly exceeds the sparsity
    quantile of |w|.

    With sparsity 0 the threshold is min|w|, so only minimal-magnitude
    entries drop; if all magnitudes tie, nothing strictly exceeds the
    quantile and the mask is all zeros.
    """
    if not 0.0 <= sparsity < 1.0:
        raise DomainError(f"sparsity must be in [0, 1), got {sparsity}")
    w = np.asarray(w)
    mags = np.abs(w).ravel().astype(np.float64)
    threshold = quantile(mags, sparsity)
    mask = (np.abs(w.astype(np.float64)) > threshold).astype(np.float32)
    return PruneMask(mask=mask, sparsity_level=sparsity, threshold=threshold)


def _pruned_layer_metric(model: TransformerModel, layer: int, sparsity: float,
                         eval_set: Dataset) -> float:
    names = layer_weight_names(layer)
    saved = {name: model.params[name] for name in names}
    try:
        for name in names:
            w = saved[name]
            model.params[name] = (w * prune_mask(w, sparsity).mask).astype(w.dtype)
        return evaluate(model, eval_set)
    finally:
        for name in names:
            model.params[name] = saved[name]


def pruning_sensitivity(model: TransformerModel, eval_set: Dataset,
                        sparsity_levels=DEFAULT_SPARSITY_LEVELS,
                        base_metric: float | None = None,
                        parallel: bool = False) -> SensitivityProfile:
    """Score layers by metric damage when each is pruned alone.

    Classification: mean over levels of (base accuracy - pruned accuracy).
    Language modeling: mean relative perplexity increase.  Negative raw
    scores (pruning that helps) clamp to zero.
    """
    if eval_set.task != model.config.task:
        raise ValueError("eval set task does not match the model")
    levels = [float(s) for s in sparsity_levels]
    base = evaluate(model, eval_set) if base_metric is None else float(base_metric)
    n_layers = model.config.n_layers

    def layer_score(layer: int, victim: TransformerModel) -> float:
        drops = []
        for s in levels:
            metric = _pruned_layer_metric(victim, layer, s, eval_set)
            if model.config.task == "classification":
                drops.append(base - metric)
            else:
                drops.append((metric - base) / base)
        return max(0.0, float(np.mean(drops)))

    if parallel and n_layers > 1:
        # each worker owns a private clone; merge order is fixed by index
        with concurrent.futures.ThreadPoolExecutor(max_workers=min(4, n_layers)) as pool:
            futures = [pool.submit(layer_score, l, model.clone()) for l in range(n_layers)]
            scores = np.array([f.result() for f in futures])
    else:
        scores = np.array([layer_score(l, model) for l in range(n_layers)])

    cfg = {
        "sparsity_levels": levels,
        "base_metric": base,
        "metric": "accuracy" if model.config.task == "classification" else "perplexity",
    }
    return SensitivityProfile("pmpq", scores, cfg)


def _summed_batch_loss(model: TransformerModel, dataset: Dataset) -> float:
    total = 0.0
    for batch in dataset.batches:
        logits, _ = forward(model, batch)
        total += loss(logits, batch)
    return total


def perturbation_sensitivity(model: TransformerModel, eval_set: Dataset,
                             spec: PerturbationSpec,
                             mode: str = "delta") -> SensitivityProfile:
    """Score layers by loss response to Gaussian noise on their query weights.

    For layer l the first weight tensor (attn.q) gets noise with
    sigma = delta * std(W), drawn from a child stream of (seed, l).  The
    summed batch loss over the dataset, divided by the sample count, gives
    the raw response.  Mode "delta" (default) reports |perturbed - baseline|;
    mode "literal" reports the perturbed value itself.
    """
    if mode not in ("delta", "literal"):
        raise DomainError(f"unknown mode {mode!r}")
    if eval_set.task != model.config.task:
        raise ValueError("eval set task does not match the model")
    n = eval_set.n_samples
    n_layers = model.config.n_layers
    base_total = _summed_batch_loss(model, eval_set)
    scores = np.empty(n_layers)
    for l in range(n_layers):
        name = f"layer.{l}.{PERTURB_TARGET}"
        original = model.params[name]
        sigma = spec.delta * float(np.std(original.astype(np.float64)))
        if sigma > 0.0:
            noise = Rng(spec.seed).spawn(l).normals(original.shape, sigma)
            model.params[name] = (original + noise.astype(original.dtype)).astype(original.dtype)
            try:
                total = _summed_batch_loss(model, eval_set)
            finally:
                model.params[name] = original
        else:
            total = base_total
        scores[l] = abs(total - base_total) / n if mode == "delta" else total / n
    cfg = {"delta": spec.delta, "mode": mode, "target": PERTURB_TARGET}
    return SensitivityProfile("tdmpq", scores, cfg, seed=spec.seed)


def segment_stats(profile) -> dict[str, float | None]:
    """Deviation-from-global-mean statistics over three layer segments.

    Segments are the first ceil(0.3 L) layers, the next ceil(0.3 L), and the
    remainder.  Each reports sqrt(mean((s - global_mean)^2)); an empty
    segment reports None.
    """
    scores = np.asarray(getattr(profile, "scores", profile), dtype=np.float64)
    n = scores.size
    if n < 1:
        raise DomainError("segment_stats needs at least one layer")
    seg_len = -(-3 * n // 10)  # ceil(0.3 n) in exact integer arithmetic
    segments = [scores[:seg_len], scores[seg_len:2 * seg_len], scores[2 * seg_len:]]
    mu = float(scores.mean())

    def dev(seg: np.ndarray) -> float | None:
        if seg.size == 0:
            return None
        return float(math.sqrt(float(np.mean((seg - mu) ** 2))))

    return {"first30": dev(segments[0]), "mid30": dev(segments[1]), "rest": dev(segments[2])}
