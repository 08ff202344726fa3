"""Turn a sensitivity profile into a per-layer bit-width plan.

Two allocators:

* kmeans_plan: cluster the scores into three tiers and assign 16/8/4 bits by
  descending tier centroid.  Profiles with fewer than three distinct scores
  fall back to rank tertiles (ties broken toward higher precision for lower
  layer indices).
* budgeted_plan: minimize the separable surrogate
  sum_l score_l * quant_error_l(bits_l) subject to a byte budget over the
  plannable layer matrices.  Solved exactly: full enumeration up to 12
  layers, otherwise dynamic programming over the budget discretized at the
  gcd of the layer memory sizes.  Ties prefer smaller memory, then higher
  precision at lower layer indices.  A zero-score layer therefore falls to
  the cheapest width, since every width ties its (zero) cost.

The exact loss-plus-regularizer objective of a finished plan is evaluated by
`objective`, which is reported alongside the surrogate-optimal plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import Dataset, TransformerModel, forward, loss
from .quant import (
    OUTPUT_FEATURE_AXIS,
    apply_plan,
    dequantize,
    fp16_roundtrip,
    layer_memory_bytes,
    layer_weight_names,
    quantize,
)
from .rng import Rng
from .sensitivity import SensitivityProfile
from .tensor import DegenerateClusters, kmeans

WIDTHS = (16, 8, 4)  # enumeration order doubles as the tie preference


class InfeasibleBudgetError(ValueError):
    def __init__(self, budget: int, min_bytes: int):
        super().__init__(
            f"budget {budget} bytes below the minimal achievable {min_bytes} bytes"
        )
        self.min_bytes = min_bytes


@dataclass
class PrecisionPlan:
    bits_per_layer: list[int]
    provenance: str                # "kmeans" | "budgeted" | "uniform(b)"
    method: str | None = None      # sensitivity method that produced the profile

    def __post_init__(self):
        if any(b not in (4, 8, 16) for b in self.bits_per_layer):
            raise ValueError(f"bits must be in {{4, 8, 16}}: {self.bits_per_layer}")


@dataclass
class ObjectiveConfig:
    lam: float = 0.01
    dataset: Dataset | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


def uniform_plan(n_layers: int, bits: int) -> PrecisionPlan:
    return PrecisionPlan([bits] * n_layers, f"uniform({bits})")


def _tertile_plan(scores: np.ndarray) -> list[int]:
    n = scores.size
    n16 = (n + 2) // 3                 # ceil(n / 3)
    n8 = (n - n16 + 1) // 2            # ceil of the remainder's half
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    bits = [4] * n
    for rank, layer in enumerate(order):
        bits[layer] = 16 if rank < n16 else 8 if rank < n16 + n8 else 4
    return bits


def kmeans_plan(profile: SensitivityProfile, rng: Rng) -> PrecisionPlan:
    """Three-tier assignment: top cluster 16-bit, middle 8, bottom 4."""
    scores = np.asarray(profile.scores, dtype=np.float64)
    n = scores.size
    if n < 1:
        raise ValueError("profile has no layers")
    if n < 3 or np.unique(scores).size < 3:
        return PrecisionPlan(_tertile_plan(scores), "kmeans", profile.method)
    try:
        labels, centroids = kmeans(scores, 3, rng)
    except DegenerateClusters:
        return PrecisionPlan(_tertile_plan(scores), "kmeans", profile.method)
    order = np.argsort(-centroids)  # descending centroid -> 16, 8, 4
    bits_of_cluster = {int(order[rank]): WIDTHS[rank] for rank in range(3)}
    bits = [bits_of_cluster[int(lab)] for lab in labels]
    return PrecisionPlan(bits, "kmeans", profile.method)


def layer_quant_error(model: TransformerModel, layer: int, bits: int) -> float:
    """Frobenius norm of the whole layer's weight reconstruction error at a
    width, float64."""
    sq = 0.0
    for name in layer_weight_names(layer):
        w = model.params[name].astype(np.float64)
        if bits == 16:
            diff = w - fp16_roundtrip(model.params[name]).astype(np.float64)
        else:
            q = quantize(model.params[name], bits, channel_axis=OUTPUT_FEATURE_AXIS)
            diff = w - dequantize(q).astype(np.float64)
        sq += float(np.sum(diff * diff))
    return math.sqrt(sq)


def _cost_mem_tables(profile: SensitivityProfile, model: TransformerModel):
    n_layers = model.config.n_layers
    if profile.scores.size != n_layers:
        raise ValueError(
            f"profile covers {profile.scores.size} layers, model has {n_layers}"
        )
    cost = np.empty((n_layers, len(WIDTHS)))
    mem = np.empty((n_layers, len(WIDTHS)), dtype=np.int64)
    for l in range(n_layers):
        for wi, b in enumerate(WIDTHS):
            cost[l, wi] = profile.scores[l] * layer_quant_error(model, l, b)
            mem[l, wi] = layer_memory_bytes(model, l, b)
    return cost, mem


def _solve_exhaustive(cost: np.ndarray, mem: np.ndarray, budget: int) -> list[int]:
    n_layers = cost.shape[0]
    # combo index is base-3 with layer 0 most significant, so the earliest
    # index among ties has the highest bits at the lowest layers
    total_cost = np.zeros(1)
    total_mem = np.zeros(1, dtype=np.int64)
    for l in range(n_layers):
        total_cost = (total_cost[:, None] + cost[l][None, :]).ravel()
        total_mem = (total_mem[:, None] + mem[l][None, :]).ravel()
    feasible = np.nonzero(total_mem <= budget)[0]
    fc = total_cost[feasible]
    best = feasible[fc == fc.min()]
    fm = total_mem[best]
    best = best[fm == fm.min()]
    # decode the base-3 combo index, most significant digit first
    bits = []
    rem = int(best.min())
    for l in range(n_layers):
        digit = rem // len(WIDTHS) ** (n_layers - 1 - l)
        rem -= digit * len(WIDTHS) ** (n_layers - 1 - l)
        bits.append(WIDTHS[digit])
    return bits


def _solve_dp(cost: np.ndarray, mem: np.ndarray, budget: int) -> list[int]:
    n_layers = cost.shape[0]
    g = 0
    for v in mem.ravel():
        g = math.gcd(g, int(v))
    g = max(g, 1)
    cap = budget // g
    weights = (mem // g).astype(np.int64)

    inf = np.inf
    # suffix tables over remaining capacity; value is lexicographic (cost, mem)
    best_cost = np.zeros((n_layers + 1, cap + 1))
    best_mem = np.zeros((n_layers + 1, cap + 1), dtype=np.int64)
    for l in range(n_layers - 1, -1, -1):
        best_cost[l].fill(inf)
        best_mem[l].fill(0)
        for wi in range(len(WIDTHS)):
            w = int(weights[l, wi])
            if w > cap:
                continue
            cand_cost = np.full(cap + 1, inf)
            cand_mem = np.zeros(cap + 1, dtype=np.int64)
            cand_cost[w:] = cost[l, wi] + best_cost[l + 1, : cap + 1 - w]
            cand_mem[w:] = mem[l, wi] + best_mem[l + 1, : cap + 1 - w]
            better = (cand_cost < best_cost[l]) | (
                (cand_cost == best_cost[l]) & (cand_mem < best_mem[l])
            )
            best_cost[l][better] = cand_cost[better]
            best_mem[l][better] = cand_mem[better]

    bits = []
    m = cap
    for l in range(n_layers):
        for wi in range(len(WIDTHS)):  # 16 first: tie preference
            w = int(weights[l, wi])
            if w > m:
                continue
            c = cost[l, wi] + best_cost[l + 1, m - w]
            mm = mem[l, wi] + best_mem[l + 1, m - w]
            if c == best_cost[l, m] and mm == best_mem[l, m]:
                bits.append(WIDTHS[wi])
                m -= w
                break
        else:
            raise AssertionError("dp reconstruction failed")
    return bits


def budgeted_plan(profile: SensitivityProfile, model: TransformerModel,
                  budget_bytes: int, cfg: ObjectiveConfig | None = None,
                  solver: str = "auto") -> PrecisionPlan:
    """Exact minimum of the sensitivity-weighted error surrogate under a byte
    budget over the plannable layer matrices."""
    if solver not in ("auto", "exhaustive", "dp"):
        raise ValueError(f"unknown solver {solver!r}")
    cost, mem = _cost_mem_tables(profile, model)
    min_bytes = int(mem.min(axis=1).sum())
    if budget_bytes < min_bytes:
        raise InfeasibleBudgetError(budget_bytes, min_bytes)
    if solver == "exhaustive" or (solver == "auto" and model.config.n_layers <= 12):
        bits = _solve_exhaustive(cost, mem, budget_bytes)
    else:
        bits = _solve_dp(cost, mem, budget_bytes)
    return PrecisionPlan(bits, "budgeted", profile.method)


def plan_memory_bytes(model: TransformerModel, plan: PrecisionPlan) -> int:
    """Bytes the plannable layer matrices occupy under a plan."""
    return sum(
        layer_memory_bytes(model, l, b) for l, b in enumerate(plan.bits_per_layer)
    )


def objective(model: TransformerModel, plan: PrecisionPlan,
              cfg: ObjectiveConfig) -> tuple[float, float, float]:
    """(A, B, A + lambda * B): dataset loss of the simulated quantized model
    plus the summed per-layer reconstruction norms."""
    if cfg.dataset is None:
        raise ValueError("objective needs an evaluation dataset")
    _, simulated = apply_plan(model, plan)
    total_loss = 0.0
    total_n = 0
    for batch in cfg.dataset.batches:
        logits, _ = forward(simulated, batch)
        n = batch.labels.size
        total_loss += loss(logits, batch) * n
        total_n += n
    a = total_loss / total_n
    b = sum(
        layer_quant_error(model, l, bits) for l, bits in enumerate(plan.bits_per_layer)
    )
    return a, b, a + cfg.lam * b
