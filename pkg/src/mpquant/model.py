"""Minimal trainable transformer with per-layer output capture.

The model exists to provide a realistic quantization target at desk scale:
pre-norm blocks (LN -> attention -> residual, LN -> feed-forward -> residual),
learned positional embeddings, a tanh-approximation GELU, and either a
mean-pooled classification head or a per-position language-model head.
Language modeling uses causal attention so next-token targets stay hidden;
classification attends bidirectionally.

Gradients are hand-derived.  The forward/backward core is functional over a
parameter dict, so verification code can run the identical computation in
float64 by passing float64 parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import Rng
from .tensor import DimensionError

LAYER_COMPONENTS = (
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.out",
    "ln1.g",
    "ln1.b",
    "ffn.in",
    "ffn.out",
    "ln2.g",
    "ln2.b",
)

_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    task: str = "classification"  # "classification" | "lm"
    n_classes: int = 2

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be at least 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.task not in ("classification", "lm"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.n_classes < 2:
            raise ValueError("classification needs at least 2 classes")

    @property
    def head_dim(self) -> int:
        return self.n_classes if self.task == "classification" else self.vocab_size


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape, in the canonical iteration order.

    Weight matrices are stored (input features, output features); the
    output-feature axis is axis 1 throughout.
    """
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tok": (config.vocab_size, d),
        "embed.pos": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        prefix = f"layer.{i}."
        shapes[prefix + "attn.q"] = (d, d)
        shapes[prefix + "attn.k"] = (d, d)
        shapes[prefix + "attn.v"] = (d, d)
        shapes[prefix + "attn.out"] = (d, d)
        shapes[prefix + "ln1.g"] = (d,)
        shapes[prefix + "ln1.b"] = (d,)
        shapes[prefix + "ffn.in"] = (d, f)
        shapes[prefix + "ffn.out"] = (f, d)
        shapes[prefix + "ln2.g"] = (d,)
        shapes[prefix + "ln2.b"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    shapes["head.w"] = (d, config.head_dim)
    shapes["head.b"] = (config.head_dim,)
    return shapes


def init_params(config: ModelConfig, rng: Rng) -> dict[str, np.ndarray]:
    """GPT-style init: N(0, 0.02) weights, residual projections scaled down."""
    res_scale = 1.0 / math.sqrt(2.0 * config.n_layers)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        leaf = name.split(".", 2)[-1] if name.startswith("layer.") else name
        if leaf.endswith(".g"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif leaf.endswith(".b") or name == "head.b":
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            std = 0.02
            if leaf in ("attn.out", "ffn.out"):
                std *= res_scale
            params[name] = rng.normals(shape, std).astype(np.float32)
    return params


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng) -> "TransformerModel":
        return cls(config, init_params(config, rng))

    def clone(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def layer_names(self, i: int) -> list[str]:
        return [f"layer.{i}.{c}" for c in LAYER_COMPONENTS]


@dataclass
class Batch:
    tokens: np.ndarray  # int64, (batch, seq)
    labels: np.ndarray  # int64, (batch,) for classification, (batch, seq) for lm


@dataclass
class Dataset:
    batches: list[Batch]
    n_samples: int
    task: str
    vocab_size: int
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Forward / backward core (functional over the parameter dict)
# ---------------------------------------------------------------------------


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=axes)
    db = dy.sum(axis=axes)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _gelu(x):
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), t


def _gelu_backward(dy, x, t):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, n_heads):
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dk)


def _check_batch(config: ModelConfig, batch: Batch) -> None:
    tokens = batch.tokens
    if tokens.ndim != 2:
        raise DimensionError("tokens must be rank-2 (batch, seq)")
    if tokens.shape[1] > config.max_seq_len:
        raise DimensionError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )
    if tokens.size and int(tokens.max()) >= config.vocab_size:
        raise DimensionError("token id out of vocabulary range")


def _forward_core(params, config: ModelConfig, tokens, want_cache: bool):
    dtype = params["embed.tok"].dtype
    b, s = tokens.shape
    h = params["embed.tok"][tokens] + params["embed.pos"][:s]
    h = h.astype(dtype, copy=False)
    n_heads = config.n_heads
    scale = dtype.type(1.0 / math.sqrt(config.d_model // n_heads))
    causal = config.task == "lm"
    if causal:
        mask = np.triu(np.full((s, s), dtype.type(-1e30), dtype=dtype), k=1)

    caches = []
    layer_out = []
    for i in range(config.n_layers):
        p = f"layer.{i}."
        x_in = h
        a, ln1_cache = _ln_forward(x_in, params[p + "ln1.g"], params[p + "ln1.b"])
        a2 = a.reshape(b * s, -1)
        q = _split_heads((a2 @ params[p + "attn.q"]).reshape(b, s, -1), n_heads)
        k = _split_heads((a2 @ params[p + "attn.k"]).reshape(b, s, -1), n_heads)
        v = _split_heads((a2 @ params[p + "attn.v"]).reshape(b, s, -1), n_heads)
        scores = q @ k.transpose(0, 1, 3, 2) * scale
        if causal:
            scores = scores + mask
        probs = _softmax(scores)
        ctx = _merge_heads(probs @ v)
        attn_out = ctx.reshape(b * s, -1) @ params[p + "attn.out"]
        h = x_in + attn_out.reshape(b, s, -1)

        x_mid = h
        u, ln2_cache = _ln_forward(x_mid, params[p + "ln2.g"], params[p + "ln2.b"])
        f1 = u.reshape(b * s, -1) @ params[p + "ffn.in"]
        g, gelu_t = _gelu(f1)
        f2 = g @ params[p + "ffn.out"]
        h = x_mid + f2.reshape(b, s, -1)

        layer_out.append(h)
        if want_cache:
            caches.append(
                dict(a=a, ln1=ln1_cache, q=q, k=k, v=v, probs=probs, ctx=ctx,
                     u=u, ln2=ln2_cache, f1=f1, g=g, gelu_t=gelu_t)
            )

    hf, final_cache = _ln_forward(h, params["final_ln.g"], params["final_ln.b"])
    if config.task == "classification":
        pooled = hf.mean(axis=1)
        logits = pooled @ params["head.w"] + params["head.b"]
        head_cache = (hf, pooled)
    else:
        logits = hf.reshape(b * s, -1) @ params["head.w"] + params["head.b"]
        logits = logits.reshape(b, s, -1)
        head_cache = (hf, None)

    cache = None
    if want_cache:
        cache = dict(tokens=tokens, layers=caches, final=final_cache,
                     head=head_cache, shape=(b, s), scale=scale)
    return logits, layer_out, cache


def forward(model: TransformerModel, batch: Batch, capture: bool = False):
    """Run the model on a batch.

    Returns (logits, layer_outputs) where layer_outputs is None unless
    capture is set, in which case it holds each block's post-residual
    hidden state flattened to (batch * seq, d_model).
    """
    _check_batch(model.config, batch)
    logits, layer_out, _ = _forward_core(model.params, model.config, batch.tokens, False)
    if capture:
        b, s = batch.tokens.shape
        return logits, [lo.reshape(b * s, -1).copy() for lo in layer_out]
    return logits, None


def head_forward(model: TransformerModel, hidden: np.ndarray) -> np.ndarray:
    """Re-run final layernorm + task head on a (batch, seq, d_model) state."""
    params = model.params
    hf, _ = _ln_forward(hidden, params["final_ln.g"], params["final_ln.b"])
    if model.config.task == "classification":
        return hf.mean(axis=1) @ params["head.w"] + params["head.b"]
    b, s, d = hidden.shape
    out = hf.reshape(b * s, -1) @ params["head.w"] + params["head.b"]
    return out.reshape(b, s, -1)


def _flat_logits(logits: np.ndarray, labels: np.ndarray):
    if labels.ndim == 1:
        return logits, labels
    return logits.reshape(-1, logits.shape[-1]), labels.reshape(-1)


def loss(logits: np.ndarray, batch: Batch) -> float:
    """Mean cross-entropy over examples (classification) or token positions (lm)."""
    z, y = _flat_logits(logits, batch.labels)
    z = z.astype(np.float64, copy=False)
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    nll = lse - z[np.arange(z.shape[0]), y]
    return float(nll.mean())


def loss_and_grads(params: dict[str, np.ndarray], config: ModelConfig, batch: Batch):
    """Loss plus d(loss)/d(param) for every parameter, in the params' dtype."""
    loss_val, grads, _ = _loss_grads_logits(params, config, batch)
    return loss_val, grads


def _loss_grads_logits(params: dict[str, np.ndarray], config: ModelConfig, batch: Batch):
    dtype = params["embed.tok"].dtype
    tokens = batch.tokens
    b, s = tokens.shape
    logits, _, cache = _forward_core(params, config, tokens, True)

    z, y = _flat_logits(logits, batch.labels)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    probs = e / e.sum(axis=-1, keepdims=True)
    n_rows = z.shape[0]
    lse = zmax[:, 0] + np.log(e.sum(axis=-1))
    loss_val = float((lse - z[np.arange(n_rows), y]).mean())

    dz = probs.copy()
    dz[np.arange(n_rows), y] -= 1.0
    dz = (dz / n_rows).astype(dtype, copy=False)

    grads = {name: np.zeros_like(p) for name, p in params.items()}
    hf, pooled = cache["head"]
    if config.task == "classification":
        grads["head.w"] = pooled.T @ dz
        grads["head.b"] = dz.sum(axis=0)
        dhf = np.repeat((dz @ params["head.w"].T)[:, None, :], s, axis=1) / dtype.type(s)
    else:
        hf2 = hf.reshape(b * s, -1)
        grads["head.w"] = hf2.T @ dz
        grads["head.b"] = dz.sum(axis=0)
        dhf = (dz @ params["head.w"].T).reshape(b, s, -1)

    dh, dg_f, db_f = _ln_backward(dhf, params["final_ln.g"], cache["final"])
    grads["final_ln.g"] = dg_f
    grads["final_ln.b"] = db_f

    n_heads = config.n_heads
    scale = cache["scale"]
    for i in reversed(range(config.n_layers)):
        p = f"layer.{i}."
        c = cache["layers"][i]

        # feed-forward sub-block
        df2 = dh.reshape(b * s, -1)
        grads[p + "ffn.out"] = c["g"].T @ df2
        dg_act = df2 @ params[p + "ffn.out"].T
        df1 = _gelu_backward(dg_act, c["f1"], c["gelu_t"])
        grads[p + "ffn.in"] = c["u"].reshape(b * s, -1).T @ df1
        du = (df1 @ params[p + "ffn.in"].T).reshape(b, s, -1)
        dx_mid, dg2, db2 = _ln_backward(du, params[p + "ln2.g"], c["ln2"])
        grads[p + "ln2.g"] = dg2
        grads[p + "ln2.b"] = db2
        dh = dh + dx_mid

        # attention sub-block
        dattn = dh.reshape(b * s, -1)
        grads[p + "attn.out"] = c["ctx"].reshape(b * s, -1).T @ dattn
        dctx = _split_heads((dattn @ params[p + "attn.out"].T).reshape(b, s, -1), n_heads)
        dprobs = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["probs"].transpose(0, 1, 3, 2) @ dctx
        dscores = c["probs"] * (dprobs - (dprobs * c["probs"]).sum(axis=-1, keepdims=True))
        dq = dscores @ c["k"] * scale
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"] * scale
        a2 = c["a"].reshape(b * s, -1)
        dq2 = _merge_heads(dq).reshape(b * s, -1)
        dk2 = _merge_heads(dk).reshape(b * s, -1)
        dv2 = _merge_heads(dv).reshape(b * s, -1)
        grads[p + "attn.q"] = a2.T @ dq2
        grads[p + "attn.k"] = a2.T @ dk2
        grads[p + "attn.v"] = a2.T @ dv2
        da = (
            dq2 @ params[p + "attn.q"].T
            + dk2 @ params[p + "attn.k"].T
            + dv2 @ params[p + "attn.v"].T
        ).reshape(b, s, -1)
        dx_in, dg1, db1 = _ln_backward(da, params[p + "ln1.g"], c["ln1"])
        grads[p + "ln1.g"] = dg1
        grads[p + "ln1.b"] = db1
        dh = dh + dx_in

    np.add.at(grads["embed.tok"], tokens, dh)
    grads["embed.pos"][:s] = dh.sum(axis=0)
    return loss_val, grads, logits


def backward(model: TransformerModel, batch: Batch) -> dict[str, np.ndarray]:
    """Gradient of the batch loss with respect to every parameter."""
    _check_batch(model.config, batch)
    _, grads = loss_and_grads(model.params, model.config, batch)
    return grads


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    epochs: list[dict]

    @property
    def final(self) -> dict:
        return self.epochs[-1]


def train(model: TransformerModel, dataset: Dataset, epochs: int, lr: float,
          rng: Rng) -> TrainLog:
    """Adam training loop (beta1=0.9, beta2=0.999, eps=1e-8), seeded shuffling.

    Batch order is reshuffled each epoch from the supplied stream; given the
    same seed the final parameters are bit-identical across runs.  A zero
    learning rate performs no parameter writes at all.
    """
    if dataset.task != model.config.task:
        raise ValueError(f"dataset task {dataset.task!r} != model task {model.config.task!r}")
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(p) for k, p in model.params.items()}
    t = 0
    log: list[dict] = []
    order = list(range(len(dataset.batches)))
    for _ in range(epochs):
        rng.shuffle(order)
        total_loss = 0.0
        total_n = 0
        correct = 0
        for bi in order:
            batch = dataset.batches[bi]
            loss_val, grads, logits = _loss_grads_logits(model.params, model.config, batch)
            if not math.isfinite(loss_val):
                raise TrainingError(f"non-finite loss {loss_val}")
            n = batch.labels.size
            total_loss += loss_val * n
            total_n += n
            if model.config.task == "classification":
                correct += int((logits.argmax(axis=-1) == batch.labels).sum())
            t += 1
            if lr != 0.0:
                for name, p in model.params.items():
                    g = grads[name]
                    m[name] = beta1 * m[name] + (1 - beta1) * g
                    v[name] = beta2 * v[name] + (1 - beta2) * g * g
                    mhat = m[name] / (1 - beta1 ** t)
                    vhat = v[name] / (1 - beta2 ** t)
                    p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
        entry = {"loss": total_loss / total_n}
        if model.config.task == "classification":
            entry["accuracy"] = correct / total_n
        else:
            entry["perplexity"] = math.exp(total_loss / total_n)
        log.append(entry)
    return TrainLog(log)


def evaluate(model: TransformerModel, dataset: Dataset) -> float:
    """Per-example accuracy (classification) or perplexity (lm)."""
    if dataset.task != model.config.task:
        raise ValueError(f"dataset task {dataset.task!r} != model task {model.config.task!r}")
    if model.config.task == "classification":
        correct = 0
        total = 0
        for batch in dataset.batches:
            logits, _ = forward(model, batch)
            correct += int((logits.argmax(axis=-1) == batch.labels).sum())
            total += batch.labels.size
        return correct / total
    total_nll = 0.0
    total_tokens = 0
    for batch in dataset.batches:
        logits, _ = forward(model, batch)
        z, y = _flat_logits(logits.astype(np.float64), batch.labels)
        zm = z.max(axis=-1, keepdims=True)
        lse = zm[:, 0] + np.log(np.exp(z - zm).sum(axis=-1))
        total_nll += float((lse - z[np.arange(z.shape[0]), y]).sum())
        total_tokens += y.size
    return math.exp(total_nll / total_tokens)


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------


def _batchify(tokens: np.ndarray, labels: np.ndarray, batch_size: int) -> list[Batch]:
    batches = []
    for start in range(0, tokens.shape[0], batch_size):
        batches.append(Batch(tokens[start:start + batch_size],
                             labels[start:start + batch_size]))
    return batches


def gen_classification(rng: Rng, n: int, seq_len: int = 16, vocab_size: int = 16,
                       token_a: int = 7, token_b: int = 3,
                       batch_size: int = 32) -> Dataset:
    """Token-counting task: label 1 iff token_a occurs more often than token_b.

    Per-class quotas force an exact 50/50 split (odd n leaves the extra
    example in class 0); accepted examples are shuffled before batching.
    """
    if not (0 <= token_a < vocab_size and 0 <= token_b < vocab_size):
        raise ValueError("marker tokens must be inside the vocabulary")
    quota = {1: n // 2, 0: n - n // 2}
    examples: list[tuple[list[int], int]] = []
    while quota[0] > 0 or quota[1] > 0:
        seq = [rng.randint(vocab_size) for _ in range(seq_len)]
        label = 1 if seq.count(token_a) > seq.count(token_b) else 0
        if quota[label] > 0:
            quota[label] -= 1
            examples.append((seq, label))
    rng.shuffle(examples)
    tokens = np.array([e[0] for e in examples], dtype=np.int64)
    labels = np.array([e[1] for e in examples], dtype=np.int64)
    return Dataset(_batchify(tokens, labels, batch_size), n, "classification", vocab_size)


def markov_perplexity_floor(transitions: np.ndarray) -> float:
    """Perplexity floor of an order-2 chain: exp of the stationary-weighted
    mean row entropy.

    transitions has shape (V, V, V): transitions[a, b] is the distribution of
    the next symbol after the pair (a, b).  The stationary distribution over
    pairs is found by fixed-point iteration.
    """
    t = np.asarray(transitions, dtype=np.float64)
    v = t.shape[0]
    pi = np.full((v, v), 1.0 / (v * v))
    for _ in range(10000):
        nxt = np.einsum("ab,abc->bc", pi, t)
        if np.max(np.abs(nxt - pi)) < 1e-13:
            pi = nxt
            break
        pi = nxt
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(t > 0.0, np.log(t), 0.0)
    row_entropy = -(t * logs).sum(axis=-1)
    return float(np.exp((pi * row_entropy).sum()))


def markov_chain(rng: Rng, vocab_size: int, alpha: float = 0.3) -> np.ndarray:
    """Order-2 transition tensor (V, V, V) with Dirichlet(alpha) rows."""
    v = vocab_size
    transitions = np.empty((v, v, v), dtype=np.float64)
    for a in range(v):
        for b in range(v):
            transitions[a, b] = rng.dirichlet(alpha, v)
    return transitions


def gen_lm(rng: Rng, n_tokens: int, vocab_size: int, seq_len: int = 16,
           batch_size: int = 16, alpha: float = 0.3) -> Dataset:
    """Language-modeling corpus from a seeded order-2 Markov chain.

    Rows of the transition tensor are symmetric Dirichlet(alpha) draws.  The
    chain's analytic perplexity floor is stored in dataset meta under
    "perplexity_floor".
    """
    v = vocab_size
    transitions = markov_chain(rng, v, alpha)
    floor = markov_perplexity_floor(transitions)

    cum = np.cumsum(transitions, axis=-1)
    state = (rng.randint(v), rng.randint(v))
    stream = np.empty(n_tokens, dtype=np.int64)
    for i in range(n_tokens):
        r = rng.uniform()
        nxt = int(np.searchsorted(cum[state[0], state[1]], r, side="right"))
        nxt = min(nxt, v - 1)
        stream[i] = nxt
        state = (state[1], nxt)

    n_seq = (n_tokens - 1) // seq_len
    if n_seq < 1:
        raise ValueError("n_tokens too small for one sequence")
    tokens = np.empty((n_seq, seq_len), dtype=np.int64)
    labels = np.empty((n_seq, seq_len), dtype=np.int64)
    for i in range(n_seq):
        start = i * seq_len
        tokens[i] = stream[start:start + seq_len]
        labels[i] = stream[start + 1:start + seq_len + 1]
    ds = Dataset(_batchify(tokens, labels, batch_size), n_seq, "lm", v)
    ds.meta["perplexity_floor"] = floor
    ds.meta["dirichlet_alpha"] = alpha
    return ds
