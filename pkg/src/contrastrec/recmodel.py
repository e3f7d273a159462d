"""From-scratch recommendation model with handwritten backpropagation.

The forward path: consumer/item embedding lookups, a self-attention layer
over the history embeddings followed by a GRU whose final hidden state is
the sequence embedding, a context projection, a second self-attention block
over the six input slots [pos, neg, consumer, product, sequence, context],
and an MLP head [64, 8, 1] with ReLU activations and a sigmoid output.
Training is plain SGD; explanation embeddings enter as frozen inputs.

Ablation variants swap what the two explanation slots carry, substitute
shared trainable vectors, or replace input attention plus the head with a
plain concatenation MLP of sizes [32, 16, 8, 1].
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from .dataset import SENTINEL_ITEM, binarize_rating, scale_rating
from .errors import NumericError, ValidationError
from .serialize import load_arrays, save_arrays

log = logging.getLogger(__name__)

EMBED_DIM = 8
N_SLOTS = 6
INPUT_SLOTS = ("pos", "neg", "consumer", "product", "sequence", "context")

VARIANTS = (
    "full", "pos_only", "neg_only", "aspect_only", "general_only",
    "summary_only", "no_autoencoder", "no_profile_augmentation",
    "free_params_substitute", "no_explanations", "ncf_head",
)
TASKS = ("classification", "regression")

# Variants that cannot tolerate a missing explanation pair; the rest zero-fill.
_REQUIRE_PAIR = {"full", "no_profile_augmentation", "ncf_head"}

_HASH_PROJECTIONS: dict = {}


def _sigmoid(x):
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(scores):
    shifted = scores - scores.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


@dataclass
class RecModelParams:
    """All trainable arrays plus the id indexes and run configuration."""

    arrays: dict
    user_index: dict
    item_index: dict          # includes the sentinel at row 0
    ctx_dim: int
    variant: str = "full"
    task: str = "classification"
    linear_head: bool = False

    @property
    def head(self) -> str:
        return "ncf" if self.variant == "ncf_head" else "attention"

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "RecModelParams":
        return RecModelParams(
            arrays={k: v.copy() for k, v in self.arrays.items()},
            user_index=dict(self.user_index), item_index=dict(self.item_index),
            ctx_dim=self.ctx_dim, variant=self.variant, task=self.task,
            linear_head=self.linear_head)


def build_index(records, profiles=None):
    """User and item id -> row maps; the item table reserves row 0 as sentinel."""
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {SENTINEL_ITEM: 0}
    if profiles:
        for prof in profiles:
            item_index.setdefault(prof.item_id, len(item_index))
    for rec in records:
        user_index.setdefault(rec.user_id, len(user_index))
        item_index.setdefault(rec.item_id, len(item_index))
        for item in rec.history:
            item_index.setdefault(item, len(item_index))
    return user_index, item_index


def init_rec_params(user_index, item_index, ctx_dim: int = 0,
                    variant: str = "full", task: str = "classification",
                    seed: int = 0, linear_head: bool = False) -> RecModelParams:
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    if linear_head and task == "classification":
        raise ValidationError("linear head is only available for regression")
    rng = np.random.default_rng(seed)
    d = EMBED_DIM

    # Fan-scaled uniform init. A flat uniform(-0.05, 0.05) start collapses
    # the forward scale through the attention/GRU chain, leaving gradients
    # too small for desk-scale step counts to train anything.
    def glorot(n_in, n_out):
        limit = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-limit, limit, size=(n_in, n_out))

    def emb_rows(n_rows):
        limit = math.sqrt(3.0 / d)
        return rng.uniform(-limit, limit, size=(n_rows, d))

    arrays = {
        "user_emb": emb_rows(len(user_index)),
        "item_emb": emb_rows(len(item_index)),
        "seq_wq": glorot(d, d), "seq_wk": glorot(d, d), "seq_wv": glorot(d, d),
        "gru_wr": glorot(d, d), "gru_ur": glorot(d, d), "gru_br": np.zeros(d),
        "gru_wu": glorot(d, d), "gru_uu": glorot(d, d), "gru_bu": np.zeros(d),
        "gru_wh": glorot(d, d), "gru_uh": glorot(d, d), "gru_bh": np.zeros(d),
        "ctx_w": glorot(ctx_dim, d) if ctx_dim else np.zeros((0, d)),
        "ctx_b": np.zeros(d),
    }
    if variant == "ncf_head":
        arrays.update({
            "mlp_w1": glorot(N_SLOTS * d, 32), "mlp_b1": np.zeros(32),
            "mlp_w2": glorot(32, 16), "mlp_b2": np.zeros(16),
            "mlp_w3": glorot(16, 8), "mlp_b3": np.zeros(8),
            "mlp_w4": glorot(8, 1), "mlp_b4": np.zeros(1),
        })
    else:
        arrays.update({
            "in_wq": glorot(d, d), "in_wk": glorot(d, d), "in_wv": glorot(d, d),
            "mlp_w1": glorot(N_SLOTS * d, 64), "mlp_b1": np.zeros(64),
            "mlp_w2": glorot(64, 8), "mlp_b2": np.zeros(8),
            "mlp_w3": glorot(8, 1), "mlp_b3": np.zeros(1),
        })
    if variant == "free_params_substitute":
        limit = math.sqrt(3.0 / d)
        arrays["free_pos"] = rng.uniform(-limit, limit, size=d)
        arrays["free_neg"] = rng.uniform(-limit, limit, size=d)
    return RecModelParams(arrays=arrays, user_index=dict(user_index),
                          item_index=dict(item_index), ctx_dim=ctx_dim,
                          variant=variant, task=task, linear_head=linear_head)


def lookup(table: np.ndarray, row: int, table_name: str = "embedding") -> np.ndarray:
    """Exact row of an embedding table; unknown rows name the table."""
    if not (0 <= row < table.shape[0]):
        raise ValidationError(f"unknown id (row {row}) for the {table_name} table")
    return table[row]


def resolve_user(params: RecModelParams, user_id: str) -> int:
    try:
        return params.user_index[user_id]
    except KeyError:
        raise ValidationError(
            f"unknown consumer id {user_id!r} for the consumer table") from None


def resolve_item(params: RecModelParams, item_id: str) -> int:
    try:
        return params.item_index[item_id]
    except KeyError:
        raise ValidationError(
            f"unknown product id {item_id!r} for the product table") from None


# ---------------------------------------------------------------------------
# Attention and GRU blocks
# ---------------------------------------------------------------------------

def _attention_forward(x, wq, wk, wv):
    """Scaled dot-product self-attention over rows of x (..., n, d)."""
    q = x @ wq
    k = x @ wk
    v = x @ wv
    scale = 1.0 / math.sqrt(x.shape[-1])
    scores = (q @ np.swapaxes(k, -1, -2)) * scale
    alpha = _softmax_rows(scores)
    z = alpha @ v
    return z, alpha, (x, q, k, v, alpha, scale)


def _attention_backward(dz, cache, wq, wk, wv, dalpha_direct=None):
    x, q, k, v, alpha, scale = cache
    dv = np.swapaxes(alpha, -1, -2) @ dz
    dalpha = dz @ np.swapaxes(v, -1, -2)
    if dalpha_direct is not None:
        dalpha = dalpha + dalpha_direct
    dscores = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True))
    dq = (dscores @ k) * scale
    dk = (np.swapaxes(dscores, -1, -2) @ q) * scale
    dwq = np.einsum("bni,bnj->ij", x, dq)
    dwk = np.einsum("bni,bnj->ij", x, dk)
    dwv = np.einsum("bni,bnj->ij", x, dv)
    dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
    return dx, dwq, dwk, dwv


def self_attention(s: np.ndarray, wq, wk, wv):
    """Public single-sequence attention: s is (n, d); returns (Z, alpha)."""
    s = np.asarray(s, dtype=float)
    _check_finite("self_attention input", s)
    z, alpha, _ = _attention_forward(s[None], wq, wk, wv)
    return z[0], alpha[0]


def _gru_forward(z, p):
    """GRU over (B, n, d); h_1 = z_1. Returns final state and step cache."""
    h = z[:, 0]
    steps = []
    for t in range(1, z.shape[1]):
        zt = z[:, t]
        r = _sigmoid(zt @ p["gru_wr"] + h @ p["gru_ur"] + p["gru_br"])
        u = _sigmoid(zt @ p["gru_wu"] + h @ p["gru_uu"] + p["gru_bu"])
        hc = np.tanh(zt @ p["gru_wh"] + (r * h) @ p["gru_uh"] + p["gru_bh"])
        steps.append((zt, h, r, u, hc))
        h = u * h + (1.0 - u) * hc
    return h, steps


def _gru_backward(dh, steps, p, grads, dz):
    for t in range(len(steps), 0, -1):
        zt, h_prev, r, u, hc = steps[t - 1]
        du = dh * (h_prev - hc)
        dhc = dh * (1.0 - u)
        dh_prev = dh * u
        dah = dhc * (1.0 - hc * hc)
        grads["gru_wh"] += zt.T @ dah
        grads["gru_uh"] += (r * h_prev).T @ dah
        grads["gru_bh"] += dah.sum(axis=0)
        dzt = dah @ p["gru_wh"].T
        drh = dah @ p["gru_uh"].T
        dr = drh * h_prev
        dh_prev = dh_prev + drh * r
        dau = du * u * (1.0 - u)
        dar = dr * r * (1.0 - r)
        grads["gru_wu"] += zt.T @ dau
        grads["gru_uu"] += h_prev.T @ dau
        grads["gru_bu"] += dau.sum(axis=0)
        grads["gru_wr"] += zt.T @ dar
        grads["gru_ur"] += h_prev.T @ dar
        grads["gru_br"] += dar.sum(axis=0)
        dzt = dzt + dau @ p["gru_wu"].T + dar @ p["gru_wr"].T
        dh_prev = dh_prev + dau @ p["gru_uu"].T + dar @ p["gru_ur"].T
        dz[:, t] += dzt
        dh = dh_prev
    dz[:, 0] += dh


def gru_encode(z: np.ndarray, p) -> np.ndarray:
    """Public single-sequence GRU: z is (n, d); returns the final hidden state."""
    z = np.asarray(z, dtype=float)
    _check_finite("gru_encode input", z)
    h, _ = _gru_forward(z[None], p)
    return h[0]


# ---------------------------------------------------------------------------
# Explanation slots and input assembly
# ---------------------------------------------------------------------------

def hash_text_embedding(text: str, dim: int = EMBED_DIM,
                        seed: int = 0xC0FFEE) -> np.ndarray:
    """Fixed (non-trained) projection of sha256 byte features of a text."""
    key = (seed, dim)
    if key not in _HASH_PROJECTIONS:
        rng = np.random.default_rng(seed)
        _HASH_PROJECTIONS[key] = rng.normal(size=(32, dim)) / math.sqrt(32)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    feats = np.frombuffer(digest, dtype=np.uint8).astype(float) / 255.0 - 0.5
    return feats @ _HASH_PROJECTIONS[key]


def explanation_vectors(pair, variant: str, record_key: str = "?"):
    """The (pos, neg) slot vectors for one record under a variant."""
    zero = np.zeros(EMBED_DIM)
    if variant in ("no_explanations", "free_params_substitute"):
        # free vectors are substituted inside the forward pass
        return zero, zero
    if pair is None:
        if variant in _REQUIRE_PAIR:
            raise ValidationError(f"missing explanation pair for record {record_key}")
        return zero, zero
    if variant == "no_autoencoder":
        return (hash_text_embedding(pair.positive_text),
                hash_text_embedding(pair.negative_text))
    if variant in ("aspect_only", "general_only", "summary_only"):
        if pair.positive_embedding is None:
            raise ValidationError(f"missing {variant} embedding for record {record_key}")
        return np.asarray(pair.positive_embedding, dtype=float), zero
    if pair.positive_embedding is None or pair.negative_embedding is None:
        if variant in _REQUIRE_PAIR:
            raise ValidationError(f"missing explanation embedding for record {record_key}")
        return zero, zero
    pos = np.asarray(pair.positive_embedding, dtype=float)
    neg = np.asarray(pair.negative_embedding, dtype=float)
    if variant == "pos_only":
        return pos, zero
    if variant == "neg_only":
        return zero, neg
    return pos, neg


def assemble_input(pair, user_vec, item_vec, seq_vec, context_vec,
                   variant: str = "full", record_key: str = "?") -> np.ndarray:
    """Stack the six input slots for one record: rows [pos, neg, c, p, seq, ctx]."""
    pos, neg = explanation_vectors(pair, variant, record_key)
    rows = np.stack([pos, neg,
                     np.asarray(user_vec, dtype=float),
                     np.asarray(item_vec, dtype=float),
                     np.asarray(seq_vec, dtype=float),
                     np.asarray(context_vec, dtype=float)])
    if rows.shape != (N_SLOTS, EMBED_DIM):
        raise ValidationError(f"input slots must each be {EMBED_DIM}-dimensional")
    return rows


# ---------------------------------------------------------------------------
# Batch encoding, forward, backward
# ---------------------------------------------------------------------------

def encode_batch(records, params: RecModelParams, pairs=None,
                 context_features=None) -> dict:
    """Turn records into index/feature arrays the forward pass consumes.

    ``pairs`` maps record keys (user|item) to ExplanationPair objects with
    embeddings filled; ``context_features`` optionally maps record keys to
    ctx_dim vectors (absent keys get zeros, so the context slot falls back
    to the projection bias).
    """
    n = len(records)
    if n == 0:
        raise ValidationError("cannot encode an empty record batch")
    hist_len = len(records[0].history)
    user = np.zeros(n, dtype=np.int64)
    item = np.zeros(n, dtype=np.int64)
    hist = np.zeros((n, hist_len), dtype=np.int64)
    pos = np.zeros((n, EMBED_DIM))
    neg = np.zeros((n, EMBED_DIM))
    ctx = np.zeros((n, params.ctx_dim))
    y = np.zeros(n)
    for i, rec in enumerate(records):
        if len(rec.history) != hist_len:
            raise ValidationError("records in a batch must share history length")
        user[i] = resolve_user(params, rec.user_id)
        item[i] = resolve_item(params, rec.item_id)
        for t, hid in enumerate(rec.history):
            hist[i, t] = resolve_item(params, hid)
        pair = pairs.get(rec.key) if pairs else None
        pos[i], neg[i] = explanation_vectors(pair, params.variant, rec.key)
        if context_features and rec.key in context_features:
            ctx[i] = context_features[rec.key]
        y[i] = (binarize_rating(rec.rating) if params.task == "classification"
                else scale_rating(rec.rating))
    return {"user": user, "item": item, "hist": hist,
            "pos": pos, "neg": neg, "ctx": ctx, "y": y}


def forward_batch(batch: dict, params: RecModelParams, return_cache: bool = False):
    """Predictions and input-attention weights for an encoded batch.

    Returns (yhat, alpha_in) of shapes (B,) and (B, 6, 6); the ncf head has
    no input attention and reports uniform rows.
    """
    p = params.arrays
    n = batch["user"].shape[0]

    s = p["item_emb"][batch["hist"]]
    z_seq, _, seq_cache = _attention_forward(s, p["seq_wq"], p["seq_wk"], p["seq_wv"])
    _check_finite("sequence attention output", z_seq)
    h_n, gru_steps = _gru_forward(z_seq, p)
    _check_finite("gru output", h_n)
    e_ctx = batch["ctx"] @ p["ctx_w"] + p["ctx_b"]
    e_user = p["user_emb"][batch["user"]]
    e_item = p["item_emb"][batch["item"]]
    pos, neg = batch["pos"], batch["neg"]
    if params.variant == "free_params_substitute":
        pos = np.broadcast_to(p["free_pos"], (n, EMBED_DIM))
        neg = np.broadcast_to(p["free_neg"], (n, EMBED_DIM))
    x_in = np.stack([pos, neg, e_user, e_item, h_n, e_ctx], axis=1)

    if params.head == "ncf":
        flat = x_in.reshape(n, N_SLOTS * EMBED_DIM)
        a1 = flat @ p["mlp_w1"] + p["mlp_b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ p["mlp_w2"] + p["mlp_b2"]
        h2 = np.maximum(a2, 0.0)
        a3 = h2 @ p["mlp_w3"] + p["mlp_b3"]
        h3 = np.maximum(a3, 0.0)
        logit = (h3 @ p["mlp_w4"] + p["mlp_b4"]).ravel()
        alpha_in = np.full((n, N_SLOTS, N_SLOTS), 1.0 / N_SLOTS)
        in_cache = {"flat": flat, "a1": a1, "h1": h1, "a2": a2, "h2": h2,
                    "a3": a3, "h3": h3}
    else:
        x_att, alpha_in, att_cache = _attention_forward(
            x_in, p["in_wq"], p["in_wk"], p["in_wv"])
        _check_finite("input attention output", x_att)
        flat = x_att.reshape(n, N_SLOTS * EMBED_DIM)
        a1 = flat @ p["mlp_w1"] + p["mlp_b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ p["mlp_w2"] + p["mlp_b2"]
        h2 = np.maximum(a2, 0.0)
        logit = (h2 @ p["mlp_w3"] + p["mlp_b3"]).ravel()
        in_cache = {"att": att_cache, "flat": flat, "a1": a1, "h1": h1,
                    "a2": a2, "h2": h2}
    _check_finite("head logit", logit)
    yhat = logit if (params.linear_head and params.task == "regression") else _sigmoid(logit)

    if not return_cache:
        return yhat, alpha_in
    cache = {"batch": batch, "seq_cache": seq_cache, "gru_steps": gru_steps,
             "z_seq": z_seq, "x_in": x_in, "in_cache": in_cache,
             "logit": logit, "yhat": yhat, "n": n}
    return yhat, alpha_in, cache


def loss(y, yhat, task: str) -> float:
    """Mean binary cross-entropy (classification) or mean squared error."""
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if task == "classification":
        clipped = np.clip(yhat, 1e-7, 1.0 - 1e-7)
        return float(np.mean(-(y * np.log(clipped) + (1 - y) * np.log(1 - clipped))))
    if task == "regression":
        return float(np.mean((y - yhat) ** 2))
    raise ValidationError(f"unknown task {task!r}")


def _dlogit(cache, params: RecModelParams) -> np.ndarray:
    """Gradient of the batch loss w.r.t. the pre-activation head output."""
    y = cache["batch"]["y"]
    yhat = cache["yhat"]
    n = cache["n"]
    if params.task == "classification":
        # BCE with sigmoid: d(loss)/d(logit) = (sigma - y) / n, using the
        # same clipping as loss() so gradients match it exactly.
        clipped = np.clip(yhat, 1e-7, 1.0 - 1e-7)
        dyhat = (clipped - y) / (clipped * (1 - clipped)) / n
        dyhat *= (yhat > 1e-7) & (yhat < 1 - 1e-7)
        return dyhat * yhat * (1 - yhat)
    if params.linear_head:
        return 2.0 * (yhat - y) / n
    return 2.0 * (yhat - y) * yhat * (1 - yhat) / n


def backward_batch(cache, params: RecModelParams) -> dict:
    """Gradients of the batch loss for every trainable array."""
    p = params.arrays
    batch = cache["batch"]
    n = cache["n"]
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    dlogit = _dlogit(cache, params)[:, None]
    ic = cache["in_cache"]
    if params.head == "ncf":
        grads["mlp_w4"] = ic["h3"].T @ dlogit
        grads["mlp_b4"] = dlogit.sum(axis=0)
        dh3 = dlogit @ p["mlp_w4"].T
        da3 = dh3 * (ic["a3"] > 0)
        grads["mlp_w3"] = ic["h2"].T @ da3
        grads["mlp_b3"] = da3.sum(axis=0)
        dh2 = da3 @ p["mlp_w3"].T
        da2 = dh2 * (ic["a2"] > 0)
        grads["mlp_w2"] = ic["h1"].T @ da2
        grads["mlp_b2"] = da2.sum(axis=0)
        dh1 = da2 @ p["mlp_w2"].T
        da1 = dh1 * (ic["a1"] > 0)
        grads["mlp_w1"] = ic["flat"].T @ da1
        grads["mlp_b1"] = da1.sum(axis=0)
        dflat = da1 @ p["mlp_w1"].T
        dx_in = dflat.reshape(n, N_SLOTS, EMBED_DIM)
    else:
        grads["mlp_w3"] = ic["h2"].T @ dlogit
        grads["mlp_b3"] = dlogit.sum(axis=0)
        dh2 = dlogit @ p["mlp_w3"].T
        da2 = dh2 * (ic["a2"] > 0)
        grads["mlp_w2"] = ic["h1"].T @ da2
        grads["mlp_b2"] = da2.sum(axis=0)
        dh1 = da2 @ p["mlp_w2"].T
        da1 = dh1 * (ic["a1"] > 0)
        grads["mlp_w1"] = ic["flat"].T @ da1
        grads["mlp_b1"] = da1.sum(axis=0)
        dx_att = (da1 @ p["mlp_w1"].T).reshape(n, N_SLOTS, EMBED_DIM)
        dx_in, dwq, dwk, dwv = _attention_backward(
            dx_att, ic["att"], p["in_wq"], p["in_wk"], p["in_wv"])
        grads["in_wq"], grads["in_wk"], grads["in_wv"] = dwq, dwk, dwv

    # slot routing: [pos, neg, consumer, product, sequence, context]
    if params.variant == "free_params_substitute":
        grads["free_pos"] = dx_in[:, 0].sum(axis=0)
        grads["free_neg"] = dx_in[:, 1].sum(axis=0)
    np.add.at(grads["user_emb"], batch["user"], dx_in[:, 2])
    np.add.at(grads["item_emb"], batch["item"], dx_in[:, 3])
    grads["ctx_w"] = batch["ctx"].T @ dx_in[:, 5]
    grads["ctx_b"] = dx_in[:, 5].sum(axis=0)

    dz_seq = np.zeros_like(cache["z_seq"])
    _gru_backward(dx_in[:, 4], cache["gru_steps"], p, grads, dz_seq)
    ds, dwq, dwk, dwv = _attention_backward(
        dz_seq, cache["seq_cache"], p["seq_wq"], p["seq_wk"], p["seq_wv"])
    grads["seq_wq"], grads["seq_wk"], grads["seq_wv"] = dwq, dwk, dwv
    np.add.at(grads["item_emb"], batch["hist"], ds)
    return grads


# ---------------------------------------------------------------------------
# Training and prediction
# ---------------------------------------------------------------------------

def train(records, pairs, params: RecModelParams, lr: float = 0.01,
          batch_size: int = 128, epochs: int = 100, seed: int = 0,
          context_features=None):
    """SGD over shuffled mini-batches; mutates and returns ``params``.

    Returns (params, loss_trace) with one mean batch loss per epoch.
    Deterministic given the seed.
    """
    encoded = encode_batch(records, params, pairs, context_features)
    n = len(records)
    rng = np.random.default_rng(seed)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, batch_size):
            take = order[start:start + batch_size]
            batch = {key: val[take] for key, val in encoded.items()}
            yhat, _, cache = forward_batch(batch, params, return_cache=True)
            batch_loss = loss(batch["y"], yhat, params.task)
            if not np.isfinite(batch_loss):
                raise NumericError(
                    f"batch loss diverged at epoch {epoch}, batch {start // batch_size}")
            grads = backward_batch(cache, params)
            for name, grad in grads.items():
                params.arrays[name] -= lr * grad
            epoch_losses.append(batch_loss)
        trace.append(float(np.mean(epoch_losses)))
    return params, trace


def predict_batch(records, pairs, params: RecModelParams, batch_size: int = 1024,
                  context_features=None):
    """Pure prediction: (yhat, alpha_in) over records, independent of batching."""
    encoded = encode_batch(records, params, pairs, context_features)
    n = len(records)
    preds = np.zeros(n)
    alphas = np.zeros((n, N_SLOTS, N_SLOTS))
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        batch = {key: val[sl] for key, val in encoded.items()}
        yhat, alpha_in = forward_batch(batch, params)
        preds[sl] = yhat
        alphas[sl] = alpha_in
    return preds, alphas


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_rec_model(params: RecModelParams, path, hyper: dict | None = None) -> None:
    users = sorted(params.user_index, key=params.user_index.get)
    items = sorted(params.item_index, key=params.item_index.get)
    meta = {
        "kind": "recmodel",
        "users": users,
        "items": items,
        "ctx_dim": params.ctx_dim,
        "variant": params.variant,
        "task": params.task,
        "linear_head": params.linear_head,
        "hyper": hyper or {},
    }
    save_arrays(path, params.arrays, meta)


def load_rec_model(path) -> RecModelParams:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "recmodel":
        raise ValidationError(f"{path}: not a recommendation model checkpoint")
    return RecModelParams(
        arrays=arrays,
        user_index={u: i for i, u in enumerate(meta["users"])},
        item_index={it: i for i, it in enumerate(meta["items"])},
        ctx_dim=int(meta["ctx_dim"]), variant=meta["variant"], task=meta["task"],
        linear_head=bool(meta["linear_head"]))
