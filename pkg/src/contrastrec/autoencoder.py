"""Text autoencoder producing 8-dimensional explanation embeddings.

Sentences are tokenized to ids, embedded through a learned word table,
flattened, and squeezed through an encoder (8*maxlen -> 64 -> 8) whose
8-unit output is the embedding. The decoder (8 -> 64 -> 8*maxlen) produces
one 8-vector per position; per-position vocabulary logits come from tying
against the word-embedding table. Training is plain mini-batch SGD on the
reconstruction objective (per-sentence cross-entropy summed over positions,
averaged over the batch), with all gradients derived by hand; ae_loss
reports the per-position mean, i.e. objective / maxlen.
"""
from __future__ import annotations

import logging
import math
import re
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError
from .serialize import load_arrays, save_arrays

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
DEFAULT_MAXLEN = 50
EMBED_DIM = 8
HIDDEN_DIM = 64

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class Vocab:
    """Dense word ids with reserved <pad>=0 and <unk>=1 rows."""

    word_to_id: dict
    id_to_word: tuple

    def __len__(self):
        return len(self.id_to_word)

    def encode_word(self, word: str) -> int:
        return self.word_to_id.get(word, UNK_ID)


def tokenize(text: str):
    return _TOKEN_RE.findall(text.lower())


def build_vocab(corpus) -> Vocab:
    """Vocabulary over a corpus, ordered by first occurrence."""
    corpus = list(corpus)
    if not corpus:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    id_to_word = ["<pad>", "<unk>"]
    word_to_id = {"<pad>": PAD_ID, "<unk>": UNK_ID}
    for text in corpus:
        for word in tokenize(text):
            if word not in word_to_id:
                word_to_id[word] = len(id_to_word)
                id_to_word.append(word)
    return Vocab(word_to_id=word_to_id, id_to_word=tuple(id_to_word))


def tokenize_pad(text: str, vocab: Vocab, maxlen: int = DEFAULT_MAXLEN) -> np.ndarray:
    """First ``maxlen`` token ids, right-padded with <pad>."""
    ids = [vocab.encode_word(w) for w in tokenize(text)][:maxlen]
    if not ids:
        warnings.warn("tokenize_pad: empty text produced an all-pad sequence")
    out = np.full(maxlen, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out


@dataclass
class AutoEncoderParams:
    """Weights plus the vocabulary and shape metadata they were trained with."""

    arrays: dict
    vocab: Vocab
    maxlen: int
    dim: int = EMBED_DIM
    hidden: int = HIDDEN_DIM
    mask_pad: bool = False

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "AutoEncoderParams":
        return AutoEncoderParams(
            arrays={k: v.copy() for k, v in self.arrays.items()},
            vocab=self.vocab, maxlen=self.maxlen, dim=self.dim,
            hidden=self.hidden, mask_pad=self.mask_pad)


def init_autoencoder(vocab: Vocab, maxlen: int = DEFAULT_MAXLEN, dim: int = EMBED_DIM,
                     hidden: int = HIDDEN_DIM, seed: int = 0,
                     mask_pad: bool = False) -> AutoEncoderParams:
    """Fan-scaled uniform init for the weight matrices, unit-RMS rows for the
    word table, zero biases.

    A flat uniform(-0.05, 0.05) init leaves the tied softmax logits so small
    that plain SGD never escapes the reconstruct-the-marginals saddle at this
    corpus scale (the code collapses to a constant); scaled init is required
    for the bottleneck to learn the varying content.
    """
    rng = np.random.default_rng(seed)
    flat = maxlen * dim

    def glorot(n_in, n_out):
        limit = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-limit, limit, size=(n_in, n_out))

    emb_limit = math.sqrt(3.0 / dim)
    arrays = {
        "emb": rng.uniform(-emb_limit, emb_limit, size=(len(vocab), dim)),
        "enc_w1": glorot(flat, hidden), "enc_b1": np.zeros(hidden),
        "enc_w2": glorot(hidden, dim), "enc_b2": np.zeros(dim),
        "dec_w1": glorot(dim, hidden), "dec_b1": np.zeros(hidden),
        "dec_w2": glorot(hidden, flat), "dec_b2": np.zeros(flat),
    }
    return AutoEncoderParams(arrays=arrays, vocab=vocab, maxlen=maxlen,
                             dim=dim, hidden=hidden, mask_pad=mask_pad)


def _as_batch(tokens) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def ae_forward(tokens, params: AutoEncoderParams, return_cache: bool = False):
    """Forward pass.

    Returns (logits, bottleneck): logits has shape (..., maxlen, |V|) and the
    bottleneck (..., dim). The bottleneck is the affine output of the 8-unit
    layer; positions beyond the sentence, including pads, still get logits.
    """
    tok, squeeze = _as_batch(tokens)
    p = params.arrays
    if tok.max(initial=0) >= len(params.vocab):
        raise ValidationError("token id outside the vocabulary")
    emb = p["emb"][tok]                                  # (B, L, D)
    batch, length, dim = emb.shape
    x = emb.reshape(batch, length * dim)
    a1 = x @ p["enc_w1"] + p["enc_b1"]
    h1 = np.maximum(a1, 0.0)
    z = h1 @ p["enc_w2"] + p["enc_b2"]                   # bottleneck
    a2 = z @ p["dec_w1"] + p["dec_b1"]
    h2 = np.maximum(a2, 0.0)
    dec = (h2 @ p["dec_w2"] + p["dec_b2"]).reshape(batch, length, dim)
    logits = np.einsum("bld,vd->blv", dec, p["emb"])
    for name, arr in (("bottleneck", z), ("logits", logits)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in autoencoder {name}")
    if squeeze:
        logits_out, z_out = logits[0], z[0]
    else:
        logits_out, z_out = logits, z
    if return_cache:
        cache = {"tok": tok, "x": x, "a1": a1, "h1": h1, "z": z,
                 "a2": a2, "h2": h2, "dec": dec, "logits": logits}
        return logits_out, z_out, cache
    return logits_out, z_out


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _position_weights(tok, mask_pad):
    """Per-position averaging weights; pads count unless masking is on."""
    if mask_pad:
        mask = (tok != PAD_ID).astype(float)
        total = mask.sum()
        if total == 0:
            raise ValidationError("mask_pad with all-pad batch leaves nothing to score")
        return mask / total
    return np.full(tok.shape, 1.0 / tok.size)


def ae_loss(logits, tokens, mask_pad: bool = False) -> float:
    """Mean over positions (and batch) of -log softmax(logits)[true id]."""
    tok, _ = _as_batch(tokens)
    logits = np.asarray(logits, dtype=float)
    if logits.ndim == 2:
        logits = logits[None, :, :]
    probs = _softmax(logits)
    batch_idx, pos_idx = np.indices(tok.shape)
    picked = probs[batch_idx, pos_idx, tok]
    weights = _position_weights(tok, mask_pad)
    return float(-(weights * np.log(np.maximum(picked, 1e-300))).sum())


def ae_backward(cache, params: AutoEncoderParams, mask_pad: bool = False) -> dict:
    """Gradients of :func:`ae_loss` w.r.t. every parameter array."""
    p = params.arrays
    tok = cache["tok"]
    batch, length = tok.shape
    probs = _softmax(cache["logits"])                    # (B, L, V)
    dlogits = probs.copy()
    batch_idx, pos_idx = np.indices(tok.shape)
    dlogits[batch_idx, pos_idx, tok] -= 1.0
    dlogits *= _position_weights(tok, mask_pad)[:, :, None]

    grads = {}
    ddec = np.einsum("blv,vd->bld", dlogits, p["emb"])
    demb = np.einsum("blv,bld->vd", dlogits, cache["dec"])  # output-tie side

    dflat = ddec.reshape(batch, length * params.dim)
    grads["dec_w2"] = cache["h2"].T @ dflat
    grads["dec_b2"] = dflat.sum(axis=0)
    dh2 = dflat @ p["dec_w2"].T
    da2 = dh2 * (cache["a2"] > 0)
    grads["dec_w1"] = cache["z"].T @ da2
    grads["dec_b1"] = da2.sum(axis=0)
    dz = da2 @ p["dec_w1"].T
    grads["enc_w2"] = cache["h1"].T @ dz
    grads["enc_b2"] = dz.sum(axis=0)
    dh1 = dz @ p["enc_w2"].T
    da1 = dh1 * (cache["a1"] > 0)
    grads["enc_w1"] = cache["x"].T @ da1
    grads["enc_b1"] = da1.sum(axis=0)
    dx = da1 @ p["enc_w1"].T
    demb_in = np.zeros_like(p["emb"])
    np.add.at(demb_in, tok, dx.reshape(batch, length, params.dim))
    grads["emb"] = demb + demb_in
    return grads


def train_autoencoder(corpus, vocab: Vocab | None = None,
                      maxlen: int = DEFAULT_MAXLEN, dim: int = EMBED_DIM,
                      hidden: int = HIDDEN_DIM, lr: float = 0.1,
                      batch_size: int = 128, epochs: int = 100, seed: int = 0,
                      mask_pad: bool = False):
    """Train on a corpus of texts (both explanation polarities together).

    The SGD objective is the batch mean of per-sentence reconstruction loss,
    each sentence summing cross-entropy over its maxlen positions; the
    returned loss trace records the per-position mean (objective / maxlen)
    per epoch. Deterministic given the seed; epochs=0 returns the freshly
    initialized parameters untouched.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValidationError("training corpus is empty")
    if vocab is None:
        vocab = build_vocab(corpus)
    params = init_autoencoder(vocab, maxlen=maxlen, dim=dim, hidden=hidden,
                              seed=seed, mask_pad=mask_pad)
    log.info("autoencoder: %d trainable parameters (|V|=%d, maxlen=%d)",
             params.n_parameters(), len(vocab), maxlen)
    tokens = np.stack([tokenize_pad(text, vocab, maxlen) for text in corpus])
    rng = np.random.default_rng(seed)
    # ae_backward differentiates the per-position mean; scaling by maxlen
    # turns it into the gradient of the per-sentence summed objective.
    scale = lr * maxlen
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        epoch_losses = []
        for start in range(0, len(corpus), batch_size):
            batch = tokens[order[start:start + batch_size]]
            logits, _, cache = ae_forward(batch, params, return_cache=True)
            loss = ae_loss(logits, batch, mask_pad=mask_pad)
            if not np.isfinite(loss):
                raise NumericError(
                    f"autoencoder loss diverged at epoch {epoch}, "
                    f"batch {start // batch_size}; trace so far: {trace}")
            grads = ae_backward(cache, params, mask_pad=mask_pad)
            for name, grad in grads.items():
                params.arrays[name] -= scale * grad
            epoch_losses.append(loss)
        trace.append(float(np.mean(epoch_losses)))
    return params, trace


def embed_explanation(text: str, params: AutoEncoderParams) -> np.ndarray:
    """Bottleneck embedding of a text under the trained parameters."""
    _, bottleneck = ae_forward(tokenize_pad(text, params.vocab, params.maxlen), params)
    return bottleneck


def embed_many(texts, params: AutoEncoderParams) -> np.ndarray:
    if not texts:
        return np.zeros((0, params.dim))
    tokens = np.stack([tokenize_pad(t, params.vocab, params.maxlen) for t in texts])
    _, bottleneck = ae_forward(tokens, params)
    return bottleneck


def reconstruction_accuracy(params: AutoEncoderParams, corpus) -> float:
    """Share of token positions (pads included) reconstructed exactly."""
    tokens = np.stack([tokenize_pad(t, params.vocab, params.maxlen) for t in corpus])
    logits, _ = ae_forward(tokens, params)
    return float((logits.argmax(axis=-1) == tokens).mean())


def save_autoencoder(params: AutoEncoderParams, path) -> None:
    meta = {
        "kind": "autoencoder",
        "maxlen": params.maxlen,
        "dim": params.dim,
        "hidden": params.hidden,
        "mask_pad": params.mask_pad,
        "vocab": list(params.vocab.id_to_word),
    }
    save_arrays(path, params.arrays, meta)


def load_autoencoder(path) -> AutoEncoderParams:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "autoencoder":
        raise ValidationError(f"{path}: not an autoencoder checkpoint")
    words = meta["vocab"]
    vocab = Vocab(word_to_id={w: i for i, w in enumerate(words)},
                  id_to_word=tuple(words))
    return AutoEncoderParams(arrays=arrays, vocab=vocab, maxlen=int(meta["maxlen"]),
                             dim=int(meta["dim"]), hidden=int(meta["hidden"]),
                             mask_pad=bool(meta["mask_pad"]))
