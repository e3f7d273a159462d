import numpy as np
import pytest
from _gradcheck import finite_difference_gradients, max_relative_error

from contrastrec.autoencoder import (
    PAD_ID,
    UNK_ID,
    ae_backward,
    ae_forward,
    ae_loss,
    build_vocab,
    embed_explanation,
    embed_many,
    init_autoencoder,
    load_autoencoder,
    reconstruction_accuracy,
    save_autoencoder,
    tokenize_pad,
    train_autoencoder,
)
from contrastrec.errors import ValidationError


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def ce_loss_bruteforce(logits, tokens):
    """Per-position softmax cross-entropy, recomputed scalar by scalar."""
    logits = np.asarray(logits, dtype=float)
    tokens = np.asarray(tokens)
    if logits.ndim == 2:
        logits, tokens = logits[None], tokens[None]
    total, count = 0.0, 0
    for b in range(tokens.shape[0]):
        for l in range(tokens.shape[1]):
            row = logits[b, l]
            exp = np.exp(row - row.max())
            prob = exp[tokens[b, l]] / exp.sum()
            total += -np.log(prob)
            count += 1
    return total / count


def synthetic_corpus(n_sentences=50, vocab_words=20, words_per_sentence=5, seed=123):
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(vocab_words)]
    return [" ".join(rng.choice(words, size=words_per_sentence))
            for _ in range(n_sentences)]


def explanation_style_corpus(n_sentences=50, n_tokens=8, seed=5):
    """Sentences shaped like the downstream explanation texts: a fixed
    scaffold with two varying token slots."""
    rng = np.random.default_rng(seed)
    tokens = [f"tok{i}" for i in range(n_tokens)]
    out = []
    for _ in range(n_sentences):
        a, b = rng.choice(tokens, size=2)
        out.append("the consumer purchased this product because the consumer "
                   f"likes {a} and the product is {b}")
    return out


# ---------------------------------------------------------------------------
# Vocabulary and tokenization
# ---------------------------------------------------------------------------

def test_build_vocab_enumeration_and_reserved_ids():
    vocab = build_vocab(["a b", "b c"])
    assert len(vocab) == 5
    assert vocab.id_to_word[:2] == ("<pad>", "<unk>")
    assert [vocab.encode_word(w) for w in ("a", "b", "c")] == [2, 3, 4]


def test_build_vocab_deterministic():
    assert build_vocab(["a b", "b c"]) == build_vocab(["a b", "b c"])


def test_build_vocab_rejects_empty_corpus():
    with pytest.raises(ValidationError):
        build_vocab([])


def test_unseen_word_maps_to_unk():
    vocab = build_vocab(["a b"])
    assert vocab.encode_word("zzz") == UNK_ID


def test_tokenize_pad_short_sentence():
    vocab = build_vocab(["one two three"])
    seq = tokenize_pad("one two three", vocab, maxlen=50)
    assert seq.shape == (50,)
    assert list(seq[:3]) == [2, 3, 4]
    assert (seq[3:] == PAD_ID).all()


def test_tokenize_pad_truncates_long_sentence():
    vocab = build_vocab([" ".join(f"w{i}" for i in range(60))])
    seq = tokenize_pad(" ".join(f"w{i}" for i in range(60)), vocab, maxlen=50)
    assert seq.shape == (50,)
    assert (seq != PAD_ID).all()


def test_tokenize_pad_empty_text_warns():
    vocab = build_vocab(["a"])
    with pytest.warns(UserWarning, match="all-pad"):
        seq = tokenize_pad("", vocab, maxlen=10)
    assert (seq == PAD_ID).all()


def test_roundtrip_word_ids():
    vocab = build_vocab(["alpha beta gamma"])
    for word in ("alpha", "beta", "gamma"):
        assert vocab.id_to_word[vocab.encode_word(word)] == word


# ---------------------------------------------------------------------------
# Forward pass and loss
# ---------------------------------------------------------------------------

def _tiny_params(seed=0, maxlen=6, hidden=64, mask_pad=False):
    corpus = ["red fox jumps", "blue bird sings high", "green frog hops",
              "red bird hops", "blue fox sings"]
    vocab = build_vocab(corpus)
    assert len(vocab) == 12
    params = init_autoencoder(vocab, maxlen=maxlen, hidden=hidden, seed=seed,
                              mask_pad=mask_pad)
    tokens = np.stack([tokenize_pad(t, vocab, maxlen) for t in corpus])
    return params, tokens, corpus


def test_zero_weights_bottleneck_is_bias_and_logits_constant():
    params, tokens, _ = _tiny_params()
    for name, arr in params.arrays.items():
        arr[...] = 0.0
    params.arrays["enc_b2"][:] = np.arange(8, dtype=float)
    logits, bottleneck = ae_forward(tokens[0], params)
    assert np.allclose(bottleneck, np.arange(8.0))
    assert np.allclose(logits, logits[0])


def test_forward_deterministic():
    params, tokens, _ = _tiny_params(seed=3)
    out1 = ae_forward(tokens, params)
    out2 = ae_forward(tokens, params)
    assert np.array_equal(out1[0], out2[0]) and np.array_equal(out1[1], out2[1])


def test_ae_loss_uniform_logits():
    tokens = np.zeros((1, 50), dtype=np.int64)
    logits = np.zeros((1, 50, 100))
    assert ae_loss(logits, tokens) == pytest.approx(np.log(100))


def test_ae_loss_confident_logits_vanish():
    tokens = np.array([[2, 3, 4, 0]])
    logits = np.full((1, 4, 6), -1e6)
    for pos, true_id in enumerate(tokens[0]):
        logits[0, pos, true_id] = 1e6
    assert ae_loss(logits, tokens) == pytest.approx(0.0, abs=1e-12)


def test_ae_loss_matches_bruteforce_oracle():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(3, 7, 11))
    tokens = rng.integers(0, 11, size=(3, 7))
    assert ae_loss(logits, tokens) == pytest.approx(
        ce_loss_bruteforce(logits, tokens), abs=1e-10)


def test_bottleneck_dimension_is_eight_everywhere():
    for maxlen, words in ((4, 5), (12, 40)):
        corpus = [" ".join(f"t{i}" for i in range(words))]
        vocab = build_vocab(corpus)
        params = init_autoencoder(vocab, maxlen=maxlen, seed=1)
        _, bottleneck = ae_forward(tokenize_pad(corpus[0], vocab, maxlen), params)
        assert bottleneck.shape == (8,)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("mask_pad", [False, True])
def test_analytic_gradients_match_central_differences(mask_pad):
    params, tokens, _ = _tiny_params(seed=5, mask_pad=mask_pad)
    # Check at a generic point: the zero-bias init leaves ReLU pre-activations
    # sitting on the kink, where central differences are meaningless.
    rng = np.random.default_rng(42)
    for arr in params.arrays.values():
        arr += rng.uniform(-0.4, 0.4, size=arr.shape)
    batch = tokens[:4]

    def loss_fn():
        logits, _ = ae_forward(batch, params)
        return ae_loss(logits, batch, mask_pad=mask_pad)

    logits, _, cache = ae_forward(batch, params, return_cache=True)
    analytic = ae_backward(cache, params, mask_pad=mask_pad)
    numeric = finite_difference_gradients(loss_fn, params.arrays)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_single_weight_perturbation_matches_gradient():
    params, tokens, _ = _tiny_params(seed=9)
    rng = np.random.default_rng(7)
    for arr in params.arrays.values():
        arr += rng.uniform(-0.4, 0.4, size=arr.shape)
    batch = tokens[:3]
    logits, _, cache = ae_forward(batch, params, return_cache=True)
    grad = ae_backward(cache, params)["enc_w1"][0, 0]
    eps = 1e-5
    params.arrays["enc_w1"][0, 0] += eps
    hi = ae_loss(ae_forward(batch, params)[0], batch)
    params.arrays["enc_w1"][0, 0] -= 2 * eps
    lo = ae_loss(ae_forward(batch, params)[0], batch)
    params.arrays["enc_w1"][0, 0] += eps
    assert (hi - lo) / (2 * eps) == pytest.approx(grad, rel=1e-4)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def test_train_zero_epochs_returns_initial_params():
    corpus = synthetic_corpus(10, 8, 4)
    params, trace = train_autoencoder(corpus, maxlen=10, epochs=0, seed=7)
    reference = init_autoencoder(params.vocab, maxlen=10, seed=7)
    assert trace == []
    for name in params.arrays:
        assert np.array_equal(params.arrays[name], reference.arrays[name])


def test_train_deterministic_given_seed():
    corpus = synthetic_corpus(12, 10, 4)
    p1, t1 = train_autoencoder(corpus, maxlen=8, epochs=3, seed=21)
    p2, t2 = train_autoencoder(corpus, maxlen=8, epochs=3, seed=21)
    assert t1 == t2
    for name in p1.arrays:
        assert p1.arrays[name].tobytes() == p2.arrays[name].tobytes()


def test_train_loss_monotone_first_epochs_at_small_lr():
    params, tokens, corpus = _tiny_params()
    _, trace = train_autoencoder(corpus, maxlen=6, lr=0.01, batch_size=128,
                                 epochs=5, seed=2)
    assert all(trace[i + 1] <= trace[i] + 1e-12 for i in range(len(trace) - 1))


def test_train_reconstructs_small_corpus():
    corpus = explanation_style_corpus(50, 8)
    params, trace = train_autoencoder(corpus, maxlen=50, lr=0.01,
                                      batch_size=128, epochs=100, seed=0)
    assert reconstruction_accuracy(params, corpus) >= 0.95
    assert trace[-1] < trace[0]


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def test_identical_texts_identical_embeddings():
    corpus = synthetic_corpus(10, 8, 4)
    params, _ = train_autoencoder(corpus, maxlen=8, epochs=2, seed=3)
    a = embed_explanation(corpus[0], params)
    b = embed_explanation(corpus[0], params)
    assert np.array_equal(a, b)


def test_texts_differing_beyond_maxlen_share_embeddings():
    corpus = synthetic_corpus(10, 8, 4)
    params, _ = train_autoencoder(corpus, maxlen=4, epochs=1, seed=3)
    base = " ".join(["w0"] * 4)
    assert np.array_equal(embed_explanation(base, params),
                          embed_explanation(base + " w5 w6", params))


def test_embeddings_cluster_by_sentence_family():
    rng = np.random.default_rng(17)
    left_words = [f"left{i}" for i in range(6)]
    right_words = [f"right{i}" for i in range(6)]
    left = [" ".join(rng.choice(left_words, size=5)) for _ in range(25)]
    right = [" ".join(rng.choice(right_words, size=5)) for _ in range(25)]
    params, _ = train_autoencoder(left + right, maxlen=8, lr=0.01,
                                  batch_size=16, epochs=60, seed=11)
    emb = embed_many(left + right, params)
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    sims = emb @ emb.T
    n = len(left)
    within = (sims[:n, :n].sum() - n + sims[n:, n:].sum() - n) / (2 * n * (n - 1))
    between = sims[:n, n:].mean()
    assert within > between


def test_save_load_roundtrip(tmp_path):
    corpus = synthetic_corpus(10, 8, 4)
    params, _ = train_autoencoder(corpus, maxlen=8, epochs=2, seed=5)
    path = tmp_path / "ae.bin"
    save_autoencoder(params, path)
    loaded = load_autoencoder(path)
    assert loaded.vocab == params.vocab
    assert loaded.maxlen == params.maxlen
    for name in params.arrays:
        assert np.array_equal(loaded.arrays[name], params.arrays[name])
    text = corpus[0]
    assert np.array_equal(embed_explanation(text, params),
                          embed_explanation(text, loaded))
