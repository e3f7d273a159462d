import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastrec.errors import ValidationError
from contrastrec.evaluate import (
    AttentionSummary,
    attention_summary,
    auc_score,
    compute_metrics,
    default_stopwords,
    improvement_vs_uncertainty,
    keyword_frequencies,
    template_blocklist,
    uncertainty_scores,
)
from contrastrec.gateway import ExplanationPair


# ---------------------------------------------------------------------------
# Independent oracle: exhaustive pair counting
# ---------------------------------------------------------------------------

def auc_pair_counting(y_true, scores):
    y = np.asarray(y_true)
    s = np.asarray(scores, dtype=float)
    pos = s[y == 1]
    neg = s[y == 0]
    if len(pos) == 0 or len(neg) == 0:
        return None
    concordant = tied = 0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                concordant += 1
            elif sp == sn:
                tied += 1
    return (concordant + 0.5 * tied) / (len(pos) * len(neg))


def random_alphas(rng, n):
    raw = rng.exponential(size=(n, 6, 6))
    return raw / raw.sum(axis=2, keepdims=True)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def test_perfectly_ordered_scores_auc_one():
    report = compute_metrics([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9], "classification")
    assert report.auc == 1.0


def test_auc_enumerated_example():
    # pairs: (0.9,0.8) conc, (0.9,0.1) conc, (0.4,0.8) disc, (0.4,0.1) conc
    assert auc_score([1, 0, 1, 0], [0.9, 0.8, 0.4, 0.1]) == pytest.approx(3 / 4)


def test_regression_identity_zero_errors():
    report = compute_metrics([1.0, 2.5, 4.0], [1.0, 2.5, 4.0], "regression")
    assert report.rmse == 0.0 and report.mae == 0.0 and report.auc is None


def test_single_class_auc_undefined():
    report = compute_metrics([1, 1, 1], [0.2, 0.5, 0.9], "classification")
    assert report.auc is None


def test_auc_matches_pair_counting_small_cases():
    rng = np.random.default_rng(0)
    for trial in range(60):
        n = int(rng.integers(2, 200))
        y = rng.integers(0, 2, size=n)
        # coarse grid scores force plenty of ties
        s = rng.integers(0, 6, size=n) / 5.0
        expected = auc_pair_counting(y, s)
        got = auc_score(y, s)
        if expected is None:
            assert got is None
        else:
            assert got == pytest.approx(expected, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1, width=32)),
                min_size=2, max_size=60))
def test_auc_invariant_under_monotone_transform(pairs):
    y = [p[0] for p in pairs]
    s = np.array([p[1] for p in pairs], dtype=float)
    base = auc_score(y, s)
    # power-of-two scaling: strictly increasing and exact in float64, so no
    # two distinct scores can collide under the transform
    transformed = auc_score(y, 4.0 * s)
    if base is None:
        assert transformed is None
    else:
        assert transformed == pytest.approx(base, abs=1e-12)


def test_compute_metrics_validates_shapes():
    with pytest.raises(ValidationError):
        compute_metrics([1], [0.5, 0.6], "classification")
    with pytest.raises(ValidationError):
        compute_metrics([1], [0.5], "sorting")


# ---------------------------------------------------------------------------
# Attention analysis
# ---------------------------------------------------------------------------

def test_uniform_alpha_means_one_sixth():
    alphas = np.full((4, 6, 6), 1.0 / 6.0)
    summary = attention_summary(alphas, [0.9, 0.9, 0.1, 0.1])
    assert summary.mean("pos", "all") == pytest.approx(1 / 6)
    assert summary.mean("neg", "all") == pytest.approx(1 / 6)


def test_alpha_concentrated_on_pos_column():
    alphas = np.zeros((2, 6, 6))
    alphas[:, :, 0] = 1.0
    summary = attention_summary(alphas, [0.8, 0.2])
    assert summary.mean("pos", "all") == pytest.approx(1.0)
    assert summary.mean("neg", "all") == pytest.approx(0.0)


def test_case_study_shape_low_record_leans_negative():
    # one low-rated record whose attention mass sits on the negative slot,
    # echoing the 0.87-vs-0.23 attention contrast reported for such cases
    alpha = np.zeros((1, 6, 6))
    alpha[0, :, 1] = 0.87
    alpha[0, :, 0] = 0.03
    remaining = 1.0 - 0.87 - 0.03
    alpha[0, :, 2:] = remaining / 4.0
    summary = attention_summary(alpha, [0.1])
    assert summary.mean("neg", "low") > summary.mean("pos", "low")
    assert summary.mean("neg", "low") == pytest.approx(0.87)


def test_slot_shares_sum_to_one():
    rng = np.random.default_rng(3)
    summary = attention_summary(random_alphas(rng, 50), rng.random(50))
    assert summary.per_record.sum(axis=1) == pytest.approx(np.ones(50), abs=1e-6)
    assert summary.shares.sum() == pytest.approx(1.0, abs=1e-6)


def test_histogram_rows_fixed_bins():
    rng = np.random.default_rng(4)
    summary = attention_summary(random_alphas(rng, 30), rng.random(30))
    rows = summary.histogram_rows("high")
    assert len(rows) == 20
    assert rows[0][0] == 0.0 and rows[-1][1] == pytest.approx(1.0)
    assert sum(r[2] for r in rows) == int(summary.high_mask.sum())


def test_attention_summary_rejects_bad_shapes():
    with pytest.raises(ValidationError):
        attention_summary(np.zeros((3, 5, 5)), [0.5, 0.5, 0.5])
    bad = np.full((2, 6, 6), 0.5)
    with pytest.raises(ValidationError):
        attention_summary(bad, [0.5, 0.5])


# ---------------------------------------------------------------------------
# Uncertainty
# ---------------------------------------------------------------------------

def test_identical_models_zero_variance_warns():
    mat = np.tile(np.array([0.2, 0.7, 0.9]), (3, 1))
    with pytest.warns(UserWarning, match="constant"):
        scores = uncertainty_scores(mat)
    assert np.array_equal(scores, np.zeros(3))


def test_binary_disagreement_is_maximal():
    mat = np.array([[0.0, 0.0], [1.0, 0.0]])
    raw_var = mat.var(axis=0)
    assert raw_var[0] == pytest.approx(0.25)
    scores = uncertainty_scores(mat)
    assert scores[0] == 1.0 and scores[1] == 0.0


def test_minmax_endpoints_attained():
    rng = np.random.default_rng(5)
    mat = rng.random((4, 10))
    scores = uncertainty_scores(mat)
    assert scores.min() == 0.0 and scores.max() == 1.0
    assert ((scores >= 0) & (scores <= 1)).all()


def test_uncertainty_requires_two_models():
    with pytest.raises(ValidationError):
        uncertainty_scores(np.zeros((1, 5)))


# ---------------------------------------------------------------------------
# Keywords
# ---------------------------------------------------------------------------

def test_keyword_counting():
    assert keyword_frequencies(["thai thai unique"], stopwords=(), blocklist=()) == \
        [("thai", 2), ("unique", 1)]


def test_keyword_blocklist_filters():
    out = keyword_frequencies(["thai thai unique"], stopwords=(), blocklist=("thai",))
    assert out == [("unique", 1)]


def test_keyword_ties_break_alphabetically():
    out = keyword_frequencies(["zebra apple zebra apple"], stopwords=(), blocklist=())
    assert out == [("apple", 2), ("zebra", 2)]


def test_keyword_polarity_selects_pair_field():
    pairs = [ExplanationPair("u", "i", "cozy atmosphere wins", "noisy room loses")]
    pos = keyword_frequencies(pairs, "positive", stopwords=(), blocklist=())
    neg = keyword_frequencies(pairs, "negative", stopwords=(), blocklist=())
    assert ("cozy", 1) in pos and ("noisy", 1) in neg


def test_default_lists_loaded():
    stop = default_stopwords()
    blocked = template_blocklist()
    assert "the" in stop and len(stop) == 50
    assert "consumer" in blocked and "because" in blocked
    out = keyword_frequencies(["the consumer likes cozy rooms because cozy"])
    assert out[0] == ("cozy", 2)
    assert all(w not in dict(out) for w in ("the", "consumer", "because"))


# ---------------------------------------------------------------------------
# Improvement vs uncertainty
# ---------------------------------------------------------------------------

def test_zero_improvement_zero_slope():
    errors = np.array([0.4, 0.3, 0.5, 0.2])
    unc = np.array([0.1, 0.5, 0.9, 0.3])
    slope, intercept, r = improvement_vs_uncertainty(errors, errors, unc)
    assert slope == pytest.approx(0.0)
    assert intercept == pytest.approx(0.0)


def test_identity_improvement_unit_slope():
    unc = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    base = unc + 0.3
    model = np.full(5, 0.3)
    slope, intercept, r = improvement_vs_uncertainty(base, model, unc)
    assert slope == pytest.approx(1.0)
    assert r == pytest.approx(1.0)


def test_zero_variance_uncertainty_rejected():
    with pytest.raises(ValidationError, match="variance"):
        improvement_vs_uncertainty([1, 2, 3], [1, 1, 1], [0.5, 0.5, 0.5])


def test_planted_uncertainty_slope_positive():
    # short-history-style records: models disagree more and the explanation
    # model helps more; long-history records: agreement and little lift
    rng = np.random.default_rng(11)
    n_hard, n_easy = 40, 40
    hard_preds = rng.random((4, n_hard))              # high disagreement
    easy_base = rng.random(n_easy) * 0.2 + 0.4
    easy_preds = np.tile(easy_base, (4, 1)) + rng.normal(0, 0.01, (4, n_easy))
    matrix = np.hstack([hard_preds, easy_preds])
    unc = uncertainty_scores(matrix)
    baseline_err = np.concatenate([rng.random(n_hard) * 0.5 + 0.4,
                                   rng.random(n_easy) * 0.1 + 0.1])
    model_err = np.concatenate([rng.random(n_hard) * 0.1,
                                rng.random(n_easy) * 0.1 + 0.08])
    slope, _, r = improvement_vs_uncertainty(baseline_err, model_err, unc)
    assert slope > 0
    assert r > 0.5
