"""Metrics and model analysis: RMSE/MAE/AUC, attention summaries,
prediction-uncertainty scores, keyword aggregation, and the
improvement-vs-uncertainty regression."""
from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

SLOT_NAMES = ("pos", "neg", "consumer", "product", "sequence", "context")
HIST_BIN_WIDTH = 0.05


@dataclass
class MetricReport:
    rmse: float
    mae: float
    auc: float | None
    n: int
    label: str = ""

    def as_dict(self) -> dict:
        return {"label": self.label, "n": self.n, "rmse": self.rmse,
                "mae": self.mae, "auc": self.auc}


def auc_score(y_true, scores):
    """Rank-based AUC with the Mann-Whitney tie convention (0.5 per tied pair).

    Returns None when only one class is present.
    """
    y = np.asarray(y_true, dtype=float)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape:
        raise ValidationError("labels and scores must have equal length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    # average ranks over tied score groups
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(y_true, y_pred, task: str, label: str = "") -> MetricReport:
    """RMSE and MAE always; AUC for classification when both classes appear.

    A single-class classification input yields auc=None (undefined), never a
    silent 0.5.
    """
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if len(y) != len(p) or len(y) == 0:
        raise ValidationError("y_true and y_pred must be finite, equal-length, non-empty")
    rmse = float(np.sqrt(np.mean((y - p) ** 2)))
    mae = float(np.mean(np.abs(y - p)))
    auc = None
    if task == "classification":
        auc = auc_score(y, p)
        if auc is None:
            log.warning("AUC undefined: only one class present in y_true")
    elif task != "regression":
        raise ValidationError(f"unknown task {task!r}")
    return MetricReport(rmse=rmse, mae=mae, auc=auc, n=len(y), label=label)


@dataclass
class AttentionSummary:
    """Per-slot attention means as received by each slot (column means).

    ``per_record`` holds one row per record with the six slot shares; the
    high/low grouping follows the model's predicted class. Histograms use
    fixed 0.05-wide bins on [0, 1].
    """

    per_record: np.ndarray          # (N, 6)
    high_mask: np.ndarray           # (N,) bool
    slot_names: tuple = SLOT_NAMES
    bin_edges: np.ndarray = field(default_factory=lambda: np.arange(0.0, 1.0 + 1e-9,
                                                                    HIST_BIN_WIDTH))

    @property
    def shares(self) -> np.ndarray:
        """Overall share of attention received by each slot (sums to 1)."""
        return self.per_record.mean(axis=0)

    def mean(self, slot: str, group: str = "all") -> float:
        col = self.slot_names.index(slot)
        if group == "high":
            values = self.per_record[self.high_mask, col]
        elif group == "low":
            values = self.per_record[~self.high_mask, col]
        else:
            values = self.per_record[:, col]
        if values.size == 0:
            return float("nan")
        return float(values.mean())

    def histogram(self, slot: str, group: str) -> np.ndarray:
        col = self.slot_names.index(slot)
        mask = self.high_mask if group == "high" else ~self.high_mask
        counts, _ = np.histogram(self.per_record[mask, col], bins=self.bin_edges)
        return counts

    def histogram_rows(self, group: str):
        """Rows (bin_lo, bin_hi, count_pos, count_neg) for the CSV contract."""
        pos = self.histogram("pos", group)
        neg = self.histogram("neg", group)
        edges = self.bin_edges
        return [(float(edges[i]), float(edges[i + 1]), int(pos[i]), int(neg[i]))
                for i in range(len(pos))]


def attention_summary(alphas, predictions, threshold: float = 0.5,
                      mean_over: str = "queries") -> AttentionSummary:
    """Summarize input-attention matrices grouped by predicted class.

    ``alphas`` is (N, 6, 6) row-stochastic; the per-slot value for a record
    is the mean attention the slot receives from the six query rows
    (``mean_over="queries"``), or the mean its own query row gives out
    (``mean_over="keys"``, constant 1/6 by row normalization, exposed for
    completeness).
    """
    alphas = np.asarray(alphas, dtype=float)
    if alphas.ndim != 3 or alphas.shape[1:] != (6, 6):
        raise ValidationError("alphas must have shape (N, 6, 6)")
    if not np.allclose(alphas.sum(axis=2), 1.0, atol=1e-6):
        raise ValidationError("attention rows must be stochastic")
    if mean_over == "queries":
        per_record = alphas.mean(axis=1)
    elif mean_over == "keys":
        per_record = alphas.mean(axis=2)
    else:
        raise ValidationError(f"unknown mean_over {mean_over!r}")
    predictions = np.asarray(predictions, dtype=float)
    if predictions.shape[0] != alphas.shape[0]:
        raise ValidationError("predictions and alphas must align")
    return AttentionSummary(per_record=per_record,
                            high_mask=predictions >= threshold)


def uncertainty_scores(prediction_matrix) -> np.ndarray:
    """Min-max-normalized per-record population variance across K models."""
    mat = np.asarray(prediction_matrix, dtype=float)
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise ValidationError("prediction matrix must be (K >= 2) x N")
    variances = mat.var(axis=0)
    lo, hi = variances.min(), variances.max()
    if hi - lo <= 1e-15:
        warnings.warn("uncertainty_scores: constant disagreement, all scores set to 0")
        return np.zeros_like(variances)
    return (variances - lo) / (hi - lo)


def _load_wordlist(name: str) -> frozenset:
    text = (resources.files("contrastrec") / "data" / name).read_text("utf-8")
    return frozenset(w.strip() for w in text.splitlines()
                     if w.strip() and not w.startswith("#"))


def default_stopwords() -> frozenset:
    return _load_wordlist("stopwords.txt")


def template_blocklist() -> frozenset:
    return _load_wordlist("template_blocklist.txt")


def keyword_frequencies(explanations, polarity: str = "positive", top_k: int = 10,
                        blocklist=None, stopwords=None):
    """Ranked (word, count) list over explanation texts of one polarity.

    ``explanations`` may be raw strings or objects with positive_text /
    negative_text attributes. Stopwords and the prompt-template boilerplate
    are excluded; ties in count break alphabetically.
    """
    texts = []
    for item in explanations:
        if isinstance(item, str):
            texts.append(item)
        elif polarity == "positive":
            texts.append(item.positive_text)
        elif polarity == "negative":
            texts.append(item.negative_text)
        else:
            raise ValidationError(f"unknown polarity {polarity!r}")
    if not texts:
        raise ValidationError("no explanation texts to aggregate")
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    blocked = template_blocklist() if blocklist is None else frozenset(blocklist)
    counts: dict[str, int] = {}
    for text in texts:
        for word in re.findall(r"[a-z0-9']+", text.lower()):
            if word in stop or word in blocked:
                continue
            counts[word] = counts.get(word, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:top_k]


def improvement_vs_uncertainty(baseline_errors, model_errors, uncertainty):
    """OLS of per-record improvement (baseline minus model error) on uncertainty.

    Returns (slope, intercept, pearson_r).
    """
    base = np.asarray(baseline_errors, dtype=float)
    model = np.asarray(model_errors, dtype=float)
    unc = np.asarray(uncertainty, dtype=float)
    if not (len(base) == len(model) == len(unc)) or len(base) < 3:
        raise ValidationError("need three equal-length arrays of length >= 3")
    if unc.var() == 0.0:
        raise ValidationError("uncertainty has zero variance: slope undefined")
    improvement = base - model
    x = unc - unc.mean()
    y = improvement - improvement.mean()
    slope = float((x * y).sum() / (x * x).sum())
    intercept = float(improvement.mean() - slope * unc.mean())
    denom = np.sqrt((x * x).sum() * (y * y).sum())
    pearson = float((x * y).sum() / denom) if denom > 0 else 0.0
    return slope, intercept, pearson
