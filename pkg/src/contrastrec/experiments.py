"""Planted-signal experiment harness.

Wires the synthetic generator, the stub backend, the autoencoder, and the
recommender into single-call experiments: one seeded pipeline run, and the
multi-seed variant comparison used for lift / learning-efficiency /
attention studies. The acceptance suite and the ablation CLI both drive
these helpers.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autoencoder import embed_many, train_autoencoder
from .dataset import binarize_rating, gen_synthetic_recsys, split_user_temporal
from .evaluate import attention_summary, compute_metrics
from .gateway import ExplanationCache, StubBackend, generate_explanations_batch
from .recmodel import build_index, init_rec_params, predict_batch, train

log = logging.getLogger(__name__)


@dataclass
class PlantedConfig:
    """Frozen desk-scale constants for the planted-signal experiments."""

    n_users: int = 200
    n_items: int = 50
    history_len: int = 5
    n_tokens: int = 8
    label_noise: float = 0.1
    history_impurity: float = 0.35
    candidate_match_rate: float = 0.5
    records_per_user: tuple = (8, 16)
    split_ratio: float = 0.8
    domain: str = "product"
    ae_maxlen: int = 20
    ae_lr: float = 0.01
    ae_batch: int = 32
    ae_epochs: int = 600
    rec_lr: float = 0.1
    rec_batch: int = 128
    rec_epochs: int = 300
    task: str = "classification"


@dataclass
class PlantedRun:
    """Artifacts of one seeded pipeline run up to the trained-model stage."""

    seed: int
    config: PlantedConfig
    records: list
    profiles: list
    reason_table: dict
    split: object
    pairs: dict
    autoencoder: object
    user_index: dict
    item_index: dict
    models: dict = field(default_factory=dict)        # variant -> params
    backend_calls: int = 0


def prepare_planted_run(seed: int, config: PlantedConfig | None = None) -> PlantedRun:
    """Generate data, stub explanations, and embeddings for one seed."""
    cfg = config or PlantedConfig()
    records, profiles, table = gen_synthetic_recsys(
        cfg.n_users, cfg.n_items, cfg.history_len, seed,
        n_tokens=cfg.n_tokens, label_noise=cfg.label_noise,
        history_impurity=cfg.history_impurity,
        candidate_match_rate=cfg.candidate_match_rate,
        records_per_user=cfg.records_per_user)
    profiles_by_id = {p.item_id: p for p in profiles}
    split = split_user_temporal(records, cfg.split_ratio)
    backend = StubBackend(reason_table=table,
                          name_tokens={p.name: table[p.item_id] for p in profiles})
    pairs, pending = generate_explanations_batch(
        records, profiles_by_id, backend, ExplanationCache(), domain=cfg.domain)
    if pending:
        raise RuntimeError(f"stub backend left records pending: {pending[:5]}")

    train_keys = {rec.key for rec in split.train}
    corpus = sorted({text for key in train_keys
                     for text in (pairs[key].positive_text, pairs[key].negative_text)})
    autoencoder, _ = train_autoencoder(corpus, maxlen=cfg.ae_maxlen, lr=cfg.ae_lr,
                                       batch_size=cfg.ae_batch, epochs=cfg.ae_epochs,
                                       seed=seed)
    keys = sorted(pairs)
    pos = embed_many([pairs[k].positive_text for k in keys], autoencoder)
    neg = embed_many([pairs[k].negative_text for k in keys], autoencoder)
    for i, key in enumerate(keys):
        pairs[key].positive_embedding = pos[i]
        pairs[key].negative_embedding = neg[i]

    user_index, item_index = build_index(records, profiles)
    return PlantedRun(seed=seed, config=cfg, records=records, profiles=profiles,
                      reason_table=table, split=split, pairs=pairs,
                      autoencoder=autoencoder, user_index=user_index,
                      item_index=item_index, backend_calls=backend.calls)


def train_variant(run: PlantedRun, variant: str, train_records=None,
                  seed: int | None = None):
    """Train one variant on the run's data; stores and returns the params."""
    cfg = run.config
    seed = run.seed if seed is None else seed
    params = init_rec_params(run.user_index, run.item_index, variant=variant,
                             task=cfg.task, seed=seed)
    train(train_records if train_records is not None else run.split.train,
          run.pairs, params, lr=cfg.rec_lr, batch_size=cfg.rec_batch,
          epochs=cfg.rec_epochs, seed=seed)
    run.models[variant] = params
    return params


def evaluate_variant(run: PlantedRun, params, label: str = ""):
    """Test-set metrics plus predictions and attention matrices."""
    y_true = [binarize_rating(rec.rating) if run.config.task == "classification"
              else (rec.rating - 1.0) / 4.0
              for rec in run.split.test]
    preds, alphas = predict_batch(run.split.test, run.pairs, params)
    report = compute_metrics(y_true, preds, run.config.task, label=label)
    return report, preds, alphas


def quarter_subset(run: PlantedRun, fraction: float = 0.25):
    """Seeded random subset of the training records."""
    rng = np.random.default_rng(run.seed + 10_000)
    count = max(1, int(len(run.split.train) * fraction))
    idx = rng.choice(len(run.split.train), size=count, replace=False)
    return [run.split.train[i] for i in sorted(idx)]


@dataclass
class ComparisonResult:
    per_seed: list
    pooled_attention: object        # AttentionSummary over the full-variant runs

    def mean(self, key: str) -> float:
        return float(np.mean([row[key] for row in self.per_seed]))


def variant_comparison(seeds, config: PlantedConfig | None = None,
                       subset_fraction: float = 0.25) -> ComparisonResult:
    """Full vs no-explanations vs full-on-subset across seeds.

    Per seed, trains the full variant on all training data and on a seeded
    random subset, and the no-explanations variant on all training data.
    Returns per-seed test AUCs and the pooled attention summary of the
    full-variant models over all test records.
    """
    per_seed = []
    all_alphas = []
    all_preds = []
    for seed in seeds:
        run = prepare_planted_run(seed, config)
        row = {"seed": seed}
        params_full = train_variant(run, "full")
        report, preds, alphas = evaluate_variant(run, params_full, label="full")
        row["full_auc"] = report.auc
        all_alphas.append(alphas)
        all_preds.append(preds)

        params_base = train_variant(run, "no_explanations")
        base_report, _, _ = evaluate_variant(run, params_base, label="no_explanations")
        row["baseline_auc"] = base_report.auc

        subset = quarter_subset(run, subset_fraction)
        params_subset = init_rec_params(run.user_index, run.item_index,
                                        variant="full", task=run.config.task,
                                        seed=seed)
        train(subset, run.pairs, params_subset, lr=run.config.rec_lr,
              batch_size=run.config.rec_batch, epochs=run.config.rec_epochs,
              seed=seed)
        subset_report, _, _ = evaluate_variant(run, params_subset, label="full_subset")
        row["subset_auc"] = subset_report.auc
        per_seed.append(row)
        log.info("seed %d: full=%.4f baseline=%.4f subset=%.4f", seed,
                 row["full_auc"], row["baseline_auc"], row["subset_auc"])
    pooled = attention_summary(np.concatenate(all_alphas),
                               np.concatenate(all_preds))
    return ComparisonResult(per_seed=per_seed, pooled_attention=pooled)
