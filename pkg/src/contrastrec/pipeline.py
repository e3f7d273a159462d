"""Staged pipeline with resumable, manifest-tracked artifacts.

Each stage owns one directory under the run's output directory and records a
manifest holding the config-section hash, the input file hashes, and the
output list. Re-running a stage whose manifest still matches is a no-op;
a config change refuses to overwrite existing outputs unless forced. One
stage runs at a time per output directory, enforced by a lock file.
Manifests carry no timestamps so repeated runs are byte-identical.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import figures
from .autoencoder import embed_many, load_autoencoder, save_autoencoder, train_autoencoder
from .config import RunConfig
from .dataset import (
    binarize_rating,
    gen_synthetic_recsys,
    load_dataset,
    save_profiles,
    save_records,
    scale_rating,
    split_user_temporal,
)
from .errors import ValidationError
from .evaluate import attention_summary, compute_metrics, keyword_frequencies
from .gateway import (
    BackendConfig,
    ExplanationCache,
    ExplanationPair,
    augment_profiles,
    generate_explanations_batch,
    make_backend,
)
from .recmodel import build_index, init_rec_params, load_rec_model, predict_batch, save_rec_model
from .serialize import load_arrays, save_arrays
from .theory import (
    convergence_experiment,
    eills_fit_smallp,
    gen_multi_env,
    rate_curves_nonlinear,
    selection_experiment,
    spurious_experiment,
)

log = logging.getLogger(__name__)

STAGE_ORDER = ("synth", "ingest", "augment", "explain", "train-ae", "train",
               "eval", "analyze", "theory")


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@contextmanager
def output_lock(outdir: Path):
    """One stage at a time per output directory."""
    outdir.mkdir(parents=True, exist_ok=True)
    lock_path = outdir / ".lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(
            f"another stage holds the lock {lock_path}; remove it if stale") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def _write_manifest(stage_dir: Path, stage: str, config_hash: str,
                    inputs: dict, outputs: list, stats: dict) -> dict:
    manifest = {
        "stage": stage,
        "config_hash": config_hash,
        "inputs": {str(k): v for k, v in sorted(inputs.items())},
        "outputs": sorted(str(p) for p in outputs),
        "stats": stats,
    }
    (stage_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest


def _load_manifest(stage_dir: Path):
    path = stage_dir / "manifest.json"
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None


def run_stage(outdir, stage: str, config_hash: str, inputs: list,
              build, force: bool = False) -> dict:
    """Run ``build(stage_dir)`` unless the existing manifest still matches.

    ``build`` returns (outputs, stats). Missing input files raise with the
    stage name; a changed config hash refuses to overwrite without force.
    """
    outdir = Path(outdir)
    stage_dir = outdir / stage
    for path in inputs:
        if not Path(path).exists():
            raise ValidationError(
                f"stage {stage!r} requires missing input {path}; "
                f"run the producing stage first")
    input_hashes = {str(p): file_hash(p) for p in inputs}
    with output_lock(outdir):
        manifest = _load_manifest(stage_dir)
        if manifest is not None:
            if (manifest.get("config_hash") == config_hash
                    and manifest.get("inputs") == {str(k): v for k, v in
                                                   sorted(input_hashes.items())}):
                log.info("stage %s: inputs and config unchanged, skipping", stage)
                return manifest
            if manifest.get("config_hash") != config_hash and not force:
                raise ValidationError(
                    f"stage {stage!r} was built with a different configuration; "
                    f"pass --force to overwrite")
        stage_dir.mkdir(parents=True, exist_ok=True)
        outputs, stats = build(stage_dir)
        return _write_manifest(stage_dir, stage, config_hash, input_hashes,
                               outputs, stats)


def _write_csv(path, header, rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return Path(path)


# ---------------------------------------------------------------------------
# Stage payloads
# ---------------------------------------------------------------------------

def _records_paths(cfg: RunConfig, outdir: Path):
    records = cfg["data"]["records"] or str(outdir / "synth" / "records.jsonl")
    profiles = cfg["data"]["profiles"] or str(outdir / "synth" / "profiles.jsonl")
    return Path(records), Path(profiles)


def stage_synth(cfg: RunConfig, force: bool = False) -> dict:
    outdir = Path(cfg["run"]["outdir"])
    data = cfg["data"]

    def build(stage_dir: Path):
        records, profiles, table = gen_synthetic_recsys(
            data["users"], data["items"], data["history_len"], cfg["run"]["seed"],
            n_tokens=data["tokens"], label_noise=data["label_noise"],
            history_impurity=data["history_impurity"],
            candidate_match_rate=data["match_rate"])
        rec_path = stage_dir / "records.jsonl"
        prof_path = stage_dir / "profiles.jsonl"
        table_path = stage_dir / "reason_tokens.json"
        save_records(records, rec_path)
        save_profiles(profiles, prof_path)
        table_path.write_text(json.dumps(table, sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")
        stats = {"records": len(records), "items": len(profiles)}
        return [rec_path, prof_path, table_path], stats

    return run_stage(outdir, "synth", cfg.section_hash("run", "data"), [], build,
                     force)


def stage_ingest(cfg: RunConfig, force: bool = False) -> dict:
    outdir = Path(cfg["run"]["outdir"])
    rec_path, prof_path = _records_paths(cfg, outdir)

    def build(stage_dir: Path):
        records, profiles = load_dataset(rec_path, prof_path,
                                         history_len=cfg["data"]["history_len"])
        out_rec = stage_dir / "records.jsonl"
        out_prof = stage_dir / "profiles.jsonl"
        save_records(records, out_rec)
        save_profiles(profiles, out_prof)
        split = split_user_temporal(records, cfg["data"]["split_ratio"])
        stats = {"records": len(records), "items": len(profiles),
                 "train": len(split.train), "test": len(split.test)}
        return [out_rec, out_prof], stats

    return run_stage(outdir, "ingest", cfg.section_hash("run", "data"),
                     [rec_path, prof_path], build, force)


def _backend_for(cfg: RunConfig, outdir: Path):
    backend_cfg = BackendConfig(
        kind=cfg["backend"]["kind"],
        endpoint=cfg["backend"]["endpoint"] or None,
        model_name=cfg["backend"]["model"] or None,
        timeout=cfg["backend"]["timeout"],
        max_concurrency=cfg["backend"]["max_concurrency"],
        retry_count=cfg["backend"]["retry_count"])
    reason_table = {}
    name_tokens = {}
    table_path = outdir / "synth" / "reason_tokens.json"
    if backend_cfg.kind == "stub" and table_path.exists():
        reason_table = json.loads(table_path.read_text(encoding="utf-8"))
        prof_path = outdir / "ingest" / "profiles.jsonl"
        if prof_path.exists():
            with open(prof_path, encoding="utf-8") as fh:
                for line in fh:
                    row = json.loads(line)
                    if row["item_id"] in reason_table:
                        name_tokens[row["name"]] = reason_table[row["item_id"]]
    return make_backend(backend_cfg, reason_table=reason_table,
                        name_tokens=name_tokens), backend_cfg


def _load_ingested(outdir: Path, cfg: RunConfig):
    records, profiles = load_dataset(outdir / "ingest" / "records.jsonl",
                                     outdir / "ingest" / "profiles.jsonl",
                                     history_len=cfg["data"]["history_len"])
    return records, profiles


def stage_augment(cfg: RunConfig, force: bool = False) -> dict:
    outdir = Path(cfg["run"]["outdir"])
    ingest_rec = outdir / "ingest" / "records.jsonl"
    ingest_prof = outdir / "ingest" / "profiles.jsonl"

    def build(stage_dir: Path):
        _, profiles = _load_ingested(outdir, cfg)
        backend, _ = _backend_for(cfg, outdir)
        cache = ExplanationCache(stage_dir / "cache.jsonl")
        enabled = cfg["backend"]["augment"]
        augmented = augment_profiles(profiles, backend, cache,
                                     domain=cfg["run"]["domain"], enabled=enabled)
        out_prof = stage_dir / "profiles.jsonl"
        save_profiles(augmented, out_prof)
        stats = {"augmented": int(enabled), "items": len(augmented),
                 "backend_calls": getattr(backend, "calls", 0)}
        return [out_prof], stats

    return run_stage(outdir, "augment", cfg.section_hash("run", "backend"),
                     [ingest_rec, ingest_prof], build, force)


def _profiles_for_prompts(outdir: Path, cfg: RunConfig):
    augment_path = outdir / "augment" / "profiles.jsonl"
    source = augment_path if augment_path.exists() else outdir / "ingest" / "profiles.jsonl"
    _, profiles = load_dataset(outdir / "ingest" / "records.jsonl", source,
                               history_len=cfg["data"]["history_len"])
    return {p.item_id: p for p in profiles}


def stage_explain(cfg: RunConfig, force: bool = False) -> dict:
    outdir = Path(cfg["run"]["outdir"])
    ingest_rec = outdir / "ingest" / "records.jsonl"

    def build(stage_dir: Path):
        records, _ = _load_ingested(outdir, cfg)
        profiles_by_id = _profiles_for_prompts(outdir, cfg)
        backend, backend_cfg = _backend_for(cfg, outdir)
        cache = ExplanationCache(stage_dir / "cache.jsonl")
        variant = cfg["model"]["variant"]
        pairs, pending = generate_explanations_batch(
            records, profiles_by_id, backend, cache,
            domain=cfg["run"]["domain"], variant=variant,
            max_concurrency=backend_cfg.max_concurrency)
        pairs_path = stage_dir / "pairs.jsonl"
        with open(pairs_path, "w", encoding="utf-8") as fh:
            for key in sorted(pairs):
                pair = pairs[key]
                fh.write(json.dumps({
                    "key": key, "positive": pair.positive_text,
                    "negative": pair.negative_text,
                    "fingerprint": pair.prompt_fingerprint,
                }, sort_keys=True) + "\n")
        pending_path = stage_dir / "pending.json"
        pending_path.write_text(json.dumps(pending, indent=2) + "\n", encoding="utf-8")
        stats = {"pairs": len(pairs), "pending": len(pending),
                 "backend_calls": getattr(backend, "calls", 0)}
        return [pairs_path, pending_path], stats

    return run_stage(outdir, "explain",
                     cfg.section_hash("run", "backend", "model"),
                     [ingest_rec], build, force)


def load_pairs(outdir: Path) -> dict:
    pairs_path = Path(outdir) / "explain" / "pairs.jsonl"
    pairs = {}
    with open(pairs_path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            user_id, item_id = row["key"].split("|", 1)
            pairs[row["key"]] = ExplanationPair(
                user_id=user_id, item_id=item_id,
                positive_text=row["positive"], negative_text=row["negative"],
                prompt_fingerprint=row["fingerprint"])
    return pairs


def stage_train_ae(cfg: RunConfig, force: bool = False) -> dict:
    outdir = Path(cfg["run"]["outdir"])
    pairs_path = outdir / "explain" / "pairs.jsonl"
    ingest_rec = outdir / "ingest" / "records.jsonl"
    ae_cfg = cfg["autoencoder"]

    def build(stage_dir: Path):
        records, _ = _load_ingested(outdir, cfg)
        split = split_user_temporal(records, cfg["data"]["split_ratio"])
        pairs = load_pairs(outdir)
        train_keys = {rec.key for rec in split.train}
        corpus = []
        for key in sorted(train_keys):
            pair = pairs.get(key)
            if pair is None:
                continue
            corpus.extend([pair.positive_text, pair.negative_text])
        if ae_cfg["dedupe"]:
            corpus = sorted(set(corpus))
        params, trace = train_autoencoder(
            corpus, maxlen=ae_cfg["maxlen"], dim=ae_cfg["dim"],
            hidden=ae_cfg["hidden"], lr=ae_cfg["lr"], batch_size=ae_cfg["batch"],
            epochs=ae_cfg["epochs"], seed=ae_cfg["seed"],
            mask_pad=ae_cfg["mask_pad"])
        model_path = stage_dir / "autoencoder.bin"
        save_autoencoder(params, model_path)
        trace_path = _write_csv(stage_dir / "loss_trace.csv", ["epoch", "loss"],
                                [(i + 1, loss) for i, loss in enumerate(trace)])
        fig_path = figures.save_loss_trace(trace, stage_dir / "loss_trace.png",
                                           title="autoencoder reconstruction loss")
        stats = {"corpus": len(corpus), "parameters": params.n_parameters(),
                 "final_loss": trace[-1] if trace else None}
        return [model_path, trace_path, fig_path], stats

    return run_stage(outdir, "train-ae",
                     cfg.section_hash("run", "data", "autoencoder"),
                     [pairs_path, ingest_rec], build, force)


def _embedded_pairs(outdir: Path, cfg: RunConfig):
    pairs = load_pairs(outdir)
    ae = load_autoencoder(outdir / "train-ae" / "autoencoder.bin")
    keys = sorted(pairs)
    pos = embed_many([pairs[k].positive_text for k in keys], ae)
    neg = embed_many([pairs[k].negative_text for k in keys], ae)
    for i, key in enumerate(keys):
        pairs[key].positive_embedding = pos[i]
        pairs[key].negative_embedding = neg[i]
    return pairs


def stage_train(cfg: RunConfig, force: bool = False) -> dict:
    outdir = Path(cfg["run"]["outdir"])
    model_cfg = cfg["model"]
    needs_ae = model_cfg["variant"] not in ("no_explanations", "free_params_substitute",
                                            "no_autoencoder")
    inputs = [outdir / "ingest" / "records.jsonl", outdir / "explain" / "pairs.jsonl"]
    if needs_ae:
        inputs.append(outdir / "train-ae" / "autoencoder.bin")

    def build(stage_dir: Path):
        from .recmodel import train as train_model

        records, profiles = _load_ingested(outdir, cfg)
        split = split_user_temporal(records, cfg["data"]["split_ratio"])
        pairs = _embedded_pairs(outdir, cfg) if needs_ae else load_pairs(outdir)
        user_index, item_index = build_index(records, profiles)
        params = init_rec_params(user_index, item_index,
                                 variant=model_cfg["variant"],
                                 task=model_cfg["task"], seed=model_cfg["seed"],
                                 linear_head=model_cfg["linear_head"])
        params, trace = train_model(split.train, pairs, params,
                                    lr=model_cfg["lr"], batch_size=model_cfg["batch"],
                                    epochs=model_cfg["epochs"], seed=model_cfg["seed"])
        ckpt = stage_dir / "checkpoint.bin"
        save_rec_model(params, ckpt, hyper={k: model_cfg[k] for k in
                                            ("task", "variant", "lr", "batch",
                                             "epochs", "seed")})
        trace_path = _write_csv(stage_dir / "loss_trace.csv", ["epoch", "loss"],
                                [(i + 1, loss) for i, loss in enumerate(trace)])
        fig_path = figures.save_loss_trace(trace, stage_dir / "loss_trace.png",
                                           title=f"{model_cfg['variant']} training loss")
        stats = {"train_records": len(split.train),
                 "parameters": params.n_parameters(),
                 "final_loss": trace[-1] if trace else None}
        return [ckpt, trace_path, fig_path], stats

    return run_stage(outdir, "train",
                     cfg.section_hash("run", "data", "autoencoder", "model"),
                     inputs, build, force)


def stage_eval(cfg: RunConfig, force: bool = False) -> dict:
    outdir = Path(cfg["run"]["outdir"])

    def build(stage_dir: Path):
        records, _ = _load_ingested(outdir, cfg)
        split = split_user_temporal(records, cfg["data"]["split_ratio"])
        params = load_rec_model(outdir / "train" / "checkpoint.bin")
        # the checkpoint, not the config, decides whether embeddings exist
        needs_ae = params.variant not in ("no_explanations", "free_params_substitute",
                                          "no_autoencoder")
        if needs_ae and not (outdir / "train-ae" / "autoencoder.bin").exists():
            raise ValidationError(
                f"variant {params.variant!r} needs the autoencoder; run train-ae first")
        pairs = _embedded_pairs(outdir, cfg) if needs_ae else load_pairs(outdir)
        task = params.task
        y_true = [binarize_rating(r.rating) if task == "classification"
                  else scale_rating(r.rating) for r in split.test]
        preds, alphas = predict_batch(split.test, pairs, params)
        report = compute_metrics(y_true, preds, task, label=params.variant)
        metrics_csv = _write_csv(stage_dir / "metrics.csv",
                                 ["label", "task", "n", "rmse", "mae", "auc"],
                                 [(report.label, task, report.n, report.rmse,
                                   report.mae,
                                   "" if report.auc is None else report.auc)])
        metrics_jsonl = stage_dir / "metrics.jsonl"
        with open(metrics_jsonl, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(report.as_dict(), sort_keys=True) + "\n")
        preds_csv = _write_csv(stage_dir / "predictions.csv",
                               ["key", "y_true", "y_pred"],
                               [(rec.key, y, float(p)) for rec, y, p in
                                zip(split.test, y_true, preds)])
        alphas_path = stage_dir / "alphas.bin"
        save_arrays(alphas_path, {"alphas": alphas, "predictions": preds},
                    {"kind": "attention", "variant": params.variant})
        stats = {"n_test": report.n, "rmse": report.rmse, "mae": report.mae,
                 "auc": report.auc}
        return [metrics_csv, metrics_jsonl, preds_csv, alphas_path], stats

    return run_stage(outdir, "eval",
                     cfg.section_hash("run", "data", "autoencoder", "model"),
                     [outdir / "train" / "checkpoint.bin",
                      outdir / "ingest" / "records.jsonl"], build, force)


def stage_analyze(cfg: RunConfig, top_k: int = 10, force: bool = False) -> dict:
    outdir = Path(cfg["run"]["outdir"])

    def build(stage_dir: Path):
        arrays, _ = load_arrays(outdir / "eval" / "alphas.bin")
        summary = attention_summary(arrays["alphas"], arrays["predictions"])
        outputs = []
        for group in ("high", "low"):
            path = _write_csv(stage_dir / f"attention_hist_{group}.csv",
                              ["bin_lo", "bin_hi", "count_pos", "count_neg"],
                              summary.histogram_rows(group))
            outputs.append(path)
            outputs.append(figures.save_attention_histogram(
                summary, group, stage_dir / f"attention_hist_{group}.png"))
        shares_csv = _write_csv(stage_dir / "attention_shares.csv",
                                ["slot", "share"],
                                list(zip(summary.slot_names,
                                         (float(s) for s in summary.shares))))
        outputs.append(shares_csv)
        outputs.append(figures.save_attention_pie(summary,
                                                  stage_dir / "attention_shares.png"))
        means_csv = _write_csv(
            stage_dir / "attention_means.csv",
            ["slot", "mean_high", "mean_low", "mean_all"],
            [(slot, summary.mean(slot, "high"), summary.mean(slot, "low"),
              summary.mean(slot, "all")) for slot in summary.slot_names])
        outputs.append(means_csv)

        pairs = load_pairs(outdir)
        for polarity in ("positive", "negative"):
            ranked = keyword_frequencies(list(pairs.values()), polarity, top_k=top_k)
            outputs.append(_write_csv(stage_dir / f"keywords_{polarity}.csv",
                                      ["word", "count"], ranked))
        stats = {"records": int(summary.per_record.shape[0]),
                 "share_pos": float(summary.shares[0]),
                 "share_neg": float(summary.shares[1])}
        return outputs, stats

    return run_stage(outdir, "analyze", cfg.section_hash("run"),
                     [outdir / "eval" / "alphas.bin",
                      outdir / "explain" / "pairs.jsonl"], build, force)


def stage_theory(cfg: RunConfig, force: bool = False) -> dict:
    outdir = Path(cfg["run"]["outdir"])
    theory_cfg = cfg["theory"]
    experiment = theory_cfg["experiment"]
    trials = theory_cfg["trials"]
    seed = theory_cfg["seed"]

    def build(stage_dir: Path):
        header = ["method", "n", "p", "s", "mean_err", "sd"]
        if experiment == "rates":
            rows = convergence_experiment([1000], [200, 1000, 5000], s_star=20,
                                          trials=trials, seed=seed)
            rows += convergence_experiment([250, 500, 1000, 2000, 4000], [200],
                                           s_star=20, trials=trials, seed=seed,
                                           lasso_constant=0.5)
        elif experiment == "nonlinear-rates":
            rows = rate_curves_nonlinear(10_000, 20, [20, 50, 100, 200, 500, 1000])
        elif experiment == "selection":
            rate = selection_experiment(trials=trials, seed=seed)
            sd = float(np.sqrt(rate * (1 - rate) / trials))
            rows = [{"method": "eills_support_recovery", "n": 500, "p": 8, "s": 3,
                     "mean_err": rate, "sd": sd}]
        elif experiment == "eills":
            envs = gen_multi_env(500, 8, 3, n_envs=2, seed=seed)
            report = eills_fit_smallp(envs, gamma=0.05, lam=40.0)
            rows = [{"method": "eills_fit", "n": 500, "p": 8, "s": len(report.support),
                     "mean_err": report.l2_error, "sd": 0.0}]
        elif experiment == "lemma2":
            single, multi = spurious_experiment(trials=trials, seed=seed)
            rows = [
                {"method": "single_env_spurious_rate", "n": 500, "p": 9, "s": 3,
                 "mean_err": single, "sd": 0.0},
                {"method": "eills_spurious_rate", "n": 500, "p": 9, "s": 3,
                 "mean_err": multi, "sd": 0.0},
            ]
        else:
            raise ValidationError(f"unknown theory experiment {experiment!r}")
        csv_path = _write_csv(stage_dir / f"{experiment}.csv", header,
                              [(r["method"], r["n"], r["p"], r["s"],
                                r["mean_err"], r["sd"]) for r in rows])
        outputs = [csv_path]
        if experiment in ("rates", "nonlinear-rates"):
            outputs.append(figures.save_rate_curves(rows,
                                                    stage_dir / f"{experiment}.png"))
        stats = {"experiment": experiment, "rows": len(rows)}
        return outputs, stats

    return run_stage(outdir, "theory", cfg.section_hash("run", "theory"), [],
                     build, force)


STAGES = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "augment": stage_augment,
    "explain": stage_explain,
    "train-ae": stage_train_ae,
    "train": stage_train,
    "eval": stage_eval,
    "analyze": stage_analyze,
    "theory": stage_theory,
}
