"""Interaction data: loading, validation, temporal splitting, synthetic generation.

File formats are line-delimited JSON. A records file carries one interaction
per line with fields ``user_id``, ``item_id``, ``rating``, ``ts`` and
``history`` (a JSON array of item ids, most recent last). A profiles file
carries ``item_id``, ``name`` and an optional ``profile`` string. These field
names are part of the on-disk contract.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError

log = logging.getLogger(__name__)

SENTINEL_ITEM = "<pad>"
DEFAULT_HISTORY_LEN = 5

# Latent item attributes for the synthetic generator. Sorted so that
# tie-breaking and complement rules are deterministic.
REASON_TOKENS = (
    "artisanal", "bold", "cozy", "durable", "elegant", "fresh",
    "minimal", "rustic", "sleek", "spicy", "vibrant", "whimsical",
)

RECORD_FIELDS = ("user_id", "item_id", "rating", "ts", "history")


@dataclass(frozen=True)
class InteractionRecord:
    """One (consumer, item, rating, timestamp, history) observation."""

    user_id: str
    item_id: str
    rating: float
    timestamp: int
    history: tuple[str, ...]

    @property
    def key(self) -> str:
        return f"{self.user_id}|{self.item_id}"


@dataclass(frozen=True)
class ItemProfile:
    item_id: str
    name: str
    augmented_profile: str | None = None

    def text(self) -> str:
        """Best available description: the augmented profile, else the name."""
        return self.augmented_profile or self.name


@dataclass
class DatasetSplit:
    train: list
    test: list
    ratio: float


def pad_history(history, history_len: int = DEFAULT_HISTORY_LEN) -> tuple[str, ...]:
    """Keep the most recent ``history_len`` items, front-padding with the sentinel."""
    items = list(history)[-history_len:]
    return tuple([SENTINEL_ITEM] * (history_len - len(items)) + items)


def _check_rating(rating, where: str = "") -> float:
    try:
        value = float(rating)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}rating {rating!r} is not a number") from None
    if not (1.0 <= value <= 5.0):
        raise ValidationError(f"{where}rating {value} outside [1, 5]")
    return value


def binarize_rating(rating) -> int:
    """High/low label: 1 for ratings of 4 or 5, 0 for 1 through 3."""
    return int(_check_rating(rating) >= 4.0)


def scale_rating(rating) -> float:
    """Map a rating in [1, 5] onto [0, 1] linearly."""
    return (_check_rating(rating) - 1.0) / 4.0


def unscale_rating(scaled) -> float:
    """Inverse of :func:`scale_rating`."""
    value = float(scaled)
    if not (0.0 <= value <= 1.0):
        raise ValidationError(f"scaled rating {value} outside [0, 1]")
    return 1.0 + 4.0 * value


def load_dataset(records_path, profiles_path=None, schema=None,
                 history_len: int = DEFAULT_HISTORY_LEN):
    """Load and validate a records file and an optional profiles file.

    ``schema`` maps the canonical field names to the names used in the file,
    e.g. ``{"user_id": "uid"}``; unmapped fields keep their canonical name.

    Returns (records, profiles). Raises ValidationError with the offending
    line number on malformed lines, out-of-range ratings, or duplicate
    (user, item, timestamp) triples.
    """
    mapping = dict(zip(RECORD_FIELDS, RECORD_FIELDS))
    if schema:
        unknown = set(schema) - set(RECORD_FIELDS)
        if unknown:
            raise ValidationError(f"schema maps unknown fields: {sorted(unknown)}")
        mapping.update(schema)

    records = []
    seen = set()
    path = Path(records_path)
    if not path.exists():
        raise ValidationError(f"records file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}: "
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{where}malformed line: {exc}") from None
            try:
                user = str(row[mapping["user_id"]])
                item = str(row[mapping["item_id"]])
                rating = row[mapping["rating"]]
                ts = row[mapping["ts"]]
                history = row[mapping["history"]]
            except KeyError as exc:
                raise ValidationError(f"{where}missing field {exc}") from None
            rating = _check_rating(rating, where)
            if not isinstance(history, list):
                raise ValidationError(f"{where}history must be an array")
            try:
                ts = int(ts)
            except (TypeError, ValueError):
                raise ValidationError(f"{where}ts {ts!r} is not an integer") from None
            triple = (user, item, ts)
            if triple in seen:
                raise ValidationError(f"{where}duplicate (user, item, ts) triple {triple}")
            seen.add(triple)
            records.append(InteractionRecord(
                user_id=user, item_id=item, rating=rating, timestamp=ts,
                history=pad_history([str(h) for h in history], history_len),
            ))

    profiles = []
    if profiles_path is not None:
        ppath = Path(profiles_path)
        if not ppath.exists():
            raise ValidationError(f"profiles file not found: {ppath}")
        seen_items = set()
        with open(ppath, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                where = f"{ppath}:{lineno}: "
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"{where}malformed line: {exc}") from None
                try:
                    item_id = str(row["item_id"])
                    name = str(row["name"])
                except KeyError as exc:
                    raise ValidationError(f"{where}missing field {exc}") from None
                if not name:
                    raise ValidationError(f"{where}empty item name")
                if item_id in seen_items:
                    raise ValidationError(f"{where}duplicate item_id {item_id!r}")
                seen_items.add(item_id)
                profile_text = row.get("profile") or None
                profiles.append(ItemProfile(item_id=item_id, name=name,
                                            augmented_profile=profile_text))
    return records, profiles


def save_records(records, path) -> None:
    """Write records as canonical line-delimited JSON (stable field order)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({
                "user_id": rec.user_id,
                "item_id": rec.item_id,
                "rating": rec.rating,
                "ts": rec.timestamp,
                "history": list(rec.history),
            }, sort_keys=True) + "\n")


def save_profiles(profiles, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for prof in profiles:
            row = {"item_id": prof.item_id, "name": prof.name}
            if prof.augmented_profile:
                row["profile"] = prof.augmented_profile
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def split_user_temporal(records, ratio: float) -> DatasetSplit:
    """Per-user temporal split: each user's earliest ceil(ratio*k) records train.

    Timestamp ties are broken by stable input order. Users with a single
    record go entirely to train (logged, not fatal). Emits a warning when the
    realized global train share drifts more than two points from ``ratio``.
    """
    if not (0.0 < ratio < 1.0):
        raise ValidationError(f"split ratio {ratio} outside (0, 1)")
    by_user: dict[str, list[int]] = {}
    for idx, rec in enumerate(records):
        by_user.setdefault(rec.user_id, []).append(idx)

    train_idx = set()
    single_users = 0
    for user, indices in by_user.items():
        ordered = sorted(indices, key=lambda i: records[i].timestamp)  # stable
        n_train = math.ceil(ratio * len(ordered))
        train_idx.update(ordered[:n_train])
        if len(ordered) == 1:
            single_users += 1

    train = [rec for i, rec in enumerate(records) if i in train_idx]
    test = [rec for i, rec in enumerate(records) if i not in train_idx]
    if single_users:
        log.warning("%d user(s) with a single record assigned to train only", single_users)
    if not test:
        log.warning("test split is empty: every user contributed all records to train")
    if records:
        share = len(train) / len(records)
        if abs(share - ratio) > 0.02:
            log.warning("global train share %.3f deviates from ratio %.3f by more than 0.02",
                        share, ratio)
    return DatasetSplit(train=train, test=test, ratio=ratio)


def majority_token(tokens) -> str | None:
    """Most common token; ties broken by sort order; None for an empty list."""
    counts = Counter(tokens)
    if not counts:
        return None
    best = max(counts.values())
    return min(tok for tok, cnt in counts.items() if cnt == best)


def history_majority_token(history, reason_table) -> str | None:
    """Majority reason token over the non-sentinel part of a history."""
    tokens = [reason_table[it] for it in history
              if it != SENTINEL_ITEM and it in reason_table]
    return majority_token(tokens)


def gen_synthetic_recsys(n_users: int, n_items: int,
                         history_len: int = DEFAULT_HISTORY_LEN, seed: int = 0, *,
                         records_per_user=(8, 16), n_tokens: int = 8,
                         candidate_match_rate: float = 0.5,
                         match_prob: float = 1.0, label_noise: float = 0.1,
                         history_impurity: float = 0.2):
    """Generate a planted-signal interaction dataset.

    Every item carries one latent reason token. Each user browses a stream of
    items drawn mostly from a home token; a record's label is 1 with
    probability ``match_prob`` when the candidate's token equals the majority
    token of the record's history (and ``1 - match_prob`` otherwise), then
    flipped with probability ``label_noise``. Ratings realize the label as
    4-5 (high) or 1-3 (low).

    Returns (records, profiles, reason_table) where reason_table maps
    item_id -> token; the table is what lets an offline text backend surface
    the planted tokens inside generated explanations.
    """
    if n_users < 1 or n_items < 1:
        raise ValidationError("n_users and n_items must be >= 1")
    if n_tokens > len(REASON_TOKENS):
        raise ValidationError(f"at most {len(REASON_TOKENS)} reason tokens available")
    rng = np.random.default_rng(seed)
    tokens = REASON_TOKENS[:n_tokens]

    item_ids = [f"i{k:04d}" for k in range(n_items)]
    reason_table = {iid: tokens[k % n_tokens] for k, iid in enumerate(item_ids)}
    profiles = [
        ItemProfile(
            item_id=iid,
            name=f"Product {k}",
            augmented_profile=(f"Product {k} is defined by its {reason_table[iid]} "
                               f"character and draws {reason_table[iid]} enthusiasts."),
        )
        for k, iid in enumerate(item_ids)
    ]
    by_token: dict[str, list[str]] = {tok: [] for tok in tokens}
    for iid in item_ids:
        by_token[reason_table[iid]].append(iid)

    lo, hi = records_per_user
    records = []
    for u in range(n_users):
        user_id = f"u{u:04d}"
        home = tokens[int(rng.integers(n_tokens))]

        def draw_stream_item():
            if rng.random() < history_impurity:
                return item_ids[int(rng.integers(n_items))]
            pool = by_token[home]
            return pool[int(rng.integers(len(pool)))]

        prefix = int(rng.integers(1, history_len + 1))
        stream = [draw_stream_item() for _ in range(prefix)]
        n_records = int(rng.integers(lo, hi + 1))
        for step in range(n_records):
            history = pad_history(stream, history_len)
            majority = history_majority_token(history, reason_table)
            want_match = rng.random() < candidate_match_rate
            if want_match and majority is not None:
                pool = by_token[majority]
            else:
                pool = [iid for iid in item_ids if reason_table[iid] != majority]
            candidate = pool[int(rng.integers(len(pool)))]
            is_match = reason_table[candidate] == majority
            p_high = match_prob if is_match else 1.0 - match_prob
            label = rng.random() < p_high
            if rng.random() < label_noise:
                label = not label
            rating = int(rng.integers(4, 6)) if label else int(rng.integers(1, 4))
            records.append(InteractionRecord(
                user_id=user_id, item_id=candidate, rating=float(rating),
                timestamp=step, history=history,
            ))
            stream.append(draw_stream_item())
    return records, profiles, reason_table
