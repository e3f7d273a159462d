"""Text-generation gateway: pluggable backends, prompt dispatch, and caching.

Two backends are provided. The stub backend is fully deterministic and
offline: it parses the rendered prompt, optionally surfaces planted reason
tokens (see :mod:`contrastrec.dataset`), and fills a fixed sentence template
per polarity. The HTTP backend posts a single-message chat-completion request
and reads the first choice's message content.

Generated texts are cached in an append-only line-delimited JSON file keyed
by (key, polarity, prompt fingerprint); the last writer wins per key, so a
crashed run can resume by replaying the file.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .dataset import SENTINEL_ITEM, majority_token
from .errors import BackendError, ValidationError
from .prompts import (
    HISTORY_JOINER,
    SENTINEL_PLACEHOLDER,
    build_explanation_prompt,
    build_profile_prompt,
    history_texts,
)

log = logging.getLogger(__name__)

MAX_EXPLANATION_WORDS = 50
EMBEDDING_DIM = 8


@dataclass
class ExplanationPair:
    """Positive and negative explanation texts (and embeddings) for one record."""

    user_id: str
    item_id: str
    positive_text: str
    negative_text: str
    positive_embedding: object = None   # optional 8-vector, filled after encoding
    negative_embedding: object = None
    prompt_fingerprint: str = ""

    @property
    def key(self) -> str:
        return f"{self.user_id}|{self.item_id}"


@dataclass
class BackendConfig:
    kind: str = "stub"
    endpoint: str | None = None
    model_name: str | None = None
    timeout: float = 30.0
    max_concurrency: int = 1
    retry_count: int = 2

    def validate(self) -> "BackendConfig":
        if self.kind not in ("stub", "http"):
            raise ValidationError(f"unknown backend kind {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ValidationError("http backend requires an endpoint")
        if self.max_concurrency < 1:
            raise ValidationError("max_concurrency must be >= 1")
        return self


def prompt_fingerprint(*prompts: str) -> str:
    """Stable hash over the rendered prompt texts."""
    digest = hashlib.sha256("\x1e".join(prompts).encode("utf-8"))
    return digest.hexdigest()


def truncate_words(text: str, limit: int = MAX_EXPLANATION_WORDS) -> str:
    words = text.split()
    return " ".join(words[:limit])


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

# Marker pairs used to pull the [Input] block out of a rendered prompt. The
# final occurrence is taken so few-shot example blocks are skipped.
_BLOCK_MARKERS = [
    ("Past Hotel Profiles:", "Current Hotel Profile:"),
    ("Past Restaurant Profiles:", "Current Restaurant Profile:"),
    ("Past Product Profiles:", "Current Product Profile:"),
    ("Past Movie Profiles:", "Current Movie Profile:"),
]
_INLINE_HISTORY = re.compile(
    r"history of this consumer (.*?), can you", re.DOTALL)
_INLINE_CANDIDATE = re.compile(
    r"with profile (.*?)\? Answer", re.DOTALL)


def _extract_slots(prompt: str):
    """Recover (history text, candidate text) from a rendered prompt."""
    for past_marker, current_marker in _BLOCK_MARKERS:
        past_at = prompt.rfind(past_marker)
        cur_at = prompt.rfind(current_marker)
        if past_at >= 0 and cur_at > past_at:
            history = prompt[past_at + len(past_marker):cur_at].strip()
            candidate = prompt[cur_at + len(current_marker):].strip()
            return history, candidate
    hist_m = _INLINE_HISTORY.search(prompt)
    cand_m = _INLINE_CANDIDATE.search(prompt)
    history = hist_m.group(1).strip() if hist_m else ""
    candidate = cand_m.group(1).strip() if cand_m else ""
    return history, candidate


def _first_word(text: str) -> str:
    for word in re.findall(r"[A-Za-z0-9']+", text):
        return word.lower()
    return "something"


class StubBackend:
    """Deterministic offline completer driven by the prompt text alone.

    ``reason_table`` maps item ids to reason tokens; ``name_tokens`` maps
    display names (as they appear in profile prompts) to tokens so profile
    augmentation can surface the token as well. When tokens are known they
    fill the completion templates; otherwise the first word of the relevant
    profile text is used.
    """

    def __init__(self, reason_table=None, name_tokens=None):
        self.reason_table = dict(reason_table or {})
        self.name_tokens = dict(name_tokens or {})
        self.tokens = tuple(sorted(set(self.reason_table.values())))
        self.calls = 0

    # -- token helpers ----------------------------------------------------
    def _tokens_in(self, text: str):
        return [tok for tok in self.tokens if re.search(rf"\b{tok}\b", text)]

    def _first_token(self, text: str):
        found = self._tokens_in(text)
        return found[0] if found else None

    def _majority_history_token(self, history_text: str):
        per_entry = []
        for entry in history_text.split(HISTORY_JOINER):
            entry = entry.strip()
            if not entry or entry == SENTINEL_PLACEHOLDER:
                continue
            tok = self._first_token(entry)
            if tok is not None:
                per_entry.append(tok)
        return majority_token(per_entry)

    def _decoy_tokens(self, prompt: str, exclude: str):
        """Deterministic pseudo-random (a, b) with a != exclude and b != a."""
        digest = hashlib.sha256(prompt.encode("utf-8")).digest()
        h = int.from_bytes(digest[:8], "big")
        pool_a = [t for t in self.tokens if t != exclude] or [f"not {exclude}"]
        a = pool_a[h % len(pool_a)]
        pool_b = [t for t in self.tokens if t != a] or [f"other than {a}"]
        b = pool_b[(h // 997) % len(pool_b)]
        return a, b

    # -- completion -------------------------------------------------------
    def complete(self, prompt: str) -> str:
        """Fill the polarity template for a parsed prompt.

        The positive text always tells the true story: it names the
        majority-history token and the candidate token. The negative text is
        truthful when the candidate genuinely mismatches the history (it
        names the same pair) and otherwise fabricates a counterfactual from
        the complement of the majority token, the way a real explainer
        invents a reason for the outcome that did not happen.
        """
        self.calls += 1
        if "Create a succinct profile" in prompt:
            return self._profile_completion(prompt)
        noun = self._noun(prompt)
        history_text, candidate_text = _extract_slots(prompt)
        hist_token = self._majority_history_token(history_text) or _first_word(history_text)
        cand_token = self._first_token(candidate_text) or _first_word(candidate_text)
        if "aspect terms" in prompt:
            return f"{hist_token}, {cand_token}, quality, value"
        if "summary of the consumer preference" in prompt:
            return (f"The consumer consistently prefers {hist_token} {noun}s "
                    f"and gravitates toward similar options.")
        if "infer whether" in prompt:
            liked = cand_token == hist_token
            stance = "would enjoy" if liked else "may not enjoy"
            return (f"The consumer {stance} this {noun} because the consumer "
                    f"likes {hist_token} and the {noun} is {cand_token}.")
        verb, negated = self._verbs(prompt, noun)
        likes, product = hist_token, cand_token
        if negated and cand_token == hist_token:
            likes, product = self._decoy_tokens(prompt, hist_token)
        return (f"The consumer {verb} this {noun} because the consumer likes "
                f"{likes} and the {noun} is {product}.")

    def _profile_completion(self, prompt: str) -> str:
        name = prompt.rsplit("[Input]", 1)[-1].strip()
        token = self.name_tokens.get(name) or self.reason_table.get(name)
        if token is None:
            token = self._first_token(name)
        if token is None:
            return f"{name} is a dependable choice with broad appeal."
        return (f"{name} is known for its {token} character and appeals to "
                f"{token} enthusiasts.")

    @staticmethod
    def _noun(prompt: str) -> str:
        for noun in ("hotel", "restaurant", "movie", "product"):
            if noun in prompt:
                return noun
        return "product"

    def _verbs(self, prompt: str, noun: str):
        negated = "did not" in prompt
        verbs = {"hotel": "stayed at", "restaurant": "visited",
                 "movie": "watched", "product": "purchased"}
        neg_verbs = {"hotel": "did not stay at", "restaurant": "did not visit",
                     "movie": "did not watch", "product": "did not purchase"}
        return (neg_verbs[noun] if negated else verbs[noun]), negated


class HttpBackend:
    """Chat-completion HTTP backend: one POST per prompt, retried on failure."""

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg.validate()
        self.calls = 0

    def complete(self, prompt: str) -> str:
        cfg = self.cfg
        payload = json.dumps({
            "model": cfg.model_name or "default",
            "messages": [{"role": "user", "content": prompt}],
        }).encode("utf-8")
        last_error = "no attempt made"
        for attempt in range(cfg.retry_count + 1):
            self.calls += 1
            request = urllib.request.Request(
                cfg.endpoint, data=payload,
                headers={"Content-Type": "application/json"})
            try:
                with urllib.request.urlopen(request, timeout=cfg.timeout) as resp:
                    body = json.loads(resp.read().decode("utf-8"))
                text = body["choices"][0]["message"]["content"]
                if not isinstance(text, str) or not text.strip():
                    last_error = "empty completion"
                    continue
                return text
            except (urllib.error.URLError, OSError, json.JSONDecodeError,
                    KeyError, IndexError, TypeError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
        raise BackendError(
            f"backend failed after {cfg.retry_count + 1} attempt(s): {last_error}",
            fingerprint=prompt_fingerprint(prompt))


def make_backend(cfg: BackendConfig, reason_table=None, name_tokens=None):
    cfg.validate()
    if cfg.kind == "stub":
        return StubBackend(reason_table=reason_table, name_tokens=name_tokens)
    return HttpBackend(cfg)


def _resolve_backend(backend_or_cfg):
    if isinstance(backend_or_cfg, BackendConfig):
        return make_backend(backend_or_cfg)
    if hasattr(backend_or_cfg, "complete"):
        return backend_or_cfg
    raise ValidationError(f"not a backend or BackendConfig: {backend_or_cfg!r}")


def generate(prompt: str, backend_or_cfg) -> str:
    """One completion for one prompt; raises BackendError on permanent failure."""
    backend = _resolve_backend(backend_or_cfg)
    text = backend.complete(prompt)
    if not text or not text.strip():
        raise BackendError("backend returned an empty completion",
                           fingerprint=prompt_fingerprint(prompt))
    return text


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------

class ExplanationCache:
    """Append-only completion cache, replayed on construction.

    Entries are line-delimited JSON with fields ``key``, ``polarity``,
    ``text``, ``fingerprint``. Appends are serialized through a lock; since
    keys are unique per completion, replay order does not matter beyond
    last-writer-wins.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[tuple, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._replay()

    def _replay(self):
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    self._entries[(row["key"], row["polarity"], row["fingerprint"])] = row["text"]
                except (json.JSONDecodeError, KeyError):
                    log.warning("%s:%d: skipping unreadable cache line", self.path, lineno)

    def __len__(self):
        return len(self._entries)

    def get(self, key: str, polarity: str, fingerprint: str):
        return self._entries.get((key, polarity, fingerprint))

    def put(self, key: str, polarity: str, fingerprint: str, text: str) -> None:
        with self._lock:
            self._entries[(key, polarity, fingerprint)] = text
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({
                        "key": key, "polarity": polarity,
                        "text": text, "fingerprint": fingerprint,
                    }, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Record-level drivers
# ---------------------------------------------------------------------------

# Which polarities each generation variant needs.
VARIANT_POLARITIES = {
    "full": ("positive", "negative"),
    "pos_only": ("positive", "negative"),
    "neg_only": ("positive", "negative"),
    "no_explanations": ("positive", "negative"),
    "no_autoencoder": ("positive", "negative"),
    "no_profile_augmentation": ("positive", "negative"),
    "free_params_substitute": ("positive", "negative"),
    "ncf_head": ("positive", "negative"),
    "aspect_only": ("aspect",),
    "general_only": ("general",),
    "summary_only": ("summary",),
}


def generate_explanations(record, profiles_by_id, backend_or_cfg, cache,
                          domain: str = "product",
                          variant: str = "full") -> ExplanationPair:
    """Generate (or fetch from cache) the explanation texts for one record.

    Both polarities are produced for every record regardless of its label;
    single-prompt variants (aspect/general/summary) store their lone text in
    both pair fields and only the positive slot is consumed downstream.
    Completions are truncated to 50 words. On backend failure the record is
    left pending (BackendError propagates) and the run can resume from cache.
    """
    polarities = VARIANT_POLARITIES.get(variant)
    if polarities is None:
        raise ValidationError(f"unknown variant {variant!r}")
    history = history_texts(record, profiles_by_id)
    candidate_prof = profiles_by_id.get(record.item_id)
    candidate_text = candidate_prof.text() if candidate_prof else record.item_id
    prompts = {
        pol: build_explanation_prompt(history, candidate_text, pol, domain)
        for pol in polarities
    }
    fingerprint = prompt_fingerprint(*(prompts[p] for p in polarities))

    backend = _resolve_backend(backend_or_cfg)
    texts = {}
    for pol in polarities:
        cached = cache.get(record.key, pol, fingerprint) if cache is not None else None
        if cached is not None:
            texts[pol] = cached
            continue
        completion = truncate_words(generate(prompts[pol], backend))
        texts[pol] = completion
        if cache is not None:
            cache.put(record.key, pol, fingerprint, completion)

    if polarities == ("positive", "negative"):
        positive, negative = texts["positive"], texts["negative"]
    else:
        positive = negative = texts[polarities[0]]
    return ExplanationPair(
        user_id=record.user_id, item_id=record.item_id,
        positive_text=positive, negative_text=negative,
        prompt_fingerprint=fingerprint,
    )


def generate_explanations_batch(records, profiles_by_id, backend_or_cfg, cache,
                                domain: str = "product", variant: str = "full",
                                max_concurrency: int = 1):
    """Generate explanations for many records, deduplicated by (user, item).

    Returns (pairs_by_key, pending_keys): records whose backend calls failed
    permanently are reported in ``pending_keys`` instead of aborting the run.
    """
    backend = _resolve_backend(backend_or_cfg)
    unique: dict[str, object] = {}
    for rec in records:
        unique.setdefault(rec.key, rec)

    pairs: dict[str, ExplanationPair] = {}
    pending: list[str] = []

    def work(rec):
        return generate_explanations(rec, profiles_by_id, backend, cache,
                                     domain=domain, variant=variant)

    items = list(unique.values())
    if max_concurrency <= 1:
        for rec in items:
            try:
                pairs[rec.key] = work(rec)
            except BackendError as exc:
                log.warning("record %s left pending: %s", rec.key, exc)
                pending.append(rec.key)
    else:
        with ThreadPoolExecutor(max_workers=max_concurrency) as pool:
            futures = {pool.submit(work, rec): rec for rec in items}
            for future, rec in futures.items():
                try:
                    pairs[rec.key] = future.result()
                except BackendError as exc:
                    log.warning("record %s left pending: %s", rec.key, exc)
                    pending.append(rec.key)
    return pairs, sorted(pending)


def augment_profiles(profiles, backend_or_cfg, cache, domain: str = "product",
                     enabled: bool = True):
    """Fill ``augmented_profile`` for each item via the profile prompt.

    With ``enabled=False`` the items are returned unchanged and downstream
    prompts fall back to item names. Cached completions are keyed by item id
    and the profile-prompt fingerprint.
    """
    if not enabled:
        return list(profiles)
    backend = _resolve_backend(backend_or_cfg)
    out = []
    for prof in profiles:
        prompt = build_profile_prompt(prof, domain)
        fingerprint = prompt_fingerprint(prompt)
        cached = cache.get(prof.item_id, "profile", fingerprint) if cache is not None else None
        if cached is None:
            cached = truncate_words(generate(prompt, backend))
            if cache is not None:
                cache.put(prof.item_id, "profile", fingerprint, cached)
        out.append(replace(prof, augmented_profile=cached))
    return out
