"""Prompt corpus preparation: ingest, near-duplicate removal, shuffle, split.

Near-duplicate detection is MinHash over word shingles with banded LSH
candidate lookup, so dedup cost stays near-linear in corpus size.
"""

from __future__ import annotations

import hashlib
import logging
import random
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Hashable, Iterable, Sequence

from .jsonl import read_jsonl

logger = logging.getLogger(__name__)

DEFAULT_CATEGORIES = (
    "mathematics",
    "coding",
    "reasoning",
    "summarization",
    "creative-writing",
)

SPLIT_TRAIN = "train"
SPLIT_VALIDATION = "validation"
SPLIT_UNASSIGNED = "unassigned"

# Mersenne prime; modulus for the universal hash family h(x) = (a*x + b) mod P.
_MERSENNE_P = (1 << 61) - 1

DEFAULT_NUM_PERMS = 128
DEFAULT_SHINGLE_SIZE = 3
DEFAULT_LSH_BANDS = 32
DEFAULT_JACCARD_THRESHOLD = 0.8
_CHAR_SHINGLE_WIDTH = 4

_PUNCT_RE = re.compile(r"[^\w\s]+", flags=re.UNICODE)


class IngestError(Exception):
    """A source file could not be read during ingest."""


@dataclass
class PromptRecord:
    id: str
    text: str
    category: str
    source: str
    split: str = SPLIT_UNASSIGNED

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "category": self.category,
            "source": self.source,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, row: dict[str, Any]) -> "PromptRecord":
        return cls(
            id=str(row["id"]),
            text=str(row["text"]),
            category=str(row["category"]),
            source=str(row.get("source", "")),
            split=str(row.get("split", SPLIT_UNASSIGNED)),
        )


def normalize_categories(names: Iterable[str]) -> tuple[str, ...]:
    """Case-normalize a label set, rejecting duplicates and empties."""
    seen: dict[str, None] = {}
    for name in names:
        cleaned = name.strip().lower()
        if not cleaned:
            raise ValueError("empty category name")
        if cleaned in seen:
            raise ValueError(f"duplicate category name: {cleaned!r}")
        seen[cleaned] = None
    if not seen:
        raise ValueError("category label set is empty")
    return tuple(seen)


def ingest(
    files: Sequence[str | Path],
    category: str,
    categories: Sequence[str] = DEFAULT_CATEGORIES,
) -> tuple[list[PromptRecord], int]:
    """Read JSONL sources into fresh PromptRecords for one category.

    Each input line must be an object with a non-empty ``text`` field;
    other lines are counted and skipped. Returns (records, skipped_count).
    Ids are fresh within the call, so listing a file twice yields records
    twice under distinct ids.
    """
    label_set = normalize_categories(categories)
    label = category.strip().lower()
    if label not in label_set:
        raise ValueError(f"category {label!r} not in configured set {label_set}")

    records: list[PromptRecord] = []
    skipped = 0
    seq = 0
    for path in files:
        source = Path(path).name
        try:
            rows = list(read_jsonl(path))
        except (OSError, ValueError) as exc:
            raise IngestError(f"cannot ingest source {path}: {exc}") from exc
        for row in rows:
            text = row.get("text")
            if not isinstance(text, str) or not text.strip():
                skipped += 1
                continue
            records.append(
                PromptRecord(
                    id=f"{label}-{seq:06d}",
                    text=text,
                    category=label,
                    source=source,
                )
            )
            seq += 1
    if skipped:
        logger.info("ingest skipped %d malformed lines", skipped)
    if not records:
        logger.warning("ingest produced an empty record set")
    return records, skipped


@dataclass(frozen=True)
class MinHashSignature:
    values: tuple[int, ...]
    num_perms: int
    shingle_size: int
    char_fallback: bool = False

    def __post_init__(self) -> None:
        if len(self.values) != self.num_perms:
            raise ValueError("signature length must equal num_perms")


def word_shingles(text: str, shingle_size: int = DEFAULT_SHINGLE_SIZE) -> set[str]:
    """Word n-gram shingle set: lowercased, punctuation stripped."""
    words = _PUNCT_RE.sub(" ", text.lower()).split()
    if len(words) < shingle_size:
        return set()
    return {" ".join(words[i : i + shingle_size]) for i in range(len(words) - shingle_size + 1)}


def char_shingles(text: str, width: int = _CHAR_SHINGLE_WIDTH) -> set[str]:
    cleaned = text.lower()
    if len(cleaned) <= width:
        return {cleaned}
    return {cleaned[i : i + width] for i in range(len(cleaned) - width + 1)}


def _shingle_hash(shingle: str) -> int:
    digest = hashlib.blake2b(shingle.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@lru_cache(maxsize=8)
def _permutation_params(num_perms: int, seed: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    rng = random.Random(seed)
    coef_a = tuple(rng.randrange(1, _MERSENNE_P) for _ in range(num_perms))
    coef_b = tuple(rng.randrange(0, _MERSENNE_P) for _ in range(num_perms))
    return coef_a, coef_b


def minhash_signature(
    text: str,
    num_perms: int = DEFAULT_NUM_PERMS,
    shingle_size: int = DEFAULT_SHINGLE_SIZE,
    seed: int = 0,
) -> MinHashSignature:
    """MinHash signature of a text's word-shingle set.

    Texts shorter than ``shingle_size`` words fall back to character
    shingles of width 4, flagged on the returned signature.
    """
    if num_perms < 16:
        raise ValueError("num_perms must be at least 16")
    if shingle_size < 1:
        raise ValueError("shingle_size must be at least 1")
    if not text.strip():
        raise ValueError("text is empty")

    shingles = word_shingles(text, shingle_size)
    fallback = False
    if not shingles:
        shingles = char_shingles(text)
        fallback = True

    coef_a, coef_b = _permutation_params(num_perms, seed)
    hashes = [_shingle_hash(s) for s in shingles]
    values = []
    for a, b in zip(coef_a, coef_b):
        values.append(min((a * x + b) % _MERSENNE_P for x in hashes))
    return MinHashSignature(
        values=tuple(values),
        num_perms=num_perms,
        shingle_size=shingle_size,
        char_fallback=fallback,
    )


def estimated_jaccard(sig_a: MinHashSignature, sig_b: MinHashSignature) -> float:
    if sig_a.num_perms != sig_b.num_perms or sig_a.shingle_size != sig_b.shingle_size:
        raise ValueError("signatures built with different parameters")
    matches = sum(1 for x, y in zip(sig_a.values, sig_b.values) if x == y)
    return matches / sig_a.num_perms


def _band_keys(sig: MinHashSignature, bands: int) -> list[tuple[int, int]]:
    rows = sig.num_perms // bands
    keys = []
    for band in range(bands):
        chunk = sig.values[band * rows : (band + 1) * rows]
        digest = hashlib.blake2b(repr(chunk).encode(), digest_size=8).digest()
        keys.append((band, int.from_bytes(digest, "little")))
    return keys


def dedup(
    records: Sequence[PromptRecord],
    jaccard_threshold: float = DEFAULT_JACCARD_THRESHOLD,
    num_perms: int = DEFAULT_NUM_PERMS,
    shingle_size: int = DEFAULT_SHINGLE_SIZE,
    bands: int = DEFAULT_LSH_BANDS,
    seed: int = 0,
) -> tuple[list[PromptRecord], list[tuple[str, str]]]:
    """Remove near-duplicates, keeping the earlier record in input order.

    A record is removed when some earlier kept record shares an LSH band
    bucket and their estimated Jaccard is at or above the threshold.
    Returns (kept, removed) where removed pairs are (id, duplicate_of_id).
    """
    if not 0 < jaccard_threshold <= 1:
        raise ValueError("jaccard_threshold must be in (0, 1]")
    if num_perms % bands != 0:
        raise ValueError("bands must divide num_perms")

    kept: list[PromptRecord] = []
    removed: list[tuple[str, str]] = []
    buckets: dict[tuple[int, int], list[int]] = {}
    kept_sigs: list[MinHashSignature] = []

    for record in records:
        sig = minhash_signature(record.text, num_perms, shingle_size, seed)
        keys = _band_keys(sig, bands)
        candidates: list[int] = []
        seen: set[int] = set()
        for key in keys:
            for idx in buckets.get(key, ()):
                if idx not in seen:
                    seen.add(idx)
                    candidates.append(idx)
        duplicate_of: str | None = None
        for idx in sorted(candidates):
            if estimated_jaccard(sig, kept_sigs[idx]) >= jaccard_threshold:
                duplicate_of = kept[idx].id
                break
        if duplicate_of is not None:
            removed.append((record.id, duplicate_of))
            continue
        kept_index = len(kept)
        kept.append(record)
        kept_sigs.append(sig)
        for key in keys:
            buckets.setdefault(key, []).append(kept_index)
    return kept, removed


def shuffle(records: Sequence[PromptRecord], seed: int) -> list[PromptRecord]:
    """Seeded permutation of the records."""
    out = list(records)
    random.Random(seed).shuffle(out)
    return out


def _stratum_rng(seed: int, stratum: Hashable) -> random.Random:
    digest = hashlib.blake2b(f"{seed}:{stratum!r}".encode(), digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "little"))


def stratified_split(
    examples: Sequence[Any],
    strata_key: Callable[[Any], Hashable],
    train_fraction: float,
    seed: int,
) -> tuple[list[Any], list[Any]]:
    """Split examples so each stratum lands within one example of the fraction.

    Singleton strata go to train (logged). Deterministic per (examples, seed):
    each stratum draws its own derived rng, so strata split independently.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")

    strata: dict[Hashable, list[Any]] = {}
    for example in examples:
        strata.setdefault(strata_key(example), []).append(example)

    train: list[Any] = []
    validation: list[Any] = []
    for stratum, members in strata.items():
        if len(members) == 1:
            logger.info("singleton stratum %r assigned to train", stratum)
            train.extend(members)
            continue
        order = list(members)
        _stratum_rng(seed, stratum).shuffle(order)
        n_train = int(train_fraction * len(order) + 0.5)
        train.extend(order[:n_train])
        validation.extend(order[n_train:])
    return train, validation


def assign_splits(
    records: Sequence[PromptRecord],
    train_fraction: float,
    seed: int,
) -> list[PromptRecord]:
    """Stratify by category and stamp each record's split field."""
    train, validation = stratified_split(
        records, lambda r: r.category, train_fraction, seed
    )
    train_ids = {r.id for r in train}
    out = []
    for record in records:
        split = SPLIT_TRAIN if record.id in train_ids else SPLIT_VALIDATION
        out.append(replace(record, split=split))
    return out
