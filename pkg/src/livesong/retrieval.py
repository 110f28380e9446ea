"""Reference database, query ranking, and evaluation metrics.

A query is scored against every reference with the pair model; the ranked
list's top entry is the identification.  Metrics assume one relevant
reference per query, so average precision reduces to reciprocal rank.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from .audio_features import (
    FeatureCacheError,
    FeatureStore,
    ManifestError,
    TrackManifestEntry,
)
from .model import DeepSequences, compute_csms

log = logging.getLogger(__name__)


class DBBuildError(Exception):
    """The reference database cannot be built from this manifest."""


@dataclass(frozen=True, eq=False)
class DBEntry:
    track_id: str
    song_id: str
    feature: np.ndarray
    metadata: Mapping = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class ReferenceDB:
    """Immutable store of standardized reference features, ascending track id."""

    entries: tuple

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ValueError("a reference database must be non-empty")
        ids = [e.track_id for e in self.entries]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("entries must be in strictly ascending track_id order")
        shapes = {e.feature.shape for e in self.entries}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError(f"features must share one 2-D shape, got {sorted(shapes)}")
        object.__setattr__(self, "_song_by_id", {e.track_id: e.song_id for e in self.entries})

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def track_ids(self) -> tuple:
        return tuple(e.track_id for e in self.entries)

    @property
    def song_ids(self) -> tuple:
        return tuple(e.song_id for e in self.entries)

    def song_for(self, track_id: str) -> str:
        return self._song_by_id[track_id]


def build_db(entries: Iterable[TrackManifestEntry], store: FeatureStore) -> ReferenceDB:
    """Load and standardize the cached feature of every reference entry."""
    refs = sorted(
        (e for e in entries if e.role == "reference"), key=lambda e: e.track_id
    )
    if not refs:
        raise DBBuildError("the manifest has no reference entries")
    seen = set()
    for entry in refs:
        if entry.track_id in seen:
            raise ManifestError(f"duplicate track id {entry.track_id}")
        seen.add(entry.track_id)
    missing = []
    built = []
    for entry in refs:
        try:
            feature = store.standardized(entry.track_id)
        except (FeatureCacheError, OSError):
            missing.append(entry.track_id)
            continue
        metadata = {"path": entry.path, "duration_s": entry.duration_s}
        if entry.chorus_start_s is not None:
            metadata["chorus_start_s"] = entry.chorus_start_s
        built.append(
            DBEntry(
                track_id=entry.track_id,
                song_id=entry.song_id,
                feature=feature,
                metadata=metadata,
            )
        )
    if missing:
        raise DBBuildError(
            f"missing cached features for {len(missing)} tracks: {', '.join(missing)}"
        )
    return ReferenceDB(tuple(built))


def reference_sequences(model, db: ReferenceDB, batch_size: int = 8) -> DeepSequences:
    """Branch outputs of every reference, batched along the first axis."""
    chunks = []
    with torch.no_grad():
        for start in range(0, len(db), batch_size):
            batch = np.stack([e.feature for e in db.entries[start : start + batch_size]])
            chunks.append(model.branch_forward(batch))
    return DeepSequences(
        tuple(
            torch.cat([chunk.levels[k] for chunk in chunks], dim=0)
            for k in range(len(chunks[0]))
        )
    )


def score_query(
    model,
    query_feature: np.ndarray,
    db: ReferenceDB,
    batch_size: int = 8,
    db_sequences: Optional[DeepSequences] = None,
) -> list:
    """One (track_id, score) per reference, in database order.

    The query branch runs once; head passes are batched against the
    (optionally precomputed) reference branch outputs.
    """
    if getattr(model, "training", False):
        raise ValueError("model must be in evaluation mode")
    if db_sequences is None:
        db_sequences = reference_sequences(model, db, batch_size)
    scores = []
    with torch.no_grad():
        query = model.branch_forward(np.asarray(query_feature))
        for start in range(0, len(db), batch_size):
            ref_chunk = DeepSequences(
                tuple(level[start : start + batch_size] for level in db_sequences)
            )
            n = ref_chunk.levels[0].shape[0]
            repeated = DeepSequences(
                tuple(level.unsqueeze(0).expand(n, *level.shape) for level in query)
            )
            batch_scores = model.similarity_head(compute_csms(repeated, ref_chunk))
            scores.extend(float(v) for v in batch_scores)
    return list(zip(db.track_ids, scores))


@dataclass(frozen=True)
class RankedList:
    """Scores sorted descending; ties broken by ascending track id."""

    query_id: str
    items: tuple

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(tuple(item) for item in self.items))
        if not self.items:
            raise ValueError("a ranking must contain at least one entry")
        for track_id, score in self.items:
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"score for {track_id} is {score}, outside [0, 1]")
        keys = [(-score, track_id) for track_id, score in self.items]
        if any(b < a for a, b in zip(keys, keys[1:])):
            raise ValueError("items must be sorted by descending score, then track id")
        ids = [track_id for track_id, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("ranking repeats a track id")

    def __len__(self):
        return len(self.items)

    def top(self, n: int) -> tuple:
        return self.items[:n]

    def rank_of(self, track_id: str) -> int:
        for position, (candidate, _) in enumerate(self.items, start=1):
            if candidate == track_id:
                return position
        raise ValueError(f"track {track_id!r} not in ranking")


def rank(query_id: str, scored: Sequence) -> RankedList:
    """Sort (track_id, score) pairs into a RankedList."""
    if not scored:
        raise ValueError("cannot rank an empty score list")
    for track_id, score in scored:
        if math.isnan(score):
            raise ValueError(
                f"similarity score for {track_id} is NaN; the model must not emit NaN"
            )
    ordered = sorted(scored, key=lambda item: (-item[1], item[0]))
    return RankedList(query_id=query_id, items=tuple(ordered))


@dataclass(frozen=True)
class QueryOutcome:
    """Where one query's relevant reference landed, and the top prediction."""

    query_id: str
    rank: int
    predicted_track_id: Optional[str] = None
    predicted_score: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "rank", int(self.rank))
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")


@dataclass(frozen=True)
class MetricsReport:
    p_at_10: float
    mr1: float
    mean_ap: float
    top1_rate: float
    top5_rate: float
    num_queries: int
    per_query: tuple
    excluded: tuple = ()

    def __post_init__(self):
        if self.num_queries < 1 or self.num_queries != len(self.per_query):
            raise ValueError("num_queries must match the per-query table")
        if not 0.0 <= self.p_at_10 <= 0.1:
            raise ValueError(f"P@10 must lie in [0, 0.1], got {self.p_at_10}")
        if not 0.0 < self.mean_ap <= 1.0:
            raise ValueError(f"MAP must lie in (0, 1], got {self.mean_ap}")
        if self.mr1 < 1.0:
            raise ValueError(f"MR1 must be >= 1, got {self.mr1}")
        for name in ("top1_rate", "top5_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def to_json_dict(self) -> dict:
        return {
            "p_at_10": self.p_at_10,
            "mr1": self.mr1,
            "map": self.mean_ap,
            "top1_rate": self.top1_rate,
            "top5_rate": self.top5_rate,
            "num_queries": self.num_queries,
            "per_query": [
                {
                    "query_id": o.query_id,
                    "rank": o.rank,
                    "predicted_track_id": o.predicted_track_id,
                    "predicted_score": o.predicted_score,
                }
                for o in self.per_query
            ],
            "excluded": list(self.excluded),
        }


def compute_metrics(
    per_query: Sequence[QueryOutcome], excluded: Sequence[str] = ()
) -> MetricsReport:
    """P@10, MR1, and MAP over per-query ranks of the single relevant item.

    Aggregation runs over sorted ranks, so query order cannot perturb the
    floating-point sums.
    """
    if not per_query:
        raise ValueError("metrics need at least one query")
    ranks = np.sort(np.array([o.rank for o in per_query], dtype=np.float64))
    return MetricsReport(
        p_at_10=float(np.mean(ranks <= 10) / 10.0),
        mr1=float(np.mean(ranks)),
        mean_ap=float(np.mean(1.0 / ranks)),
        top1_rate=float(np.mean(ranks == 1)),
        top5_rate=float(np.mean(ranks <= 5)),
        num_queries=len(per_query),
        per_query=tuple(per_query),
        excluded=tuple(excluded),
    )


def metrics_from_ranks(ranks: Sequence[int]) -> MetricsReport:
    """Metrics over bare ranks, with synthetic query ids."""
    return compute_metrics(
        tuple(QueryOutcome(f"q{i}", r) for i, r in enumerate(ranks))
    )


def evaluate(
    model,
    db: ReferenceDB,
    entries: Iterable[TrackManifestEntry],
    store: FeatureStore,
    batch_size: int = 8,
) -> MetricsReport:
    """Score every live query against the database and aggregate metrics.

    A query whose song has no reference in the database is excluded with a
    warning; it reports a manifest problem, not model performance.
    """
    queries = sorted(
        (e for e in entries if e.role == "live_query"), key=lambda e: e.track_id
    )
    if not queries:
        raise ValueError("the manifest has no live_query entries")
    known_songs = set(db.song_ids)
    db_sequences = reference_sequences(model, db, batch_size)
    outcomes = []
    excluded = []
    for entry in queries:
        if entry.song_id not in known_songs:
            log.warning(
                "query %s: song %s has no reference in the database; excluded",
                entry.track_id,
                entry.song_id,
            )
            excluded.append(entry.track_id)
            continue
        feature = store.standardized(entry.track_id)
        ranked = rank(
            entry.track_id,
            score_query(model, feature, db, batch_size, db_sequences),
        )
        relevant_rank = next(
            position
            for position, (track_id, _) in enumerate(ranked.items, start=1)
            if db.song_for(track_id) == entry.song_id
        )
        top_track_id, top_score = ranked.items[0]
        outcomes.append(
            QueryOutcome(
                query_id=entry.track_id,
                rank=relevant_rank,
                predicted_track_id=top_track_id,
                predicted_score=top_score,
            )
        )
    if not outcomes:
        raise ValueError("every query was excluded; nothing to evaluate")
    return compute_metrics(tuple(outcomes), tuple(excluded))
