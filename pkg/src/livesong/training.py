"""Pair-dataset construction and the training loop.

Song cliques come from the manifest; positive pairs are all within-clique
combinations under a 25-version cap, split 80/20 by song so no song spans
both sets.  Negatives are cross-clique pairs at a 1:3 ratio, regenerated
every training epoch; validation negatives are drawn once and frozen.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

from .audio_features import FeatureStore, ManifestError, TrackManifestEntry
from .augmentation import DatasetView, MixPolicy, NoiseBank, epoch_augment
from .model import SimilarityModel, bce_loss, save_checkpoint

log = logging.getLogger(__name__)


class SplitError(ValueError):
    """The dataset cannot be split as requested."""


class PairFileError(Exception):
    """A pairs file is malformed."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, lr: float):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}, lr {lr:g}"
        )
        self.epoch = epoch
        self.batch_index = batch_index
        self.lr = lr


@dataclass(frozen=True)
class SongClique:
    """All versions of one composition."""

    song_id: str
    track_ids: tuple

    def __post_init__(self):
        object.__setattr__(self, "track_ids", tuple(self.track_ids))
        if not self.track_ids:
            raise ValueError(f"clique {self.song_id} has no tracks")
        if len(set(self.track_ids)) != len(self.track_ids):
            raise ValueError(f"clique {self.song_id} repeats a track id")


@dataclass(frozen=True)
class TrackPair:
    track_id_1: str
    track_id_2: str
    label: int
    song_id_1: str
    song_id_2: str

    def __post_init__(self):
        if self.track_id_1 == self.track_id_2:
            raise ValueError(f"pair repeats track {self.track_id_1}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.label == 1 and self.song_id_1 != self.song_id_2:
            raise ValueError("positive pair must share a song id")
        if self.label == 0 and self.song_id_1 == self.song_id_2:
            raise ValueError("negative pair must cross songs")


@dataclass(frozen=True)
class Seeds:
    split: int = 1
    model_init: int = 2
    negatives: int = 3
    val_negatives: int = 4
    shuffle: int = 5

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"seed {name} must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr: float = 0.001
    scheduler_factor: float = 0.1
    scheduler_patience: int = 5
    max_epochs: int = 50
    negative_ratio: int = 3
    cover_cap: int = 25
    split_ratio: float = 0.8
    seeds: Seeds = field(default_factory=Seeds)

    def __post_init__(self):
        if isinstance(self.seeds, dict):
            object.__setattr__(self, "seeds", Seeds(**self.seeds))
        if self.batch_size < 1 or self.max_epochs < 1 or self.scheduler_patience < 1:
            raise ValueError("batch_size, max_epochs, scheduler_patience must be >= 1")
        if self.lr <= 0 or self.negative_ratio < 1:
            raise ValueError("lr and negative_ratio must be positive")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ValueError(f"scheduler_factor must be in (0, 1), got {self.scheduler_factor}")
        if self.cover_cap < 2:
            raise ValueError(f"cover_cap must be at least 2, got {self.cover_cap}")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError(f"split_ratio must be in (0, 1), got {self.split_ratio}")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_time_s: float

    def __post_init__(self):
        if not (math.isfinite(self.train_loss) and math.isfinite(self.val_loss)):
            raise ValueError("losses must be finite")


def build_cliques(entries: Iterable[TrackManifestEntry]) -> list[SongClique]:
    """Group non-noise tracks by song id, sorted for determinism."""
    seen = set()
    by_song: dict[str, list[str]] = {}
    for entry in entries:
        if entry.track_id in seen:
            raise ManifestError(f"duplicate track id {entry.track_id}")
        seen.add(entry.track_id)
        if entry.role == "noise":
            continue
        by_song.setdefault(entry.song_id, []).append(entry.track_id)
    return [
        SongClique(song_id, tuple(sorted(tracks)))
        for song_id, tracks in sorted(by_song.items())
    ]


def cap_cliques(cliques: Sequence[SongClique], cap: int) -> list[SongClique]:
    """Retain at most cap versions per clique, lexicographically."""
    if cap < 2:
        raise ValueError(f"cap must be at least 2, got {cap}")
    return [
        SongClique(c.song_id, tuple(sorted(c.track_ids))[:cap]) for c in cliques
    ]


def make_positive_pairs(cliques: Sequence[SongClique], cap: int = 25) -> list[TrackPair]:
    """All unordered within-clique pairs of the retained versions."""
    pairs = []
    for clique in cap_cliques(cliques, cap):
        for a, b in itertools.combinations(clique.track_ids, 2):
            pairs.append(TrackPair(a, b, 1, clique.song_id, clique.song_id))
    return pairs


def split_by_song(
    pairs: Sequence[TrackPair], ratio: float = 0.8, seed: int = 0
) -> tuple[list[TrackPair], list[TrackPair]]:
    """Assign whole songs to train until ~ratio of the pairs are covered."""
    songs = sorted({p.song_id_1 for p in pairs})
    if len(songs) < 2:
        raise SplitError(f"need at least 2 songs to split, got {len(songs)}")
    counts = {song: 0 for song in songs}
    for p in pairs:
        counts[p.song_id_1] += 1
    order = [songs[i] for i in np.random.default_rng(seed).permutation(len(songs))]
    target = ratio * len(pairs)
    train_songs: set = set()
    covered = 0
    for song in order:
        if covered < target:
            train_songs.add(song)
            covered += counts[song]
    # both sides must be non-empty to be usable
    if len(train_songs) == len(songs):
        train_songs.discard(order[-1])
    if not train_songs:
        train_songs.add(order[0])
    train = [p for p in pairs if p.song_id_1 in train_songs]
    val = [p for p in pairs if p.song_id_1 not in train_songs]
    return train, val


def sample_negative_pairs(
    cliques: Sequence[SongClique], count: int, rng: np.random.Generator
) -> list[TrackPair]:
    """Uniform cross-clique pairs, distinct within one draw."""
    if len(cliques) < 2:
        raise ValueError(f"need at least 2 cliques to sample negatives, got {len(cliques)}")
    if count <= 0:
        return []
    tracks = [(tid, c.song_id) for c in cliques for tid in c.track_ids]
    n = len(tracks)
    same = sum(len(c.track_ids) * (len(c.track_ids) - 1) // 2 for c in cliques)
    possible = n * (n - 1) // 2 - same
    if count > possible:
        log.warning(
            "only %d cross-song pairs exist; %d requested", possible, count
        )
        count = possible
    chosen: set = set()
    out = []

    def emit(i: int, j: int) -> None:
        (id_a, song_a), (id_b, song_b) = tracks[i], tracks[j]
        if id_b < id_a:
            id_a, id_b, song_a, song_b = id_b, id_a, song_b, song_a
        out.append(TrackPair(id_a, id_b, 0, song_a, song_b))

    if count * 3 >= possible:
        # dense request: enumerate instead of rejection-sampling duplicates
        all_pairs = [
            (i, j)
            for i, j in itertools.combinations(range(n), 2)
            if tracks[i][1] != tracks[j][1]
        ]
        for index in rng.permutation(len(all_pairs))[:count]:
            emit(*all_pairs[index])
        return out
    while len(out) < count:
        i, j = (int(v) for v in rng.integers(n, size=2))
        if i == j or tracks[i][1] == tracks[j][1]:
            continue
        key = (min(i, j), max(i, j))
        if key in chosen:
            continue
        chosen.add(key)
        emit(i, j)
    return out


@dataclass(frozen=True)
class PairSets:
    """Everything the epoch loop needs: fixed positives, clique universes,
    and the frozen validation negatives."""

    train_positives: tuple
    val_positives: tuple
    val_negatives: tuple
    train_cliques: tuple
    val_cliques: tuple

    @property
    def val_pairs(self) -> tuple:
        return self.val_positives + self.val_negatives

    def stats(self) -> dict:
        return {
            "train_songs": len(self.train_cliques),
            "val_songs": len(self.val_cliques),
            "train_tracks": sum(len(c.track_ids) for c in self.train_cliques),
            "val_tracks": sum(len(c.track_ids) for c in self.val_cliques),
            "train_positives": len(self.train_positives),
            "val_positives": len(self.val_positives),
            "val_negatives": len(self.val_negatives),
        }


def build_pair_sets(entries: Iterable[TrackManifestEntry], config: TrainConfig) -> PairSets:
    """Manifest to dataset: cliques, capped positives, song-disjoint split,
    frozen validation negatives."""
    cliques = build_cliques(entries)
    capped = cap_cliques(cliques, config.cover_cap)
    positives = make_positive_pairs(cliques, config.cover_cap)
    train_pos, val_pos = split_by_song(positives, config.split_ratio, config.seeds.split)
    train_songs = {p.song_id_1 for p in train_pos}
    val_songs = {p.song_id_1 for p in val_pos}
    train_cliques = tuple(c for c in capped if c.song_id in train_songs)
    val_cliques = tuple(c for c in capped if c.song_id in val_songs)
    if len(val_cliques) < 2:
        # a lone validation song has no cross-song pairs to offer
        log.warning("only %d validation song; no validation negatives", len(val_cliques))
        val_negs = []
    else:
        val_negs = sample_negative_pairs(
            val_cliques,
            config.negative_ratio * len(val_pos),
            np.random.default_rng(config.seeds.val_negatives),
        )
    return PairSets(
        train_positives=tuple(train_pos),
        val_positives=tuple(val_pos),
        val_negatives=tuple(val_negs),
        train_cliques=train_cliques,
        val_cliques=val_cliques,
    )


def write_pairs(pairs: Iterable[TrackPair], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for pair in pairs:
            fh.write(json.dumps(asdict(pair)) + "\n")


def read_pairs(path) -> list[TrackPair]:
    pairs = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                pairs.append(TrackPair(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise PairFileError(f"{path}:{lineno}: {exc}") from exc
    return pairs


class PlateauScheduler:
    """Multiply lr by factor after `patience` consecutive non-improving
    epochs; improvement means strictly lower validation loss."""

    def __init__(self, optimizer, factor: float = 0.1, patience: int = 5):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, val_loss: float) -> None:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0


@dataclass(frozen=True)
class ValidationReport:
    loss: float
    histogram: tuple


def _batched_scores(model, view, indexes, batch_size):
    for start in range(0, len(indexes), batch_size):
        chunk = indexes[start : start + batch_size]
        lhs, rhs = zip(*(view.pair_features(i) for i in chunk))
        yield chunk, model.forward_pair(np.stack(lhs), np.stack(rhs))


def validate(
    model,
    pairs: Sequence[TrackPair],
    store: FeatureStore,
    bank: Optional[NoiseBank] = None,
    policy: Optional[MixPolicy] = None,
    batch_size: int = 8,
) -> ValidationReport:
    """Mean per-pair loss plus a 10-bin score histogram, in eval mode."""
    if not pairs:
        raise ValueError("validation needs at least one pair")
    view = epoch_augment(
        DatasetView(
            "val",
            tuple((p.track_id_1, p.track_id_2) for p in pairs),
            store,
            bank,
        ),
        policy or MixPolicy(),
        epoch=0,
    )
    labels = np.array([p.label for p in pairs], dtype=np.float32)
    was_training = model.training
    model.eval()
    scores = np.empty(len(pairs), dtype=np.float64)
    try:
        with torch.no_grad():
            for chunk, batch_scores in _batched_scores(
                model, view, range(len(pairs)), batch_size
            ):
                scores[chunk[0] : chunk[0] + len(chunk)] = (
                    batch_scores.detach().cpu().numpy()
                )
    finally:
        if was_training:
            model.train()
    loss = float(
        bce_loss(torch.from_numpy(scores), torch.from_numpy(labels), "mean")
    )
    histogram, _ = np.histogram(scores, bins=10, range=(0.0, 1.0))
    return ValidationReport(loss=loss, histogram=tuple(int(c) for c in histogram))


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    stats: tuple
    best_epoch: int
    best_val_loss: float


def train(
    model: SimilarityModel,
    pair_sets: PairSets,
    store: FeatureStore,
    config: TrainConfig,
    checkpoint_path,
    bank: Optional[NoiseBank] = None,
    policy: Optional[MixPolicy] = None,
    on_epoch: Optional[Callable[[EpochStats], None]] = None,
) -> TrainResult:
    """Epoch loop: fresh negatives and noise draws per epoch, validation on
    the frozen val set, checkpoint at minimum validation loss."""
    checkpoint_path = Path(checkpoint_path)
    policy = policy or MixPolicy()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, amsgrad=True)
    scheduler = PlateauScheduler(
        optimizer, factor=config.scheduler_factor, patience=config.scheduler_patience
    )
    torch.manual_seed(config.seeds.shuffle)
    stats = []
    best_val = math.inf
    best_epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        negatives = sample_negative_pairs(
            pair_sets.train_cliques,
            config.negative_ratio * len(pair_sets.train_positives),
            np.random.default_rng((config.seeds.negatives, epoch)),
        )
        items = list(pair_sets.train_positives) + negatives
        view = epoch_augment(
            DatasetView(
                "train",
                tuple((p.track_id_1, p.track_id_2) for p in items),
                store,
                bank,
            ),
            policy,
            epoch,
        )
        order = np.random.default_rng((config.seeds.shuffle, epoch)).permutation(
            len(items)
        )
        labels = np.array([p.label for p in items], dtype=np.float32)
        lr_in_effect = scheduler.lr
        model.train()
        total = 0.0
        for batch_index, (chunk, batch_scores) in enumerate(
            _batched_scores(model, view, [int(i) for i in order], config.batch_size)
        ):
            batch_labels = torch.from_numpy(labels[list(chunk)])
            loss = bce_loss(batch_scores, batch_labels, "mean")
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, batch_index, scheduler.lr)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += value * len(chunk)
        train_loss = total / len(items)
        report = validate(
            model, pair_sets.val_pairs, store, bank, policy, config.batch_size
        )
        epoch_stats = EpochStats(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=report.loss,
            lr=lr_in_effect,
            wall_time_s=time.perf_counter() - started,
        )
        stats.append(epoch_stats)
        if on_epoch is not None:
            on_epoch(epoch_stats)
        if report.loss < best_val:
            best_val = report.loss
            best_epoch = epoch
            save_checkpoint(
                model,
                {
                    "epoch": epoch,
                    "val_loss": report.loss,
                    "train_loss": train_loss,
                    "train_config": asdict(config),
                },
                checkpoint_path,
            )
        scheduler.step(report.loss)
    return TrainResult(
        checkpoint_path=checkpoint_path,
        stats=tuple(stats),
        best_epoch=best_epoch,
        best_val_loss=best_val,
    )
