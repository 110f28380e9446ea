"""Crowd-noise augmentation of CQ-spectrograms.

Noise recordings become unstandardized CQ strips of whatever length the
recording has.  A training item mixes one randomly chosen strip into the
song matrix with a random gain and delay, then standardizes.  Train draws
are refreshed every epoch; validation draws once and reuses them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .audio_features import (
    CQSpectrogram,
    FeatureStore,
    TrackManifestEntry,
    cache_path,
    load_audio,
    normalize_audio,
    read_cqt_file,
    standardize,
    standardize_values,
    write_cqt_file,
)
from .cqt import HOP_SECONDS, N_BINS, cqt_magnitudes

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """The requested pipeline cannot run with the given inputs or settings."""


@dataclass(frozen=True)
class NoiseBank:
    """Unstandardized CQ strips of the noise recordings.

    Strips keep the native length of each recording; durations are accounted
    at frame resolution so a bank rebuilt from cached strips reports the same
    total as one built from audio.
    """

    clips: tuple[np.ndarray, ...]
    total_duration_s: float

    def __post_init__(self):
        if not self.clips:
            raise ConfigurationError("noise bank needs at least one clip")
        for i, clip in enumerate(self.clips):
            if clip.ndim != 2 or clip.shape[0] != N_BINS:
                raise ValueError(
                    f"clip {i} has shape {clip.shape}, expected ({N_BINS}, L)"
                )
            if np.any(clip < 0):
                raise ValueError(f"clip {i} has negative magnitudes")

    @property
    def strip_frames(self) -> tuple[int, ...]:
        return tuple(clip.shape[1] for clip in self.clips)


@dataclass(frozen=True)
class MixParams:
    """One concrete mixing decision for one feature instance."""

    apply: bool
    gain_db: float
    delay_s: float
    noise_index: int
    noise_offset_frames: int


@dataclass(frozen=True)
class MixPolicy:
    """Distribution the per-item mixing decisions are drawn from."""

    apply_probability: float = 0.5
    gain_choices_db: tuple[float, ...] = (-6.0, -9.0, -12.0)
    delay_range_s: tuple[float, float] = (-15.0, 117.0)
    master_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError(
                f"apply_probability must be in [0, 1], got {self.apply_probability}"
            )
        if not self.gain_choices_db:
            raise ValueError("gain_choices_db must not be empty")
        lo, hi = self.delay_range_s
        if hi < lo:
            raise ValueError(f"delay range is empty: [{lo}, {hi}]")


def build_noise_clip(entry: TrackManifestEntry) -> np.ndarray:
    """Full-length unstandardized CQ strip of one noise recording."""
    samples, rate = load_audio(entry.path)
    clip = normalize_audio(samples, rate, source_id=entry.track_id)
    return cqt_magnitudes(clip.samples)


def _check_noise_entries(noise_entries) -> list[TrackManifestEntry]:
    entries = list(noise_entries)
    if not entries:
        raise ConfigurationError(
            "crowd-noise mixing requires at least one noise recording"
        )
    for entry in entries:
        if entry.role != "noise":
            raise ValueError(
                f"track {entry.track_id} has role {entry.role!r}, expected noise"
            )
    return entries


def build_noise_bank(noise_entries: Sequence[TrackManifestEntry]) -> NoiseBank:
    """Transform every noise recording into a bank of CQ strips."""
    clips = [build_noise_clip(entry) for entry in _check_noise_entries(noise_entries)]
    total = sum(clip.shape[1] for clip in clips) * HOP_SECONDS
    return NoiseBank(clips=tuple(clips), total_duration_s=total)


def load_noise_bank(noise_entries: Sequence[TrackManifestEntry], cache_dir=None) -> NoiseBank:
    """build_noise_bank with per-recording strip caching.

    Strips live in the same container format as song features, one file per
    noise track, with as many columns as the recording has frames.
    """
    if cache_dir is None:
        return build_noise_bank(noise_entries)
    entries = _check_noise_entries(noise_entries)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    clips = []
    for entry in entries:
        path = cache_path(cache_dir, entry.track_id)
        if path.exists():
            values, standardized = read_cqt_file(path)
            if standardized or values.shape[0] != N_BINS:
                raise ConfigurationError(
                    f"cached strip {path} is not a raw {N_BINS}-bin matrix"
                )
        else:
            values = build_noise_clip(entry)
            write_cqt_file(path, values, standardized=False)
        clips.append(values)
    total = sum(clip.shape[1] for clip in clips) * HOP_SECONDS
    return NoiseBank(clips=tuple(clips), total_duration_s=total)


def sample_mix_params(
    policy: MixPolicy, rng: np.random.Generator, strip_frames: Sequence[int]
) -> MixParams:
    """Draw one set of mixing decisions.

    The draw order (apply, gain, delay, clip, offset) is fixed so a given
    generator state always yields the same parameters.  All fields are drawn
    even when apply comes up false.
    """
    if not strip_frames:
        raise ConfigurationError("cannot sample mixing parameters without noise strips")
    apply = bool(rng.random() < policy.apply_probability)
    gain_db = float(policy.gain_choices_db[rng.integers(len(policy.gain_choices_db))])
    lo, hi = policy.delay_range_s
    delay_s = float(rng.uniform(lo, hi))
    noise_index = int(rng.integers(len(strip_frames)))
    noise_offset = int(rng.integers(strip_frames[noise_index]))
    return MixParams(
        apply=apply,
        gain_db=gain_db,
        delay_s=delay_s,
        noise_index=noise_index,
        noise_offset_frames=noise_offset,
    )


def mix_magnitudes(
    song_values: np.ndarray,
    strip: np.ndarray,
    gain: float,
    delay_s: float,
    noise_offset_frames: int,
) -> np.ndarray:
    """Add a delayed, attenuated noise strip to a magnitude matrix.

    Song frame t lines up with strip frame t - o + noise_offset_frames, where
    o = round(delay_s / hop seconds); strip frames outside [0, L) contribute
    nothing.
    """
    frame_shift = round(delay_s / HOP_SECONDS) - noise_offset_frames
    frames = song_values.shape[1]
    length = strip.shape[1]
    t_lo = max(0, frame_shift)
    t_hi = min(frames, length + frame_shift)
    mixed = np.array(song_values, dtype=np.float32, copy=True)
    if t_hi > t_lo:
        mixed[:, t_lo:t_hi] += np.float32(gain) * strip[:, t_lo - frame_shift : t_hi - frame_shift]
    return mixed


def mix_crowd_noise(song: CQSpectrogram, bank: NoiseBank, params: MixParams) -> CQSpectrogram:
    """Mix one strip into an unstandardized song matrix, then standardize."""
    if song.standardized:
        raise ValueError("mixing expects unstandardized magnitudes")
    if not params.apply:
        return standardize(song)
    mixed = mix_magnitudes(
        song.values,
        bank.clips[params.noise_index],
        10.0 ** (params.gain_db / 20.0),
        params.delay_s,
        params.noise_offset_frames,
    )
    return replace(song, values=standardize_values(mixed), standardized=True)


@dataclass(frozen=True)
class DatasetView:
    """Pairs of track ids plus the raw-feature store they resolve against.

    bank=None means no mixing: features pass through standardization only.
    """

    split: str
    pairs: tuple[tuple[str, str], ...]
    store: FeatureStore
    bank: Optional[NoiseBank] = None

    def __post_init__(self):
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be train or val, got {self.split!r}")


class AugmentedView:
    """One epoch's deterministic view of a dataset's mixed features.

    (master seed, effective epoch, pair index, side) fully determines each
    feature.  Validation pins the effective epoch to 0 so every pass sees the
    same draws; training epochs are numbered from 1 and never collide with it.
    """

    def __init__(self, view: DatasetView, policy: MixPolicy, epoch: int):
        self.view = view
        self.policy = policy
        self.epoch = int(epoch)
        self.effective_epoch = 0 if view.split == "val" else int(epoch)

    def __len__(self) -> int:
        return len(self.view.pairs)

    def params_for(self, index: int, side: int) -> MixParams:
        if self.view.bank is None:
            raise ConfigurationError("view has no noise bank to sample from")
        rng = np.random.default_rng(
            (self.policy.master_seed, self.effective_epoch, index, side)
        )
        return sample_mix_params(self.policy, rng, self.view.bank.strip_frames)

    def _feature(self, track_id: str, index: int, side: int) -> np.ndarray:
        raw = self.view.store.raw(track_id)
        if self.view.bank is None:
            return standardize_values(raw)
        song = CQSpectrogram(
            values=raw, track_id=track_id, standardized=False, method="crowd"
        )
        return mix_crowd_noise(song, self.view.bank, self.params_for(index, side)).values

    def pair_features(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        first, second = self.view.pairs[index]
        return self._feature(first, index, 0), self._feature(second, index, 1)


def epoch_augment(dataset_view: DatasetView, policy: MixPolicy, epoch: int) -> AugmentedView:
    """Fresh per-item draws each train epoch; frozen draws for validation."""
    return AugmentedView(dataset_view, policy, epoch)
