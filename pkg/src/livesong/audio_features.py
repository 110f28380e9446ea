"""Audio decoding, analysis-window selection, and CQ-spectrogram features.

Every track is reduced to a mono 22050 Hz clip, windowed to 120 s, and
transformed into a 72x401 constant-Q magnitude matrix.  Matrices are kept
unstandardized in the on-disk cache; per-track standardization (mean 0,
std 1 over all entries) happens at load time, or after noise mixing for the
crowd pipeline.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .cqt import (
    FRAMES_PER_WINDOW,
    N_BINS,
    SAMPLE_RATE,
    WINDOW_SAMPLES,
    WINDOW_SECONDS,
    cqt_magnitudes,
    fit_frames,
)

log = logging.getLogger(__name__)

METHODS = ("basic", "chorus", "crowd")
ROLES = ("reference", "cover", "live_query", "noise")

CACHE_MAGIC = b"CQT1"
CACHE_HEADER = struct.Struct("<4sIII")
FLAG_STANDARDIZED = 0x1

# Kaiser beta 7.0 gives ~72 dB stop-band rejection in the polyphase resampler.
_RESAMPLE_WINDOW = ("kaiser", 7.0)


class AudioDecodeError(Exception):
    """Raised when an audio file cannot be decoded into usable samples."""


class ManifestError(Exception):
    """Raised for malformed or inconsistent track manifests."""


class FeatureCacheError(Exception):
    """Raised for missing or corrupt feature-cache files."""


@dataclass(frozen=True)
class AudioClip:
    """Mono audio at the pipeline rate of 22050 Hz."""

    samples: np.ndarray
    rate: int
    source_id: str = ""

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.rate


@dataclass(frozen=True)
class CQSpectrogram:
    """72x401 CQ magnitude matrix for one track window.

    ``standardized`` is False for raw magnitudes (all entries >= 0) and True
    once the per-track mean/std normalization has been applied.
    """

    values: np.ndarray
    track_id: str = ""
    standardized: bool = False
    method: str = "basic"

    def __post_init__(self):
        if self.values.shape != (N_BINS, FRAMES_PER_WINDOW):
            raise ValueError(
                f"feature for {self.track_id!r} has shape {self.values.shape}, "
                f"expected ({N_BINS}, {FRAMES_PER_WINDOW})"
            )
        if not self.standardized and float(self.values.min(initial=0.0)) < 0.0:
            raise ValueError("unstandardized CQ magnitudes must be non-negative")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(frozen=True)
class TrackManifestEntry:
    """One manifest row: where a track lives and how it participates."""

    track_id: str
    path: str
    role: str
    duration_s: float
    song_id: Optional[str] = None
    chorus_start_s: Optional[float] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ManifestError(f"{self.track_id}: unknown role {self.role!r}")
        if self.role == "noise" and self.song_id is not None:
            raise ManifestError(f"{self.track_id}: noise entries carry no song_id")
        if self.role != "noise" and not self.song_id:
            raise ManifestError(f"{self.track_id}: {self.role} entries need a song_id")


def read_manifest(path) -> list[TrackManifestEntry]:
    """Parse a JSON-lines manifest; rejects duplicate track ids."""
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                entry = TrackManifestEntry(
                    track_id=row["track_id"],
                    path=row["path"],
                    role=row["role"],
                    duration_s=float(row["duration_s"]),
                    song_id=row.get("song_id"),
                    chorus_start_s=(
                        float(row["chorus_start_s"])
                        if row.get("chorus_start_s") is not None
                        else None
                    ),
                )
            except KeyError as exc:
                raise ManifestError(f"{path}:{lineno}: missing field {exc}") from exc
            if entry.track_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate track_id {entry.track_id!r}")
            seen.add(entry.track_id)
            entries.append(entry)
    return entries


def write_manifest(entries: Iterable[TrackManifestEntry], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in entries:
            row = {
                "track_id": entry.track_id,
                "path": entry.path,
                "role": entry.role,
                "duration_s": entry.duration_s,
            }
            if entry.song_id is not None:
                row["song_id"] = entry.song_id
            if entry.chorus_start_s is not None:
                row["chorus_start_s"] = entry.chorus_start_s
            fh.write(json.dumps(row) + "\n")


def load_audio(path) -> tuple[np.ndarray, int]:
    """Decode an audio file to float samples in [-1, 1] plus its native rate.

    16-bit PCM WAV is the baseline format; other WAV sample widths supported
    by scipy come along for free.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise AudioDecodeError(f"audio file not found: {path}") from None
    except Exception as exc:
        raise AudioDecodeError(f"cannot decode {path}: {exc}") from exc
    if data.size == 0:
        raise AudioDecodeError(f"empty audio file: {path}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    return samples, int(rate)


def normalize_audio(raw: np.ndarray, native_rate: int, source_id: str = "") -> AudioClip:
    """Average channels to mono and resample to 22050 Hz."""
    if native_rate <= 0:
        raise ValueError(f"native_rate must be positive, got {native_rate}")
    data = np.asarray(raw, dtype=np.float64)
    if data.size == 0:
        raise AudioDecodeError(f"empty audio: {source_id or '<raw samples>'}")
    if data.ndim == 2:
        data = data.mean(axis=1)
    elif data.ndim != 1:
        raise ValueError(f"expected 1-D or (samples, channels) audio, got {data.shape}")
    if native_rate != SAMPLE_RATE:
        g = math.gcd(SAMPLE_RATE, native_rate)
        data = resample_poly(
            data, SAMPLE_RATE // g, native_rate // g, window=_RESAMPLE_WINDOW
        )
    return AudioClip(samples=data, rate=SAMPLE_RATE, source_id=source_id)


def select_segment(clip: AudioClip, start_s: float) -> AudioClip:
    """Cut the 120 s analysis window at ``start_s``, zero padding past the end."""
    if start_s < 0:
        raise ValueError(f"start_s must be >= 0, got {start_s}")
    start = int(round(start_s * clip.rate))
    n = clip.samples.size
    if start > n:
        raise ValueError(
            f"window start {start_s:.2f}s is beyond the end of "
            f"{clip.source_id or 'clip'} ({n / clip.rate:.2f}s)"
        )
    out = np.zeros(WINDOW_SAMPLES, dtype=np.float64)
    tail = min(n - start, WINDOW_SAMPLES)
    out[:tail] = clip.samples[start : start + tail]
    return AudioClip(samples=out, rate=clip.rate, source_id=clip.source_id)


def resolve_start(entry: TrackManifestEntry, method: str) -> float:
    """Analysis-window start time in seconds for the given extraction method.

    Chorus alignment starts at the first annotated chorus; when fewer than
    120 s remain after it, the last 120 s of the track are used instead.
    Tracks without a chorus annotation fall back to the beginning.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method != "chorus" or entry.chorus_start_s is None:
        return 0.0
    if entry.duration_s - entry.chorus_start_s >= WINDOW_SECONDS:
        return float(entry.chorus_start_s)
    return max(0.0, entry.duration_s - WINDOW_SECONDS)


def compute_cqt(clip: AudioClip, track_id: str = "", method: str = "basic") -> CQSpectrogram:
    """CQ magnitude matrix for a 120 s clip; frame axis fixed to 401 columns."""
    if clip.rate != SAMPLE_RATE:
        raise ValueError(f"clip must be at {SAMPLE_RATE} Hz, got {clip.rate}")
    if clip.samples.size != WINDOW_SAMPLES:
        raise ValueError(
            f"clip must be exactly {WINDOW_SECONDS}s ({WINDOW_SAMPLES} samples), "
            f"got {clip.samples.size}"
        )
    values = fit_frames(cqt_magnitudes(clip.samples), FRAMES_PER_WINDOW)
    return CQSpectrogram(values=values, track_id=track_id, standardized=False, method=method)


def standardize_values(values: np.ndarray) -> np.ndarray:
    """Zero-mean/unit-std normalization over all entries (population std).

    Constant input has no scale to normalize; it maps to all zeros with a
    logged warning so batch pipelines stay total.
    """
    values = np.asarray(values, dtype=np.float32)
    std = float(values.std())
    if std == 0.0:
        log.warning("standardizing a constant matrix; returning all zeros")
        return np.zeros_like(values)
    return (values - float(values.mean())) / std


def standardize(spec: CQSpectrogram) -> CQSpectrogram:
    """Standardized copy of a spectrogram (idempotent up to float error)."""
    return replace(spec, values=standardize_values(spec.values), standardized=True)


def compute_raw_feature(entry: TrackManifestEntry, method: str) -> CQSpectrogram:
    """Decode, window, and transform one track; output stays unstandardized."""
    samples, rate = load_audio(entry.path)
    clip = normalize_audio(samples, rate, source_id=entry.track_id)
    segment = select_segment(clip, resolve_start(entry, method))
    return compute_cqt(segment, track_id=entry.track_id, method=method)


def extract_features(entry: TrackManifestEntry, method: str, noise_hook=None) -> CQSpectrogram:
    """Full per-track feature extraction.

    basic/chorus return standardized features; crowd returns the raw matrix
    (mixing happens downstream, then standardization).  ``noise_hook``, when
    given, is applied to the raw crowd spectrogram in place of that deferred
    mixing step.
    """
    spec = compute_raw_feature(entry, method)
    if method == "crowd":
        return noise_hook(spec) if noise_hook is not None else spec
    return standardize(spec)


def write_cqt_file(path, values: np.ndarray, standardized: bool = False) -> None:
    """Write one matrix to the ``.cqt`` container (little-endian float32)."""
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"cache matrices are 2-D, got shape {values.shape}")
    flags = FLAG_STANDARDIZED if standardized else 0
    header = CACHE_HEADER.pack(CACHE_MAGIC, values.shape[0], values.shape[1], flags)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(values.tobytes(order="C"))


def read_cqt_file(path) -> tuple[np.ndarray, bool]:
    """Read a ``.cqt`` container, returning (matrix, standardized flag)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise FeatureCacheError(f"feature file not found: {path}") from None
    if len(blob) < CACHE_HEADER.size:
        raise FeatureCacheError(f"truncated feature file: {path}")
    magic, rows, cols, flags = CACHE_HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC:
        raise FeatureCacheError(f"bad magic in {path}: {magic!r}")
    expected = CACHE_HEADER.size + 4 * rows * cols
    if len(blob) != expected:
        raise FeatureCacheError(
            f"size mismatch in {path}: {len(blob)} bytes, header implies {expected}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=CACHE_HEADER.size)
    return values.reshape(rows, cols).copy(), bool(flags & FLAG_STANDARDIZED)


def cache_path(cache_dir, track_id: str) -> Path:
    return Path(cache_dir) / f"{track_id}.cqt"


class FeatureStore:
    """Read-side view of the feature cache: raw (unstandardized) matrices."""

    def raw(self, track_id: str) -> np.ndarray:
        raise NotImplementedError

    def standardized(self, track_id: str) -> np.ndarray:
        return standardize_values(self.raw(track_id))


class CachedFeatureStore(FeatureStore):
    """Feature store backed by a directory of ``.cqt`` files."""

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)
        self._memo: dict[str, np.ndarray] = {}

    def raw(self, track_id: str) -> np.ndarray:
        cached = self._memo.get(track_id)
        if cached is None:
            values, standardized = read_cqt_file(cache_path(self.cache_dir, track_id))
            if standardized:
                raise FeatureCacheError(
                    f"cache entry for {track_id} is standardized; raw magnitudes expected"
                )
            if values.shape != (N_BINS, FRAMES_PER_WINDOW):
                raise FeatureCacheError(
                    f"cache entry for {track_id} has shape {values.shape}"
                )
            cached = self._memo[track_id] = values
        return cached

    def missing(self, track_ids: Sequence[str]) -> list[str]:
        return [t for t in track_ids if not cache_path(self.cache_dir, t).exists()]


class InMemoryFeatureStore(FeatureStore):
    """Feature store over an in-memory mapping, mainly for tests and tools."""

    def __init__(self, features: Mapping[str, np.ndarray]):
        self._features = dict(features)

    def raw(self, track_id: str) -> np.ndarray:
        try:
            return self._features[track_id]
        except KeyError:
            raise FeatureCacheError(f"no feature for track {track_id!r}") from None
