"""Similarity network over CQ-spectrogram pairs.

A shared convolutional branch turns each input into four deep sequences at
decreasing time resolution; level-wise cross-similarity matrices of squared
Euclidean distances feed two small CNNs whose flattened outputs meet in a
four-neuron layer and a sigmoid score.  Loss and checkpoint I/O live here
too.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

EPSILON = 1e-7

CHECKPOINT_FORMAT_VERSION = 1
_MANIFEST_NAME = "manifest.json"

REFERENCE_WIDTHS = (194, 93, 43, 37)
REFERENCE_FLAT_SIZES = (32768, 2048, 1024, 1024)


class ConfigError(ValueError):
    """Model geometry cannot produce the required shapes."""


class CheckpointError(Exception):
    """A checkpoint file is unreadable or disagrees with the expected config."""


def _astuple(value):
    if value is None:
        return None
    return tuple(value)


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the branch and head, validated by shape propagation.

    expected_widths / expected_flat_sizes pin the published sequence widths
    and flattened head sizes; pass None to lift the pin (reduced test
    geometries).
    """

    n_bins: int = 72
    n_frames: int = 401
    branch_channels: tuple = (32, 64, 128, 128)
    freq_kernels: tuple = (12, 7, 5, 3)
    time_kernels: tuple = (13, 9, 7, 7)
    freq_pools: tuple = (2, 2, 2, 1)
    time_pools: tuple = (2, 2, 2, 1)
    dropout: float = 0.2
    head12_channels: tuple = (32, 64, 128)
    head34_channels: tuple = (32, 64)
    head12_grids: tuple = (16, 4)
    head34_grids: tuple = (4, 4)
    share_head_weights: bool = True
    expected_widths: Optional[tuple] = REFERENCE_WIDTHS
    expected_flat_sizes: Optional[tuple] = REFERENCE_FLAT_SIZES

    def __post_init__(self):
        for name in (
            "branch_channels",
            "freq_kernels",
            "time_kernels",
            "freq_pools",
            "time_pools",
            "head12_channels",
            "head34_channels",
            "head12_grids",
            "head34_grids",
            "expected_widths",
            "expected_flat_sizes",
        ):
            object.__setattr__(self, name, _astuple(getattr(self, name)))
        if self.n_bins < 1 or self.n_frames < 1:
            raise ConfigError("input grid must be at least 1x1")
        n = len(self.branch_channels)
        if n != 4:
            raise ConfigError(f"branch needs 4 blocks, got {n}")
        for name in ("freq_kernels", "time_kernels", "freq_pools", "time_pools"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} must list {n} blocks")
        if any(c < 1 for c in self.branch_channels):
            raise ConfigError("branch channel counts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if len(self.head12_grids) != 2 or len(self.head34_grids) != 2:
            raise ConfigError("head grids must give one edge per level")
        if not self.head12_channels or not self.head34_channels:
            raise ConfigError("head conv stacks need at least one block")
        self._validate_shapes()

    def _validate_shapes(self):
        widths = self.branch_widths
        if self.expected_widths is not None:
            for k, (got, want) in enumerate(zip(widths, self.expected_widths), start=1):
                if got != want:
                    raise ConfigError(f"T{k} = {got}, expected {want}")
        for level, edge in enumerate(widths, start=1):
            depth = len(self.head12_channels if level <= 2 else self.head34_channels)
            size = edge
            for stage in range(depth):
                size = size // 2
                if size < 1:
                    raise ConfigError(
                        f"head stage {stage + 1} pools the C{level} grid to zero"
                    )
        if self.expected_flat_sizes is not None:
            for k, (got, want) in enumerate(
                zip(self.flat_sizes, self.expected_flat_sizes), start=1
            ):
                if got != want:
                    raise ConfigError(
                        f"flattened size for C{k} = {got}, expected {want}"
                    )

    def _branch_sizes(self) -> tuple[tuple, tuple]:
        freq, time = self.n_bins, self.n_frames
        freqs, times = [], []
        for k in range(len(self.branch_channels)):
            if self.freq_kernels[k] > freq:
                raise ConfigError(
                    f"block {k + 1} frequency kernel {self.freq_kernels[k]} "
                    f"exceeds input height {freq}"
                )
            if self.time_kernels[k] > time:
                raise ConfigError(
                    f"block {k + 1} time kernel {self.time_kernels[k]} "
                    f"exceeds input width {time}"
                )
            freq = (freq - self.freq_kernels[k] + 1) // self.freq_pools[k]
            time = (time - self.time_kernels[k] + 1) // self.time_pools[k]
            if freq < 1 or time < 1:
                raise ConfigError(f"block {k + 1} pools its output away")
            freqs.append(freq)
            times.append(time)
        return tuple(freqs), tuple(times)

    @property
    def branch_widths(self) -> tuple:
        return self._branch_sizes()[1]

    @property
    def branch_heights(self) -> tuple:
        return self._branch_sizes()[0]

    @property
    def flat_sizes(self) -> tuple:
        grids = self.head12_grids + self.head34_grids
        channels = (
            self.head12_channels[-1],
            self.head12_channels[-1],
            self.head34_channels[-1],
            self.head34_channels[-1],
        )
        return tuple(c * g * g for c, g in zip(channels, grids))


def shape_report(config: ModelConfig) -> dict:
    """Propagated sizes for logging and construction-time checks."""
    return {
        "widths": config.branch_widths,
        "heights": config.branch_heights,
        "flat_sizes": config.flat_sizes,
    }


@dataclass(frozen=True)
class DeepSequences:
    """Per-level sequence matrices, channels x time (batch dim optional)."""

    levels: tuple

    def __post_init__(self):
        if not self.levels:
            raise ValueError("DeepSequences needs at least one level")

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    @property
    def widths(self) -> tuple:
        return tuple(int(level.shape[-1]) for level in self.levels)


@dataclass(frozen=True)
class CSMSet:
    """Per-level cross-similarity matrices of squared Euclidean distances."""

    levels: tuple

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)


def compute_csms(a: DeepSequences, b: DeepSequences) -> CSMSet:
    """C_k(i, j) = squared Euclidean distance of column i of A_k and column j of B_k."""
    if len(a) != len(b):
        raise ValueError(f"level count mismatch: {len(a)} vs {len(b)}")
    levels = []
    for k, (sa, sb) in enumerate(zip(a, b), start=1):
        if sa.shape[-2] != sb.shape[-2]:
            raise ValueError(
                f"level {k} channel mismatch: {sa.shape[-2]} vs {sb.shape[-2]}"
            )
        aa = sa.pow(2).sum(dim=-2)
        bb = sb.pow(2).sum(dim=-2)
        cross = sa.transpose(-2, -1) @ sb
        csm = aa.unsqueeze(-1) + bb.unsqueeze(-2) - 2.0 * cross
        levels.append(csm.clamp_min(0.0))
    return CSMSet(tuple(levels))


@dataclass(frozen=True)
class PairTrace:
    """Intermediate activations of one scored pair, for inspection."""

    sequences_a: DeepSequences
    sequences_b: DeepSequences
    csms: CSMSet
    hidden: torch.Tensor
    score: torch.Tensor


class SiameseBranch(nn.Module):
    """Four conv blocks; each block output collapses frequency by global max."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        blocks = []
        in_channels = 1
        for k in range(len(config.branch_channels)):
            layers = [
                nn.Conv2d(
                    in_channels,
                    config.branch_channels[k],
                    (config.freq_kernels[k], config.time_kernels[k]),
                ),
                nn.ReLU(),
            ]
            if config.freq_pools[k] > 1 or config.time_pools[k] > 1:
                layers.append(
                    nn.MaxPool2d((config.freq_pools[k], config.time_pools[k]))
                )
            layers.append(nn.Dropout(config.dropout))
            blocks.append(nn.Sequential(*layers))
            in_channels = config.branch_channels[k]
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> tuple:
        sequences = []
        h = x
        for block in self.blocks:
            h = block(h)
            sequences.append(h.amax(dim=2))
        return tuple(sequences)


def _conv_stack(channels: Sequence[int]) -> nn.Sequential:
    layers = []
    in_channels = 1
    for out_channels in channels:
        layers += [
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(),
            nn.MaxPool2d(2),
        ]
        in_channels = out_channels
    return nn.Sequential(*layers)


class SimilarityHead(nn.Module):
    """Two CSM conv stacks, four per-level neurons, one sigmoid output."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        stacks = nn.ModuleDict()
        if config.share_head_weights:
            stacks["conv12"] = _conv_stack(config.head12_channels)
            stacks["conv34"] = _conv_stack(config.head34_channels)
            self._stack_keys = ("conv12", "conv12", "conv34", "conv34")
        else:
            stacks["conv12_c1"] = _conv_stack(config.head12_channels)
            stacks["conv12_c2"] = _conv_stack(config.head12_channels)
            stacks["conv34_c3"] = _conv_stack(config.head34_channels)
            stacks["conv34_c4"] = _conv_stack(config.head34_channels)
            self._stack_keys = ("conv12_c1", "conv12_c2", "conv34_c3", "conv34_c4")
        self.stacks = stacks
        grids = config.head12_grids + config.head34_grids
        self.pools = tuple(nn.AdaptiveMaxPool2d(g) for g in grids)
        self.level_fc = nn.ModuleList(
            nn.Linear(flat, 1) for flat in config.flat_sizes
        )
        self.output = nn.Linear(len(config.flat_sizes), 1)

    def forward(self, csms: CSMSet, return_hidden: bool = False):
        if len(csms) != len(self._stack_keys):
            raise ValueError(
                f"head expects {len(self._stack_keys)} CSMs, got {len(csms)}"
            )
        hidden = []
        for k, csm in enumerate(csms):
            x = csm.unsqueeze(-3)
            if x.dim() == 3:
                x = x.unsqueeze(0)
            features = self.pools[k](self.stacks[self._stack_keys[k]](x))
            hidden.append(self.level_fc[k](features.flatten(1)))
        hidden = torch.cat(hidden, dim=1)
        score = torch.sigmoid(self.output(hidden)).squeeze(-1)
        if return_hidden:
            return score, hidden
        return score


class SimilarityModel(nn.Module):
    """Siamese branch + CSM computation + similarity head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.branch = SiameseBranch(config)
        self.head = SimilarityHead(config)

    def _as_batch(self, x) -> tuple[torch.Tensor, bool]:
        dtype = next(self.parameters()).dtype
        t = torch.as_tensor(np.asarray(x) if isinstance(x, np.ndarray) else x)
        t = t.to(dtype)
        expected = (self.config.n_bins, self.config.n_frames)
        if t.dim() == 2:
            if tuple(t.shape) != expected:
                raise ValueError(f"input shape {tuple(t.shape)}, expected {expected}")
            return t.unsqueeze(0), False
        if t.dim() == 3:
            if tuple(t.shape[1:]) != expected:
                raise ValueError(
                    f"input shape {tuple(t.shape)}, expected (batch, *{expected})"
                )
            return t, True
        raise ValueError(f"input must be 2-D or batched 3-D, got {t.dim()}-D")

    def branch_forward(self, x) -> DeepSequences:
        batch, batched = self._as_batch(x)
        levels = self.branch(batch.unsqueeze(1))
        if not batched:
            levels = tuple(level.squeeze(0) for level in levels)
        return DeepSequences(levels)

    def similarity_head(self, csms: CSMSet) -> torch.Tensor:
        score = self.head(csms)
        if csms.levels[0].dim() == 2:
            score = score.squeeze(0)
        return score

    def forward_pair(self, x1, x2) -> torch.Tensor:
        batch1, batched = self._as_batch(x1)
        batch2, batched2 = self._as_batch(x2)
        if batch1.shape[0] != batch2.shape[0]:
            raise ValueError(
                f"pair batch sizes differ: {batch1.shape[0]} vs {batch2.shape[0]}"
            )
        if batched != batched2:
            raise ValueError("both pair inputs must be batched, or neither")
        a = DeepSequences(self.branch(batch1.unsqueeze(1)))
        b = DeepSequences(self.branch(batch2.unsqueeze(1)))
        score = self.head(compute_csms(a, b))
        return score if batched else score.squeeze(0)

    forward = forward_pair

    def inspect_pair(self, x1, x2) -> PairTrace:
        batch1, batched = self._as_batch(x1)
        batch2, batched2 = self._as_batch(x2)
        if batched != batched2:
            raise ValueError("both pair inputs must be batched, or neither")
        if batch1.shape[0] != batch2.shape[0]:
            raise ValueError(
                f"pair batch sizes differ: {batch1.shape[0]} vs {batch2.shape[0]}"
            )
        a = DeepSequences(self.branch(batch1.unsqueeze(1)))
        b = DeepSequences(self.branch(batch2.unsqueeze(1)))
        csms = compute_csms(a, b)
        score, hidden = self.head(csms, return_hidden=True)
        if not batched:
            a = DeepSequences(tuple(level.squeeze(0) for level in a))
            b = DeepSequences(tuple(level.squeeze(0) for level in b))
            csms = CSMSet(tuple(level.squeeze(0) for level in csms))
            score = score.squeeze(0)
            hidden = hidden.squeeze(0)
        return PairTrace(a, b, csms, hidden, score)


def init_model(config: ModelConfig, seed: int = 0) -> SimilarityModel:
    """Build a model with deterministic parameter initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SimilarityModel(config)
    model.eval()
    return model


def bce_loss(scores, labels, reduction: str = "mean") -> torch.Tensor:
    """Binary cross-entropy with scores clamped to [eps, 1 - eps].

    reduction selects mean (default), sum, or none for per-sample values.
    """
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    s = scores if torch.is_tensor(scores) else torch.as_tensor(scores, dtype=torch.float32)
    y = labels if torch.is_tensor(labels) else torch.as_tensor(labels)
    y = y.to(s.dtype)
    if not torch.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be exactly 0 or 1")
    p = s.clamp(EPSILON, 1.0 - EPSILON)
    per_sample = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "sum":
        return per_sample.sum()
    return per_sample


def config_digest(config: ModelConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class LoadedCheckpoint:
    model: SimilarityModel
    config: ModelConfig
    meta: dict


def save_checkpoint(model: SimilarityModel, meta: dict, path) -> None:
    """Write the model as a zip of a JSON manifest plus raw tensor blobs."""
    state = model.state_dict()
    entries = []
    blobs = {}
    for name, tensor in state.items():
        array = tensor.detach().cpu().numpy()
        dtype = "<i8" if array.dtype.kind in "iu" else "<f4"
        array = array.astype(dtype)
        entries.append({"name": name, "shape": list(array.shape), "dtype": dtype})
        blobs[f"params/{name}.bin"] = array.tobytes()
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": asdict(model.config),
        "config_digest": config_digest(model.config),
        "parameters": entries,
        "meta": dict(meta),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        archive.writestr(_MANIFEST_NAME, json.dumps(manifest, indent=2))
        for blob_name, blob in blobs.items():
            archive.writestr(blob_name, blob)


def _config_diff(stored: ModelConfig, expected: ModelConfig) -> str:
    stored_d, expected_d = asdict(stored), asdict(expected)
    lines = [
        f"{key}: checkpoint={stored_d[key]!r} expected={expected_d[key]!r}"
        for key in sorted(stored_d)
        if stored_d[key] != expected_d[key]
    ]
    return "; ".join(lines)


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None) -> LoadedCheckpoint:
    """Rebuild a model from a checkpoint, verifying config agreement."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as archive:
            manifest = json.loads(archive.read(_MANIFEST_NAME))
            raw = {
                entry["name"]: archive.read(f"params/{entry['name']}.bin")
                for entry in manifest["parameters"]
            }
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}"
        )
    try:
        config = ModelConfig(**manifest["config"])
    except (TypeError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint config invalid: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            "checkpoint config does not match: " + _config_diff(config, expected_config)
        )
    model = SimilarityModel(config)
    state = {}
    for entry in manifest["parameters"]:
        array = np.frombuffer(raw[entry["name"]], dtype=entry["dtype"])
        array = array.reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(array)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint parameters do not fit: {exc}") from exc
    model.eval()
    return LoadedCheckpoint(model=model, config=config, meta=manifest["meta"])
