"""Command-line entry points for the identification toolkit.

Subcommands cover the full workflow: feature extraction into the on-disk
cache, pair construction, training, evaluation, one-shot identification,
and serving the HTTP API.  Exit codes: 0 success, 1 partial or runtime
failure, 2 usage or IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .audio_features import (
    CACHE_HEADER,
    CACHE_MAGIC,
    FLAG_STANDARDIZED,
    FRAMES_PER_WINDOW,
    METHODS,
    N_BINS,
    AudioDecodeError,
    CachedFeatureStore,
    FeatureCacheError,
    ManifestError,
    cache_path,
    compute_cqt,
    compute_raw_feature,
    load_audio,
    normalize_audio,
    read_manifest,
    select_segment,
    standardize_values,
    write_cqt_file,
)
from .augmentation import ConfigurationError, MixPolicy, build_noise_clip, load_noise_bank
from .model import ModelConfig, config_digest, init_model, load_checkpoint
from .retrieval import DBBuildError, build_db, evaluate
from .service import build_identify_payload, create_app
from .training import (
    PairFileError,
    Seeds,
    TrainConfig,
    TrainingDivergedError,
    build_pair_sets,
    train,
    write_pairs,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2

CHECKPOINT_NAME = "best.ckpt"
EPOCH_LOG_NAME = "epochs.jsonl"
CONFIG_ECHO_NAME = "config_used.json"


class AppConfigError(Exception):
    """The application config file is missing, malformed, or inconsistent."""


@dataclass(frozen=True)
class AppPaths:
    manifest: str
    features: str
    checkpoints: str

    def __post_init__(self):
        for name in ("manifest", "features", "checkpoints"):
            if not getattr(self, name):
                raise ValueError(f"paths.{name} must be a non-empty path")


@dataclass(frozen=True)
class AppConfig:
    paths: AppPaths
    method: str = "basic"
    train: TrainConfig = field(default_factory=TrainConfig)
    mix: MixPolicy = field(default_factory=MixPolicy)
    model: ModelConfig = field(default_factory=ModelConfig)
    service_port: int = 8080

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 1 <= self.service_port <= 65535:
            raise ValueError(f"service_port out of range: {self.service_port}")


_CONFIG_SECTIONS = {"paths", "method", "train", "mix", "model", "service_port"}


def load_app_config(path: Optional[str] = None) -> AppConfig:
    """Parse the config JSON at ``path``, or at ``$LIVESONG_CONFIG``."""
    path = path or os.environ.get("LIVESONG_CONFIG")
    if not path:
        raise AppConfigError(
            "no config file: pass --config or set the LIVESONG_CONFIG variable"
        )
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise AppConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise AppConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise AppConfigError(f"config {path} must hold a JSON object")
    unknown = set(raw) - _CONFIG_SECTIONS
    if unknown:
        raise AppConfigError(f"config {path} has unknown keys: {sorted(unknown)}")
    if "paths" not in raw:
        raise AppConfigError(f"config {path} is missing the paths section")
    try:
        mix_raw = dict(raw.get("mix", {}))
        for key in ("gain_choices_db", "delay_range_s"):
            if key in mix_raw:
                mix_raw[key] = tuple(mix_raw[key])
        return AppConfig(
            paths=AppPaths(**raw["paths"]),
            method=raw.get("method", "basic"),
            train=TrainConfig(**raw.get("train", {})),
            mix=MixPolicy(**mix_raw),
            model=ModelConfig(**raw.get("model", {})),
            service_port=raw.get("service_port", 8080),
        )
    except (TypeError, ValueError) as exc:
        raise AppConfigError(f"config {path} is invalid: {exc}") from exc


def _print_json(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _write_json(payload: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cache_is_fresh(audio_path, cqt_path, expected_shape=None) -> bool:
    """Up-to-date check for one cache entry: newer than the source audio,
    internally consistent header/size, raw flag, and (when known) shape."""
    cqt_path = Path(cqt_path)
    try:
        cache_stat = cqt_path.stat()
        if cache_stat.st_mtime < Path(audio_path).stat().st_mtime:
            return False
        with open(cqt_path, "rb") as fh:
            header = fh.read(CACHE_HEADER.size)
    except OSError:
        return False
    if len(header) != CACHE_HEADER.size:
        return False
    magic, rows, cols, flags = CACHE_HEADER.unpack(header)
    if magic != CACHE_MAGIC or flags & FLAG_STANDARDIZED:
        return False
    if cache_stat.st_size != CACHE_HEADER.size + 4 * rows * cols:
        return False
    return expected_shape is None or (rows, cols) == expected_shape


def cmd_extract_features(args) -> int:
    entries = read_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written, skipped, failed = [], [], []
    for entry in entries:
        target = cache_path(out_dir, entry.track_id)
        shape = None if entry.role == "noise" else (N_BINS, FRAMES_PER_WINDOW)
        if cache_is_fresh(entry.path, target, shape):
            skipped.append(entry.track_id)
            continue
        try:
            if entry.role == "noise":
                values = build_noise_clip(entry)
            else:
                values = compute_raw_feature(entry, args.method).values
            write_cqt_file(target, values, standardized=False)
            written.append(entry.track_id)
        except (AudioDecodeError, ValueError, OSError) as exc:
            log.warning("extraction failed for %s: %s", entry.track_id, exc)
            failed.append({"track_id": entry.track_id, "error": str(exc)})
    report = {
        "method": args.method,
        "out_dir": str(out_dir),
        "written": written,
        "skipped": skipped,
        "failed": failed,
    }
    _print_json(report)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_build_pairs(args) -> int:
    entries = read_manifest(args.manifest)
    config = TrainConfig(
        cover_cap=args.cap,
        split_ratio=args.ratio,
        seeds=Seeds(split=args.seed),
    )
    sets = build_pair_sets(entries, config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_pairs(sets.train_positives, out_dir / "train_pairs.jsonl")
    write_pairs(sets.val_pairs, out_dir / "val_pairs.jsonl")
    positives = len(sets.train_positives) + len(sets.val_positives)
    stats = dict(
        sets.stats(),
        seed=args.seed,
        cover_cap=args.cap,
        split_ratio=args.ratio,
        achieved_ratio=len(sets.train_positives) / positives,
    )
    _write_json(stats, out_dir / "pair_stats.json")
    _print_json(stats)
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_app_config(args.config)
    manifest = Path(config.paths.manifest)
    features = Path(config.paths.features)
    if not manifest.is_file():
        raise AppConfigError(f"manifest not found: {manifest}")
    if not features.is_dir():
        raise AppConfigError(f"feature cache directory not found: {features}")
    checkpoints = Path(config.paths.checkpoints)
    checkpoints.mkdir(parents=True, exist_ok=True)

    entries = read_manifest(manifest)
    store = CachedFeatureStore(features)
    bank = None
    if config.method == "crowd":
        noise_entries = [e for e in entries if e.role == "noise"]
        bank = load_noise_bank(noise_entries, cache_dir=features)
    sets = build_pair_sets(entries, config.train)
    model = init_model(config.model, seed=config.train.seeds.model_init)

    _write_json(asdict(config), checkpoints / CONFIG_ECHO_NAME)
    final_path = checkpoints / CHECKPOINT_NAME
    partial_path = checkpoints / (CHECKPOINT_NAME + ".tmp")
    with open(checkpoints / EPOCH_LOG_NAME, "w") as log_fh:

        def on_epoch(stats) -> None:
            log_fh.write(json.dumps(asdict(stats)) + "\n")
            log_fh.flush()
            log.info(
                "epoch %d: train %.4f, val %.4f, lr %g",
                stats.epoch,
                stats.train_loss,
                stats.val_loss,
                stats.lr,
            )

        try:
            result = train(
                model,
                sets,
                store,
                config.train,
                partial_path,
                bank=bank,
                policy=config.mix,
                on_epoch=on_epoch,
            )
        except BaseException:
            partial_path.unlink(missing_ok=True)
            raise
    os.replace(partial_path, final_path)
    _print_json(
        {
            "checkpoint": str(final_path),
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "epochs_run": len(result.stats),
        }
    )
    return EXIT_OK


def _load_model(checkpoint: str):
    path = Path(checkpoint)
    if not path.is_file():
        raise FeatureCacheError(f"checkpoint not found: {path}")
    loaded = load_checkpoint(path)
    checkpoint_id = f"{path.name}:{config_digest(loaded.config)[:12]}"
    return loaded.model, checkpoint_id


def cmd_evaluate(args) -> int:
    model, _ = _load_model(args.checkpoint)
    store = CachedFeatureStore(args.features)
    db = build_db(read_manifest(args.db_manifest), store)
    report = evaluate(model, db, read_manifest(args.query_manifest), store)
    payload = report.to_json_dict()
    _print_json(payload)
    if args.out:
        _write_json(payload, args.out)
    return EXIT_OK


def _query_feature_from_file(audio_path, start_s: float, query_id: str):
    samples, rate = load_audio(audio_path)
    clip = normalize_audio(samples, rate, source_id=query_id)
    segment = select_segment(clip, start_s)
    return standardize_values(compute_cqt(segment, track_id=query_id).values)


def cmd_identify(args) -> int:
    started = time.perf_counter()
    model, checkpoint_id = _load_model(args.checkpoint)
    db = build_db(read_manifest(args.db), CachedFeatureStore(args.features))
    query_id = Path(args.audio).stem
    feature = _query_feature_from_file(args.audio, args.chorus_start, query_id)
    payload = build_identify_payload(
        model, db, feature, query_id, checkpoint_id, args.top_k, started=started
    )
    if args.out:
        _write_json(payload, args.out)
    if args.json:
        _print_json(payload)
    else:
        print(f"query {payload['query_id']} against {payload['db_size']} references")
        for position, row in enumerate(payload["results"], start=1):
            print(
                f"{position:4d}  {row['track_id']:<24} {row['song_id']:<24} "
                f"{row['score']:.6f}"
            )
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    model, checkpoint_id = _load_model(args.checkpoint)
    db = build_db(read_manifest(args.db), CachedFeatureStore(args.features))
    app = create_app(model, db, checkpoint_id, max_body_bytes=args.max_bytes)
    log.info("serving %d references on %s:%d", len(db), args.host, args.port)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="livesong",
        description="Identify studio versions of live music recordings.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-features", help="populate the feature cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--method", choices=METHODS, default="basic")
    p.set_defaults(handler=cmd_extract_features)

    p = sub.add_parser("build-pairs", help="construct train/val pair files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--cap", type=int, default=25)
    p.add_argument("--ratio", type=float, default=0.8)
    p.set_defaults(handler=cmd_build_pairs)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="retrieval metrics for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--db-manifest", required=True)
    p.add_argument("--query-manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("identify", help="rank the database for one audio file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--chorus-start", type=float, default=0.0)
    p.add_argument("--json", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_identify)

    p = sub.add_parser("serve", help="run the HTTP identification service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--max-bytes", type=int, default=100 * 1024 * 1024)
    p.set_defaults(handler=cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except (
        AppConfigError,
        AudioDecodeError,
        ConfigurationError,
        DBBuildError,
        FeatureCacheError,
        ManifestError,
        PairFileError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
