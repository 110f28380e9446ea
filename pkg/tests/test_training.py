"""Tests for pair construction, splitting, and the epoch loop."""

import logging
import math

import numpy as np
import pytest
import torch

from livesong import model as m
from livesong import training as tr
from livesong.audio_features import InMemoryFeatureStore, ManifestError, TrackManifestEntry
from test_model import TINY


def make_entries(song_counts: dict) -> list:
    entries = []
    for song_id, count in song_counts.items():
        for i in range(count):
            entries.append(
                TrackManifestEntry(
                    track_id=f"{song_id}_t{i:02d}",
                    path=f"/audio/{song_id}_t{i:02d}.wav",
                    role="cover",
                    duration_s=120.0,
                    song_id=song_id,
                )
            )
    return entries


class TestBuildCliques:
    def test_three_tracks_one_song(self):
        cliques = tr.build_cliques(make_entries({"s1": 3}))
        assert len(cliques) == 1
        assert cliques[0].song_id == "s1"
        assert len(cliques[0].track_ids) == 3

    def test_empty_manifest(self):
        assert tr.build_cliques([]) == []

    def test_noise_entries_excluded(self):
        entries = make_entries({"s1": 2})
        entries.append(
            TrackManifestEntry(
                track_id="crowd", path="/audio/crowd.wav", role="noise", duration_s=60.0
            )
        )
        cliques = tr.build_cliques(entries)
        assert [c.song_id for c in cliques] == ["s1"]

    def test_duplicate_track_id_rejected(self):
        entries = make_entries({"s1": 2})
        entries.append(entries[0])
        with pytest.raises(ManifestError, match="duplicate"):
            tr.build_cliques(entries)

    def test_corpus_scale_ids_only(self):
        # 5800 songs of 11 tracks + 400 of 10 tracks = 6200 songs, 67800 tracks
        counts = {f"s{i:04d}": (11 if i < 5800 else 10) for i in range(6200)}
        cliques = tr.build_cliques(make_entries(counts))
        assert len(cliques) == 6200
        assert sum(len(c.track_ids) for c in cliques) == 67800
        pairs = tr.make_positive_pairs(cliques, cap=25)
        assert len(pairs) == 5800 * 55 + 400 * 45


class TestMakePositivePairs:
    def test_clique_of_three_gives_all_pairs(self):
        cliques = [tr.SongClique("s1", ("a", "b", "c"))]
        pairs = tr.make_positive_pairs(cliques)
        assert {(p.track_id_1, p.track_id_2) for p in pairs} == {
            ("a", "b"),
            ("a", "c"),
            ("b", "c"),
        }
        assert all(p.label == 1 and p.song_id_1 == p.song_id_2 == "s1" for p in pairs)

    def test_clique_of_30_caps_at_300_pairs(self):
        ids = tuple(f"v{i:02d}" for i in range(30))
        pairs = tr.make_positive_pairs([tr.SongClique("s1", ids)], cap=25)
        assert len(pairs) == 300
        used = {p.track_id_1 for p in pairs} | {p.track_id_2 for p in pairs}
        assert used == set(sorted(ids)[:25])

    def test_singleton_clique_gives_nothing(self):
        assert tr.make_positive_pairs([tr.SongClique("s1", ("only",))]) == []

    def test_cap_below_two_rejected(self):
        with pytest.raises(ValueError, match="cap"):
            tr.make_positive_pairs([tr.SongClique("s1", ("a", "b"))], cap=1)


class TestSplitBySong:
    def make_pairs(self, songs=10, tracks=3):
        cliques = tr.build_cliques(make_entries({f"s{i}": tracks for i in range(songs)}))
        return tr.make_positive_pairs(cliques)

    def test_ten_equal_songs_split_eight_two(self):
        train, val = tr.split_by_song(self.make_pairs(), ratio=0.8, seed=0)
        assert len({p.song_id_1 for p in train}) == 8
        assert len({p.song_id_1 for p in val}) == 2
        assert len(train) + len(val) == 30

    def test_song_sets_are_disjoint(self):
        train, val = tr.split_by_song(self.make_pairs(), seed=3)
        assert not ({p.song_id_1 for p in train} & {p.song_id_1 for p in val})

    def test_same_seed_is_identical(self):
        pairs = self.make_pairs()
        assert tr.split_by_song(pairs, seed=5) == tr.split_by_song(pairs, seed=5)

    def test_different_seed_changes_assignment(self):
        pairs = self.make_pairs()
        one = {p.song_id_1 for p in tr.split_by_song(pairs, seed=1)[1]}
        two = {p.song_id_1 for p in tr.split_by_song(pairs, seed=2)[1]}
        assert one != two

    def test_single_song_rejected(self):
        with pytest.raises(tr.SplitError, match="2 songs"):
            tr.split_by_song(self.make_pairs(songs=1))

    def test_both_sides_nonempty_even_for_extreme_ratio(self):
        pairs = self.make_pairs(songs=3)
        train, val = tr.split_by_song(pairs, ratio=0.99, seed=0)
        assert train and val


class TestSampleNegativePairs:
    def ample_cliques(self, songs=30, tracks=5):
        return tr.build_cliques(make_entries({f"s{i:02d}": tracks for i in range(songs)}))

    def test_three_hundred_for_one_hundred_positives(self):
        negs = tr.sample_negative_pairs(
            self.ample_cliques(), 300, np.random.default_rng(0)
        )
        assert len(negs) == 300
        assert all(p.label == 0 and p.song_id_1 != p.song_id_2 for p in negs)
        keys = {tuple(sorted((p.track_id_1, p.track_id_2))) for p in negs}
        assert len(keys) == 300

    def test_epoch_derived_rngs_differ(self):
        cliques = self.ample_cliques()
        one = tr.sample_negative_pairs(cliques, 50, np.random.default_rng((3, 1)))
        two = tr.sample_negative_pairs(cliques, 50, np.random.default_rng((3, 2)))
        assert set(one) ^ set(two)

    def test_same_rng_seed_is_deterministic(self):
        cliques = self.ample_cliques()
        one = tr.sample_negative_pairs(cliques, 50, np.random.default_rng(9))
        two = tr.sample_negative_pairs(cliques, 50, np.random.default_rng(9))
        assert one == two

    def test_unattainable_count_emits_max_with_warning(self, caplog):
        cliques = [tr.SongClique("s1", ("a",)), tr.SongClique("s2", ("b",))]
        with caplog.at_level(logging.WARNING, logger="livesong.training"):
            negs = tr.sample_negative_pairs(cliques, 5, np.random.default_rng(0))
        assert len(negs) == 1
        assert any("cross-song" in r.getMessage() for r in caplog.records)

    def test_dense_request_uses_every_pair_once(self):
        cliques = [tr.SongClique("s1", ("a", "b")), tr.SongClique("s2", ("c", "d"))]
        negs = tr.sample_negative_pairs(cliques, 3, np.random.default_rng(4))
        assert len(negs) == 3
        assert len(set(negs)) == 3
        assert all(p.song_id_1 != p.song_id_2 for p in negs)

    def test_single_clique_rejected(self):
        with pytest.raises(ValueError, match="2 cliques"):
            tr.sample_negative_pairs(
                [tr.SongClique("s1", ("a", "b"))], 1, np.random.default_rng(0)
            )


class TestBuildPairSets:
    def test_counts_and_disjointness(self):
        entries = make_entries({f"s{i}": 3 for i in range(10)})
        config = tr.TrainConfig()
        sets = tr.build_pair_sets(entries, config)
        stats = sets.stats()
        assert stats["train_positives"] == 24
        assert stats["val_positives"] == 6
        # 2 val songs x 3 tracks: only 9 cross-song pairs exist, 18 requested
        assert stats["val_negatives"] == 9
        train_songs = {c.song_id for c in sets.train_cliques}
        val_songs = {c.song_id for c in sets.val_cliques}
        assert not (train_songs & val_songs)
        assert len(sets.val_pairs) == 6 + 9

    def test_val_negatives_frozen_by_seed(self):
        entries = make_entries({f"s{i}": 3 for i in range(10)})
        one = tr.build_pair_sets(entries, tr.TrainConfig())
        two = tr.build_pair_sets(entries, tr.TrainConfig())
        assert one.val_negatives == two.val_negatives

    def test_single_val_song_gets_no_negatives(self, caplog):
        entries = make_entries({"s0": 2, "s1": 2, "s2": 2})
        with caplog.at_level(logging.WARNING, logger="livesong.training"):
            sets = tr.build_pair_sets(entries, tr.TrainConfig())
        assert sets.val_negatives == ()
        assert len(sets.val_cliques) == 1
        assert len(sets.train_positives) + len(sets.val_positives) == 3
        assert any("validation negatives" in r.getMessage() for r in caplog.records)

    def test_capped_cliques_feed_negatives(self):
        entries = make_entries({"s0": 30, "s1": 30, "s2": 30, "s3": 30})
        config = tr.TrainConfig(split_ratio=0.5)
        sets = tr.build_pair_sets(entries, config)
        for clique in sets.train_cliques + sets.val_cliques:
            assert len(clique.track_ids) <= config.cover_cap


class TestPairsFile:
    def test_roundtrip(self, tmp_path):
        pairs = tr.make_positive_pairs([tr.SongClique("s1", ("a", "b", "c"))])
        path = tmp_path / "pairs.jsonl"
        tr.write_pairs(pairs, path)
        assert tr.read_pairs(path) == pairs

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"track_id_1": "a"}\n')
        with pytest.raises(tr.PairFileError, match="pairs.jsonl:1"):
            tr.read_pairs(path)

    def test_invariant_violation_rejected(self, tmp_path):
        path = tmp_path / "pairs.jsonl"
        path.write_text(
            '{"track_id_1": "a", "track_id_2": "b", "label": 1, '
            '"song_id_1": "s1", "song_id_2": "s2"}\n'
        )
        with pytest.raises(tr.PairFileError, match="share a song"):
            tr.read_pairs(path)


class TestTrackPair:
    def test_self_pair_rejected(self):
        with pytest.raises(ValueError, match="repeats"):
            tr.TrackPair("a", "a", 1, "s1", "s1")

    def test_negative_same_song_rejected(self):
        with pytest.raises(ValueError, match="cross songs"):
            tr.TrackPair("a", "b", 0, "s1", "s1")


class TestTrainConfig:
    def test_defaults_match_training_protocol(self):
        config = tr.TrainConfig()
        assert config.batch_size == 8
        assert config.lr == 0.001
        assert config.scheduler_factor == 0.1
        assert config.scheduler_patience == 5
        assert config.max_epochs == 50
        assert config.negative_ratio == 3
        assert config.cover_cap == 25
        assert config.split_ratio == 0.8

    def test_seed_dict_coerces(self):
        config = tr.TrainConfig(seeds={"split": 7})
        assert config.seeds == tr.Seeds(split=7)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"split_ratio": 1.0},
            {"scheduler_factor": 0.0},
            {"batch_size": 0},
            {"cover_cap": 1},
            {"negative_ratio": 0},
        ],
    )
    def test_invalid_values_rejected(self, overrides):
        with pytest.raises(ValueError):
            tr.TrainConfig(**overrides)


class TestPlateauScheduler:
    def make(self, patience=5):
        param = torch.nn.Parameter(torch.zeros(1))
        optimizer = torch.optim.Adam([param], lr=0.001, amsgrad=True)
        return tr.PlateauScheduler(optimizer, factor=0.1, patience=patience)

    def test_two_reductions_reach_1e_minus_5(self):
        sched = self.make()
        sched.step(1.0)
        for _ in range(10):
            sched.step(1.0)
        assert sched.lr == pytest.approx(1e-5)

    def test_equal_loss_counts_as_no_improvement(self):
        sched = self.make(patience=2)
        sched.step(0.5)
        sched.step(0.5)
        assert sched.lr == pytest.approx(0.001)
        sched.step(0.5)
        assert sched.lr == pytest.approx(1e-4)

    def test_improvement_resets_the_counter(self):
        sched = self.make()
        sched.step(1.0)
        for _ in range(4):
            sched.step(1.0)
        sched.step(0.9)
        for _ in range(4):
            sched.step(0.95)
        assert sched.lr == pytest.approx(0.001)
        sched.step(0.95)
        assert sched.lr == pytest.approx(1e-4)


class _StubModel:
    """Deterministic stand-in with the tiny slice of the model interface
    validate() touches."""

    training = False

    def eval(self):
        return self

    def train(self, mode=True):
        return self

    def forward_pair(self, x1, x2):
        raise NotImplementedError


class OracleModel(_StubModel):
    def forward_pair(self, x1, x2):
        x1, x2 = np.asarray(x1), np.asarray(x2)
        same = np.abs(x1 - x2).max(axis=(1, 2)) < 1e-6
        return torch.from_numpy(np.where(same, 1.0 - 1e-7, 1e-7))


class ConstantModel(_StubModel):
    def __init__(self, value=0.5):
        self.value = value

    def forward_pair(self, x1, x2):
        return torch.full((len(np.asarray(x1)),), self.value, dtype=torch.float64)


def small_dataset(songs=10, tracks=2, shape=(8, 32)):
    entries = make_entries({f"s{i}": tracks for i in range(songs)})
    rng = np.random.default_rng(0)
    store = InMemoryFeatureStore(
        {e.track_id: rng.standard_normal(shape).astype(np.float32) for e in entries}
    )
    return entries, store


class TestValidate:
    def test_perfect_model_loss_near_zero(self):
        # positives share one underlying array; negatives never do
        rng = np.random.default_rng(1)
        base = {f"s{i}": rng.standard_normal((8, 32)).astype(np.float32) for i in range(3)}
        store = InMemoryFeatureStore(
            {f"s{i}_t{j}": base[f"s{i}"] for i in range(3) for j in range(2)}
        )
        pairs = [
            tr.TrackPair("s0_t0", "s0_t1", 1, "s0", "s0"),
            tr.TrackPair("s1_t0", "s1_t1", 1, "s1", "s1"),
            tr.TrackPair("s0_t0", "s1_t0", 0, "s0", "s1"),
            tr.TrackPair("s2_t0", "s1_t1", 0, "s2", "s1"),
        ]
        report = tr.validate(OracleModel(), pairs, store)
        assert report.loss <= 1.2e-7
        assert report.histogram[0] == 2
        assert report.histogram[-1] == 2

    def test_constant_half_model_gives_ln_2(self):
        entries, store = small_dataset()
        pairs = tr.make_positive_pairs(tr.build_cliques(entries))[:6]
        report = tr.validate(ConstantModel(0.5), pairs, store)
        assert report.loss == pytest.approx(math.log(2.0), abs=1e-9)

    def test_repeated_calls_identical(self):
        entries, store = small_dataset()
        pairs = tr.make_positive_pairs(tr.build_cliques(entries))[:6]
        model = m.init_model(TINY, seed=2)
        first = tr.validate(model, pairs, store)
        second = tr.validate(model, pairs, store)
        assert first == second

    def test_restores_training_mode(self):
        entries, store = small_dataset()
        pairs = tr.make_positive_pairs(tr.build_cliques(entries))[:2]
        model = m.init_model(TINY, seed=2).train()
        tr.validate(model, pairs, store)
        assert model.training

    def test_empty_pairs_rejected(self):
        _, store = small_dataset()
        with pytest.raises(ValueError, match="at least one"):
            tr.validate(ConstantModel(), [], store)


class NanModel(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.weight = torch.nn.Parameter(torch.zeros(1))

    def forward_pair(self, x1, x2):
        return torch.full((len(np.asarray(x1)),), float("nan")) + self.weight


def quick_config(**overrides):
    defaults = dict(batch_size=4, max_epochs=3)
    defaults.update(overrides)
    return tr.TrainConfig(**defaults)


class TestTrain:
    def run_once(self, tmp_path, seed=2, **config_overrides):
        entries, store = small_dataset()
        config = quick_config(**config_overrides)
        sets = tr.build_pair_sets(entries, config)
        model = m.init_model(TINY, seed=seed)
        result = tr.train(model, sets, store, config, tmp_path / "best.ckpt")
        return result, sets

    def test_loop_trains_and_checkpoints_best_epoch(self, tmp_path):
        result, _ = self.run_once(tmp_path)
        assert len(result.stats) == 3
        assert result.checkpoint_path.exists()
        losses = [s.val_loss for s in result.stats]
        assert result.best_val_loss == min(losses)
        assert result.best_epoch == losses.index(min(losses)) + 1
        loaded = m.load_checkpoint(result.checkpoint_path, expected_config=TINY)
        assert loaded.meta["val_loss"] == result.best_val_loss
        assert loaded.meta["epoch"] == result.best_epoch
        assert loaded.meta["train_config"]["batch_size"] == 4

    def test_first_epoch_uses_initial_lr(self, tmp_path):
        result, _ = self.run_once(tmp_path)
        assert result.stats[0].lr == pytest.approx(0.001)
        assert result.stats[0].epoch == 1

    def test_identical_seeds_reproduce_stats(self, tmp_path):
        one, _ = self.run_once(tmp_path / "a")
        two, _ = self.run_once(tmp_path / "b")
        for s1, s2 in zip(one.stats, two.stats):
            assert s1.train_loss == pytest.approx(s2.train_loss, abs=1e-6)
            assert s1.val_loss == pytest.approx(s2.val_loss, abs=1e-6)
            assert s1.lr == s2.lr

    def test_on_epoch_hook_sees_every_epoch(self, tmp_path):
        entries, store = small_dataset()
        config = quick_config()
        sets = tr.build_pair_sets(entries, config)
        seen = []
        tr.train(
            m.init_model(TINY, seed=2),
            sets,
            store,
            config,
            tmp_path / "best.ckpt",
            on_epoch=seen.append,
        )
        assert [s.epoch for s in seen] == [1, 2, 3]

    def test_nan_loss_aborts_with_diagnostics(self, tmp_path):
        entries, store = small_dataset()
        config = quick_config()
        sets = tr.build_pair_sets(entries, config)
        with pytest.raises(tr.TrainingDivergedError) as excinfo:
            tr.train(NanModel(), sets, store, config, tmp_path / "best.ckpt")
        assert excinfo.value.epoch == 1
        assert excinfo.value.batch_index == 0
        assert excinfo.value.lr == pytest.approx(0.001)
