"""Generator tests: determinism, signal calibration, corpus layout."""

import math

import numpy as np
import pytest

from relab.evalstats import auc
from relab.hashing import sha256_file
from relab.refpipe import EVENT_TYPES, Hyperparams, Standardizer, predict, train_logreg
from relab.synthdata import (
    TYPE_MIX,
    SynthConfig,
    course_id_for,
    derive_seed,
    generate_corpus,
    generate_session,
    sample_session,
    session_id_for,
    session_start,
)

SMALL = SynthConfig(
    num_courses=2,
    sessions_per_course=2,
    num_weeks=3,
    learners_per_session=40,
    seed=11,
)


def fit_and_score(X_train, y_train, X_test):
    std = Standardizer.fit(X_train)
    model = train_logreg(std.transform(X_train), y_train, Hyperparams())
    return predict(model, std.transform(X_test))


class TestConfigValidation:
    def test_defaults_are_valid(self):
        SynthConfig()

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"num_courses": 0},
            {"sessions_per_course": 0},
            {"num_weeks": 1},
            {"learners_per_session": 1},
            {"base_activity_rate": 0.0},
            {"dropout_hazard": 0.0},
            {"dropout_hazard": 1.0},
            {"session_shift_sd": -0.1},
            {"seed": -1},
            {"seed": 1 << 64},
        ],
    )
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ValueError):
            SynthConfig(**kwargs)

    def test_type_mix_is_a_distribution(self):
        assert len(TYPE_MIX) == len(EVENT_TYPES)
        assert math.isclose(float(TYPE_MIX.sum()), 1.0, abs_tol=1e-12)
        assert (TYPE_MIX > 0).all()


class TestIdsAndSeeds:
    def test_id_formats(self):
        assert course_id_for(3) == "course003"
        assert session_id_for(3, 0) == "course003-run1"

    def test_session_starts_are_increasing(self):
        starts = [session_start(i) for i in range(4)]
        assert starts == sorted(starts)
        assert len(set(starts)) == 4

    def test_derived_seeds_distinct_across_indices(self):
        seeds = {
            derive_seed(7, c, s) for c in range(10) for s in range(10)
        }
        assert len(seeds) == 100

    def test_derived_seed_sensitive_to_master_seed(self):
        assert derive_seed(1, 0, 0) != derive_seed(2, 0, 0)


class TestSampleSession:
    def test_shapes_and_ranges(self):
        s = sample_session(SMALL, 0, 0)
        n, w = SMALL.learners_per_session, SMALL.num_weeks
        assert s.counts.shape == (n, w, len(EVENT_TYPES))
        assert (s.counts >= 0).all()
        assert s.active_weeks.min() >= 1 and s.active_weeks.max() <= w
        assert len(s.learner_ids) == n

    def test_counts_zero_after_active_week(self):
        s = sample_session(SMALL, 0, 0)
        for i in range(len(s.learner_ids)):
            last = s.active_weeks[i]
            assert s.counts[i, last:, :].sum() == 0

    def test_week_one_counts_never_truncated(self):
        # learners dropping in week 1 still produce week-1 events
        cfg = SynthConfig(
            num_courses=1,
            sessions_per_course=1,
            num_weeks=3,
            learners_per_session=400,
            dropout_hazard=0.5,
            activity_effect=0.0,
            seed=5,
        )
        s = sample_session(cfg, 0, 0)
        week1_dropouts = s.active_weeks == 1
        assert week1_dropouts.any()
        assert s.counts[week1_dropouts, 0, :].sum() > 0

    def test_labels_match_final_week_inactivity(self):
        s = sample_session(SMALL, 0, 0)
        expected = (s.counts[:, -1, :].sum(axis=1) == 0).astype(np.int8)
        assert (s.labels == expected).all()

    def test_determinism(self):
        a = sample_session(SMALL, 1, 1)
        b = sample_session(SMALL, 1, 1)
        assert (a.counts == b.counts).all()
        assert (a.active_weeks == b.active_weeks).all()

    def test_out_of_range_indices(self):
        with pytest.raises(ValueError):
            sample_session(SMALL, SMALL.num_courses, 0)
        with pytest.raises(ValueError):
            sample_session(SMALL, 0, SMALL.sessions_per_course)


class TestSignalCalibration:
    def test_no_activity_effect_gives_null_auc(self):
        # with activity_effect 0 the labels ignore the counts entirely, so
        # a week-1 model (whose features are never truncated) scores ~0.5
        cfg = SynthConfig(
            num_courses=1,
            sessions_per_course=2,
            learners_per_session=3000,
            activity_effect=0.0,
            session_shift_sd=0.0,
            seed=13,
        )
        train = sample_session(cfg, 0, 0)
        test = sample_session(cfg, 0, 1)
        scores = fit_and_score(
            train.feature_matrix(1), train.labels, test.feature_matrix(1)
        )
        value = auc(scores, test.labels)
        assert 0.45 < value < 0.55

    def test_strong_effect_gives_learnable_holdout_signal(self):
        cfg = SynthConfig(
            num_courses=1,
            sessions_per_course=2,
            learners_per_session=800,
            activity_effect=2.0,
            session_shift_sd=0.0,
            seed=13,
        )
        train = sample_session(cfg, 0, 0)
        test = sample_session(cfg, 0, 1)
        scores = fit_and_score(
            train.feature_matrix(1), train.labels, test.feature_matrix(1)
        )
        assert auc(scores, test.labels) > 0.7

    def test_stronger_effect_does_not_reduce_holdout_auc(self):
        # one-sided sign test over 20 seeds at alpha=0.05
        wins = 0
        n_seeds = 20
        for seed in range(n_seeds):
            aucs = []
            for eff in (0.8, 2.4):
                cfg = SynthConfig(
                    num_courses=1,
                    sessions_per_course=2,
                    learners_per_session=300,
                    activity_effect=eff,
                    session_shift_sd=0.0,
                    seed=100 + seed,
                )
                train = sample_session(cfg, 0, 0)
                test = sample_session(cfg, 0, 1)
                scores = fit_and_score(
                    train.feature_matrix(1), train.labels, test.feature_matrix(1)
                )
                aucs.append(auc(scores, test.labels))
            wins += aucs[1] > aucs[0]
        # P(X >= wins | p=0.5) must be < 0.05: with n=20 that needs >= 15
        tail = sum(
            math.comb(n_seeds, i) for i in range(wins, n_seeds + 1)
        ) / 2 ** n_seeds
        assert tail < 0.05, f"wins={wins}/{n_seeds}, tail={tail:.4f}"


class TestGenerateSession:
    def test_event_log_counts_match_sample(self):
        log = generate_session(SMALL, 0, 0)
        sample = sample_session(SMALL, 0, 0)
        assert len(log.timestamps) == sample.counts.sum()

    def test_event_log_is_deterministic(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        generate_session(SMALL, 0, 1).write_dir(d1, course_id="course000")
        generate_session(SMALL, 0, 1).write_dir(d2, course_id="course000")
        assert (d1 / "events.csv").read_bytes() == (d2 / "events.csv").read_bytes()
        assert (d1 / "session.json").read_bytes() == (
            d2 / "session.json"
        ).read_bytes()


class TestGenerateCorpus:
    def test_layout_and_descriptors(self, tmp_path):
        descs = generate_corpus(SMALL, tmp_path)
        assert len(descs) == SMALL.num_courses
        for d in descs:
            assert len(d["sessions"]) == SMALL.sessions_per_course
            for s in d["sessions"]:
                sdir = tmp_path / "data" / d["course_id"] / s["session_id"]
                assert (sdir / "events.csv").is_file()
                assert (sdir / "session.json").is_file()

    def test_session_starts_ordered_in_descriptor(self, tmp_path):
        descs = generate_corpus(SMALL, tmp_path)
        for d in descs:
            dates = [s["start_date"] for s in d["sessions"]]
            assert dates == sorted(dates)
            assert len(set(dates)) == len(dates)

    def test_refuses_non_empty_target(self, tmp_path):
        (tmp_path / "data").mkdir()
        (tmp_path / "data" / "junk.txt").write_text("x")
        with pytest.raises(ValueError, match="not empty"):
            generate_corpus(SMALL, tmp_path)

    def test_regeneration_identical_digests(self, tmp_path):
        generate_corpus(SMALL, tmp_path / "r1")
        generate_corpus(SMALL, tmp_path / "r2")
        files1 = sorted((tmp_path / "r1").rglob("*.csv")) + sorted(
            (tmp_path / "r1").rglob("*.json")
        )
        assert files1
        for f1 in files1:
            f2 = tmp_path / "r2" / f1.relative_to(tmp_path / "r1")
            assert sha256_file(f1) == sha256_file(f2)
