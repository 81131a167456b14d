"""
Tests for the n-gram and SCFD baselines.
"""

import numpy as np
import pytest

from core.baselines import (
    LabeledTrace,
    NgramDb,
    ScfdProfile,
    build_ngram_db,
    find_event_ngrams,
    frequency_vector,
    ngram_detect,
    scfd_classify,
    scfd_detect,
    scfd_fit,
    sliding_grams,
)
from core.config import AttackSpec, VerifierConfig
from core.detector import AnomalyKind
from core.event_analysis import CompositeEvent
from core.fsa_model import TraceRecord, partition_windows
from core.simulator import scenario, simulate
from core.verifier import EventVerifier


def _records(*names):
    return [TraceRecord(i * 0.001, 0x10 + 4 * i, name) for i, name in enumerate(names)]


@pytest.fixture(scope="module")
def training_run():
    """The threshold-40 SyringePump training sweep."""
    return simulate(*scenario("syringe_train"))


@pytest.fixture(scope="module")
def branch_attack():
    return simulate(*scenario("syringe_branch_attack", cycles=25))


class TestNgramDb:
    """Test building the n-gram database"""

    def test_sliding_grams(self):
        """Test every window with its start index"""
        assert list(sliding_grams(["a", "b", "c", "d"], 3)) == [(0, ("a", "b", "c")), (1, ("b", "c", "d"))]

    def test_build(self):
        """Test grams from several traces"""
        db = build_ngram_db([_records("open", "read", "write"), _records("read", "write", "close")], 2)
        assert db.grams == {("open", "read"), ("read", "write"), ("write", "close")}
        assert ("read", "write") in db

    def test_n_too_small(self):
        """Test n must be at least two"""
        with pytest.raises(ValueError):
            build_ngram_db([_records("open", "read")], 1)

    def test_short_traces_skipped(self, caplog):
        """Test traces shorter than n are skipped with a warning"""
        db = build_ngram_db([_records("open"), _records("open", "read", "write")], 3)
        assert db.grams == {("open", "read", "write")}
        assert "shorter than n=3" in caplog.text
        with pytest.raises(ValueError):
            build_ngram_db([_records("open")], 3)

    def test_unknown_gram(self):
        """Test unseen grams are reported at their last record"""
        db = build_ngram_db([_records("open", "read", "write", "close")], 2)
        reports = ngram_detect(db, _records("open", "read", "execve", "close"))
        assert [r.kind for r in reports] == [AnomalyKind.UNKNOWN_NGRAM] * 2
        assert reports[0].record.syscall == "execve"
        assert reports[0].evidence["gram"] == ["read", "execve"]


class TestEventNgrams:
    """Test event-dependent grams on the training sweep"""

    def test_minimal_unique_lengths(self, training_run, syringe_efsa):
        """Test push grams need length 4, pull grams length 5 and the idle arm never separates"""
        db = build_ngram_db([training_run.records], 4)
        found = find_event_ngrams(db, [LabeledTrace(training_run.records, training_run.truth)], syringe_efsa)
        assert found.minimal_unique_n["E1"] == 4
        assert found.minimal_unique_n["!E1 & E2"] == 5
        assert found.minimal_unique_n["!E1 & !E2"] is None
        assert found.minimal_n == 4
        assert db.event_grams["E1"] == {("write", "write", "nanosleep", "nanosleep")}
        assert "!E1 & !E2" in db.ambiguous

    def test_round_trip_dict(self, training_run, syringe_efsa):
        """Test the database keeps event grams and events through its dictionary form"""
        db = build_ngram_db([training_run.records], 4)
        find_event_ngrams(db, [LabeledTrace(training_run.records, training_run.truth)], syringe_efsa)
        restored = NgramDb.from_dict(db.to_dict())
        assert restored.grams == db.grams
        assert restored.event_grams == db.event_grams
        assert [e.id for e in restored.events] == ["E1", "E2", "L1"]

    def test_detects_branch_spoof(self, training_run, branch_attack, syringe_efsa):
        """Test the push gram is checked against the verifier"""
        db = build_ngram_db([training_run.records], 4)
        find_event_ngrams(db, [LabeledTrace(training_run.records, training_run.truth)], syringe_efsa)
        verifier = EventVerifier(VerifierConfig(), branch_attack.feed())
        reports = ngram_detect(db, branch_attack.records, verifier)
        assert {r.kind for r in reports} == {AnomalyKind.EVENT_MISMATCH}
        assert len(reports) == 10
        assert all(r.record.pc == 0x40 for r in reports)

    def test_longer_grams_stay_unique(self, training_run, syringe_efsa):
        """Test extending a unique gram by one syscall never makes it ambiguous"""
        labeled = [LabeledTrace(training_run.records, training_run.truth)]
        by_n = {}
        for n in range(4, 9):
            db = build_ngram_db([training_run.records], n)
            find_event_ngrams(db, labeled, syringe_efsa, max_n=2)
            by_n[n] = db
        for n in range(4, 8):
            shorter, longer = by_n[n], by_n[n + 1]
            for composite, grams in shorter.event_grams.items():
                extended = {g for g in longer.event_grams.get(composite, set()) if g[:n] in grams}
                assert extended, (composite, n)
                ambiguous = {g for g in longer.ambiguous.get(composite, set()) if g[:n] in grams}
                assert not ambiguous, (composite, n)

    def test_labeled_trace(self):
        """Test ground truth lookups by window"""
        labeled = LabeledTrace([], [{"E1": False, "E2": True}])
        assert labeled.holds(CompositeEvent.parse("!E1 & E2"), 0)
        assert not labeled.holds(CompositeEvent.parse("E1"), 0)
        assert not labeled.holds(CompositeEvent.parse("E2"), 1)


class TestScfd:
    """Test the frequency-distribution baseline"""

    def test_frequency_vector(self):
        """Test counts over the alphabet and syscalls outside it"""
        vector, unknown = frequency_vector(_records("read", "write", "read", "execve"), ["read", "write"])
        assert vector.tolist() == [2.0, 1.0]
        assert unknown == 1

    def test_fit_and_detect(self, training_run):
        """Test a grossly over-driven push window is an outlier and idle windows are not"""
        windows = [w for w in partition_windows(training_run.records, 0x14) if w.complete]
        profile = scfd_fit(windows, "auto", seed=0)
        assert 1 <= profile.k <= 8
        assert not any(scfd_classify(profile, w).anomalous for w in windows)

        plant, _ = scenario("syringe_normal", cycles=6)
        attack = AttackSpec(kind="branch_spoof", sensor="humidity", value=70.0, start_cycle=3, end_cycle=3)
        run = simulate(plant, attack)
        reports = scfd_detect(profile, run.records, 0x14)
        assert [r.window_index for r in reports] == [3]
        assert reports[0].kind == AnomalyKind.FREQUENCY_OUTLIER

    def test_fixed_k(self, training_run):
        """Test an explicit cluster count and its dictionary form"""
        windows = [w for w in partition_windows(training_run.records, 0x14) if w.complete]
        profile = scfd_fit(windows, 2, seed=0)
        assert profile.k == 2
        restored = ScfdProfile.from_dict(profile.to_dict())
        assert restored.alphabet == profile.alphabet
        assert np.allclose(restored.centroids, profile.centroids)

    def test_same_seed_same_profile(self, training_run):
        """Test clustering is reproducible under a fixed seed"""
        windows = [w for w in partition_windows(training_run.records, 0x14) if w.complete]
        first, second = scfd_fit(windows, "auto", seed=3), scfd_fit(windows, "auto", seed=3)
        assert first.k == second.k
        assert np.array_equal(first.centroids, second.centroids)
        assert first.threshold == second.threshold
        assert first.to_dict() == second.to_dict()

    def test_bad_k(self, training_run):
        """Test k must fit the number of windows"""
        windows = [w for w in partition_windows(training_run.records, 0x14) if w.complete][:3]
        with pytest.raises(ValueError):
            scfd_fit(windows, 4)
        with pytest.raises(ValueError):
            scfd_fit([], 1)
