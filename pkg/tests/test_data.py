import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ehrsynth.data import (Cohort, CohortError, CodeVocabulary, PatientRecord,
                           SyntheticCohortConfig, Visit, binarize_visit,
                           compute_code_time_gaps, generate_synthetic_cohort,
                           load_cohort, split_cohort, write_cohort)


def make_cohort(visit_times, codes_per_visit=None):
    vocab = CodeVocabulary("diagnosis", ("a", "b", "c", "d"))
    codes_per_visit = codes_per_visit or [(0,)] * len(visit_times)
    visits = tuple(Visit(time=t, codes={"diagnosis": c})
                   for t, c in zip(visit_times, codes_per_visit))
    patient = PatientRecord(patient_id="p0", demographics=(1, 0), visits=visits)
    return Cohort(name="t", vocabularies=(vocab,), patients=(patient,))


class TestLoadCohort:
    def test_round_trip_one_patient(self, tmp_path):
        cohort = make_cohort([0.0, 3.5], [(0, 1), (2,)])
        path = tmp_path / "c.jsonl"
        write_cohort(cohort, path)
        loaded = load_cohort(path)
        assert len(loaded.patients) == 1
        assert len(loaded.patients[0].visits) == 2
        assert loaded == cohort

    def test_non_monotone_times_rejected(self, tmp_path):
        cohort = make_cohort([0.0, 1.0])
        path = tmp_path / "c.jsonl"
        write_cohort(cohort, path)
        lines = path.read_text().splitlines()
        record = json.loads(lines[0])
        record["visits"][0]["time"] = 5.0
        record["visits"][1]["time"] = 3.0
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(CohortError, match="non-monotone times"):
            load_cohort(path)

    def test_empty_file_is_valid(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        write_cohort(Cohort(name="e", vocabularies=(CodeVocabulary("diagnosis", ("a",)),),
                            patients=()), path)
        loaded = load_cohort(path)
        assert loaded.patients == ()

    def test_unknown_code_reports_patient_and_line(self, tmp_path):
        cohort = make_cohort([0.0, 1.0])
        path = tmp_path / "c.jsonl"
        write_cohort(cohort, path)
        record = json.loads(path.read_text())
        record["visits"][1]["codes"]["diagnosis"] = [99]
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(CohortError) as err:
            load_cohort(path)
        assert err.value.patient_id == "p0"
        assert err.value.line == 1

    def test_empty_visit_rejected(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_cohort(make_cohort([0.0]), path)
        record = json.loads(path.read_text())
        record["visits"][0]["codes"]["diagnosis"] = []
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(CohortError, match="zero codes"):
            load_cohort(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CohortError, match="no such cohort"):
            load_cohort(tmp_path / "missing.jsonl")


@st.composite
def cohorts(draw):
    n_modalities = draw(st.integers(1, 3))
    sizes = draw(st.lists(st.integers(1, 5), min_size=n_modalities, max_size=n_modalities))
    vocabs = tuple(CodeVocabulary(f"m{i}", tuple(f"m{i}c{j}" for j in range(size)))
                   for i, size in enumerate(sizes))
    demo_dim = draw(st.integers(1, 4))
    patients = []
    for p in range(draw(st.integers(0, 4))):
        demo = tuple(draw(st.lists(st.integers(0, 1), min_size=demo_dim, max_size=demo_dim)))
        n_visits = draw(st.integers(1, 4))
        increments = draw(st.lists(
            st.floats(0.0, 50.0, allow_nan=False), min_size=n_visits, max_size=n_visits))
        time, visits = 0.0, []
        for inc in increments:
            time += inc
            codes = {}
            for vocab in vocabs:
                picked = draw(st.sets(st.integers(0, vocab.size - 1)))
                if picked:
                    codes[vocab.modality_name] = tuple(sorted(picked))
            # at least one code somewhere
            codes.setdefault(vocabs[0].modality_name, (0,))
            visits.append(Visit(time=time, codes=codes))
        patients.append(PatientRecord(patient_id=f"p{p}", demographics=demo,
                                      visits=tuple(visits)))
    return Cohort(name="h", vocabularies=vocabs, patients=tuple(patients))


@settings(max_examples=40, deadline=None)
@given(cohorts())
def test_write_load_round_trip(tmp_path_factory, cohort):
    path = tmp_path_factory.mktemp("rt") / "c.jsonl"
    write_cohort(cohort, path)
    assert load_cohort(path) == cohort


class TestCodeTimeGaps:
    def test_first_appearance_is_zero(self):
        cohort = make_cohort([0.0, 5.0], [(1,), (0,)])
        table = compute_code_time_gaps(cohort.patients[0])
        assert table.gap(0, "diagnosis", 1) == 0.0
        assert table.gap(1, "diagnosis", 0) == 0.0

    def test_gap_spans_missing_visits(self):
        # code present at visits 1 and 3 only: gap at visit 3 is 12 - 0
        cohort = make_cohort([0.0, 5.0, 12.0], [(0,), (1,), (0,)])
        table = compute_code_time_gaps(cohort.patients[0])
        assert table.gap(2, "diagnosis", 0) == 12.0

    def test_successive_differences(self):
        cohort = make_cohort([0.0, 5.0, 12.0], [(0,), (0,), (0,)])
        table = compute_code_time_gaps(cohort.patients[0])
        gaps = [table.gap(i, "diagnosis", 0) for i in range(3)]
        assert gaps == [0.0, 5.0, 7.0]

    def test_idempotent_and_independent(self, tiny_cohort):
        patient = tiny_cohort.patients[0]
        first = compute_code_time_gaps(patient)
        second = compute_code_time_gaps(patient)
        assert first == second
        solo = compute_code_time_gaps(
            PatientRecord(patient.patient_id, patient.demographics, patient.visits))
        assert solo.entries == first.entries

    def test_gaps_for_alignment(self):
        cohort = make_cohort([0.0, 4.0], [(0, 2), (0, 2)])
        table = compute_code_time_gaps(cohort.patients[0])
        np.testing.assert_allclose(table.gaps_for(1, "diagnosis", (0, 2)), [4.0, 4.0])


class TestSplitCohort:
    def test_exact_sizes_at_100(self):
        cohort = generate_synthetic_cohort(SyntheticCohortConfig(num_patients=100, seed=0))
        train, val, test = split_cohort(cohort, (75, 10, 15), seed=1)
        assert (len(train.patients), len(val.patients), len(test.patients)) == (75, 10, 15)

    def test_single_patient_goes_to_train(self):
        cohort = generate_synthetic_cohort(SyntheticCohortConfig(num_patients=1, seed=0))
        train, val, test = split_cohort(cohort, (75, 10, 15), seed=1)
        assert (len(train.patients), len(val.patients), len(test.patients)) == (1, 0, 0)

    def test_deterministic_under_seed(self):
        cohort = generate_synthetic_cohort(SyntheticCohortConfig(num_patients=30, seed=2))
        a = split_cohort(cohort, (75, 10, 15), seed=9)
        b = split_cohort(cohort, (75, 10, 15), seed=9)
        assert a == b

    def test_bad_ratio_sum(self, tiny_cohort):
        with pytest.raises(CohortError, match="sum to 100"):
            split_cohort(tiny_cohort, (50, 10, 15), seed=0)

    @pytest.mark.parametrize("n", [0, 1, 2, 7, 33])
    def test_partition_disjoint_and_exhaustive(self, n):
        if n == 0:
            cohort = Cohort(name="z", vocabularies=(CodeVocabulary("diagnosis", ("a",)),),
                            patients=())
        else:
            cohort = generate_synthetic_cohort(SyntheticCohortConfig(num_patients=n, seed=n))
        parts = split_cohort(cohort, (75, 10, 15), seed=3)
        ids = [p.patient_id for part in parts for p in part.patients]
        assert len(ids) == n
        assert set(ids) == {p.patient_id for p in cohort.patients}


class TestSyntheticGenerator:
    def test_zero_patients(self):
        cohort = generate_synthetic_cohort(SyntheticCohortConfig(num_patients=0, seed=0))
        assert cohort.patients == ()

    def test_identical_seeds_byte_identical(self, tmp_path):
        config = SyntheticCohortConfig(num_patients=12, seed=5)
        a, b = generate_synthetic_cohort(config), generate_synthetic_cohort(config)
        assert a == b
        pa, pb = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_cohort(a, pa)
        write_cohort(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    def test_distinct_seeds_differ(self):
        a = generate_synthetic_cohort(SyntheticCohortConfig(num_patients=10, seed=0))
        b = generate_synthetic_cohort(SyntheticCohortConfig(num_patients=10, seed=1))
        assert a != b

    def test_hazard_coupling_gives_negative_correlation(self):
        cohort = generate_synthetic_cohort(SyntheticCohortConfig(num_patients=1000, seed=7))
        counts, gaps = [], []
        for patient in cohort.patients:
            patient_gaps = patient.gaps()
            for i, gap in enumerate(patient_gaps):
                counts.append(patient.visits[i].total_codes())
                gaps.append(gap)
        assert np.corrcoef(counts, gaps)[0, 1] < 0

    def test_all_patients_trainable(self):
        cohort = generate_synthetic_cohort(SyntheticCohortConfig(num_patients=50, seed=3))
        assert all(len(p.visits) >= 2 for p in cohort.patients)
        assert all(b.time > a.time for p in cohort.patients
                   for a, b in zip(p.visits, p.visits[1:]))

    def test_config_validation(self):
        with pytest.raises(CohortError):
            SyntheticCohortConfig(hazard_rate=0.0)
        with pytest.raises(CohortError):
            SyntheticCohortConfig(num_modalities=2, vocab_sizes=(5,))


class TestBinarize:
    def test_two_of_four(self):
        vocab = CodeVocabulary("diagnosis", ("a", "b", "c", "d"))
        visit = Visit(time=0.0, codes={"diagnosis": (0, 2)})
        np.testing.assert_array_equal(binarize_visit(visit, vocab), [1, 0, 1, 0])

    def test_empty_and_full(self):
        vocab = CodeVocabulary("diagnosis", ("a", "b", "c"))
        empty = Visit(time=0.0, codes={})
        np.testing.assert_array_equal(binarize_visit(empty, vocab), [0, 0, 0])
        full = Visit(time=0.0, codes={"diagnosis": (0, 1, 2)})
        np.testing.assert_array_equal(binarize_visit(full, vocab), [1, 1, 1])

    def test_out_of_range(self):
        vocab = CodeVocabulary("diagnosis", ("a",))
        with pytest.raises(CohortError, match="out of range"):
            binarize_visit(Visit(time=0.0, codes={"diagnosis": (3,)}), vocab)
