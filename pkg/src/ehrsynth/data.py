"""Cohort data model for longitudinal multimodal EHR sequences.

A cohort is a set of patients; each patient is a time-ordered sequence of
visits plus a static multi-hot demographic vector; each visit holds, per
modality (diagnosis, medication, ...), the set of code indices observed at
that visit.

Cohorts are stored as JSON-lines (one patient per line) with a sidecar
header file (``<stem>.header.json``) declaring modality names and
vocabularies. Everything is immutable after construction and safe for
concurrent reads.

This module also ships a parameterized synthetic-cohort generator used as a
desk-scale oracle: next-visit code sets follow a seeded Markov transition
process and inter-visit gaps follow an exponential hazard whose rate grows
with the current visit's code count, so both the codes and the timing of
the next visit are learnable by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

_BASE_MODALITY_NAMES = ("diagnosis", "medication", "lab", "procedure")


class CohortError(ValueError):
    """Raised for malformed cohort files or schema violations.

    Carries the offending patient id and 1-based line number when known.
    """

    def __init__(self, message: str, *, patient_id: str | None = None, line: int | None = None):
        parts = [message]
        if patient_id is not None:
            parts.append(f"patient_id={patient_id!r}")
        if line is not None:
            parts.append(f"line={line}")
        super().__init__(" | ".join(parts))
        self.patient_id = patient_id
        self.line = line


@dataclass(frozen=True)
class CodeVocabulary:
    """Ordered code identifiers for one modality."""

    modality_name: str
    codes: tuple[str, ...]

    def __post_init__(self):
        if not self.modality_name:
            raise CohortError("modality name must be non-empty")
        if len(set(self.codes)) != len(self.codes):
            raise CohortError(f"duplicate code identifiers in modality {self.modality_name!r}")

    @property
    def size(self) -> int:
        return len(self.codes)


@dataclass(frozen=True)
class Visit:
    """One time-stamped encounter: per-modality sets of code indices.

    ``time`` is days since the patient's first visit. Code indices are kept
    as sorted unique tuples; the multi-hot view is materialized on demand by
    :func:`binarize_visit`.
    """

    time: float
    codes: Mapping[str, tuple[int, ...]]

    def __post_init__(self):
        if self.time < 0 or not math.isfinite(self.time):
            raise CohortError(f"visit time must be a finite non-negative number, got {self.time}")

    def total_codes(self) -> int:
        return sum(len(v) for v in self.codes.values())


@dataclass(frozen=True)
class PatientRecord:
    """A patient: id, static demographics, time-sorted visits."""

    patient_id: str
    demographics: tuple[int, ...]
    visits: tuple[Visit, ...]

    def num_transitions(self) -> int:
        return max(0, len(self.visits) - 1)

    def gaps(self) -> tuple[float, ...]:
        """Inter-visit gaps in days, one per transition."""
        return tuple(b.time - a.time for a, b in zip(self.visits, self.visits[1:]))


@dataclass(frozen=True)
class Cohort:
    name: str
    vocabularies: tuple[CodeVocabulary, ...]
    patients: tuple[PatientRecord, ...]
    seed: int | None = None

    @property
    def modality_names(self) -> tuple[str, ...]:
        return tuple(v.modality_name for v in self.vocabularies)

    @property
    def vocab_sizes(self) -> dict[str, int]:
        return {v.modality_name: v.size for v in self.vocabularies}

    @property
    def demographic_dim(self) -> int:
        return len(self.patients[0].demographics) if self.patients else 0

    def vocabulary(self, modality: str) -> CodeVocabulary:
        for v in self.vocabularies:
            if v.modality_name == modality:
                return v
        raise CohortError(f"unknown modality {modality!r}")


@dataclass(frozen=True)
class CodeTimeGapTable:
    """Per-visit recency gaps: days since each present code last appeared.

    ``entries[i][modality][code]`` is 0.0 when visit ``i`` is the code's
    first appearance in the patient's history, otherwise the positive
    difference between the visit time and the code's most recent prior
    appearance.
    """

    patient_id: str
    entries: tuple[Mapping[str, Mapping[int, float]], ...]

    def gap(self, visit_index: int, modality: str, code: int) -> float:
        return self.entries[visit_index][modality][code]

    def gaps_for(self, visit_index: int, modality: str, codes: Sequence[int]) -> np.ndarray:
        table = self.entries[visit_index].get(modality, {})
        return np.array([table[c] for c in codes], dtype=np.float64)


def compute_code_time_gaps(patient: PatientRecord) -> CodeTimeGapTable:
    """Compute the code-level recency gap for every present code of every visit."""
    last_seen: dict[tuple[str, int], float] = {}
    entries = []
    for visit in patient.visits:
        visit_entry: dict[str, dict[int, float]] = {}
        for modality, codes in visit.codes.items():
            row = {}
            for code in codes:
                key = (modality, code)
                row[code] = visit.time - last_seen[key] if key in last_seen else 0.0
            visit_entry[modality] = row
        # update after the whole visit so same-visit codes do not see themselves
        for modality, codes in visit.codes.items():
            for code in codes:
                last_seen[(modality, code)] = visit.time
        entries.append(visit_entry)
    return CodeTimeGapTable(patient_id=patient.patient_id, entries=tuple(entries))


def binarize_visit(visit: Visit, vocab: CodeVocabulary) -> np.ndarray:
    """Multi-hot 0/1 vector of the visit's codes for one modality."""
    out = np.zeros(vocab.size, dtype=np.float32)
    for code in visit.codes.get(vocab.modality_name, ()):
        if not 0 <= code < vocab.size:
            raise CohortError(
                f"code index {code} out of range for modality "
                f"{vocab.modality_name!r} (size {vocab.size})"
            )
        out[code] = 1.0
    return out


def _normalize_codes(raw: Mapping[str, Iterable[int]]) -> dict[str, tuple[int, ...]]:
    return {m: tuple(sorted(set(int(c) for c in cs))) for m, cs in raw.items()}


def _validate_patient(patient: PatientRecord, cohort_vocabs: Mapping[str, int],
                      demographic_dim: int | None, *, line: int | None = None) -> None:
    if demographic_dim is not None and len(patient.demographics) != demographic_dim:
        raise CohortError(
            f"demographics length {len(patient.demographics)} differs from cohort "
            f"length {demographic_dim}", patient_id=patient.patient_id, line=line)
    if any(d not in (0, 1) for d in patient.demographics):
        raise CohortError("demographics must be 0/1", patient_id=patient.patient_id, line=line)
    prev_time = None
    for visit in patient.visits:
        if prev_time is not None and visit.time < prev_time:
            raise CohortError("non-monotone times", patient_id=patient.patient_id, line=line)
        prev_time = visit.time
        if visit.total_codes() == 0:
            raise CohortError("visit with zero codes in every modality",
                              patient_id=patient.patient_id, line=line)
        for modality, codes in visit.codes.items():
            if modality not in cohort_vocabs:
                raise CohortError(f"unknown modality {modality!r}",
                                  patient_id=patient.patient_id, line=line)
            for code in codes:
                if not 0 <= code < cohort_vocabs[modality]:
                    raise CohortError(
                        f"unknown code {code} in modality {modality!r}",
                        patient_id=patient.patient_id, line=line)


def validate_cohort(cohort: Cohort) -> None:
    sizes = cohort.vocab_sizes
    dim = cohort.demographic_dim if cohort.patients else None
    seen = set()
    for patient in cohort.patients:
        if patient.patient_id in seen:
            raise CohortError("duplicate patient_id", patient_id=patient.patient_id)
        seen.add(patient.patient_id)
        _validate_patient(patient, sizes, dim)


def header_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".header.json")


def write_cohort(cohort: Cohort, path: str | Path, *, extra_header: Mapping | None = None) -> None:
    """Write the JSON-lines cohort file and its sidecar header (UTF-8)."""
    path = Path(path)
    header = {
        "name": cohort.name,
        "seed": cohort.seed,
        "modalities": [
            {"name": v.modality_name, "codes": list(v.codes)} for v in cohort.vocabularies
        ],
    }
    if extra_header:
        header.update(extra_header)
    header_path(path).write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")
    with path.open("w", encoding="utf-8") as fh:
        for patient in cohort.patients:
            record = {
                "patient_id": patient.patient_id,
                "demographics": list(patient.demographics),
                "visits": [
                    {"time": v.time, "codes": {m: list(c) for m, c in v.codes.items()}}
                    for v in patient.visits
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _parse_header(path: Path) -> tuple[str, int | None, tuple[CodeVocabulary, ...]]:
    hpath = header_path(path)
    if not hpath.exists():
        raise CohortError(f"missing header file {hpath}")
    try:
        raw = json.loads(hpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CohortError(f"malformed header {hpath}: {exc}") from exc
    known = {"name", "seed", "modalities", "config"}
    unknown = set(raw) - known
    if unknown:
        raise CohortError(f"unknown header keys {sorted(unknown)}")
    vocabs = []
    for entry in raw.get("modalities", []):
        name = entry["name"]
        if "codes" in entry:
            codes = tuple(str(c) for c in entry["codes"])
        elif "size" in entry:
            codes = tuple(f"{name}_{j:04d}" for j in range(int(entry["size"])))
        else:
            raise CohortError(f"modality entry for {name!r} needs 'codes' or 'size'")
        vocabs.append(CodeVocabulary(modality_name=name, codes=codes))
    return raw.get("name", path.stem), raw.get("seed"), tuple(vocabs)


def load_cohort(path: str | Path) -> Cohort:
    """Load and validate a cohort from ``path`` and its sidecar header.

    Raises :class:`CohortError` with the patient id and line number for
    malformed lines, unknown codes or modalities, and non-monotone visit
    times.
    """
    path = Path(path)
    if not path.exists():
        raise CohortError(f"no such cohort file: {path}")
    name, seed, vocabs = _parse_header(path)
    sizes = {v.modality_name: v.size for v in vocabs}
    patients = []
    demographic_dim: int | None = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortError(f"malformed line: {exc}", line=lineno) from exc
            pid = str(raw.get("patient_id", f"<line {lineno}>"))
            try:
                visits = tuple(
                    Visit(time=float(v["time"]), codes=_normalize_codes(v["codes"]))
                    for v in raw["visits"]
                )
                patient = PatientRecord(
                    patient_id=pid,
                    demographics=tuple(int(d) for d in raw["demographics"]),
                    visits=visits,
                )
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, CohortError):
                    raise
                raise CohortError(f"bad record: {exc}", patient_id=pid, line=lineno) from exc
            _validate_patient(patient, sizes, demographic_dim, line=lineno)
            if demographic_dim is None:
                demographic_dim = len(patient.demographics)
            patients.append(patient)
    return Cohort(name=name, vocabularies=vocabs, patients=tuple(patients), seed=seed)


def split_cohort(cohort: Cohort, ratios: tuple[float, float, float] = (75, 10, 15),
                 seed: int = 0) -> tuple[Cohort, Cohort, Cohort]:
    """Patient-level train/val/test partition.

    Ratios must be positive and sum to 100. Sizes use largest-remainder
    rounding with ties resolved train first, then test, then val. The
    permutation is drawn from ``seed`` only, so identical seeds give
    identical partitions.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise CohortError(f"ratios must be three positive numbers, got {ratios}")
    if not math.isclose(sum(ratios), 100.0, abs_tol=1e-9):
        raise CohortError(f"ratios must sum to 100, got {sum(ratios)}")
    n = len(cohort.patients)
    quotas = [n * r / 100.0 for r in ratios]
    counts = [int(math.floor(q)) for q in quotas]
    remaining = n - sum(counts)
    tie_rank = {0: 0, 2: 1, 1: 2}  # train > test > val
    order = sorted(range(3), key=lambda k: (-(quotas[k] - counts[k]), tie_rank[k]))
    for k in order[:remaining]:
        counts[k] += 1
    perm = np.random.default_rng(seed).permutation(n)
    bounds = (counts[0], counts[0] + counts[1])
    groups = (perm[: bounds[0]], perm[bounds[0]: bounds[1]], perm[bounds[1]:])
    out = []
    for suffix, idx in zip(("train", "val", "test"), groups):
        patients = tuple(cohort.patients[i] for i in sorted(idx))
        out.append(Cohort(name=f"{cohort.name}/{suffix}", vocabularies=cohort.vocabularies,
                          patients=patients, seed=cohort.seed))
    return tuple(out)


@dataclass(frozen=True)
class SyntheticCohortConfig:
    """Knobs for the desk-scale oracle generator."""

    num_patients: int = 100
    num_modalities: int = 2
    vocab_sizes: tuple[int, ...] = (20, 20)
    max_visits: int = 10
    transition_temperature: float = 0.5
    hazard_rate: float = 0.08
    urgency_coupling: float = 0.6
    demographic_dim: int = 8
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        if self.num_patients < 0:
            raise CohortError("num_patients must be >= 0")
        if self.num_modalities < 1:
            raise CohortError("num_modalities must be >= 1")
        if len(self.vocab_sizes) != self.num_modalities:
            raise CohortError("vocab_sizes length must equal num_modalities")
        if any(v < 2 for v in self.vocab_sizes):
            raise CohortError("vocab sizes must be >= 2")
        if self.max_visits < 2:
            raise CohortError("max_visits must be >= 2")
        if self.hazard_rate <= 0:
            raise CohortError("hazard_rate must be > 0")
        if self.transition_temperature <= 0:
            raise CohortError("transition_temperature must be > 0")
        if self.demographic_dim < 1:
            raise CohortError("demographic_dim must be >= 1")


def modality_name(index: int) -> str:
    if index < len(_BASE_MODALITY_NAMES):
        return _BASE_MODALITY_NAMES[index]
    return f"modality{index}"


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


def generate_synthetic_cohort(config: SyntheticCohortConfig) -> Cohort:
    """Sample a cohort with learnable next-visit structure.

    Per modality, a patient's next code set is drawn from a softmax over a
    seeded code-to-code affinity matrix conditioned on the current codes
    (temperature controls how peaked). The gap to the next visit is
    exponential with rate ``hazard_rate * exp(urgency_coupling * codes_now)``,
    so visits with more codes are followed sooner. Per-patient randomness is
    derived from spawned sub-seeds, so generation is deterministic under the
    master seed and could run patient-parallel.
    """
    names = [modality_name(i) for i in range(config.num_modalities)]
    vocabs = tuple(
        CodeVocabulary(modality_name=name,
                       codes=tuple(f"{name}_{j:03d}" for j in range(size)))
        for name, size in zip(names, config.vocab_sizes)
    )
    root = np.random.SeedSequence(config.seed)
    cohort_ss = root.spawn(1)[0]
    patient_ss = root.spawn(config.num_patients + 1)[1:]
    cohort_rng = np.random.default_rng(cohort_ss)
    affinity = [cohort_rng.standard_normal((size, size)) for size in config.vocab_sizes]

    patients = []
    for p, ss in enumerate(patient_ss):
        rng = np.random.default_rng(ss)
        demographics = tuple(int(d) for d in rng.integers(0, 2, size=config.demographic_dim))
        n_visits = int(rng.integers(2, config.max_visits + 1))
        visits = []
        time = 0.0
        prev_codes: dict[str, tuple[int, ...]] | None = None
        for _ in range(n_visits):
            codes: dict[str, tuple[int, ...]] = {}
            for m, (name, size) in enumerate(zip(names, config.vocab_sizes)):
                k = min(1 + int(rng.poisson(2.0)), max(1, size // 2))
                if prev_codes is None:
                    idx = rng.choice(size, size=k, replace=False)
                else:
                    scores = affinity[m][list(prev_codes[name])].mean(axis=0)
                    probs = _softmax(scores / config.transition_temperature)
                    idx = rng.choice(size, size=k, replace=False, p=probs)
                codes[name] = tuple(sorted(int(j) for j in idx))
            visit = Visit(time=time, codes=codes)
            visits.append(visit)
            rate = config.hazard_rate * math.exp(config.urgency_coupling * visit.total_codes())
            time += float(rng.exponential(1.0 / rate))
            prev_codes = codes
        patients.append(PatientRecord(patient_id=f"p{p:05d}", demographics=demographics,
                                      visits=tuple(visits)))
    cohort = Cohort(name=config.name, vocabularies=vocabs, patients=tuple(patients),
                    seed=config.seed)
    validate_cohort(cohort)
    return cohort
