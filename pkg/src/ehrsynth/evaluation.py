"""Fidelity, privacy, and time-accuracy evaluation.

Imputation perplexities are artifact-defined: the exponentiated mean binary
negative log-likelihood per code slot of the model's teacher-forced
next-visit predictions. The longitudinal variant (``lpl``) conditions on the
full current visit; the cross-modality variant (``mpl``) masks the scored
modality out of the conditioning path, so the prediction must come from the
other modalities and the history. The presence-disclosure attack matches
known real visits to their most similar synthetic visit (Hamming similarity
over concatenated multi-hot vectors) and counts how often the match traces
back to the same patient.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import data as dat
from .diffusion import NoiseSchedule, forward_noise
from .losses import PROB_EPS
from .model import VisitSequenceModel


@dataclass(frozen=True)
class MetricReport:
    lpl: dict[str, float]
    mpl: dict[str, float] | None
    pd: dict[str, float]
    time_rmse: float | None
    counts: dict[str, int]

    def to_json(self) -> dict:
        return {
            "lpl": self.lpl,
            "mpl": self.mpl,
            "pd": self.pd,
            "time_rmse": self.time_rmse,
            "counts": self.counts,
        }


def _transition_seed(base_seed: int, patient_id: str, transition: int) -> int:
    digest = hashlib.blake2b(f"{base_seed}|{patient_id}|{transition}".encode(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def _scored_probabilities(model: VisitSequenceModel, schedule: NoiseSchedule,
                          cohort: dat.Cohort, modality: str, *, seed: int,
                          masked: bool) -> tuple[float, int]:
    """Summed binary NLL and slot count for one modality over all transitions."""
    vocab = cohort.vocabulary(modality)
    mask = frozenset({modality}) if masked else frozenset()
    total_nll, slots = 0.0, 0
    model.eval()
    with torch.no_grad():
        for patient in cohort.patients:
            if len(patient.visits) < 2:
                continue
            tensors = model.visit_tensors(patient)
            demo = torch.as_tensor(patient.demographics, dtype=model.dtype)
            enc = model.encode_sequence(tensors, demo, generator=None, hard=True,
                                        masked_modalities=mask)
            for i in range(len(patient.visits) - 1):
                gen = torch.Generator()
                gen.manual_seed(_transition_seed(seed, patient.patient_id, i))
                step = int(torch.randint(1, schedule.num_steps + 1, (1,), generator=gen))
                eps = torch.randn(model.config.dim, generator=gen, dtype=model.dtype)
                noisy = forward_noise(enc.visit_vecs[i], step, eps, schedule)
                predicted = model(noisy, enc.conditions[i], step)
                probs = model.heads(predicted)[modality].clamp(PROB_EPS, 1.0 - PROB_EPS)
                target = torch.as_tensor(dat.binarize_visit(patient.visits[i + 1], vocab),
                                         dtype=model.dtype)
                nll = -(target * torch.log(probs)
                        + (1.0 - target) * torch.log(1.0 - probs))
                total_nll += float(nll.sum())
                slots += probs.numel()
    return total_nll, slots


def lpl(model: VisitSequenceModel, schedule: NoiseSchedule, cohort: dat.Cohort,
        modality: str, seed: int = 0) -> float:
    """Longitudinal imputation perplexity for one modality (lower is better, >= ~1)."""
    nll, slots = _scored_probabilities(model, schedule, cohort, modality,
                                       seed=seed, masked=False)
    if slots == 0:
        raise ValueError("cohort has no transitions to score")
    return math.exp(nll / slots)


def mpl(model: VisitSequenceModel, schedule: NoiseSchedule, cohort: dat.Cohort,
        modality: str, seed: int = 0) -> float | None:
    """Cross-modality imputation perplexity; None for single-modality cohorts."""
    if len(cohort.vocabularies) < 2:
        return None
    nll, slots = _scored_probabilities(model, schedule, cohort, modality,
                                       seed=seed, masked=True)
    if slots == 0:
        raise ValueError("cohort has no transitions to score")
    return math.exp(nll / slots)


def _visit_matrix(cohort: dat.Cohort) -> tuple[np.ndarray, list[str]]:
    """Concatenated multi-hot vectors for every visit, with per-row patient ids."""
    rows, owners = [], []
    for patient in cohort.patients:
        for visit in patient.visits:
            rows.append(np.concatenate([dat.binarize_visit(visit, v)
                                        for v in cohort.vocabularies]))
            owners.append(patient.patient_id)
    matrix = np.stack(rows) if rows else np.zeros((0, 0), dtype=np.float32)
    return matrix, owners


def presence_disclosure(real: dat.Cohort, synthetic: dat.Cohort,
                        known_fraction: float, seed: int = 0) -> float | None:
    """Percentage of known real visits whose most similar synthetic visit was
    generated for the same patient. ``None`` when ``known_fraction`` is 0.

    Ties in Hamming similarity resolve to the lowest synthetic visit index.
    """
    if not 0.0 <= known_fraction <= 1.0:
        raise ValueError("known_fraction must lie in [0, 1]")
    if known_fraction == 0.0:
        return None
    if not synthetic.patients:
        raise ValueError("synthetic cohort is empty")
    syn_matrix, syn_owners = _visit_matrix(synthetic)
    rng = np.random.default_rng(seed)
    ids = [p.patient_id for p in real.patients]
    n_known = max(1, int(round(known_fraction * len(ids))))
    known = set(rng.choice(len(ids), size=n_known, replace=False).tolist())
    successes, attempts = 0, 0
    width = syn_matrix.shape[1]
    for idx in sorted(known):
        patient = real.patients[idx]
        for visit in patient.visits:
            row = np.concatenate([dat.binarize_visit(visit, v)
                                  for v in real.vocabularies])
            similarity = width - np.abs(syn_matrix - row).sum(axis=1)
            best = int(np.argmax(similarity))  # first max: lowest index wins ties
            attempts += 1
            if syn_owners[best] == patient.patient_id:
                successes += 1
    return 100.0 * successes / attempts


def gap_rmse(gaps: Sequence[float], predictions: Sequence[float]) -> float:
    gaps = np.asarray(gaps, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if gaps.shape != predictions.shape or gaps.size == 0:
        raise ValueError("need matched non-empty gap/prediction arrays")
    return float(np.sqrt(np.mean((gaps - predictions) ** 2)))


def collect_gap_predictions(model: VisitSequenceModel, cohort: dat.Cohort,
                            ) -> tuple[list[float], list[float]]:
    """Teacher-forced (true gap, predicted gap) pairs over every transition."""
    if not model.conditioning.use_interval:
        raise ValueError("model was trained without interval estimation")
    gaps, predictions = [], []
    model.eval()
    with torch.no_grad():
        for patient in cohort.patients:
            if len(patient.visits) < 2:
                continue
            tensors = model.visit_tensors(patient)
            demo = torch.as_tensor(patient.demographics, dtype=model.dtype)
            enc = model.encode_sequence(tensors, demo, generator=None, hard=True)
            for i, gap in enumerate(patient.gaps()):
                gaps.append(float(gap))
                predictions.append(float(enc.predicted_gaps[i]))
    return gaps, predictions


def time_rmse(model: VisitSequenceModel, cohort: dat.Cohort) -> float:
    gaps, predictions = collect_gap_predictions(model, cohort)
    return gap_rmse(gaps, predictions)


def evaluate(model: VisitSequenceModel, schedule: NoiseSchedule, real: dat.Cohort,
             synthetic: dat.Cohort | None = None,
             pd_fractions: Sequence[float] = (0.1,), seed: int = 0) -> MetricReport:
    """Full metric report over a real cohort and optional synthetic counterpart."""
    lpl_scores, mpl_scores = {}, {}
    for name in real.modality_names:
        lpl_scores[name] = lpl(model, schedule, real, name, seed=seed)
        score = mpl(model, schedule, real, name, seed=seed)
        if score is not None:
            mpl_scores[name] = score
    pd_scores = {}
    if synthetic is not None:
        for fraction in pd_fractions:
            score = presence_disclosure(real, synthetic, fraction, seed=seed)
            if score is not None:
                pd_scores[f"{fraction:g}"] = score
    rmse = time_rmse(model, real) if model.conditioning.use_interval else None
    transitions = sum(p.num_transitions() for p in real.patients)
    return MetricReport(
        lpl=lpl_scores,
        mpl=mpl_scores or None,
        pd=pd_scores,
        time_rmse=rmse,
        counts={"patients": len(real.patients), "transitions": transitions,
                "synthetic_patients": len(synthetic.patients) if synthetic else 0},
    )


def write_report(report: MetricReport, path: str | Path,
                 extra: Mapping | None = None) -> None:
    payload = report.to_json()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
