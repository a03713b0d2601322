import numpy as np
import pytest
import torch

from ehrsynth.data import (Cohort, CodeVocabulary, PatientRecord, SyntheticCohortConfig,
                           Visit, generate_synthetic_cohort)
from ehrsynth.training import TrainConfig


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(dim=16, num_steps=5, unet_widths=(16, 8), unet_channels=2,
                step_embed_dim=8, epochs=1, batch_size=4, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def uniform_codes_cohort(num_patients=100, seed=0, name="real") -> Cohort:
    """Cohort whose codes are uniform coin flips per slot.

    Visit vectors are distinct with overwhelming probability (40 independent
    bits), which the presence-disclosure self-match argument requires, and
    the synthetic/real independence makes the 1/num_patients chance rate of
    the matching attack exact.
    """
    rng = np.random.default_rng(seed)
    vocab_a = CodeVocabulary("diagnosis", tuple(f"d{j}" for j in range(20)))
    vocab_b = CodeVocabulary("medication", tuple(f"m{j}" for j in range(20)))
    patients = []
    for i in range(num_patients):
        visits = []
        for t in range(int(rng.integers(2, 6))):
            codes = {}
            for vocab in (vocab_a, vocab_b):
                mask = rng.random(vocab.size) < 0.5
                picked = tuple(int(j) for j in np.nonzero(mask)[0])
                if picked:
                    codes[vocab.modality_name] = picked
            if not codes:
                codes = {"diagnosis": (int(rng.integers(0, 20)),)}
            visits.append(Visit(time=float(t), codes=codes))
        patients.append(PatientRecord(patient_id=f"p{i:03d}", demographics=(1, 0),
                                      visits=tuple(visits)))
    return Cohort(name=name, vocabularies=(vocab_a, vocab_b), patients=tuple(patients))


@pytest.fixture
def tiny_cohort():
    return generate_synthetic_cohort(SyntheticCohortConfig(
        num_patients=6, num_modalities=2, vocab_sizes=(10, 10), max_visits=5,
        demographic_dim=4, seed=11))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield
