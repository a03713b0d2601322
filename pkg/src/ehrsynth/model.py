"""End-to-end next-visit generator.

Bundles the time-aware visit embedding, the conditioning encoder, the
conditional U-Net denoiser, and the per-modality prediction heads, plus the
teacher-forced sequence encoding shared by training, evaluation, and
generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .conditioning import ConditionEncoder
from .data import PatientRecord, compute_code_time_gaps
from .embedding import TimeAwareVisitEmbedding
from .losses import CodePredictionHead
from .unet import ConditionalUNet1d


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 256
    gate_temperature: float = 1.0
    unet_widths: tuple[int, ...] = (1024, 512, 256)
    unet_channels: int = 4
    num_steps: int = 50
    step_embed_dim: int = 64
    disable_time_aware_embedding: bool = False  # AS1
    disable_time_estimation: bool = False       # AS2
    disable_demographics: bool = False          # AS3
    disable_condition_attention: bool = False   # AS4


@dataclass
class SequenceEncoding:
    """Teacher-forced per-visit quantities for one patient."""

    visit_vecs: list[torch.Tensor]
    conditions: list[torch.Tensor]
    predicted_gaps: list[torch.Tensor] | None
    attention_weights: list[torch.Tensor] = field(default_factory=list)


class VisitSequenceModel(nn.Module):
    def __init__(self, modality_sizes: dict[str, int], demographic_dim: int,
                 config: ModelConfig | None = None):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        self.modality_sizes = dict(modality_sizes)
        self.demographic_dim = demographic_dim
        self.embedding = TimeAwareVisitEmbedding(
            modality_sizes, config.dim, gate_temperature=config.gate_temperature,
            use_time_gate=not config.disable_time_aware_embedding)
        self.conditioning = ConditionEncoder(
            config.dim, demographic_dim,
            use_interval=not config.disable_time_estimation,
            use_demographics=not config.disable_demographics)
        self.denoiser = ConditionalUNet1d(
            config.dim, self.conditioning.condition_dim,
            level_widths=config.unet_widths, channels=config.unet_channels,
            num_steps=config.num_steps, step_dim=config.step_embed_dim,
            use_condition_attention=not config.disable_condition_attention)
        self.heads = CodePredictionHead(config.dim, modality_sizes)

    @property
    def dtype(self) -> torch.dtype:
        return self.embedding.attention.weight.dtype

    def visit_tensors(self, patient: PatientRecord) -> list[dict[str, torch.Tensor]]:
        """Code-index and recency-gap tensors per visit, aligned per modality."""
        gaps = compute_code_time_gaps(patient)
        out = []
        for i, visit in enumerate(patient.visits):
            entry = {}
            for modality, codes in visit.codes.items():
                idx = torch.as_tensor(codes, dtype=torch.long)
                gap = torch.as_tensor(gaps.gaps_for(i, modality, codes), dtype=self.dtype)
                entry[modality] = (idx, gap)
            out.append(entry)
        return out

    def encode_sequence(self, visit_tensors: list[dict[str, tuple[torch.Tensor, torch.Tensor]]],
                        demographics: torch.Tensor, *,
                        generator: torch.Generator | None = None, hard: bool = True,
                        masked_modalities: frozenset[str] | set[str] = frozenset(),
                        ) -> SequenceEncoding:
        """Run the embedding and conditioning paths over a visit sequence.

        ``conditions[i]`` depends only on visits up to ``i`` and the static
        demographics, so it is a valid conditioning input for the transition
        to visit ``i + 1``.
        """
        state = self.conditioning.initial_state(dtype=self.dtype)
        visit_vecs, conditions, attn = [], [], []
        gaps_out: list[torch.Tensor] | None = (
            [] if self.conditioning.use_interval else None)
        for entry in visit_tensors:
            codes = {m: idx for m, (idx, _) in entry.items()}
            gaps = {m: gap for m, (_, gap) in entry.items()}
            vec, weights = self.embedding(
                codes, gaps, generator=generator, hard=hard,
                masked_modalities=masked_modalities)
            state = self.conditioning.step(state, vec)
            hidden = state[0]
            predicted_gap = None
            if self.conditioning.use_interval:
                _, predicted_gap = self.conditioning.predict_interval(hidden)
                gaps_out.append(predicted_gap)
            condition = self.conditioning.assemble(
                hidden, predicted_gap,
                demographics if self.conditioning.use_demographics else None)
            visit_vecs.append(vec)
            conditions.append(condition)
            attn.append(weights)
        return SequenceEncoding(visit_vecs=visit_vecs, conditions=conditions,
                                predicted_gaps=gaps_out, attention_weights=attn)

    def forward(self, noisy_visit: torch.Tensor, condition: torch.Tensor,
                step: int | torch.Tensor) -> torch.Tensor:
        return self.denoiser(noisy_visit, condition, step)
