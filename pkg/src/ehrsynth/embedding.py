"""Time-aware visit embedding.

Each present code gets a base embedding plus a sinusoidal encoding of its
recency gap (days since it last appeared for this patient). A stochastic
binary gate decides per code whether the time-fused branch or the plain
embedding is used; the gate is sampled with Gumbel noise and binarized with
a straight-through estimator so the decision stays trainable. Per-modality
sums are projected and combined by a modality attention layer into a single
visit vector.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import torch
from torch import nn
from torch.nn import functional as F


def sinusoidal_position_encoding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Raw interleaved sin/cos encoding of a non-negative scalar signal.

    ``out[..., 2k] = sin(t / 10000^(2k/dim))`` and ``out[..., 2k+1]`` is the
    matching cosine. ``dim`` must be even.
    """
    if dim % 2 != 0:
        raise ValueError(f"encoding width must be even, got {dim}")
    half = torch.arange(dim // 2, dtype=t.dtype, device=t.device)
    inv_freq = torch.pow(torch.tensor(10000.0, dtype=t.dtype, device=t.device),
                         -2.0 * half / dim)
    angles = t.unsqueeze(-1) * inv_freq
    return torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-2)


def sample_gumbel(shape, *, generator: torch.Generator | None = None,
                  dtype: torch.dtype = torch.float32,
                  device: torch.device | str = "cpu") -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
    return -torch.log(-torch.log(u + 1e-20) + 1e-20)


def gumbel_gate(probs: torch.Tensor, temperature: float,
                noise: torch.Tensor, hard: bool = True) -> torch.Tensor:
    """Binary gate from a 2-class probability vector.

    Returns the relaxed score for class 0 of
    ``softmax((log(probs) + noise) / temperature)``, thresholded at 0.5 in
    the forward pass when ``hard`` is set. Gradients always follow the
    relaxed score (straight-through).
    """
    if temperature <= 0:
        raise ValueError("gate temperature must be > 0")
    logits = (torch.log(probs) + noise) / temperature
    soft = torch.softmax(logits, dim=-1)[..., 0]
    if not hard:
        return soft
    hard_value = (soft >= 0.5).to(soft.dtype)
    return soft + (hard_value - soft).detach()


class TimeGapEncoder(nn.Module):
    """Sinusoidal encoding refined by two dense layers with a sigmoid between."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, gaps: torch.Tensor) -> torch.Tensor:
        pe = sinusoidal_position_encoding(gaps, self.dim)
        return self.fc2(torch.sigmoid(self.fc1(pe)))


class TimeAwareVisitEmbedding(nn.Module):
    """Gated code-time fusion plus modality attention aggregation.

    With ``use_time_gate=False`` the per-code path degrades to the plain
    embedding table (no gap encoder, gate, or fusion layer is created); the
    modality aggregation is unchanged.
    """

    def __init__(self, modality_sizes: Mapping[str, int], dim: int,
                 gate_temperature: float = 1.0, use_time_gate: bool = True):
        super().__init__()
        if not modality_sizes:
            raise ValueError("at least one modality required")
        self.dim = dim
        self.gate_temperature = gate_temperature
        self.use_time_gate = use_time_gate
        self.modality_names = tuple(modality_sizes)
        self.code_embeddings = nn.ModuleDict(
            {name: nn.Embedding(size, dim) for name, size in modality_sizes.items()})
        if use_time_gate:
            self.gap_encoder = TimeGapEncoder(dim)
            self.gate = nn.Linear(2 * dim, 2)
            self.fuse = nn.Linear(2 * dim, dim)  # maps [code; gap] to the fused code vector
        self.modality_proj = nn.ModuleDict(
            {name: nn.Linear(dim, dim) for name in modality_sizes})
        self.attention = nn.Linear(len(modality_sizes) * dim, len(modality_sizes))

    def gate_probability(self, code_vecs: torch.Tensor, gap_vecs: torch.Tensor) -> torch.Tensor:
        """Softmax over the two gate classes; index 0 means "incorporate time"."""
        return torch.softmax(self.gate(torch.cat([code_vecs, gap_vecs], dim=-1)), dim=-1)

    def code_vectors(self, modality: str, codes: torch.Tensor, gaps: torch.Tensor,
                     *, generator: torch.Generator | None = None,
                     hard: bool = True) -> torch.Tensor:
        """Per-code embeddings for one modality, shape ``(len(codes), dim)``.

        With ``generator=None`` the Gumbel noise is fixed at zero, making the
        gate (and hence the whole path) deterministic.
        """
        embedded = self.code_embeddings[modality](codes)
        if not self.use_time_gate:
            return embedded
        gap_vecs = self.gap_encoder(gaps.to(embedded.dtype))
        probs = self.gate_probability(embedded, gap_vecs)
        if generator is None:
            noise = torch.zeros_like(probs)
        else:
            noise = sample_gumbel(probs.shape, generator=generator,
                                  dtype=probs.dtype, device=probs.device)
        pi = gumbel_gate(probs, self.gate_temperature, noise, hard=hard).unsqueeze(-1)
        fused = self.fuse(torch.cat([embedded, gap_vecs], dim=-1))
        return pi * fused + (1.0 - pi) * embedded

    def modality_summary(self, modality: str, code_vecs: torch.Tensor | None) -> torch.Tensor:
        """ReLU-projected sum of a modality's code vectors; empty sum is the zero vector."""
        weight = self.modality_proj[modality].weight
        if code_vecs is None or code_vecs.numel() == 0:
            pooled = torch.zeros(self.dim, dtype=weight.dtype, device=weight.device)
        else:
            pooled = code_vecs.sum(dim=0)
        return F.relu(self.modality_proj[modality](pooled))

    def aggregate(self, summaries: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
        """Attention-weighted combination of the per-modality summaries."""
        stacked = torch.stack(tuple(summaries))
        weights = torch.softmax(self.attention(stacked.reshape(-1)), dim=-1)
        return weights @ stacked, weights

    def forward(self, codes: Mapping[str, torch.Tensor], gaps: Mapping[str, torch.Tensor],
                *, generator: torch.Generator | None = None, hard: bool = True,
                masked_modalities: frozenset[str] | set[str] = frozenset(),
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """Embed one visit.

        Args:
            codes: modality -> long tensor of present code indices.
            gaps: modality -> recency gaps aligned with ``codes``.
            generator: source of Gumbel noise; ``None`` fixes the noise at 0.
            hard: binarize the gate in the forward pass.
            masked_modalities: modalities treated as empty (used by the
                cross-modality imputation metric).

        Returns:
            ``(visit_vector, attention_weights)`` of shapes ``(dim,)`` and
            ``(num_modalities,)``.
        """
        summaries = []
        for name in self.modality_names:
            idx = codes.get(name)
            if name in masked_modalities or idx is None or idx.numel() == 0:
                summaries.append(self.modality_summary(name, None))
                continue
            vecs = self.code_vectors(name, idx, gaps[name], generator=generator, hard=hard)
            summaries.append(self.modality_summary(name, vecs))
        return self.aggregate(summaries)
