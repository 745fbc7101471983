"""Tagged distribution values exchanged between the predictors.

Concept predictors emit per-concept scores (delta or independent Bernoulli),
sidechannel predictors emit one of four payload families, and task
predictors emit per-task probabilities, optionally normalized inside
mutually exclusive groups.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

CONCEPT_DELTA = "delta-vector"
CONCEPT_BERNOULLI = "bernoulli-vector"

SIDE_EMBEDDING = "delta-embedding"
SIDE_CATEGORICAL = "categorical"
SIDE_PAIRS = "per-concept-pair-embeddings"
SIDE_FUZZY = "fuzzy-rule"

CONCEPT_KINDS = (CONCEPT_DELTA, CONCEPT_BERNOULLI)
SIDECHANNEL_KINDS = (SIDE_EMBEDDING, SIDE_CATEGORICAL, SIDE_PAIRS, SIDE_FUZZY)


@dataclass
class ConceptDistribution:
    kind: str
    values: Tensor  # (batch, n_concepts)

    def validate(self):
        if self.kind not in CONCEPT_KINDS:
            raise ValueError(f"unknown concept kind {self.kind!r}")
        data = self.values.data
        if self.kind == CONCEPT_BERNOULLI and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("bernoulli concept values outside [0, 1]")
        return self

    @property
    def n_concepts(self):
        return self.values.shape[1]


@dataclass
class SidechannelDistribution:
    kind: str
    payload: Tensor
    # Layout metadata. categorical: (n_groups, n_options) blocks per row;
    # pairs: (n_concepts, 2, pair_width) flattened concept-major;
    # fuzzy-rule: (n_concepts, 2) flattened as (relevance, polarity) pairs.
    blocks: tuple = ()

    def validate(self, atol=1e-9):
        if self.kind not in SIDECHANNEL_KINDS:
            raise ValueError(f"unknown sidechannel kind {self.kind!r}")
        data = self.payload.data
        if self.kind == SIDE_CATEGORICAL:
            n_groups, n_options = self.blocks
            sums = data.reshape(-1, n_options).sum(axis=1)
            if not np.allclose(sums, 1.0, atol=atol):
                raise ValueError("categorical payload rows do not sum to 1")
        if self.kind == SIDE_FUZZY and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("fuzzy-rule payload outside [0, 1]")
        return self


@dataclass
class TaskDistribution:
    probs: Tensor  # (batch, n_tasks)
    exclusive_groups: tuple = None  # contiguous index ranges, or None

    def validate(self, atol=1e-9):
        data = self.probs.data
        if data.min() < -atol or data.max() > 1.0 + atol:
            raise ValueError("task probabilities outside [0, 1]")
        if self.exclusive_groups:
            for lo, hi in self.exclusive_groups:
                sums = data[:, lo:hi].sum(axis=1)
                if not np.allclose(sums, 1.0, atol=atol):
                    raise ValueError(f"exclusive group [{lo}, {hi}) does not sum to 1")
        return self

    @property
    def n_tasks(self):
        return self.probs.shape[1]


@dataclass
class SidechannelPrior:
    mode: str  # marginalized | learnable
    kind: str
    payload: Tensor  # (1, payload_width); None selects the all-rules mode
    blocks: tuple = ()

    def validate(self, atol=1e-9):
        if self.mode not in ("marginalized", "learnable"):
            raise ValueError(f"unknown prior mode {self.mode!r}")
        if self.payload is not None:
            SidechannelDistribution(self.kind, self.payload, self.blocks).validate(atol)
        return self
