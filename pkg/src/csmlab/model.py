"""Meta-model core: three predictors plus a sidechannel prior, two inference modes.

Default mode predicts the sidechannel from the input; bottleneck mode swaps
in an input-independent prior so the prediction depends on the input only
through the concepts. The two modes share every other step bit-for-bit.

Concept scores are thresholded at 0.5 (ties resolve to 1) before the task
predictor, and no gradient flows through that threshold; architectures that
mix embeddings with soft scores stop the gradient instead.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .distributions import (
    CONCEPT_DELTA,
    SIDE_EMBEDDING,
    ConceptDistribution,
    SidechannelDistribution,
    SidechannelPrior,
    TaskDistribution,
)


class PriorMissingError(RuntimeError):
    """Bottleneck mode was requested before any prior was attached."""


class Linear:
    def __init__(self, w: Tensor, b: Tensor):
        self.w = w
        self.b = b

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


def make_linear(rng, params, name, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(size=(fan_in, fan_out), low=-bound, high=bound), requires_grad=True, name=f"{name}.w")
    b = Tensor(rng.uniform(size=(fan_out,), low=-bound, high=bound), requires_grad=True, name=f"{name}.b")
    params[f"{name}.w"] = w
    params[f"{name}.b"] = b
    return Linear(w, b)


class Mlp:
    """Stack of linear layers with relu between all but the last."""

    def __init__(self, rng, params, prefix, sizes):
        self.layers = [
            make_linear(rng, params, f"{prefix}.{i}", sizes[i], sizes[i + 1])
            for i in range(len(sizes) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = ad.relu(layer(x))
        return self.layers[-1](x)


class CsmModel:
    """Base for all parametrizations; subclasses fill in the three predictors."""

    arch = "?"
    variant = "standard"
    concept_kind = CONCEPT_DELTA
    sidechannel_kind = SIDE_EMBEDDING

    def __init__(self, input_dim, n_concepts, n_tasks, exclusive_groups=None,
                 concept_names=None, task_names=None):
        self.input_dim = input_dim
        self.n_concepts = n_concepts
        self.n_tasks = n_tasks
        self.exclusive_groups = tuple(tuple(g) for g in exclusive_groups) if exclusive_groups else None
        self.concept_names = list(concept_names) if concept_names else [f"c{i}" for i in range(n_concepts)]
        self.task_names = list(task_names) if task_names else [f"y{i}" for i in range(n_tasks)]
        self.params = {}
        self.prior = None

    # -- hooks implemented by each architecture ---------------------------

    def concept_scores(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def sidechannel_payload(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def task_probs(self, concepts: Tensor, payload: Tensor) -> Tensor:
        raise NotImplementedError

    def payload_width(self) -> int:
        raise NotImplementedError

    def payload_blocks(self) -> tuple:
        return ()

    # -- shared machinery ---------------------------------------------------

    def check_input(self, x: Tensor):
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"{self.arch}-input", x.shape, (-1, self.input_dim))

    def task_path_concepts(self, scores: Tensor) -> Tensor:
        return ad.greater_equal(scores, 0.5)

    def hyperparameters(self):
        return {
            "arch": self.arch,
            "variant": self.variant,
            "input_dim": self.input_dim,
            "n_concepts": self.n_concepts,
            "n_tasks": self.n_tasks,
        }

    def finalize(self, probs: Tensor) -> Tensor:
        if not self.exclusive_groups:
            return probs
        segments = []
        cursor = 0
        for lo, hi in self.exclusive_groups:
            if lo > cursor:
                segments.append(probs[:, cursor:lo])
            block = ad.clamp(probs[:, lo:hi], 1e-12, 1.0)
            segments.append(block / block.sum(axis=1, keepdims=True))
            cursor = hi
        if cursor < self.n_tasks:
            segments.append(probs[:, cursor:])
        if len(segments) == 1:
            return segments[0]
        return ad.concat(segments, axis=1)

    def bottleneck_probs(self, concepts: Tensor, batch: int) -> Tensor:
        if self.prior is None:
            raise PriorMissingError(
                f"{self.arch}: bottleneck mode needs a prior; compute a marginal "
                "prior or attach a learnable one"
            )
        payload = broadcast_rows(self.prior.payload, batch)
        return self.task_probs(concepts, payload)

    def attach_learnable_prior(self, rng):
        payload = Tensor(
            rng.normal(size=(1, self.payload_width())),
            requires_grad=True,
            name="gamma.payload",
        )
        self.params["gamma.payload"] = payload
        self.prior = SidechannelPrior("learnable", self.sidechannel_kind, payload, self.payload_blocks())
        return self.prior


def broadcast_rows(row: Tensor, batch: int) -> Tensor:
    """Expand a (1, k) row to (batch, k); gradients sum back over rows."""
    return ad.zeros((batch, 1)) + row


def predict_concepts(model: CsmModel, x) -> ConceptDistribution:
    xt = ad.tensor(x)
    model.check_input(xt)
    return ConceptDistribution(model.concept_kind, model.concept_scores(xt))


def predict_sidechannel(model: CsmModel, x) -> SidechannelDistribution:
    xt = ad.tensor(x)
    model.check_input(xt)
    return SidechannelDistribution(
        model.sidechannel_kind, model.sidechannel_payload(xt), model.payload_blocks()
    )


def _task_concepts(model, xt, concept_override):
    scores = model.concept_scores(xt)
    concepts = model.task_path_concepts(scores)
    if concept_override is not None:
        mask, values = concept_override
        concepts = Tensor(np.where(mask, values, concepts.data))
    return concepts


def infer_default(model: CsmModel, x, concept_override=None) -> TaskDistribution:
    xt = ad.tensor(x)
    model.check_input(xt)
    concepts = _task_concepts(model, xt, concept_override)
    payload = model.sidechannel_payload(xt)
    probs = model.finalize(model.task_probs(concepts, payload))
    return TaskDistribution(probs, model.exclusive_groups)


def infer_bottleneck(model: CsmModel, x, concept_override=None) -> TaskDistribution:
    xt = ad.tensor(x)
    model.check_input(xt)
    concepts = _task_concepts(model, xt, concept_override)
    probs = model.finalize(model.bottleneck_probs(concepts, xt.shape[0]))
    return TaskDistribution(probs, model.exclusive_groups)


def compute_marginal_prior(model: CsmModel, inputs, chunk_size=4096) -> SidechannelPrior:
    """Average the predicted sidechannel over a dataset (training split).

    Delta payloads average to one embedding, categorical payloads to a mean
    probability vector, pair/fuzzy payloads componentwise.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValueError("marginal prior needs a non-empty 2-d input matrix")
    total = np.zeros((1, model.payload_width()))
    for start in range(0, inputs.shape[0], chunk_size):
        block = Tensor(inputs[start : start + chunk_size])
        total += model.sidechannel_payload(block).data.sum(axis=0, keepdims=True)
    mean = total / inputs.shape[0]
    return SidechannelPrior("marginalized", model.sidechannel_kind, Tensor(mean), model.payload_blocks())
