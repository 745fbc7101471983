"""Concrete task-predictor parametrizations.

Five architectures share the meta-model contract:

- LRM: linear head on hard concepts plus an embedding sidechannel.
- CRM: same layout with a relu MLP head.
- CEM: two embeddings per concept, mixed by the (gradient-stopped) soft
  concept score, concatenated into an MLP head.
- DCR: same pair-embedding sidechannel; each mixed embedding decodes to a
  per-task (polarity, relevance) fuzzy literal, combined with the product
  t-norm.
- CMR: a categorical sidechannel selects one of a learned rulebook's
  conjunctive rules per task; rule satisfaction factorizes over
  independent concepts, so no enumeration over assignments is needed.

A detach variant of CRM splits the head into additive concept-only and
sidechannel-only parts for the concept-usage baseline.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    CONCEPT_BERNOULLI,
    SIDE_CATEGORICAL,
    SIDE_EMBEDDING,
    SIDE_PAIRS,
    SidechannelPrior,
)
from .model import CsmModel, Linear, Mlp, PriorMissingError, broadcast_rows, make_linear


# ---- functional building blocks ------------------------------------------


def linear_task(concepts: Tensor, payload: Tensor, head: Linear) -> Tensor:
    return ad.sigmoid(head(ad.concat([concepts, payload], axis=1)))


def mix_pair_embeddings(scores: Tensor, payload: Tensor, n_concepts: int, width: int) -> Tensor:
    """Per concept i: score_i * first embedding + (1 - score_i) * second."""
    parts = []
    for i in range(n_concepts):
        s = scores[:, i : i + 1]
        first = payload[:, (2 * i) * width : (2 * i + 1) * width]
        second = payload[:, (2 * i + 1) * width : (2 * i + 2) * width]
        parts.append(s * first + (1.0 - s) * second)
    return ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]


def fuzzy_factor(concept: Tensor, relevance: Tensor, polarity: Tensor) -> Tensor:
    """One concept's contribution to a fuzzy conjunction.

    literal = polarity*c + (1-polarity)*(1-c); an irrelevant concept
    (relevance 0) contributes factor 1.
    """
    literal = polarity * concept + (1.0 - polarity) * (1.0 - concept)
    return 1.0 - relevance * (1.0 - literal)


def fuzzy_rule_eval(concepts: Tensor, relevance: Tensor, polarity: Tensor) -> Tensor:
    """Product-t-norm evaluation of one fuzzy rule, columnwise over concepts."""
    n = concepts.shape[1]
    out = None
    for i in range(n):
        factor = fuzzy_factor(
            concepts[:, i : i + 1], relevance[:, i : i + 1], polarity[:, i : i + 1]
        )
        out = factor if out is None else out * factor
    return out


def rule_satisfaction(concept_probs: Tensor, roles: Tensor) -> Tensor:
    """Probability a conjunctive rule holds under independent concepts.

    roles: (n_concepts, 3) simplex rows ordered (positive, negative,
    irrelevant). Returns (batch, 1).
    """
    if roles.shape[0] != concept_probs.shape[1]:
        raise ad.ShapeError("rule-satisfaction", concept_probs.shape, roles.shape)
    pos = roles[:, 0:1].T
    neg = roles[:, 1:2].T
    irr = roles[:, 2:3].T
    factors = concept_probs * pos + (1.0 - concept_probs) * neg + irr
    out = factors[:, 0:1]
    for i in range(1, factors.shape[1]):
        out = out * factors[:, i : i + 1]
    return out


def rules_mixture(concept_probs: Tensor, select: Tensor, rules) -> Tensor:
    """Mixture over per-rule satisfactions weighted by a categorical select.

    rules: sequence of (n_concepts, 3) role tensors, one per rule.
    """
    sats = ad.concat([rule_satisfaction(concept_probs, r) for r in rules], axis=1)
    return (select * sats).sum(axis=1, keepdims=True)


# ---- architectures --------------------------------------------------------


class LrmModel(CsmModel):
    arch = "LRM"
    sidechannel_kind = SIDE_EMBEDDING

    def __init__(self, input_dim, n_concepts, n_tasks, rng, emb_size=32, **kw):
        super().__init__(input_dim, n_concepts, n_tasks, **kw)
        self.emb_size = emb_size
        self._concept_net = Mlp(rng, self.params, "theta", [input_dim, emb_size, emb_size, n_concepts])
        self._side_net = Mlp(rng, self.params, "phi", [input_dim, emb_size, emb_size, emb_size])
        self._head = make_linear(rng, self.params, "psi.out", n_concepts + emb_size, n_tasks)

    def concept_scores(self, x):
        return ad.sigmoid(self._concept_net(x))

    def sidechannel_payload(self, x):
        return self._side_net(x)

    def task_probs(self, concepts, payload):
        return linear_task(concepts, payload, self._head)

    def payload_width(self):
        return self.emb_size

    def hyperparameters(self):
        return {**super().hyperparameters(), "emb_size": self.emb_size}


class CrmModel(CsmModel):
    arch = "CRM"
    sidechannel_kind = SIDE_EMBEDDING

    def __init__(self, input_dim, n_concepts, n_tasks, rng, emb_size=32, **kw):
        super().__init__(input_dim, n_concepts, n_tasks, **kw)
        self.emb_size = emb_size
        self._concept_net = Mlp(rng, self.params, "theta", [input_dim, emb_size, emb_size, n_concepts])
        self._side_net = Mlp(rng, self.params, "phi", [input_dim, emb_size, emb_size, emb_size])
        self._head = Mlp(
            rng, self.params, "psi",
            [n_concepts + emb_size, emb_size, emb_size, emb_size, n_tasks],
        )

    def concept_scores(self, x):
        return ad.sigmoid(self._concept_net(x))

    def sidechannel_payload(self, x):
        return self._side_net(x)

    def task_probs(self, concepts, payload):
        return ad.sigmoid(self._head(ad.concat([concepts, payload], axis=1)))

    def payload_width(self):
        return self.emb_size

    def hyperparameters(self):
        return {**super().hyperparameters(), "emb_size": self.emb_size}


class DetachCrmModel(CrmModel):
    """CRM with additive heads y = f(concepts) + g(sidechannel).

    The combined prediction is the clamped sum of the two sigmoided parts;
    the training objective stops the gradient of f inside the summed term.
    """

    arch = "CRM"
    variant = "detach"

    def __init__(self, input_dim, n_concepts, n_tasks, rng, emb_size=32, **kw):
        CsmModel.__init__(self, input_dim, n_concepts, n_tasks, **kw)
        self.emb_size = emb_size
        self._concept_net = Mlp(rng, self.params, "theta", [input_dim, emb_size, emb_size, n_concepts])
        self._side_net = Mlp(rng, self.params, "phi", [input_dim, emb_size, emb_size, emb_size])
        self._concept_head = Mlp(
            rng, self.params, "psi.f", [n_concepts, emb_size, emb_size, emb_size, n_tasks]
        )
        self._side_head = make_linear(rng, self.params, "psi.g", emb_size, n_tasks)

    def concept_head_probs(self, concepts):
        return ad.sigmoid(self._concept_head(concepts))

    def side_head_probs(self, payload):
        return ad.sigmoid(self._side_head(payload))

    def task_probs(self, concepts, payload):
        return ad.clamp(self.concept_head_probs(concepts) + self.side_head_probs(payload), 0.0, 1.0)


class CemModel(CsmModel):
    arch = "CEM"
    sidechannel_kind = SIDE_PAIRS

    def __init__(self, input_dim, n_concepts, n_tasks, rng, emb_size=32, c_emb=8, **kw):
        super().__init__(input_dim, n_concepts, n_tasks, **kw)
        self.emb_size = emb_size
        self.c_emb = c_emb
        pw = 2 * c_emb * n_concepts
        self._trunk = Mlp(rng, self.params, "phi", [input_dim, pw, pw, pw, pw])
        self._scorers = [
            make_linear(rng, self.params, f"theta.score{i}", 2 * c_emb, 1)
            for i in range(n_concepts)
        ]
        self._head = Mlp(
            rng, self.params, "psi", [n_concepts * c_emb, emb_size, emb_size, emb_size, n_tasks]
        )

    def sidechannel_payload(self, x):
        return self._trunk(x)

    def concept_scores(self, x):
        payload = self.sidechannel_payload(x)
        cols = []
        for i, scorer in enumerate(self._scorers):
            pair = payload[:, i * 2 * self.c_emb : (i + 1) * 2 * self.c_emb]
            cols.append(scorer(pair))
        return ad.sigmoid(ad.concat(cols, axis=1) if len(cols) > 1 else cols[0])

    def task_path_concepts(self, scores):
        # Mixing uses the soft score; the gradient stop still keeps the
        # task loss away from the scoring parameters.
        return ad.stop_gradient(scores)

    def task_probs(self, concepts, payload):
        mixed = mix_pair_embeddings(concepts, payload, self.n_concepts, self.c_emb)
        return ad.sigmoid(self._head(mixed))

    def payload_width(self):
        return 2 * self.c_emb * self.n_concepts

    def payload_blocks(self):
        return (self.n_concepts, 2, self.c_emb)

    def hyperparameters(self):
        return {**super().hyperparameters(), "emb_size": self.emb_size, "c_emb": self.c_emb}


class DcrModel(CsmModel):
    arch = "DCR"
    sidechannel_kind = SIDE_PAIRS

    def __init__(self, input_dim, n_concepts, n_tasks, rng, emb_size=32, c_emb=8, **kw):
        super().__init__(input_dim, n_concepts, n_tasks, **kw)
        self.emb_size = emb_size
        self.c_emb = c_emb
        pw = 2 * c_emb * n_concepts
        self._trunk = Mlp(rng, self.params, "phi", [input_dim, pw, pw, pw, pw])
        self._scorers = [
            make_linear(rng, self.params, f"theta.score{i}", 2 * c_emb, 1)
            for i in range(n_concepts)
        ]
        self._role_nets = [
            Mlp(rng, self.params, f"psi.role{i}", [c_emb, c_emb, c_emb, c_emb, 2 * n_tasks])
            for i in range(n_concepts)
        ]

    def sidechannel_payload(self, x):
        return self._trunk(x)

    def concept_scores(self, x):
        payload = self.sidechannel_payload(x)
        cols = []
        for i, scorer in enumerate(self._scorers):
            pair = payload[:, i * 2 * self.c_emb : (i + 1) * 2 * self.c_emb]
            cols.append(scorer(pair))
        return ad.sigmoid(ad.concat(cols, axis=1) if len(cols) > 1 else cols[0])

    def task_probs(self, concepts, payload):
        out = None
        for i in range(self.n_concepts):
            c_i = concepts[:, i : i + 1]
            first = payload[:, (2 * i) * self.c_emb : (2 * i + 1) * self.c_emb]
            second = payload[:, (2 * i + 1) * self.c_emb : (2 * i + 2) * self.c_emb]
            mixed = c_i * first + (1.0 - c_i) * second
            role = ad.sigmoid(self._role_nets[i](mixed))
            polarity = role[:, : self.n_tasks]
            relevance = role[:, self.n_tasks :]
            factor = fuzzy_factor(c_i, relevance, polarity)
            out = factor if out is None else out * factor
        return out

    def payload_width(self):
        return 2 * self.c_emb * self.n_concepts

    def payload_blocks(self):
        return (self.n_concepts, 2, self.c_emb)

    def hyperparameters(self):
        return {**super().hyperparameters(), "emb_size": self.emb_size, "c_emb": self.c_emb}


class CmrModel(CsmModel):
    arch = "CMR"
    concept_kind = CONCEPT_BERNOULLI
    sidechannel_kind = SIDE_CATEGORICAL

    def __init__(self, input_dim, n_concepts, n_tasks, rng, emb_size=32, n_rules=4, rule_emb=16, **kw):
        super().__init__(input_dim, n_concepts, n_tasks, **kw)
        self.emb_size = emb_size
        self.n_rules = n_rules
        self.rule_emb = rule_emb
        self._concept_net = Mlp(rng, self.params, "theta", [input_dim, emb_size, emb_size, n_concepts])
        self._selector = Mlp(
            rng, self.params, "phi", [input_dim, emb_size, emb_size, emb_size, n_tasks * n_rules]
        )
        rulebook = Tensor(
            rng.normal(size=(n_tasks * n_rules, rule_emb)), requires_grad=True, name="psi.rulebook"
        )
        self.params["psi.rulebook"] = rulebook
        self._rulebook = rulebook
        self._decoder = Mlp(
            rng, self.params, "psi.dec", [rule_emb, emb_size, emb_size, emb_size, 3 * n_concepts]
        )
        # Constant expansion: probs (B, n_C) @ expand -> (B, n_C*n_rules)
        # with each concept column repeated once per rule.
        expand = np.zeros((n_concepts, n_concepts * n_rules))
        for i in range(n_concepts):
            expand[i, i * n_rules : (i + 1) * n_rules] = 1.0
        self._expand = Tensor(expand)

    def concept_scores(self, x):
        return ad.sigmoid(self._concept_net(x))

    def sidechannel_payload(self, x):
        raw = self._selector(x)
        flat = ad.softmax(raw.reshape(x.shape[0] * self.n_tasks, self.n_rules), axis=-1)
        return flat.reshape(x.shape[0], self.n_tasks * self.n_rules)

    def decode_roles(self):
        """Role simplexes (positive, negative, irrelevant) per task/rule/concept."""
        raw = self._decoder(self._rulebook)
        flat = ad.softmax(raw.reshape(self.n_tasks * self.n_rules * self.n_concepts, 3), axis=-1)
        return flat

    def _concept_major(self, roles, column, task):
        # roles rows are (task, rule, concept) lexicographic; pick one role
        # column for one task and lay it out concept-major for the fold.
        per_task = roles[:, column : column + 1].reshape(self.n_tasks, self.n_rules * self.n_concepts)
        row = per_task[task : task + 1, :]
        return row.reshape(self.n_rules, self.n_concepts).T.reshape(1, self.n_concepts * self.n_rules)

    def _satisfactions(self, concepts, roles, task):
        tiled = concepts @ self._expand
        pos = self._concept_major(roles, 0, task)
        neg = self._concept_major(roles, 1, task)
        irr = self._concept_major(roles, 2, task)
        factors = tiled * pos + (1.0 - tiled) * neg + irr
        sat = factors[:, 0 : self.n_rules]
        for k in range(1, self.n_concepts):
            sat = sat * factors[:, k * self.n_rules : (k + 1) * self.n_rules]
        return sat

    def task_probs(self, concepts, payload):
        roles = self.decode_roles()
        cols = []
        for task in range(self.n_tasks):
            sat = self._satisfactions(concepts, roles, task)
            select = payload[:, task * self.n_rules : (task + 1) * self.n_rules]
            cols.append((select * sat).sum(axis=1, keepdims=True))
        return ad.concat(cols, axis=1) if len(cols) > 1 else cols[0]

    def bottleneck_probs(self, concepts, batch):
        if self.prior is None:
            raise PriorMissingError("CMR: bottleneck mode needs a prior")
        if self.prior.payload is None:
            # All-rules mode: fuzzy OR of every rule's prediction per task.
            roles = self.decode_roles()
            cols = []
            for task in range(self.n_tasks):
                sat = self._satisfactions(concepts, roles, task)
                none_hold = 1.0 - sat[:, 0:1]
                for r in range(1, self.n_rules):
                    none_hold = none_hold * (1.0 - sat[:, r : r + 1])
                cols.append(1.0 - none_hold)
            return ad.concat(cols, axis=1) if len(cols) > 1 else cols[0]
        return self.task_probs(concepts, broadcast_rows(self.prior.payload, batch))

    def attach_learnable_prior(self, rng):
        # With a learnable prior the bottleneck applies the whole rulebook
        # as a fuzzy OR, so no payload parameters are drawn.
        self.prior = SidechannelPrior("learnable", self.sidechannel_kind, None, self.payload_blocks())
        return self.prior

    def payload_width(self):
        return self.n_tasks * self.n_rules

    def payload_blocks(self):
        return (self.n_tasks, self.n_rules)

    def hyperparameters(self):
        return {
            **super().hyperparameters(),
            "emb_size": self.emb_size,
            "n_rules": self.n_rules,
            "rule_emb": self.rule_emb,
        }


ARCHITECTURES = {
    "LRM": LrmModel,
    "CRM": CrmModel,
    "CEM": CemModel,
    "DCR": DcrModel,
    "CMR": CmrModel,
}


def build_model(arch, input_dim, n_concepts, n_tasks, rng, variant="standard",
                emb_size=32, c_emb=8, n_rules=4, rule_emb=16, **kw):
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture tag {arch!r}; expected one of {sorted(ARCHITECTURES)}")
    if variant == "detach":
        if arch != "CRM":
            raise ValueError("the detach variant is defined for CRM only")
        return DetachCrmModel(input_dim, n_concepts, n_tasks, rng, emb_size=emb_size, **kw)
    if variant != "standard":
        raise ValueError(f"unknown variant {variant!r}")
    cls = ARCHITECTURES[arch]
    if arch in ("CEM", "DCR"):
        return cls(input_dim, n_concepts, n_tasks, rng, emb_size=emb_size, c_emb=c_emb, **kw)
    if arch == "CMR":
        return cls(input_dim, n_concepts, n_tasks, rng, emb_size=emb_size, n_rules=n_rules, rule_emb=rule_emb, **kw)
    return cls(input_dim, n_concepts, n_tasks, rng, emb_size=emb_size, **kw)
