"""Sequential-style training with gradient-blocked concepts.

The objective is task cross-entropy on default-mode predictions made from
hard predicted concepts, plus a weighted concept cross-entropy, plus a
weighted divergence between the default and bottleneck task distributions.
Neither the task term nor the divergence term sends gradient into the
concept predictor. Optional baselines: zeroing the whole sidechannel per
batch with some probability, and an additive-heads detach variant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import accuracy_score, sis_score, threshold_predictions
from .model import compute_marginal_prior, infer_bottleneck, infer_default
from .optim import AdamW, NonFiniteGradientError
from .rng import RngStream
from .zoo import build_model

CLAMP_EPS = 1e-12

DIVERGENCES = ("tv", "symkl")
PRIOR_MODES = ("auto", "marginalized", "learnable")
BASELINES = ("none", "dropout", "detach")


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite; carries the history so far."""

    def __init__(self, message, history, components=None):
        super().__init__(message)
        self.history = history
        self.components = components or {}


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 0.0
    divergence: str = "tv"
    prior_mode: str = "auto"
    baseline: str = "none"
    dropout_p: float = 0.0
    randint_p: float = 0.0
    epochs: int = 80
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 1
    restore_best: bool = True
    patience: int = None  # early stop after this many non-improving epochs

    def validate(self):
        if self.alpha < 0:
            raise ValueError(f"train.alpha must be >= 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"train.beta must be >= 0, got {self.beta}")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"train.divergence must be one of {DIVERGENCES}, got {self.divergence!r}")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"train.prior_mode must be one of {PRIOR_MODES}, got {self.prior_mode!r}")
        if self.baseline not in BASELINES:
            raise ValueError(f"train.baseline must be one of {BASELINES}, got {self.baseline!r}")
        for name in ("dropout_p", "randint_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"train.{name} must be in [0, 1], got {p}")
        if self.epochs < 0:
            raise ValueError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"train.lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        return self

    def resolved_prior_mode(self):
        if self.prior_mode != "auto":
            return self.prior_mode
        return "learnable" if self.beta > 0 else "marginalized"


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    task_loss: list = field(default_factory=list)
    concept_loss: list = field(default_factory=list)
    sis_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    val_sis: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf

    @property
    def n_epochs(self):
        return len(self.train_loss)

    def summary(self):
        return {
            "epochs_trained": self.n_epochs,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "final_val_accuracy": self.val_accuracy[-1] if self.val_accuracy else None,
            "final_val_sis": self.val_sis[-1] if self.val_sis else None,
        }


# ---- loss pieces -----------------------------------------------------------


def binary_cross_entropy(probs: Tensor, targets) -> Tensor:
    p = probs.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    t = ad.tensor(np.asarray(targets, dtype=np.float64))
    return -(t * p.log() + (1.0 - t) * (1.0 - p).log()).mean()


def task_cross_entropy(probs: Tensor, targets, exclusive_groups=None) -> Tensor:
    """Binary CE per task; exclusive groups use categorical CE instead."""
    if not exclusive_groups:
        return binary_cross_entropy(probs, targets)
    t = np.asarray(targets, dtype=np.float64)
    parts = []
    cursor = 0
    for lo, hi in exclusive_groups:
        if lo > cursor:
            parts.append(_binary_ce_columns(probs[:, cursor:lo], t[:, cursor:lo]))
        block = probs[:, lo:hi].clamp(CLAMP_EPS, 1.0)
        parts.append(-(ad.tensor(t[:, lo:hi]) * block.log()).sum(axis=1, keepdims=True))
        cursor = hi
    if cursor < probs.shape[1]:
        parts.append(_binary_ce_columns(probs[:, cursor:], t[:, cursor:]))
    stacked = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    return stacked.sum(axis=1, keepdims=True).mean()


def _binary_ce_columns(probs: Tensor, targets) -> Tensor:
    p = probs.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    t = ad.tensor(targets)
    return -(t * p.log() + (1.0 - t) * (1.0 - p).log()).mean(axis=1, keepdims=True)


def divergence_loss(p: Tensor, q: Tensor, kind, exclusive_groups=None) -> Tensor:
    """Differentiable counterpart of metrics.divergence."""
    if kind not in DIVERGENCES:
        raise ValueError(f"unknown divergence kind {kind!r}")
    pc = p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    qc = q.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    groups = []
    cursor = 0
    for lo, hi in exclusive_groups or ():
        groups.extend(("binary", i, i + 1) for i in range(cursor, lo))
        groups.append(("exclusive", lo, hi))
        cursor = hi
    groups.extend(("binary", i, i + 1) for i in range(cursor, p.shape[1]))
    parts = []
    for gkind, lo, hi in groups:
        pb, qb = pc[:, lo:hi], qc[:, lo:hi]
        if kind == "tv":
            scale = 1.0 if gkind == "binary" else 0.5
            parts.append(scale * (pb - qb).abs().sum(axis=1, keepdims=True))
        elif gkind == "binary":
            parts.append(
                ((pb - qb) * (pb.log() - qb.log())).sum(axis=1, keepdims=True)
                + ((qb - pb) * ((1.0 - pb).log() - (1.0 - qb).log())).sum(axis=1, keepdims=True)
            )
        else:
            parts.append(((pb - qb) * (pb.log() - qb.log())).sum(axis=1, keepdims=True))
    stacked = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
    return stacked.mean(axis=1, keepdims=True).mean()


def apply_sidechannel_dropout(payload: Tensor, p, rng) -> Tensor:
    """Zero the whole payload with probability p (training only)."""
    if p > 0.0 and rng.uniform() < p:
        return payload * 0.0
    return payload


def randint_intervene(concept_values, concept_labels, p, rng) -> np.ndarray:
    """Independently replace each concept slot with its label, prob p."""
    values = np.asarray(concept_values, dtype=np.float64)
    labels = np.asarray(concept_labels, dtype=np.float64)
    if p <= 0.0:
        return values
    mask = rng.bernoulli(p, size=values.shape).astype(bool)
    return np.where(mask, labels, values)


def detach_loss(model, concepts: Tensor, payload: Tensor, y_labels):
    """CE(f(c), y) + CE(stop(f(c)) + g(z), y) for the additive-heads variant."""
    if model.variant != "detach":
        raise ValueError("detach loss requires the CRM detach variant")
    f = model.concept_head_probs(concepts)
    g = model.side_head_probs(payload)
    combined = ad.clamp(ad.stop_gradient(f) + g, 0.0, 1.0)
    loss = binary_cross_entropy(f, y_labels) + binary_cross_entropy(combined, y_labels)
    p_default = ad.clamp(f + g, 0.0, 1.0)
    return loss, p_default


def training_loss(model, x, c_labels, y_labels, config, *, dropout_rng=None,
                  randint_rng=None, training=True):
    """Full objective on one batch. Returns (loss tensor, component floats)."""
    xt = ad.tensor(np.asarray(x, dtype=np.float64))
    model.check_input(xt)
    scores = model.concept_scores(xt)
    concepts = model.task_path_concepts(scores)
    if training and config.randint_p > 0.0 and model.arch == "CEM":
        concepts = Tensor(randint_intervene(concepts.data, c_labels, config.randint_p, randint_rng))
    payload = model.sidechannel_payload(xt)
    if training and config.baseline == "dropout":
        payload = apply_sidechannel_dropout(payload, config.dropout_p, dropout_rng)

    if config.baseline == "detach":
        task_term, p_default = detach_loss(model, concepts, payload, y_labels)
        p_default = model.finalize(p_default)
    else:
        p_default = model.finalize(model.task_probs(concepts, payload))
        task_term = task_cross_entropy(p_default, y_labels, model.exclusive_groups)

    concept_term = binary_cross_entropy(scores, c_labels)

    if config.beta > 0.0:
        p_bottleneck = model.finalize(model.bottleneck_probs(concepts, xt.shape[0]))
        sis_term = divergence_loss(p_default, p_bottleneck, config.divergence, model.exclusive_groups)
    else:
        sis_term = ad.tensor(0.0)

    total = task_term + config.alpha * concept_term + config.beta * sis_term
    components = {
        "task": task_term.item(),
        "concept": concept_term.item(),
        "sis": sis_term.item(),
        "total": total.item(),
    }
    return total, components


# ---- the fit loop ----------------------------------------------------------


def _eval_split(model, x, c, y, config, grouping):
    _, comps = training_loss(model, x, c, y, config, training=False)
    preds_d = threshold_predictions(infer_default(model, x).probs.data, model.exclusive_groups)
    preds_b = threshold_predictions(infer_bottleneck(model, x).probs.data, model.exclusive_groups)
    sis = sis_score(preds_d, preds_b, grouping).sis_hat
    acc = accuracy_score(preds_d, y, grouping)
    return comps, acc, sis


def fit(dataset, arch, config: TrainConfig, emb_size=32, c_emb=8, n_rules=4, rule_emb=16):
    """Train one model on a dataset's train split, restoring the best epoch.

    Marginalized priors are refreshed from the train split at every epoch
    start (and again after weight restoration); learnable priors receive
    gradient only through the divergence term.
    """
    config.validate()
    rng = RngStream(config.seed)
    x_train, c_train, y_train = dataset.split("train")
    x_val, c_val, y_val = dataset.split("val")
    grouping = dataset.y_groups

    variant = "detach" if config.baseline == "detach" else "standard"
    model = build_model(
        arch,
        input_dim=dataset.n_features,
        n_concepts=dataset.n_concepts,
        n_tasks=dataset.n_tasks,
        rng=rng.substream("init"),
        variant=variant,
        emb_size=emb_size,
        c_emb=c_emb,
        n_rules=n_rules,
        rule_emb=rule_emb,
        exclusive_groups=dataset.y_groups,
        concept_names=dataset.concept_names,
        task_names=dataset.task_names,
    )
    if config.baseline == "dropout" and model.sidechannel_kind == "categorical":
        raise ValueError("sidechannel dropout is undefined for categorical sidechannels")
    if config.baseline == "detach" and dataset.y_groups:
        raise ValueError("the detach baseline supports multi-label tasks only, "
                         "not mutually exclusive groups")

    prior_mode = config.resolved_prior_mode()
    if prior_mode == "learnable":
        model.attach_learnable_prior(rng.substream("prior"))

    optimizer = AdamW(model.params, lr=config.lr, weight_decay=config.weight_decay)
    dropout_rng = rng.substream("dropout")
    randint_rng = rng.substream("randint")
    history = TrainHistory()
    param_items = list(model.params.items())
    best_params = None
    stale = 0

    for epoch in range(config.epochs):
        if prior_mode == "marginalized":
            model.prior = compute_marginal_prior(model, x_train)
        order = rng.substream(f"shuffle.{epoch}").permutation(len(x_train))
        sums = {"task": 0.0, "concept": 0.0, "sis": 0.0, "total": 0.0}
        seen = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, comps = training_loss(
                model, x_train[idx], c_train[idx], y_train[idx], config,
                dropout_rng=dropout_rng, randint_rng=randint_rng,
            )
            if not math.isfinite(comps["total"]):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: {comps}", history, comps
                )
            grad_map = ad.backward(loss, [p for _, p in param_items])
            grads = {name: grad_map[p] for name, p in param_items}
            try:
                optimizer.step(grads)
            except NonFiniteGradientError as err:
                raise TrainingDivergedError(str(err), history) from err
            for key in sums:
                sums[key] += comps[key] * len(idx)
            seen += len(idx)

        val_comps, val_acc, val_sis = _eval_split(model, x_val, c_val, y_val, config, grouping)
        history.train_loss.append(sums["total"] / seen)
        history.task_loss.append(sums["task"] / seen)
        history.concept_loss.append(sums["concept"] / seen)
        history.sis_loss.append(sums["sis"] / seen)
        history.val_loss.append(val_comps["total"])
        history.val_accuracy.append(val_acc)
        history.val_sis.append(val_sis)

        if val_comps["total"] < history.best_val_loss:
            history.best_val_loss = val_comps["total"]
            history.best_epoch = epoch
            best_params = {name: p.data.copy() for name, p in param_items}
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale > config.patience:
                break

    if config.restore_best and best_params is not None:
        for name, p in param_items:
            p.data = best_params[name].copy()
    if prior_mode == "marginalized":
        model.prior = compute_marginal_prior(model, x_train)
    return model, history
