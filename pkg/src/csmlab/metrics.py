"""Agreement scoring between inference modes, plus the evaluation toolkit.

The independence score is the empirical agreement between thresholded
default-mode and bottleneck-mode predictions, with a Hoeffding confidence
interval. Also here: divergences on task distributions, plain/subset
accuracy, intervention curves, Pareto filtering of (accuracy, score)
sweeps, and linear-head weight inspection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import infer_default
from .rng import RngStream

CLAMP_EPS = 1e-12


def _group_structure(n_tasks, exclusive_groups):
    """Cover tasks by exclusive ranges; leftovers are singleton binary groups."""
    groups = []
    cursor = 0
    for lo, hi in exclusive_groups or ():
        for i in range(cursor, lo):
            groups.append(("binary", i, i + 1))
        groups.append(("exclusive", lo, hi))
        cursor = hi
    for i in range(cursor, n_tasks):
        groups.append(("binary", i, i + 1))
    return groups


def threshold_predictions(probs, exclusive_groups=None, threshold=0.5):
    """Per-task 0/1 decisions; exclusive groups decide by argmax instead."""
    probs = np.asarray(probs, dtype=np.float64)
    out = (probs >= threshold).astype(np.int64)
    for kind, lo, hi in _group_structure(probs.shape[1], exclusive_groups):
        if kind != "exclusive":
            continue
        block = np.zeros((probs.shape[0], hi - lo), dtype=np.int64)
        block[np.arange(probs.shape[0]), probs[:, lo:hi].argmax(axis=1)] = 1
        out[:, lo:hi] = block
    return out


def hoeffding_epsilon(n, delta):
    if n < 1:
        raise ValueError("sample count must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"confidence delta {delta} outside (0, 1)")
    return math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def hoeffding_interval(value, n, delta):
    eps = hoeffding_epsilon(n, delta)
    return max(0.0, value - eps), min(1.0, value + eps)


@dataclass
class SisReport:
    n: int
    agreements: float
    sis_hat: float
    delta: float
    lo: float
    hi: float
    threshold: float

    def to_dict(self):
        return {
            "n": self.n,
            "agreements": self.agreements,
            "sis_hat": self.sis_hat,
            "delta": self.delta,
            "interval": [self.lo, self.hi],
            "threshold": self.threshold,
        }


def _agreement_units(a, b, grouping):
    """Integer count of agreeing (instance, group) cells plus the group count.

    Integer counting keeps scores exactly invariant under instance
    permutations, which float summation would not be.
    """
    if a.shape != b.shape:
        raise ValueError(f"prediction shapes differ: {a.shape} vs {b.shape}")
    match = a == b
    if grouping is None:
        return int(match.sum()), a.shape[1]
    units = 0
    for lo, hi in grouping:
        units += int(match[:, lo:hi].all(axis=1).sum())
    return units, len(grouping)


def sis_score(default_preds, bottleneck_preds, grouping=None, delta=0.05, threshold=0.5):
    """Empirical agreement between the two modes' thresholded predictions.

    With `grouping` (subset variant) an instance's groups must agree
    wholesale. Symmetric in its two arguments.
    """
    a = np.asarray(default_preds)
    b = np.asarray(bottleneck_preds)
    units, n_groups = _agreement_units(a, b, grouping)
    n = a.shape[0]
    agreements = units / n_groups
    sis_hat = units / (n_groups * n)
    lo, hi = hoeffding_interval(sis_hat, n, delta)
    return SisReport(n, agreements, sis_hat, delta, lo, hi, threshold)


def accuracy_score(preds, labels, grouping=None):
    """Mean per-task accuracy, or subset accuracy over task groups."""
    preds = np.asarray(preds)
    labels = np.asarray(labels).astype(np.int64)
    units, n_groups = _agreement_units(preds, labels, grouping)
    return units / (n_groups * preds.shape[0])


def divergence(p, q, kind, exclusive_groups=None):
    """Mean divergence between two task distributions.

    Binary tasks contribute their (p, 1-p) marginal divergence; exclusive
    groups contribute the divergence of the group's distribution. Instances
    average over groups, the result averages over instances.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)
    q = np.clip(np.asarray(q, dtype=np.float64), CLAMP_EPS, 1.0 - CLAMP_EPS)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if kind not in ("tv", "symkl"):
        raise ValueError(f"unknown divergence kind {kind!r}")
    per_group = []
    for gkind, lo, hi in _group_structure(p.shape[1], exclusive_groups):
        pb, qb = p[:, lo:hi], q[:, lo:hi]
        if gkind == "binary":
            if kind == "tv":
                per_group.append(np.abs(pb - qb).sum(axis=1))
            else:
                per_group.append(
                    ((pb - qb) * (np.log(pb) - np.log(qb))).sum(axis=1)
                    + ((qb - pb) * (np.log(1.0 - pb) - np.log(1.0 - qb))).sum(axis=1)
                )
        else:
            if kind == "tv":
                per_group.append(0.5 * np.abs(pb - qb).sum(axis=1))
            else:
                per_group.append(((pb - qb) * (np.log(pb) - np.log(qb))).sum(axis=1))
    return float(np.stack(per_group, axis=1).mean(axis=1).mean())


def intervenability_curve(model, x, concept_labels, task_labels, order_seed,
                          grouping=None):
    """Accuracy after replacing the first k predicted concepts with labels.

    The replacement order is one seeded permutation, independent of the
    model, so curves from different models are comparable.
    """
    if concept_labels is None or len(concept_labels) == 0:
        raise ValueError("intervention curves need concept labels")
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(concept_labels, dtype=np.float64)
    y = np.asarray(task_labels)
    n_concepts = c.shape[1]
    order = RngStream(order_seed, "intervention-order").permutation(n_concepts)
    curve = []
    for k in range(n_concepts + 1):
        mask = np.zeros((1, n_concepts), dtype=bool)
        mask[0, order[:k]] = True
        override = (np.broadcast_to(mask, c.shape), c)
        dist = infer_default(model, x, concept_override=override)
        preds = threshold_predictions(dist.probs.data, model.exclusive_groups)
        curve.append(accuracy_score(preds, y, grouping))
    return curve


@dataclass
class ParetoPoint:
    config_id: str
    accuracy: float
    sis: float
    beta: float
    arch: str
    extra: dict = field(default_factory=dict)


def pareto_front(points):
    """Points not dominated in (accuracy, sis); ties are kept.

    Sweep in accuracy-descending order, O(n log n); the tests check it
    against a quadratic dominance oracle.
    """
    points = list(points)
    order = sorted(range(len(points)), key=lambda i: (-points[i].accuracy, -points[i].sis))
    keep = [False] * len(points)
    best_sis = -math.inf
    i = 0
    while i < len(order):
        j = i
        cluster = []
        while j < len(order) and points[order[j]].accuracy == points[order[i]].accuracy:
            cluster.append(order[j])
            j += 1
        cluster_max = max(points[k].sis for k in cluster)
        for k in cluster:
            if points[k].sis > best_sis and points[k].sis == cluster_max:
                keep[k] = True
        best_sis = max(best_sis, cluster_max)
        i = j
    return [p for p, flag in zip(points, keep) if flag]


def inspect_linear_weights(model):
    """Signed weight ranking and concept-vs-sidechannel mass for a linear head."""
    if model.arch != "LRM" or model.variant != "standard":
        raise ValueError("linear weight inspection requires a standard LRM model")
    w = model.params["psi.out.w"].data  # (n_concepts + emb, n_tasks)
    names = list(model.concept_names) + [f"z{j}" for j in range(model.payload_width())]
    n_c = model.n_concepts
    tasks = []
    for t in range(model.n_tasks):
        col = w[:, t]
        ranked = sorted(zip(names, col.tolist()), key=lambda kv: -abs(kv[1]))
        concept_mass = float(np.abs(col[:n_c]).sum())
        side_mass = float(np.abs(col[n_c:]).sum())
        total = concept_mass + side_mass
        tasks.append({
            "task": model.task_names[t],
            "entries": ranked,
            "concept_mass": concept_mass,
            "sidechannel_mass": side_mass,
            "concept_share": concept_mass / total if total else 0.0,
            "sidechannel_share": side_mass / total if total else 0.0,
        })
    return {
        "arch": model.arch,
        "tasks": tasks,
        "total_concept_mass": float(sum(t["concept_mass"] for t in tasks)),
        "total_sidechannel_mass": float(sum(t["sidechannel_mass"] for t in tasks)),
    }
