"""Shared test oracles, independent of the library's own differentiation path."""

import numpy as np


def numeric_grad(fn, array, h=1e-5):
    """Central finite differences of scalar fn w.r.t. every entry of array.

    Mutates `array` in place while probing and restores it afterwards.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn()
        flat[i] = keep - h
        down = fn()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def rel_err(a, b, floor=1e-6):
    """Elementwise relative error with a floor so near-zero pairs compare sanely."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def brute_force_rule_mixture(concept_probs, select, roles):
    """Exact task probability by enumerating every hard concept assignment.

    concept_probs: (n_C,) independent Bernoulli parameters.
    select: (n_R,) mixture weights over rules.
    roles: (n_R, n_C, 3) per-rule per-concept (positive, negative, irrelevant)
    simplex triples. A rule evaluated on a hard assignment multiplies
    pos*c + neg*(1-c) + irr over concepts.
    """
    n_c = len(concept_probs)
    n_r = len(select)
    total = 0.0
    for code in range(2 ** n_c):
        c = np.array([(code >> i) & 1 for i in range(n_c)], dtype=float)
        weight = np.prod(np.where(c == 1.0, concept_probs, 1.0 - concept_probs))
        for r in range(n_r):
            sat = np.prod(
                roles[r, :, 0] * c + roles[r, :, 1] * (1.0 - c) + roles[r, :, 2]
            )
            total += weight * select[r] * sat
    return total


def brute_force_pareto(points):
    """O(n^2) dominance filter over (accuracy, sis) pairs.

    points: sequence of objects with .accuracy and .sis. Returns the subset
    (original order) that no other point dominates.
    """
    kept = []
    for p in points:
        dominated = False
        for q in points:
            if q is p:
                continue
            if (
                q.accuracy >= p.accuracy
                and q.sis >= p.sis
                and (q.accuracy > p.accuracy or q.sis > p.sis)
            ):
                dominated = True
                break
        if not dominated:
            kept.append(p)
    return kept
