"""Seeded synthetic dataset generators and a line-delimited file format.

Three regimes mirror the experimental settings the library targets:

- gen_xor: two fair-coin concepts, task = XOR; not linearly separable from
  concepts, so a linear head needs the sidechannel.
- gen_dnf: concepts sufficient for the task (labels are a stored DNF over
  the true concepts; features carry a flip-noised copy).
- gen_latent: concepts insufficient; a hidden bit, recoverable from the
  features but not from the concepts, flips the DNF output.
- gen_symbolic_addition: two ten-way digit groups, task = their sum class
  (19 mutually exclusive outcomes), with subset-metric grouping metadata.

Every generator is a pure function of (params, seed); the fingerprint
stored with a dataset regenerates it bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

FORMAT_NAME = "csmlab-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """A dataset file failed to parse; message carries the position."""


@dataclass
class SyntheticDataset:
    x: np.ndarray
    c: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    fingerprint: dict
    c_groups: tuple = None
    y_groups: tuple = None
    concept_names: list = None
    task_names: list = None

    def __post_init__(self):
        if self.concept_names is None:
            self.concept_names = [f"c{i}" for i in range(self.n_concepts)]
        if self.task_names is None:
            self.task_names = [f"y{i}" for i in range(self.n_tasks)]

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def n_features(self):
        return self.x.shape[1]

    @property
    def n_concepts(self):
        return self.c.shape[1]

    @property
    def n_tasks(self):
        return self.y.shape[1]

    def split(self, name):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[name]
        return self.x[idx], self.c[idx], self.y[idx]

    def equals(self, other):
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.c, other.c)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.train_idx, other.train_idx)
            and np.array_equal(self.val_idx, other.val_idx)
            and np.array_equal(self.test_idx, other.test_idx)
            and self.fingerprint == other.fingerprint
        )


def _one_hot_bits(bits):
    """Encode each 0/1 column as the two indicators (1-b, b)."""
    n, k = bits.shape
    out = np.empty((n, 2 * k))
    out[:, 0::2] = 1.0 - bits
    out[:, 1::2] = bits
    return out


def _one_hot_ints(values, width):
    out = np.zeros((len(values), width))
    out[np.arange(len(values)), values] = 1.0
    return out


def _split_indices(n, rng, test_frac=0.2, val_frac_of_rest=0.1):
    # Held-out test carved first, then the 9/1 train/validation split.
    perm = rng.permutation(n)
    n_test = int(round(test_frac * n))
    rest = perm[n_test:]
    n_val = int(round(val_frac_of_rest * len(rest)))
    return (
        np.sort(rest[n_val:]),
        np.sort(rest[:n_val]),
        np.sort(perm[:n_test]),
    )


# ---- DNF machinery ---------------------------------------------------------


def draw_dnf(rng, n_concepts, term_count):
    """Random disjunction of `term_count` conjunctions of 2-3 literals."""
    terms = []
    for _ in range(term_count):
        size = int(rng.integers(2, 4)) if n_concepts >= 3 else 2
        size = min(size, n_concepts)
        chosen = rng.permutation(n_concepts)[:size]
        terms.append([[int(i), int(rng.integers(0, 2))] for i in chosen])
    return terms


def eval_dnf(terms, concepts):
    """Evaluate a stored DNF on a 0/1 concept matrix; returns (n,) floats."""
    concepts = np.asarray(concepts)
    out = np.zeros(concepts.shape[0], dtype=bool)
    for term in terms:
        hold = np.ones(concepts.shape[0], dtype=bool)
        for idx, polarity in term:
            lit = concepts[:, idx] == 1 if polarity else concepts[:, idx] == 0
            hold &= lit
        out |= hold
    return out.astype(np.float64)


def _draw_nondegenerate_dnf(rng_parent, stream_name, n_concepts, term_count, concepts, max_tries=64):
    for attempt in range(max_tries):
        terms = draw_dnf(rng_parent.substream(f"{stream_name}.{attempt}"), n_concepts, term_count)
        values = eval_dnf(terms, concepts)
        if 0.0 < values.mean() < 1.0:
            return terms, values
    raise ValueError(f"could not draw a non-degenerate DNF in {max_tries} tries")


# ---- generators ------------------------------------------------------------


def gen_xor(n, noise_std=0.1, seed=0):
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    rng = RngStream(seed, "dataset/xor")
    c = rng.substream("concepts").bernoulli(0.5, size=(n, 2))
    y = (c[:, 0] != c[:, 1]).astype(np.float64).reshape(n, 1)
    x = _one_hot_bits(c) + noise_std * rng.substream("features").normal(size=(n, 4))
    train, val, test = _split_indices(n, rng.substream("split"))
    fingerprint = {"name": "xor", "params": {"n": n, "noise_std": noise_std}, "seed": seed}
    return SyntheticDataset(x, c, y, train, val, test, fingerprint,
                            concept_names=["c1", "c2"], task_names=["xor"])


def gen_dnf(n_concepts, n_tasks, term_count, n, concept_noise=0.05, seed=0, feature_noise=0.1):
    if term_count < 1:
        raise ValueError(f"term_count must be >= 1, got {term_count}")
    if not 0.0 <= concept_noise <= 1.0:
        raise ValueError(f"concept_noise must be in [0, 1], got {concept_noise}")
    rng = RngStream(seed, "dataset/dnf")
    c = rng.substream("concepts").bernoulli(0.5, size=(n, n_concepts))
    rules = []
    y = np.empty((n, n_tasks))
    for t in range(n_tasks):
        terms, values = _draw_nondegenerate_dnf(rng, f"rules.{t}", n_concepts, term_count, c)
        rules.append(terms)
        y[:, t] = values
    flips = rng.substream("flip").bernoulli(concept_noise, size=(n, n_concepts))
    observed = np.abs(c - flips)
    x = _one_hot_bits(observed) + feature_noise * rng.substream("features").normal(size=(n, 2 * n_concepts))
    train, val, test = _split_indices(n, rng.substream("split"))
    fingerprint = {
        "name": "dnf",
        "params": {
            "n_concepts": n_concepts,
            "n_tasks": n_tasks,
            "term_count": term_count,
            "n": n,
            "concept_noise": concept_noise,
            "feature_noise": feature_noise,
        },
        "seed": seed,
        "rules": rules,
    }
    return SyntheticDataset(x, c, y, train, val, test, fingerprint)


LATENT_CONCEPT_FLIP = 0.1
LATENT_FEATURE_NOISE = 0.1
LATENT_TERM_COUNT = 2


def gen_latent(n_concepts, n, latent_weight, seed=0):
    """Concept-insufficient regime: a hidden bit flips the DNF label.

    The bit is recoverable from the features (two clean indicator columns)
    but independent of the concepts, so the best concept-only predictor
    caps at 1 - latent_weight.
    """
    if not 0.0 < latent_weight < 1.0:
        raise ValueError(f"latent_weight must be in (0, 1), got {latent_weight}")
    rng = RngStream(seed, "dataset/latent")
    c = rng.substream("concepts").bernoulli(0.5, size=(n, n_concepts))
    terms, base = _draw_nondegenerate_dnf(rng, "rules", n_concepts, LATENT_TERM_COUNT, c)
    h = rng.substream("latent").bernoulli(latent_weight, size=(n, 1))
    y = np.abs(base.reshape(n, 1) - h)
    flips = rng.substream("flip").bernoulli(LATENT_CONCEPT_FLIP, size=(n, n_concepts))
    observed = np.abs(c - flips)
    encoded = np.concatenate([_one_hot_bits(observed), _one_hot_bits(h)], axis=1)
    x = encoded + LATENT_FEATURE_NOISE * rng.substream("features").normal(size=encoded.shape)
    train, val, test = _split_indices(n, rng.substream("split"))
    fingerprint = {
        "name": "latent",
        "params": {"n_concepts": n_concepts, "n": n, "latent_weight": latent_weight},
        "internals": {
            "concept_flip": LATENT_CONCEPT_FLIP,
            "feature_noise": LATENT_FEATURE_NOISE,
            "term_count": LATENT_TERM_COUNT,
        },
        "seed": seed,
        "rules": [terms],
    }
    return SyntheticDataset(x, c, y, train, val, test, fingerprint, task_names=["dnf_xor_latent"])


def gen_symbolic_addition(n, feature_noise=0.2, seed=0, n_digits=10):
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = RngStream(seed, "dataset/addition")
    d1 = rng.substream("digit1").integers(0, n_digits, size=n)
    d2 = rng.substream("digit2").integers(0, n_digits, size=n)
    c = np.concatenate([_one_hot_ints(d1, n_digits), _one_hot_ints(d2, n_digits)], axis=1)
    y = _one_hot_ints(d1 + d2, 2 * n_digits - 1)
    x = c + feature_noise * rng.substream("features").normal(size=c.shape)
    train, val, test = _split_indices(n, rng.substream("split"))
    fingerprint = {
        "name": "addition",
        "params": {"n": n, "feature_noise": feature_noise, "n_digits": n_digits},
        "seed": seed,
    }
    concept_names = [f"d1_is_{i}" for i in range(n_digits)] + [f"d2_is_{i}" for i in range(n_digits)]
    task_names = [f"sum_{i}" for i in range(2 * n_digits - 1)]
    return SyntheticDataset(
        x, c, y, train, val, test, fingerprint,
        c_groups=((0, n_digits), (n_digits, 2 * n_digits)),
        y_groups=((0, 2 * n_digits - 1),),
        concept_names=concept_names,
        task_names=task_names,
    )


GENERATORS = {
    "xor": gen_xor,
    "dnf": gen_dnf,
    "latent": gen_latent,
    "addition": gen_symbolic_addition,
}


def regenerate(fingerprint):
    """Rebuild a dataset bit-exactly from its fingerprint."""
    name = fingerprint["name"]
    if name not in GENERATORS:
        raise ValueError(f"unknown generator {name!r} in fingerprint")
    return GENERATORS[name](seed=fingerprint["seed"], **fingerprint["params"])


def make_dataset(name, params, seed):
    if name not in GENERATORS:
        raise ValueError(f"unknown dataset generator {name!r}; expected one of {sorted(GENERATORS)}")
    return GENERATORS[name](seed=seed, **params)


# ---- file format -----------------------------------------------------------


def export_dataset(dataset, path):
    """Write header JSON then one `x TAB c TAB y` record per instance."""
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "fingerprint": dataset.fingerprint,
        "n": dataset.n,
        "n_features": dataset.n_features,
        "n_concepts": dataset.n_concepts,
        "n_tasks": dataset.n_tasks,
        "concept_names": dataset.concept_names,
        "task_names": dataset.task_names,
        "c_groups": [list(g) for g in dataset.c_groups] if dataset.c_groups else None,
        "y_groups": [list(g) for g in dataset.y_groups] if dataset.y_groups else None,
        "splits": {
            "train": dataset.train_idx.tolist(),
            "val": dataset.val_idx.tolist(),
            "test": dataset.test_idx.tolist(),
        },
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True))
        fh.write("\n")
        for i in range(dataset.n):
            xs = " ".join(repr(float(v)) for v in dataset.x[i])
            cs = " ".join(str(int(v)) for v in dataset.c[i])
            ys = " ".join(str(int(v)) for v in dataset.y[i])
            fh.write(f"{xs}\t{cs}\t{ys}\n")
    return path


def import_dataset(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if not lines or not lines[0].strip():
        raise DatasetFormatError("line 1: missing header record")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"line 1: header is not valid JSON ({err})") from None
    if header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"line 1: unexpected format tag {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"line 1: unsupported version {header.get('version')!r}")
    n = header["n"]
    x = np.empty((n, header["n_features"]))
    c = np.empty((n, header["n_concepts"]))
    y = np.empty((n, header["n_tasks"]))
    for i in range(n):
        lineno = i + 2
        if i + 1 >= len(lines) or not lines[i + 1]:
            raise DatasetFormatError(f"line {lineno}: missing record {i} of {n}")
        fields = lines[i + 1].split("\t")
        if len(fields) != 3:
            raise DatasetFormatError(f"line {lineno}: expected 3 tab-separated fields, got {len(fields)}")
        try:
            x[i] = [float(v) for v in fields[0].split(" ")]
            c[i] = [float(v) for v in fields[1].split(" ")]
            y[i] = [float(v) for v in fields[2].split(" ")]
        except ValueError as err:
            raise DatasetFormatError(f"line {lineno}: {err}") from None
    splits = header["splits"]
    fingerprint = header["fingerprint"]
    return SyntheticDataset(
        x, c, y,
        np.asarray(splits["train"], dtype=np.int64),
        np.asarray(splits["val"], dtype=np.int64),
        np.asarray(splits["test"], dtype=np.int64),
        fingerprint,
        c_groups=tuple(tuple(g) for g in header["c_groups"]) if header.get("c_groups") else None,
        y_groups=tuple(tuple(g) for g in header["y_groups"]) if header.get("y_groups") else None,
        concept_names=header.get("concept_names"),
        task_names=header.get("task_names"),
    )
