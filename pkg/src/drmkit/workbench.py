"""Synthetic data generation and linear-probe measurements."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._numerics import softmax
from .deep import certified_deep, sample as sample_deep
from .errors import ValidationError
from .forest import sample_edrm
from .io import Dataset
from .model import DeepLevel, DeepRM, EvoDRM, ShallowRM, ensure_valid
from .shallow import sample_shallow


def generate(model, n: int, seed: int, noise: bool = True) -> Dataset:
    """``n`` i.i.d. samples with their true paths; images rounded to float32.

    Paths are ``(c, g)`` for a ShallowRM and ``(c, g^L, ..., g^1)`` otherwise.
    ``noise=False`` renders the path templates exactly.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    ensure_valid(model)
    rng = np.random.default_rng(seed)
    images, paths = [], []
    for _ in range(n):
        if isinstance(model, ShallowRM):
            x, p = sample_shallow(model, rng, noise)
        elif isinstance(model, DeepRM):
            s = sample_deep(model, rng=rng, noise=noise)
            x, p = s.image, s.path.as_tuple()
        elif isinstance(model, EvoDRM):
            x, path = sample_edrm(model, rng, noise)
            p = path.as_tuple()
        else:
            raise ValidationError(f"cannot generate from {type(model).__name__}")
        images.append(x)
        paths.append(p)
    imgs = np.asarray(images, dtype=np.float32).astype(np.float64).reshape((n,) + tuple(model.shape))
    paths = np.asarray(paths, dtype=np.int64)
    return Dataset(imgs, paths[:, 0], paths, seed, {"model": type(model).__name__, "n": n, "noise": noise})


# --- probing -------------------------------------------------------------------

PROBE_STEPS = 500
PROBE_RATE = 0.1


class ProbeResult(NamedTuple):
    accuracy: float
    chance: float        # majority-class rate on the held-out split


def split_indices(n, train_fraction=0.7, seed=0):
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(train_fraction * n))
    return perm[:k], perm[k:]


def linear_probe(features, targets, train_fraction=0.7, seed=0) -> ProbeResult:
    """Held-out accuracy of a softmax regression on standardized features.

    Full-batch gradient descent, 500 steps at rate 0.1 from zero weights;
    standardization uses train statistics only.
    """
    F = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    y = np.asarray(targets, dtype=np.int64)
    tr, te = split_indices(F.shape[0], train_fraction, seed)
    classes = np.unique(y[tr])
    if classes.size < 2:
        raise ValidationError("probe needs at least 2 classes in the train split")
    if te.size == 0:
        raise ValidationError("probe needs a non-empty held-out split")
    mu, sd = F[tr].mean(0), F[tr].std(0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    Z = (F - mu) / sd
    code = {c: i for i, c in enumerate(classes.tolist())}
    ytr = np.array([code[v] for v in y[tr]])
    K = classes.size
    W = np.zeros((K, Z.shape[1]))
    b = np.zeros(K)
    onehot = np.eye(K)[ytr]
    for _ in range(PROBE_STEPS):
        P = softmax(Z[tr] @ W.T + b)
        G = (P - onehot) / tr.size
        W -= PROBE_RATE * G.T @ Z[tr]
        b -= PROBE_RATE * G.sum(0)
    pred = classes[np.argmax(Z[te] @ W.T + b, axis=1)]
    counts = np.bincount(y[te])
    return ProbeResult(float(np.mean(pred == y[te])), float(counts.max() / te.size))


@dataclass
class ProbeReport:
    """``accuracy[layer][variable]`` held-out linear-probe accuracies."""

    layers: list
    variables: list
    accuracy: dict
    chance: dict

    def profile(self, variable):
        return [self.accuracy[layer][variable] for layer in self.layers]

    def to_dict(self):
        return {"layers": self.layers, "variables": self.variables,
                "accuracy": self.accuracy, "chance": self.chance}


def probe(representations: dict, targets: dict, train_fraction=0.7, seed=0) -> ProbeReport:
    """Probe every ``(layer, variable)`` pair with the same train/test split."""
    layers = list(representations)
    variables = list(targets)
    acc, chance = {}, {}
    for layer in layers:
        acc[layer], chance[layer] = {}, {}
        for var in variables:
            r = linear_probe(representations[layer], targets[var], train_fraction, seed)
            acc[layer][var] = r.accuracy
            chance[layer][var] = r.chance
    return ProbeReport(layers, variables, acc, chance)


def net_representations(net, images):
    """Input plus the output of every layer of a feedforward net."""
    X = net._prepare(images)
    reps = {"input": X}
    _, _, cache = net.forward(X, keep=True)
    outs = [c[0] for c in cache[1:]] + [net.scores(X)]
    for i, o in enumerate(outs, start=1):
        reps[f"layer{i}"] = o
    return reps


def path_targets(ds: Dataset):
    """Probe targets ``c`` and each ``g^l`` from a dataset with recorded paths."""
    t = {"c": ds.labels}
    if ds.paths is not None:
        L = ds.paths.shape[1] - 1
        for i in range(1, L + 1):
            t[f"g{L - i + 1}"] = ds.paths[:, i]
    return t


def spearman(values):
    """Spearman rank correlation of ``values`` with their position (average ranks on ties)."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < 2:
        return 0.0
    order = np.argsort(v, kind="stable")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j)
        i = j + 1
    pos = np.arange(n, dtype=np.float64)
    a, b = ranks - ranks.mean(), pos - pos.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def rise_then_fall(profile, margin=0.05):
    """True when an interior layer beats both the first and the last by ``margin``."""
    p = list(profile)
    if len(p) < 3:
        return False
    k = int(np.argmax(p[1:-1])) + 1
    return p[k] >= p[0] + margin and p[k] >= p[-1] + margin


def disentanglement_model(seed=0, n_classes=4, scramblers=4):
    """Three-level DRM for probing experiments.

    The upper two levels place content at disjoint locations. The bottom level
    applies one of ``scramblers`` random signed permutations, so upper
    nuisances are hard to read linearly from pixels but reappear once the
    bottom nuisance has been max-pooled away.
    """
    rng = np.random.default_rng(seed)
    upper = certified_deep((2, 6, 18), (3, 3), n_classes, seed=seed, level_noise=1e-4,
                           disjoint_nuisances=True)
    d = upper.levels[-1].dim_out
    T = np.zeros((scramblers, d, d))
    for g in range(scramblers):
        T[g, np.arange(d), rng.permutation(d)] = rng.choice([-1.0, 1.0], d)
    bottom = DeepLevel(T, np.zeros((scramblers, d)), np.full(d, 1e-4),
                       np.full(scramblers, 1.0 / scramblers))
    return DeepRM(list(upper.levels) + [bottom], upper.top_templates,
                  np.full(n_classes, 1.0 / n_classes), 1e-2)


def random_shallow(n_classes, n_nuisances, dim, seed=0, noise_var=0.1, image_shape=None):
    """ShallowRM with standard-normal templates and Dirichlet(2) priors."""
    rng = np.random.default_rng(seed)
    return ShallowRM(rng.dirichlet(np.full(n_classes, 2.0)), rng.dirichlet(np.full(n_nuisances, 2.0)),
                     rng.normal(size=(n_classes, n_nuisances, dim)), noise_var, image_shape=image_shape)


def random_evo(n_classes, nuisances, dim, seed=0, pixel_noise=0.1, mutation_scale=0.5):
    """EvoDRM with unit-normal roots, shrinking mutations and uniform nuisance priors.

    Level ``l`` mutations have scale ``mutation_scale ** (L - l + 1)``, so
    coarse levels change the image most.
    """
    rng = np.random.default_rng(seed)
    muts = [rng.normal(size=(g, dim)) * mutation_scale ** (i + 1) for i, g in enumerate(nuisances)]
    return EvoDRM(rng.normal(size=(n_classes, dim)), muts, np.full(n_classes, 1.0 / n_classes),
                  [np.full(g, 1.0 / g) for g in nuisances], pixel_noise)
