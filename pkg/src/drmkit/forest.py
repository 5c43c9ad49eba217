"""Evolutionary DRM sampling, decision-tree inference, InfoMax training and bagged forests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._numerics import as_rng, fsum_dot
from .errors import ValidationError
from .model import EvoDRM, RenderingPath, as_image, ensure_valid, nuisance_tuples


# --- sampling ---------------------------------------------------------------

def sample_edrm(model: EvoDRM, rng=None, noise=True):
    """Draw ``(I, path)``: root class, one child mutation per level, pixel noise."""
    ensure_valid(model)
    rng = as_rng(rng)
    c = int(rng.choice(model.n_classes, p=model.class_prior))
    gs = tuple(int(rng.choice(m.shape[0], p=p)) for m, p in zip(model.mutations, model.nuisance_priors))
    x = np.array(model.root_templates[c])
    for m, g in zip(model.mutations, gs):
        x = x + m[g]
    if noise:
        x = x + rng.normal(size=x.shape) * math.sqrt(model.pixel_noise)
    return x, RenderingPath(c, gs)


# --- trees ------------------------------------------------------------------

@dataclass(eq=False)
class DecisionTree:
    """Tree of filters; node 0 is the root. A node's score is ``<filter|I^0> + bias``.

    ``children[k]`` lists the child ids of node ``k`` (empty for leaves);
    ``histograms[k]`` is the label distribution at node ``k``.
    """

    filters: np.ndarray
    biases: np.ndarray
    children: tuple
    histograms: np.ndarray

    def __post_init__(self):
        self.filters = np.array(self.filters, dtype=np.float64)
        self.biases = np.array(self.biases, dtype=np.float64)
        self.children = tuple(tuple(int(c) for c in ch) for ch in self.children)
        self.histograms = np.array(self.histograms, dtype=np.float64)
        problems = self.check()
        if problems:
            raise ValidationError(problems)

    def check(self):
        n = self.filters.shape[0] if self.filters.ndim == 2 else -1
        out = []
        if n < 1:
            return ["filters must be a non-empty (nodes, D) array"]
        if self.biases.shape != (n,) or len(self.children) != n or self.histograms.shape[0] != n:
            out.append("node arrays disagree on the node count")
        if not np.all(np.isfinite(self.filters)):
            out.append("filters not finite")
        seen = set()
        for k, ch in enumerate(self.children):
            for c in ch:
                if not k < c < n or c in seen:
                    out.append(f"node {k} has invalid child {c}")
                seen.add(c)
        if self.histograms.ndim != 2 or np.any(self.histograms < 0) or np.any(
                np.abs(self.histograms.sum(1) - 1.0) > 1e-12):
            out.append("histograms must be normalized")
        return out

    @property
    def dim(self):
        return self.filters.shape[1]

    @property
    def n_labels(self):
        return self.histograms.shape[1]

    @property
    def n_nodes(self):
        return self.filters.shape[0]

    def leaves(self):
        return [k for k, ch in enumerate(self.children) if not ch]

    def depth(self):
        d = {0: 0}
        for k, ch in enumerate(self.children):
            for c in ch:
                d[c] = d[k] + 1
        return max(d.values())

    def __eq__(self, other):
        if not isinstance(other, DecisionTree):
            return NotImplemented
        return (self.children == other.children
                and all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in
                        ((self.filters, other.filters), (self.biases, other.biases),
                         (self.histograms, other.histograms))))


class TreeInference(NamedTuple):
    leaf: int
    path: tuple            # visited node ids below the root
    posterior: np.ndarray


def tree_infer(tree: DecisionTree, image) -> TreeInference:
    """Descend from the root choosing the child with the largest ``<mu|I^0> + b``.

    Every level scores children against the original image; ties go to the
    first child.
    """
    x = as_image(image, tree.dim)
    node = 0
    path = []
    while tree.children[node]:
        ch = list(tree.children[node])
        s = fsum_dot(tree.filters[ch], x) + tree.biases[ch]
        node = ch[int(np.argmax(s))]
        path.append(node)
    return TreeInference(node, tuple(path), tree.histograms[node].copy())


def evo_tree(model: EvoDRM) -> DecisionTree:
    """Decision tree whose leaves are the rendering paths of an EvoDRM.

    Depth 1 holds the class roots, each deeper level adds one mutation; leaf
    histograms come from ``leaf_histograms`` or are one-hot on the class.
    Filters are the accumulated templates and biases are zero.
    """
    ensure_valid(model)
    filters = [np.zeros(model.dim)]
    children = [[]]
    n_labels = (model.leaf_histograms.shape[1] if model.leaf_histograms is not None
                else model.n_classes)
    leaf_of = {}

    def add(parent, vec):
        filters.append(vec)
        children.append([])
        children[parent].append(len(filters) - 1)
        return len(filters) - 1

    frontier = []
    for c in range(model.n_classes):
        frontier.append((add(0, np.array(model.root_templates[c])), (c,)))
    for m in model.mutations:
        nxt = []
        for node, key in frontier:
            for g in range(m.shape[0]):
                nxt.append((add(node, filters[node] + m[g]), key + (g,)))
        frontier = nxt
    order = {t: i for i, t in enumerate(nuisance_tuples(model))}
    G = len(order)
    for node, key in frontier:
        leaf_of[node] = key[0] * G + order[key[1:]]
    hist = np.zeros((len(filters), n_labels))
    for node, idx in leaf_of.items():
        if model.leaf_histograms is not None:
            hist[node] = model.leaf_histograms[idx]
        else:
            hist[node, idx // G] = 1.0
    # internal nodes: mean of descendant leaf histograms
    for k in range(len(filters) - 1, -1, -1):
        if children[k]:
            hist[k] = np.mean([hist[c] for c in children[k]], axis=0)
            hist[k] /= hist[k].sum()
    return DecisionTree(np.array(filters), np.zeros(len(filters)), children, hist)


# --- InfoMax ----------------------------------------------------------------

def entropy_bits(labels, n_labels=None) -> float:
    """Shannon entropy in bits of integer labels (0 log 0 = 0)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValidationError("entropy of an empty set")
    counts = np.bincount(labels, minlength=n_labels or 0)
    p = counts[counts > 0] / labels.size
    return float(-np.sum(p * np.log2(p))) + 0.0


def information_gain(parent, children) -> float:
    """``H[parent] - sum_k n_k/n H[child_k]`` in bits; empty children count zero."""
    parent = np.asarray(parent, dtype=np.int64)
    n = parent.size
    h = entropy_bits(parent)
    for ch in children:
        ch = np.asarray(ch, dtype=np.int64)
        if ch.size:
            h -= ch.size / n * entropy_bits(ch)
    return max(h, 0.0)


@dataclass(frozen=True)
class TreeConfig:
    depth: int = 4
    candidates: int = 16
    min_size: int = 2
    sparsity: float = 0.25     # fraction of coordinates a mutation touches
    scale: float = 1.0         # mutation size in units of the node's pixel std
    children: int = 2

    def __post_init__(self):
        if self.candidates < 2:
            raise ValidationError("need at least 2 candidate splits per node")
        if self.depth < 0 or self.min_size < 1 or self.children < 2:
            raise ValidationError("invalid tree configuration")
        if not 0 < self.sparsity <= 1 or not self.scale > 0:
            raise ValidationError("sparsity must lie in (0, 1] and scale be > 0")


def _candidate(rng, mean, std, cfg):
    D = mean.size
    k = max(1, int(round(cfg.sparsity * D)))
    out = []
    for _ in range(cfg.children):
        a = np.zeros(D)
        idx = rng.choice(D, size=k, replace=False)
        a[idx] = rng.normal(size=k) * cfg.scale * np.where(std[idx] > 0, std[idx], 1.0)
        out.append(mean + a)
    return np.array(out)


def split_scores(filters, X):
    """Nearest-template scores ``<mu|I> - ||mu||^2 / 2`` of each sample against each filter."""
    return X @ filters.T - 0.5 * np.sum(filters * filters, axis=1)


def infomax_train(data, labels, cfg: TreeConfig = TreeConfig(), seed=0, n_labels=None) -> DecisionTree:
    """Greedy InfoMax tree: each node keeps the candidate split with the largest gain.

    Candidate children are the node's mean plus random signed sparse
    mutations; a sample follows the child with the largest score
    ``<mu|I^0> - ||mu||^2/2``. A node becomes a leaf at the depth cap, below
    ``min_size`` samples, when pure, or when no candidate has positive gain.
    """
    X = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValidationError("empty dataset")
    if y.shape != (X.shape[0],) or y.min() < 0:
        raise ValidationError("labels must be non-negative, one per sample")
    K = int(n_labels or y.max() + 1)
    rng = as_rng(seed)
    filters, biases, children, hists = [X.mean(0)], [0.0], [[]], [np.bincount(y, minlength=K) / y.size]
    stack = [(0, np.arange(X.shape[0]), 0)]
    while stack:
        node, idx, depth = stack.pop(0)
        yy = y[idx]
        if depth >= cfg.depth or idx.size < cfg.min_size or np.unique(yy).size == 1:
            continue
        Xn = X[idx]
        mean, std = Xn.mean(0), Xn.std(0)
        best, best_gain = None, 0.0
        for _ in range(cfg.candidates):
            cand = _candidate(rng, mean, std, cfg)
            assign = np.argmax(split_scores(cand, Xn), axis=1)
            gain = information_gain(yy, [yy[assign == k] for k in range(cfg.children)])
            if gain > best_gain:
                best, best_gain = (cand, assign), gain
        if best is None:
            continue
        cand, assign = best
        for k in range(cfg.children):
            sub = idx[assign == k]
            filters.append(cand[k])
            biases.append(-0.5 * float(cand[k] @ cand[k]))
            children.append([])
            hists.append(np.bincount(y[sub], minlength=K) / max(sub.size, 1)
                         if sub.size else hists[node])
            children[node].append(len(filters) - 1)
            stack.append((len(filters) - 1, sub, depth + 1))
    return DecisionTree(np.array(filters), np.array(biases), children, np.array(hists))


# --- forests ----------------------------------------------------------------

@dataclass(eq=False)
class Forest:
    trees: list
    samples: list = field(default_factory=list)   # per tree: (N,) bootstrap counts A_t

    def __post_init__(self):
        if not self.trees:
            raise ValidationError("a forest needs at least one tree")
        if len({t.dim for t in self.trees}) != 1 or len({t.n_labels for t in self.trees}) != 1:
            raise ValidationError("all trees must share input dimension and label count")

    @property
    def dim(self):
        return self.trees[0].dim

    def __eq__(self, other):
        if not isinstance(other, Forest):
            return NotImplemented
        return (len(self.trees) == len(other.trees)
                and all(a == b for a, b in zip(self.trees, other.trees))
                and len(self.samples) == len(other.samples)
                and all(np.array_equal(a, b) for a, b in zip(self.samples, other.samples)))


def tree_seeds(seed, n_trees):
    """Independent per-tree seed sequences derived from one seed."""
    return np.random.SeedSequence(seed).spawn(n_trees)


def forest_train(data, labels, n_trees: int, cfg: TreeConfig = TreeConfig(), seed=0,
                 fraction: float = 1.0, bootstrap: bool = True, subsets=None,
                 n_labels=None) -> Forest:
    """Bagging: each tree is an InfoMax tree on its own with-replacement resample.

    ``subsets`` forces the sample indices of each tree (and overrides
    bootstrapping); the multiplicities used are recorded as ``Forest.samples``.
    """
    if n_trees < 1:
        raise ValidationError("n_trees must be >= 1")
    if not fraction > 0:
        raise ValidationError("fraction must be > 0")
    X = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    y = np.asarray(labels, dtype=np.int64)
    K = int(n_labels or y.max() + 1)
    N = X.shape[0]
    trees, samples = [], []
    for t, ss in enumerate(tree_seeds(seed, n_trees)):
        rng = np.random.default_rng(ss)
        if subsets is not None:
            idx = np.asarray(subsets[t], dtype=np.int64)
        elif bootstrap:
            idx = rng.integers(0, N, size=max(1, int(round(fraction * N))))
        else:
            idx = np.arange(N)
        samples.append(np.bincount(idx, minlength=N))
        trees.append(infomax_train(X[idx], y[idx], cfg, seed=rng, n_labels=K))
    return Forest(trees, samples)


def forest_infer(forest: Forest, image) -> np.ndarray:
    """Arithmetic mean of the trees' leaf posteriors (order-independent)."""
    x = as_image(image, forest.dim)
    post = np.array([tree_infer(t, x).posterior for t in forest.trees])
    return np.array([math.fsum(col) / len(forest.trees) for col in post.T.tolist()])


def accuracy(predict, X, y):
    X = np.asarray(X).reshape(len(X), -1)
    return float(np.mean([int(np.argmax(predict(x))) == int(t) for x, t in zip(X, y)]))
