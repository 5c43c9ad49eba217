"""Discriminative relaxation: export rendering models as feedforward nets and train with SGD."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from ._numerics import as_rng, fsum_sq, safe_log
from .deep import level_filters
from .errors import NumericalError, ShapeError, ValidationError
from .model import DeepRM, EvoDRM, ShallowRM, ensure_valid, to_natural


@dataclass
class Layer:
    """Linear map, optional ReLU, optional grouped pooling.

    ``kind`` is ``"dense"`` (weights ``(K, D)``) or ``"conv"`` (weights
    ``(K, ch, h, w)`` applied as a valid correlation over ``in_shape`` at
    ``stride``, output flattened filter-major). A dense layer with a ``mask``
    is locally connected. ``groups[i]`` is the pooled output unit that linear
    unit ``i`` feeds; ``pool`` is ``"max"``, ``"mean"`` or ``"none"``.
    """

    weights: np.ndarray
    biases: np.ndarray
    kind: str = "dense"
    activation: str = "none"
    pool: str = "none"
    groups: Optional[np.ndarray] = None
    stride: int = 1
    in_shape: Optional[tuple] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64)
        self.biases = np.array(self.biases, dtype=np.float64)
        if self.groups is not None:
            self.groups = np.asarray(self.groups, dtype=np.int64)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.in_shape is not None:
            self.in_shape = tuple(int(s) for s in self.in_shape)
        problems = self.check()
        if problems:
            raise ValidationError(problems)

    def check(self):
        out = []
        if self.kind not in ("dense", "conv"):
            out.append(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("none", "relu"):
            out.append(f"unknown activation {self.activation!r}")
        if self.pool not in ("none", "max", "mean"):
            out.append(f"unknown pooling {self.pool!r}")
        if self.stride < 1:
            out.append("stride must be >= 1")
        if self.kind == "dense" and self.weights.ndim != 2:
            out.append("dense weights must be (K, D)")
        if self.kind == "conv":
            if self.weights.ndim != 4 or self.in_shape is None or len(self.in_shape) != 3:
                out.append("conv needs (K, ch, h, w) weights and a (ch, H, W) in_shape")
            elif self.weights.shape[1] != self.in_shape[0]:
                out.append("conv channels do not match in_shape")
        if self.biases.shape != (self.weights.shape[0],):
            out.append("one bias per filter required")
        if self.mask is not None and self.mask.shape != self.weights.shape:
            out.append("mask shape must equal weight shape")
        if self.pool != "none":
            if self.groups is None or self.groups.shape != (self.linear_size,):
                out.append("pooling needs one group id per linear unit")
            elif set(np.unique(self.groups)) != set(range(int(self.groups.max()) + 1)):
                out.append("group ids must be dense 0..K-1")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            out.append("layer parameters not finite")
        return out

    # --- shapes
    @property
    def positions(self):
        if self.kind != "conv":
            return 1
        _, H, W = self.in_shape
        _, _, h, w = self.weights.shape
        return len(range(0, H - h + 1, self.stride)) * len(range(0, W - w + 1, self.stride))

    @property
    def in_size(self):
        return int(np.prod(self.in_shape)) if self.kind == "conv" else self.weights.shape[1]

    @property
    def linear_size(self):
        return self.weights.shape[0] * self.positions

    @property
    def out_size(self):
        return self.linear_size if self.pool == "none" else int(self.groups.max()) + 1

    def members(self):
        """``(K_out, m)`` member indices per group, padded with -1, ascending."""
        order = np.argsort(self.groups, kind="stable")
        counts = np.bincount(self.groups)
        idx = np.full((counts.size, counts.max()), -1, dtype=np.int64)
        start = 0
        for k, n in enumerate(counts):
            idx[k, :n] = order[start:start + n]
            start += n
        return idx

    def _im2col(self, X):
        ch, H, W = self.in_shape
        _, _, h, w = self.weights.shape
        img = X.reshape(X.shape[0], ch, H, W)
        cols = [img[:, :, i:i + h, j:j + w].reshape(X.shape[0], -1)
                for i in range(0, H - h + 1, self.stride) for j in range(0, W - w + 1, self.stride)]
        return np.stack(cols, axis=1)   # (B, P, ch*h*w)

    def effective_weights(self):
        return self.weights * self.mask if self.mask is not None else self.weights

    def linear(self, X):
        Wt = self.effective_weights()
        if self.kind == "dense":
            return X @ Wt.T + self.biases
        cols = self._im2col(X)
        z = np.einsum("bpd,kd->bkp", cols, Wt.reshape(Wt.shape[0], -1))
        return (z + self.biases[None, :, None]).reshape(X.shape[0], -1)


@dataclass
class FeedforwardNet:
    """Layer stack followed by a SoftMax head ``softmax(W a + b)``.

    ``meta`` keeps bookkeeping from the export (source family, class/nuisance
    grouping) so pooled groups stay interpretable.
    """

    layers: list
    head_weights: np.ndarray
    head_biases: np.ndarray
    input_shape: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.head_weights = np.array(self.head_weights, dtype=np.float64)
        self.head_biases = np.array(self.head_biases, dtype=np.float64)
        if self.input_shape is not None:
            self.input_shape = tuple(int(s) for s in self.input_shape)
        problems = self.check()
        if problems:
            raise ValidationError(problems)

    def check(self):
        out = []
        if not self.layers:
            out.append("net needs at least one layer")
            return out
        for i, lay in enumerate(self.layers):
            out.extend(f"layer {i}: {p}" for p in lay.check())
            if i > 0 and lay.in_size != self.layers[i - 1].out_size:
                out.append(f"layer {i} expects {lay.in_size} inputs, gets {self.layers[i - 1].out_size}")
        if self.head_weights.ndim != 2 or self.head_weights.shape[1] != self.layers[-1].out_size:
            out.append("head weights do not compose with the last layer")
        if self.head_biases.shape != (self.head_weights.shape[0],):
            out.append("head biases length mismatch")
        return out

    @property
    def in_size(self):
        return self.layers[0].in_size

    @property
    def n_labels(self):
        return self.head_weights.shape[0]

    def parameters(self):
        ps = []
        for lay in self.layers:
            ps += [lay.weights, lay.biases]
        return ps + [self.head_weights, self.head_biases]

    def copy(self):
        layers = [Layer(l.weights.copy(), l.biases.copy(), l.kind, l.activation, l.pool,
                        None if l.groups is None else l.groups.copy(), l.stride, l.in_shape,
                        None if l.mask is None else l.mask.copy()) for l in self.layers]
        return FeedforwardNet(layers, self.head_weights.copy(), self.head_biases.copy(),
                              self.input_shape, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, FeedforwardNet):
            return NotImplemented
        a, b = self.parameters(), other.parameters()
        same = (len(self.layers) == len(other.layers) and self.input_shape == other.input_shape
                and self.meta == other.meta and all(x.tobytes() == y.tobytes() and x.shape == y.shape
                                                    for x, y in zip(a, b)))
        for l1, l2 in zip(self.layers, other.layers):
            same = same and (l1.kind, l1.activation, l1.pool, l1.stride, l1.in_shape) == \
                (l2.kind, l2.activation, l2.pool, l2.stride, l2.in_shape)
            for x, y in ((l1.groups, l2.groups), (l1.mask, l2.mask)):
                same = same and ((x is None and y is None) or
                                 (x is not None and y is not None and np.array_equal(x, y)))
        return same

    # --- forward / backward
    def _prepare(self, X):
        X = np.asarray(X, dtype=np.float64)
        X = X.reshape(1, -1) if X.ndim == 1 else X.reshape(X.shape[0], -1)
        if X.shape[1] != self.in_size:
            raise ShapeError(f"input has {X.shape[1]} features, net expects {self.in_size}")
        return X

    def forward(self, X, keep=False):
        X = self._prepare(X)
        cache = []
        a = X
        for lay in self.layers:
            z = lay.linear(a)
            r = np.maximum(z, 0.0) if lay.activation == "relu" else z
            if lay.pool == "none":
                out, arg, idx = r, None, None
            else:
                idx = lay.members()
                vals = np.where(idx[None] >= 0, r[:, np.maximum(idx, 0)], -np.inf)
                if lay.pool == "max":
                    arg = np.argmax(vals, axis=2)
                    out = np.take_along_axis(vals, arg[..., None], axis=2)[..., 0]
                else:
                    arg = None
                    cnt = (idx >= 0).sum(1)
                    out = np.where(idx[None] >= 0, vals, 0.0).sum(2) / cnt
            cache.append((a, z, idx, arg))
            a = out
        logits = a @ self.head_weights.T + self.head_biases
        return (logits, a, cache) if keep else logits

    def scores(self, X):
        """Pre-head activations ``a^L`` (class scores for exported models)."""
        return self.forward(X, keep=True)[1]

    def predict_proba(self, X):
        z = self.forward(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.forward(X), axis=1)

    def class_templates(self):
        """``(C, G, D)`` first-layer filters grouped by pooled class unit (one-layer nets)."""
        lay = self.layers[0]
        if len(self.layers) != 1 or lay.kind != "dense" or lay.pool != "max":
            raise ValidationError("templates are only defined for single max-pooled dense layers")
        idx = lay.members()
        if np.any(idx < 0):
            raise ValidationError("pool groups have unequal sizes")
        shape = self.input_shape or (1, 1, lay.in_size)
        return lay.effective_weights()[idx], shape


def loss_and_grads(net: FeedforwardNet, X, y):
    """Mean cross-entropy and its gradient for every array in ``net.parameters()``.

    Max-pool gradients go to the winning unit (lowest index on ties) and the
    ReLU derivative at 0 is 0.
    """
    y = np.asarray(y, dtype=np.int64)
    logits, a, cache = net.forward(X, keep=True)
    B = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(B), y].mean())
    d = np.exp(logp)
    d[np.arange(B), y] -= 1.0
    d /= B
    grads = [None] * (2 * len(net.layers) + 2)
    grads[-2] = d.T @ a
    grads[-1] = d.sum(0)
    da = d @ net.head_weights
    for li in range(len(net.layers) - 1, -1, -1):
        lay = net.layers[li]
        a_in, zl, idx, arg = cache[li]
        if lay.pool == "none":
            dr = da
        else:
            dr = np.zeros((B, lay.linear_size))
            if lay.pool == "max":
                win = np.take_along_axis(idx[None].repeat(B, 0), arg[..., None], axis=2)[..., 0]
                np.add.at(dr, (np.arange(B)[:, None], win), da)
            else:
                cnt = (idx >= 0).sum(1)
                for k in range(idx.shape[0]):
                    m = idx[k][idx[k] >= 0]
                    dr[:, m] += (da[:, k] / cnt[k])[:, None]
        dz = dr * (zl > 0) if lay.activation == "relu" else dr
        Wt = lay.effective_weights()
        if lay.kind == "dense":
            gW = dz.T @ a_in
            gb = dz.sum(0)
            da = dz @ Wt
        else:
            K = Wt.shape[0]
            P = lay.positions
            dzk = dz.reshape(B, K, P)
            cols = lay._im2col(a_in)
            gW = np.einsum("bkp,bpd->kd", dzk, cols).reshape(Wt.shape)
            gb = dzk.sum((0, 2))
            dcols = np.einsum("bkp,kd->bpd", dzk, Wt.reshape(K, -1))
            da = _col2im(lay, dcols, B)
        if lay.mask is not None:
            gW = gW * lay.mask
        grads[2 * li] = gW
        grads[2 * li + 1] = gb
    return loss, grads


def _col2im(lay, dcols, B):
    ch, H, W = lay.in_shape
    _, _, h, w = lay.weights.shape
    out = np.zeros((B, ch, H, W))
    p = 0
    for i in range(0, H - h + 1, lay.stride):
        for j in range(0, W - w + 1, lay.stride):
            out[:, :, i:i + h, j:j + w] += dcols[:, p].reshape(B, ch, h, w)
            p += 1
    return out.reshape(B, -1)


# --- export -----------------------------------------------------------------

def relax(model, switching: bool = False, switch_prior: float = 0.5) -> FeedforwardNet:
    """Export a generative model as a feedforward net initialized at ``eta = rho(theta)``.

    ShallowRM: one dense layer with a row per ``(c, g)`` holding ``w_cg, b_cg``,
    max-pooled per class. DeepRM: one layer per level, fine to coarse, whose
    rows are the stacked filters ``W^l(g)`` with biases ``-W^l(g) alpha^l(g)``,
    max-pooled per output unit, followed by a dense class layer with
    ``mu_c / sigma^2`` and ``-||mu_c||^2/(2 sigma^2) + ln pi_c``. With
    ``switching`` each pooled layer gets a ReLU and the switch log-odds is
    added to its biases. The SoftMax head starts as the identity.
    """
    if isinstance(model, ShallowRM):
        nat = to_natural(model)
        C, G, D = nat.weights.shape
        W = nat.weights.reshape(C * G, D)
        b = nat.biases.reshape(-1)
        if switching:
            b = b + math.log(switch_prior) - math.log1p(-switch_prior)
        lay = Layer(W, b, activation="relu" if switching else "none", pool="max",
                    groups=np.repeat(np.arange(C), G))
        return FeedforwardNet([lay], np.eye(C), np.zeros(C), model.image_shape,
                              {"source": "shallow", "classes": C, "nuisances": G})
    if isinstance(model, EvoDRM):
        model = model.to_deep()
    if not isinstance(model, DeepRM):
        raise ValidationError(f"cannot relax {type(model).__name__}")
    ensure_valid(model)
    layers = []
    for lv in reversed(model.levels):
        W, b = level_filters(lv)
        G, d_up, d_low = W.shape
        bias = b.reshape(-1)
        if switching:
            bias = bias + math.log(switch_prior) - math.log1p(-switch_prior)
        layers.append(Layer(W.reshape(G * d_up, d_low), bias,
                            activation="relu" if switching else "none", pool="max",
                            groups=np.tile(np.arange(d_up), G)))
    s2 = model.pixel_noise
    mu = model.top_templates
    layers.append(Layer(mu / s2, -fsum_sq(mu) / (2.0 * s2) + safe_log(model.top_prior)))
    C = model.n_classes
    return FeedforwardNet(layers, np.eye(C), np.zeros(C), model.image_shape,
                          {"source": "deep", "classes": C,
                           "nuisances": [lv.n_nuisances for lv in model.levels]})


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")


class SGDResult(NamedTuple):
    net: FeedforwardNet
    trace: list   # full-set loss after each epoch


def sgd_train(net: FeedforwardNet, data, labels, cfg: TrainConfig) -> SGDResult:
    """Plain mini-batch SGD on the conditional negative log-likelihood.

    All parameters, head included, are trained jointly. Batches come from a
    seeded permutation per epoch. Raises :class:`NumericalError` when the loss
    stops being finite.
    """
    X = net._prepare(data)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (X.shape[0],) or y.min() < 0 or y.max() >= net.n_labels:
        raise ValidationError("labels must index the head outputs")
    net = net.copy()
    rng = as_rng(cfg.seed)
    trace = []
    # overflow shows up as a non-finite loss, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.epochs):
            order = rng.permutation(X.shape[0])
            for s in range(0, X.shape[0], cfg.batch_size):
                bi = order[s:s + cfg.batch_size]
                loss, grads = loss_and_grads(net, X[bi], y[bi])
                if not math.isfinite(loss):
                    raise NumericalError("loss is not finite; lower the learning rate")
                for p, g in zip(net.parameters(), grads):
                    p -= cfg.learning_rate * g
            full, _ = loss_and_grads(net, X, y)
            if not math.isfinite(full):
                raise NumericalError("loss is not finite; lower the learning rate")
            trace.append(full)
    return SGDResult(net, trace)


def gradient_check(net: FeedforwardNet, data, labels, n_coords=100, eps=1e-5, seed=0):
    """Max relative error ``|a - n| / max(|a|, |n|, 1e-6)`` over random coordinates."""
    rng = as_rng(seed)
    _, grads = loss_and_grads(net, data, labels)
    params = net.parameters()
    sizes = np.array([p.size for p in params])
    errs = []
    for _ in range(n_coords):
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        i = int(rng.integers(params[k].size))
        flat = params[k].reshape(-1)
        old = flat[i]
        flat[i] = old + eps
        lp, _ = loss_and_grads(net, data, labels)
        flat[i] = old - eps
        lm, _ = loss_and_grads(net, data, labels)
        flat[i] = old
        num = (lp - lm) / (2 * eps)
        ana = grads[k].reshape(-1)[i]
        errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-6))
    return max(errs)
