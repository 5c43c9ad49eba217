"""Inference and hard-EM learning for the shallow Gaussian rendering model."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._numerics import (as_rng, first_argmax, fsum_dot, fsum_sq, log_prior_product,
                        logsumexp, safe_log)
from .errors import ShapeError, ValidationError
from .model import ShallowRM, as_image, ensure_valid, normalize_image, to_natural

VARIANCE_FLOOR = 1e-8
EMPTY_PRIOR = 1e-12


class SPResult(NamedTuple):
    class_id: int
    scores: np.ndarray   # per-class log[(1/|G|) sum_g exp(<w|I> + b)]


class MSResult(NamedTuple):
    class_id: int
    best_path: tuple     # (c*, g*)
    score: float
    scores: np.ndarray   # (C, G) table of <w|I> + b


class ReLUResult(NamedTuple):
    class_id: int
    best_path: tuple     # (c*, g*, a*), a* True means ON
    score: float
    preactivations: np.ndarray  # (C, G)


def _prepare(model, image, normalize):
    ensure_valid(model)
    x = as_image(image, model.dim)
    return normalize_image(x) if normalize else x


def natural_scores(nat, x):
    """``<w_cg|x> + b_cg`` for every (c, g), correctly rounded inner products."""
    return fsum_dot(nat.weights, x) + nat.biases


def sp_classify(model: ShallowRM, image, normalize=False) -> SPResult:
    """Sum-product classifier: marginalize nuisances with log-sum-exp."""
    x = _prepare(model, image, normalize)
    s = natural_scores(to_natural(model), x)
    scores = logsumexp(s, axis=1) - math.log(model.n_nuisances)
    return SPResult(int(np.argmax(scores)), scores)


def sp_log_offset(model: ShallowRM, image) -> float:
    """Input-only term turning :func:`sp_classify` scores into ``ln p(I, c)``.

    ``ln p(I, c) = score_c + ln|G| - ||I||^2 / (2 sigma^2) - (D/2) ln(2 pi sigma^2)``.
    """
    x = as_image(image, model.dim)
    s2 = model.noise_var
    return (math.log(model.n_nuisances) - math.fsum((x * x).tolist()) / (2.0 * s2)
            - 0.5 * model.dim * math.log(2.0 * math.pi * s2))


def ms_classify(model: ShallowRM, image, normalize=False) -> MSResult:
    """Max-sum classifier: ``argmax_{c,g} <w_cg|I> + b_cg``, lowest index on ties."""
    x = _prepare(model, image, normalize)
    s = natural_scores(to_natural(model), x)
    c, g = first_argmax(s)
    return MSResult(int(c), (int(c), int(g)), float(s[c, g]), s)


def relu(u):
    """Closed form ``max(u, 0)``."""
    return np.maximum(np.asarray(u, dtype=np.float64), 0.0)


def switch_max(u):
    """Explicit max over the switching state ``a in {ON=1, OFF=0}`` of ``a * u``.

    Returns ``(value, a_on)``; at ``u == 0`` the OFF branch wins.
    """
    u = np.asarray(u, dtype=np.float64)
    on = 1.0 * u
    off = np.zeros_like(u)
    a_on = on > off
    return np.where(a_on, on, off), a_on


def ms_classify_relu(model: ShallowRM, switch_prior: float, image, normalize=False) -> ReLUResult:
    """Max-sum classification with an ON/OFF switch per (c, g) renderer.

    ``u_cg = <w_cg|I> - ||mu_cg||^2/(2 sigma^2) + ln(p_on / p_off)`` and the
    score is ``max_a a*u_cg + ln p_off + ln pi_c pi_g``. The explicit branch max
    and the ReLU closed form are both evaluated and must agree.
    """
    if not 0.0 < switch_prior < 1.0:
        raise ValidationError("switch_prior must lie in (0, 1)")
    x = _prepare(model, image, normalize)
    s2 = model.noise_var
    u = (fsum_dot(model.templates / s2, x) - fsum_sq(model.templates) / (2.0 * s2)
         + math.log(switch_prior) - math.log1p(-switch_prior))
    explicit, a_on = switch_max(u)
    closed = relu(u)
    if not np.array_equal(explicit, closed):
        raise AssertionError("switch max and ReLU disagree")
    total = explicit + math.log1p(-switch_prior) + log_prior_product(
        model.class_prior, model.nuisance_prior)
    c, g = first_argmax(total)
    return ReLUResult(int(c), (int(c), int(g), bool(a_on[c, g])), float(total[c, g]), u)


# --- translational nuisance -------------------------------------------------

@dataclass(frozen=True)
class TranslationalSpec:
    """Valid (unpadded) correlation of an ``(h, w)`` template at ``stride``."""

    template_size: tuple
    stride: int = 1

    def __post_init__(self):
        ts = tuple(int(s) for s in self.template_size)
        if len(ts) == 1:
            ts = (1,) + ts
        object.__setattr__(self, "template_size", ts)
        if self.stride < 1 or min(ts) < 1:
            raise ValidationError("stride and template size must be >= 1")

    def offsets(self, height, width):
        h, w = self.template_size
        if h > height or w > width:
            raise ShapeError(f"template {self.template_size} larger than image {(height, width)}")
        return [(i, j) for i in range(0, height - h + 1, self.stride)
                for j in range(0, width - w + 1, self.stride)]


class TranslationalResult(NamedTuple):
    class_id: int
    best_offset: int          # index into spec.offsets(...)
    offset_position: tuple    # (row, col) of the template's top-left corner
    score: float
    correlations: np.ndarray  # (C, n_offsets) of <w_c | patch_g>


def _as_chw(a, leading=0):
    a = np.asarray(a, dtype=np.float64)
    core = a.ndim - leading
    if core == 1:
        return a.reshape(a.shape[:leading] + (1, 1, a.shape[-1]))
    if core == 2:
        return a.reshape(a.shape[:leading] + (1,) + a.shape[-2:])
    if core == 3:
        return a
    raise ShapeError("expected a 1-D, 2-D or (channels, height, width) array")


def expand_translational(templates, spec: TranslationalSpec, image_shape, class_prior=None,
                         noise_var=1.0) -> ShallowRM:
    """ShallowRM whose nuisances are the zero-padded shifted copies of each template."""
    t = _as_chw(templates, leading=1)
    ch, H, W = _as_chw(np.zeros(image_shape)).shape
    if t.shape[1] != ch or t.shape[2:] != spec.template_size:
        raise ShapeError("templates do not match spec/image channels")
    offs = spec.offsets(H, W)
    C = t.shape[0]
    h, w = spec.template_size
    full = np.zeros((C, len(offs), ch, H, W))
    for g, (i, j) in enumerate(offs):
        full[:, g, :, i:i + h, j:j + w] = t
    prior = np.full(C, 1.0 / C) if class_prior is None else np.asarray(class_prior, float)
    return ShallowRM(prior, np.full(len(offs), 1.0 / len(offs)),
                     full.reshape(C, len(offs), -1), noise_var, image_shape=(ch, H, W))


def ms_classify_translational(templates, spec: TranslationalSpec, image, class_prior=None,
                              noise_var=1.0) -> TranslationalResult:
    """Max-sum classification with a translational nuisance (conv + max-pool).

    Scores are bit-identical to :func:`ms_classify` on
    :func:`expand_translational` of the same templates.
    """
    t = _as_chw(templates, leading=1)
    img = _as_chw(image)
    if not np.all(np.isfinite(img)):
        raise ValidationError("image has non-finite entries")
    ch, H, W = img.shape
    if t.shape[1] != ch or t.shape[2:] != spec.template_size:
        raise ShapeError("templates do not match spec/image channels")
    offs = spec.offsets(H, W)
    C = t.shape[0]
    h, w = spec.template_size
    prior = np.full(C, 1.0 / C) if class_prior is None else np.asarray(class_prior, float)
    wts = (t / noise_var).reshape(C, -1)
    patches = np.stack([img[:, i:i + h, j:j + w].reshape(-1) for i, j in offs])
    corr = np.stack([fsum_dot(wts, p) for p in patches], axis=1)
    pg = np.full(len(offs), 1.0 / len(offs))
    bias = -fsum_sq(t.reshape(C, -1)) / (2.0 * noise_var)
    # same association as to_natural: <w|I> + (b_norm + ln prior)
    scores = corr + (bias[:, None] + log_prior_product(prior, pg))
    c, g = first_argmax(scores)
    return TranslationalResult(int(c), int(g), offs[g], float(scores[c, g]), corr)


# --- hard EM ----------------------------------------------------------------

class EMResult(NamedTuple):
    model: ShallowRM
    trace: list


@dataclass
class EpochLog:
    """Everything a DropOut-EM epoch saw, for offline recomputation."""

    masks: np.ndarray        # (T, N, D) bool, True = observed
    assignments: np.ndarray  # (T, N, 2) int, -1 for fully dropped samples
    counts: np.ndarray       # (C, G) sum over masks of hard responsibilities
    weighted_sum: np.ndarray  # (C, G, D) sum of gamma * A * I
    weight: np.ndarray       # (C, G, D) sum of gamma * A


class DropoutEMResult(NamedTuple):
    model: ShallowRM
    trace: list
    epochs: list


def _as_matrix(data, dim=None):
    X = np.asarray(data, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    X = X.reshape(X.shape[0], -1)
    if X.shape[0] == 0:
        raise ValidationError("empty dataset")
    if dim is not None and X.shape[1] != dim:
        raise ShapeError(f"data dimension {X.shape[1]} != model dimension {dim}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("data has non-finite entries")
    return X


def init_from_data(data, n_classes, n_nuisances, seed=0, labels=None, image_shape=None):
    """Seed templates with distinct data points (D^2-weighted, k-means++ style).

    With labels, class ``c`` templates come from class-``c`` samples only.
    Priors start uniform; the noise variance is the mean squared distance of
    samples to their nearest seed, per pixel.
    """
    X = _as_matrix(data)
    rng = as_rng(seed)
    N, D = X.shape
    T = np.empty((n_classes, n_nuisances, D))
    groups = ([np.flatnonzero(np.asarray(labels) == c) for c in range(n_classes)]
              if labels is not None else None)
    if groups is None:
        flat = _dsquared_seeds(X, n_classes * n_nuisances, rng)
        T[:] = X[flat].reshape(n_classes, n_nuisances, D)
    else:
        for c, idx in enumerate(groups):
            if idx.size == 0:
                raise ValidationError(f"no samples with label {c}")
            T[c] = X[idx[_dsquared_seeds(X[idx], n_nuisances, rng)]]
    d2 = ((X[:, None, :] - T.reshape(1, -1, D)) ** 2).sum(-1).min(1)
    var = max(float(d2.mean()) / D, VARIANCE_FLOOR)
    if var <= VARIANCE_FLOOR:
        var = max(float(X.var()), 1.0)
    return ShallowRM(np.full(n_classes, 1.0 / n_classes), np.full(n_nuisances, 1.0 / n_nuisances),
                     T, var, image_shape=image_shape)


def _dsquared_seeds(X, k, rng):
    uniq, first = np.unique(X, axis=0, return_index=True)
    if uniq.shape[0] < k:
        raise ValidationError(f"need {k} distinct samples, have {uniq.shape[0]}")
    chosen = [int(rng.integers(X.shape[0]))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(1)
    while len(chosen) < k:
        p = d2 / d2.sum()
        nxt = int(rng.choice(X.shape[0], p=p))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(1))
    return np.array(chosen)


def hard_e_step(model: ShallowRM, data, labels=None, masks=None):
    """Best ``(c, g)`` per sample (and per mask), labels clamping the class.

    ``masks`` has shape ``(T, N, D)``; only observed pixels enter the score.
    Samples with no observed pixel get assignment ``(-1, -1)``.
    """
    X = _as_matrix(data, model.dim)
    N, D = X.shape
    if masks is None:
        masks = np.ones((1, N, D), dtype=bool)
    s2 = model.noise_var
    W = model.templates / s2
    sq = model.templates * model.templates
    logp = log_prior_product(model.class_prior, model.nuisance_prior)
    CG = model.n_classes * model.n_nuisances
    out = np.full((masks.shape[0], N, 2), -1, dtype=np.int64)
    for t in range(masks.shape[0]):
        for n in range(N):
            m = masks[t, n]
            if not m.any():
                continue
            if m.all():
                s = fsum_dot(W, X[n]) - fsum_sq(model.templates) / (2.0 * s2) + logp
            else:
                mf = m.astype(np.float64)
                s = fsum_dot(W, X[n] * mf) - fsum_dot(sq, mf) / (2.0 * s2) + logp
            if labels is not None:
                c = int(labels[n])
                g = int(np.argmax(s[c]))
            else:
                c, g = (int(v) for v in np.unravel_index(int(np.argmax(s.reshape(CG))), s.shape))
            out[t, n] = (c, g)
    return out


def _m_step(model, X, masks, assign):
    C, G, D = model.templates.shape
    T = masks.shape[0]
    counts = np.zeros((C, G))
    wsum = np.zeros((C, G, D))
    wts = np.zeros((C, G, D))
    for t in range(T):
        for n in range(X.shape[0]):
            c, g = assign[t, n]
            if c < 0:
                continue
            a = masks[t, n].astype(np.float64)
            counts[c, g] += 1.0
            wsum[c, g] += a * X[n]
            wts[c, g] += a
    total = counts.sum()
    if total == 0:
        raise ValidationError("every sample was dropped")
    pc = counts.sum(1) / total
    pg = counts.sum(0) / total
    pc = np.where(pc == 0, EMPTY_PRIOR, pc)
    pg = np.where(pg == 0, EMPTY_PRIOR, pg)
    pc, pg = pc / pc.sum(), pg / pg.sum()
    mu = np.where(wts > 0, wsum / np.where(wts > 0, wts, 1.0), model.templates)
    resid = 0.0
    denom = 0.0
    for t in range(T):
        for n in range(X.shape[0]):
            c, g = assign[t, n]
            if c < 0:
                continue
            a = masks[t, n].astype(np.float64)
            resid += float(np.sum(a * (X[n] - mu[c, g]) ** 2))
            denom += float(a.sum())
    var = max(resid / denom, VARIANCE_FLOOR)
    new = ShallowRM(pc, pg, mu, var, image_shape=model.image_shape)
    return new, EpochLog(masks, assign, counts, wsum, wts)


def complete_log_likelihood(model, data, assign, masks=None):
    """``sum_n ln pi_c + ln pi_g + ln N(I_n; mu_cg, sigma^2)`` over observed pixels,
    averaged over masks."""
    X = _as_matrix(data, model.dim)
    if masks is None:
        masks = np.ones((1,) + X.shape, dtype=bool)
    assign = np.asarray(assign)
    if assign.ndim == 2:
        assign = assign[None]
    s2 = model.noise_var
    lp_c = safe_log(model.class_prior)
    lp_g = safe_log(model.nuisance_prior)
    terms = []
    for t in range(masks.shape[0]):
        for n in range(X.shape[0]):
            c, g = assign[t, n]
            if c < 0:
                continue
            a = masks[t, n]
            r = X[n][a] - model.templates[c, g][a]
            terms.append(lp_c[c] + lp_g[g] - math.fsum((r * r).tolist()) / (2.0 * s2)
                         - 0.5 * a.sum() * math.log(2.0 * math.pi * s2))
    return math.fsum(terms) / masks.shape[0]


def em_train(data, init: ShallowRM, iters: int, labels=None) -> EMResult:
    """Hard EM: nearest (c, g) assignment, then count/mean/variance updates.

    Priors are updated as the marginal frequencies of the hard assignments and
    the shared variance as the pooled per-pixel residual. Cells that receive no
    sample keep their template; empty priors get ``1e-12`` and are renormalized.
    Returns the model and the complete-data log-likelihood after each M-step.
    """
    X = _as_matrix(data, init.dim)
    ones = np.ones((1,) + X.shape, dtype=bool)
    return EMResult(*_run_em(X, init, iters, labels, lambda: ones)[:2])


def dropout_em_train(data, init: ShallowRM, iters: int, drop_prob: float, masks_per_epoch: int = 1,
                     seed=0, labels=None, per_sample=False) -> DropoutEMResult:
    """EM with data missing completely at random.

    Each epoch draws ``masks_per_epoch`` Bernoulli keep-masks (per pixel, or
    per sample with ``per_sample=True``), runs the hard E-step on the observed
    entries of every masked copy and M-steps on the pooled masked statistics.
    With ``drop_prob == 0`` and one mask this is exactly :func:`em_train`.
    """
    if not 0.0 <= drop_prob < 1.0:
        raise ValidationError("drop_prob must lie in [0, 1)")
    if masks_per_epoch < 1:
        raise ValidationError("masks_per_epoch must be >= 1")
    X = _as_matrix(data, init.dim)
    rng = as_rng(seed)
    N, D = X.shape

    def draw():
        shape = (masks_per_epoch, N, 1) if per_sample else (masks_per_epoch, N, D)
        keep = rng.random(shape) >= drop_prob
        return np.broadcast_to(keep, (masks_per_epoch, N, D)).copy()

    return DropoutEMResult(*_run_em(X, init, iters, labels, draw))


def _run_em(X, init, iters, labels, draw_masks):
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    ensure_valid(init)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (X.shape[0],) or labels.min() < 0 or labels.max() >= init.n_classes:
            raise ValidationError("labels out of range for the model")
    model = init
    trace, epochs = [], []
    for _ in range(iters):
        masks = draw_masks()
        assign = hard_e_step(model, X, labels, masks)
        model, log = _m_step(model, X, masks, assign)
        trace.append(complete_log_likelihood(model, X, assign, masks))
        epochs.append(log)
    return model, trace, epochs


def sample_shallow(model: ShallowRM, rng=None, noise=True):
    """Draw ``(I, (c, g))`` from the priors, adding ``N(0, sigma^2)`` pixel noise."""
    ensure_valid(model)
    rng = as_rng(rng)
    c = int(rng.choice(model.n_classes, p=model.class_prior))
    g = int(rng.choice(model.n_nuisances, p=model.nuisance_prior))
    x = np.array(model.templates[c, g])
    if noise:
        x = x + rng.normal(size=x.shape) * math.sqrt(model.noise_var)
    return x, (c, g)
