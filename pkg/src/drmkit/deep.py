"""Deep rendering model: sampling, fine-to-coarse inference, deep EM, activity maximization."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._numerics import as_rng, first_argmax, fsum_dot, fsum_sq, safe_log, softmax
from .errors import NumericalError, ShapeError, ValidationError
from .model import (DeepLevel, DeepRM, EvoDRM, RenderingPath, ShallowRM, as_image, collapse,
                    ensure_valid, path_to_index)

PSI_FLOOR = 1e-8
SVD_CUTOFF = 1e-10
RIDGE = 1e-8
COND_LIMIT = 1e12
EMPTY_PRIOR = 1e-12


# --- sampling ---------------------------------------------------------------

class DeepSample(NamedTuple):
    image: np.ndarray
    path: RenderingPath
    intermediates: list   # [mu^L, mu^(L-1), ..., mu^0]


def sample_path(model: DeepRM, rng) -> RenderingPath:
    rng = as_rng(rng)
    c = int(rng.choice(model.n_classes, p=model.top_prior))
    gs = tuple(int(rng.choice(lv.n_nuisances, p=lv.prior)) for lv in model.levels)
    return RenderingPath(c, gs)


def render(model: DeepRM, path: RenderingPath, rng=None, noise=True):
    """Intermediates ``[mu^L, ..., mu^0]`` along ``path``, optionally with level noise."""
    path.check((model.n_classes,) + tuple(lv.n_nuisances for lv in model.levels))
    rng = as_rng(rng) if noise else None
    mu = np.array(model.top_templates[path.class_id])
    out = [mu]
    for lv, g in zip(model.levels, path.nuisance_ids):
        mu = lv.transforms[g] @ mu + lv.biases[g]
        if noise:
            mu = mu + rng.normal(size=mu.shape) * np.sqrt(lv.noise)
        out.append(mu)
    return out


def sample(model: DeepRM, path=None, rng=None, noise=True) -> DeepSample:
    """Draw ``(I, path, intermediates)``; the path comes from the priors when not given.

    With ``noise=False`` both level noise and pixel noise are switched off, and
    the image equals the collapsed template of the path.
    """
    ensure_valid(model)
    rng = as_rng(rng)
    if path is None:
        path = sample_path(model, rng)
    mus = render(model, path, rng, noise)
    image = mus[-1]
    if noise:
        image = image + rng.normal(size=image.shape) * math.sqrt(model.pixel_noise)
    return DeepSample(image, path, mus)


# --- fine-to-coarse inference ----------------------------------------------

def regularized_pinv(transform, noise):
    """``Lambda^T (Psi + Lambda Lambda^T)^{-1}`` for diagonal ``Psi``.

    Computed from the SVD of ``Psi^{-1/2} Lambda = U S V^T`` as
    ``V diag(s / (s^2 + 1)) U^T Psi^{-1/2}``; singular values below
    ``1e-10 * s_max`` are dropped.
    """
    lam = np.asarray(transform, dtype=np.float64)
    psi = np.asarray(noise, dtype=np.float64)
    r = 1.0 / np.sqrt(psi)
    U, s, Vt = np.linalg.svd(lam * r[:, None], full_matrices=False)
    keep = s > SVD_CUTOFF * (s[0] if s.size else 0.0)
    f = np.where(keep, s / (s * s + 1.0), 0.0)
    return (Vt.T * f) @ U.T * r[None, :]


def level_filters(level: DeepLevel):
    """Per-nuisance filters ``W(g) = Lambda(g)^dagger`` and biases ``-W(g) alpha(g)``."""
    W = np.stack([regularized_pinv(t, level.noise) for t in level.transforms])
    b = -np.einsum("gij,gj->gi", W, level.biases)
    return W, b


class F2CResult(NamedTuple):
    class_id: int
    class_scores: np.ndarray   # (C,)
    unit_choices: list         # per level L..1, argmax g for each output unit
    feature_maps: list         # [I^0, I^1, ..., I^L]
    path: RenderingPath        # globally decoded path
    path_log_joint: float      # exact ln p(path, I) of the decoded path
    consistent: bool           # pooled scores equal decoded-path scores at every level


def _class_scores(model, top):
    s2 = model.pixel_noise
    return (fsum_dot(model.top_templates / s2, top) - fsum_sq(model.top_templates) / (2.0 * s2)
            + safe_log(model.top_prior))


def path_log_joint(model, path: RenderingPath, image) -> float:
    """``ln p(path) + ln N(I; template(path), sigma^2 1)`` with the collapsed template."""
    x = as_image(image, model.dim)
    t = render(model, path, noise=False)[-1]
    # same product-then-renormalize as collapse()
    prior = np.ones(1)
    for lv in model.levels:
        prior = np.outer(prior, lv.prior).reshape(-1)
    pg = prior[path_to_index(model, path.nuisance_ids)] / math.fsum(prior.tolist())
    lp = math.log(model.top_prior[path.class_id]) + math.log(pg)
    r = (x - t).tolist()
    return (lp - math.fsum(v * v for v in r) / (2.0 * model.pixel_noise)
            - 0.5 * x.size * math.log(2.0 * math.pi * model.pixel_noise))


def _bottom_up(model, x, pool, filters=None):
    filters = filters or [level_filters(lv) for lv in model.levels]
    maps = [x]
    choices = []
    for W, b in reversed(filters):
        pre = np.einsum("gij,j->gi", W, maps[-1]) + b
        if pool == "max":
            choices.append(np.argmax(pre, axis=0))
            maps.append(pre.max(axis=0))
        else:
            maps.append(pre.mean(axis=0))
    return maps, choices[::-1]


def infer_f2c(model: DeepRM, image) -> F2CResult:
    """Fine-to-coarse max-sum inference: ``I^(l) = max_g W^l(g) I^(l-1) + b^l(g)``.

    Each level applies every nuisance candidate's filter bank and max-pools
    elementwise, recording the winning candidate per output unit (lowest index
    on ties). The class score is ``<mu_c|I^L>/sigma^2 - ||mu_c||^2/(2 sigma^2)
    + ln pi_c``. A global path is then decoded top-down: at level ``l`` the
    candidate maximizing ``<a^l | W^l(g) I^(l-1) + b^l(g)>`` is chosen, where
    ``a^l`` is the template rendered down to level ``l`` along the choices so far.
    """
    ensure_valid(model)
    return _infer(model, as_image(image, model.dim), [level_filters(lv) for lv in model.levels])


def _infer(model, x, filters):
    maps, choices = _bottom_up(model, x, "max", filters)
    scores = _class_scores(model, maps[-1])
    c = int(first_argmax(scores)[0])
    a = np.array(model.top_templates[c])
    gs = []
    consistent = True
    for depth, (lv, (W, b)) in enumerate(zip(model.levels, filters)):
        lower = maps[len(model.levels) - depth - 1]
        cand = np.einsum("gij,j->gi", W, lower) + b
        vals = fsum_dot(cand, a)
        g = int(np.argmax(vals))
        pooled = math.fsum((a * maps[len(model.levels) - depth]).tolist())
        if not math.isclose(vals[g], pooled, rel_tol=1e-12, abs_tol=1e-12):
            consistent = False
        gs.append(g)
        a = lv.transforms[g] @ a + lv.biases[g]
    path = RenderingPath(c, tuple(gs))
    return F2CResult(c, scores, choices, maps, path, path_log_joint(model, path, x), consistent)


class Certificate(NamedTuple):
    nonnegative: bool   # top templates and every candidate pre-activation >= 0
    consistent: bool    # one candidate wins every unit the decoded path uses

    @property
    def exact(self):
        return self.nonnegative and self.consistent


def f2c_certificate(model: DeepRM, image) -> Certificate:
    """Sufficient conditions for :func:`infer_f2c` to return the exact MAP path.

    Nonnegativity lets ``max_g <a|v_g> = <a|max_g v_g>`` hold only when a single
    ``g`` attains the unit-wise maximum wherever ``a > 0``, so both checks are needed.
    """
    x = as_image(image, model.dim)
    nonneg = bool(np.all(model.top_templates >= 0))
    y = x
    for lv in reversed(model.levels):
        W, b = level_filters(lv)
        pre = np.einsum("gij,j->gi", W, y) + b
        nonneg &= bool(np.all(pre >= 0)) and bool(np.all(lv.transforms >= 0))
        y = pre.max(axis=0)
    return Certificate(nonneg, infer_f2c(model, x).consistent)


def infer_f2c_meanpool(model: DeepRM, image) -> np.ndarray:
    """Class scores of the mean-pool variant (per-unit mean over candidates)."""
    ensure_valid(model)
    maps, _ = _bottom_up(model, as_image(image, model.dim), "mean")
    return _class_scores(model, maps[-1])


def feature_maps(model: DeepRM, image, pool="max"):
    """``[I^0, ..., I^L]`` of the fine-to-coarse pass."""
    return _bottom_up(model, as_image(image, model.dim), pool)[0]


def softmax_head(activations, weights, biases):
    """``softmax(W a + b)``; ``a`` may be a vector or a batch of row vectors."""
    a = np.asarray(activations, dtype=np.float64)
    W = np.asarray(weights, dtype=np.float64)
    b = np.asarray(biases, dtype=np.float64)
    if W.ndim != 2 or a.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"head {W.shape}/{b.shape} does not fit activations {a.shape}")
    return softmax(a @ W.T + b, axis=-1)


def batchnorm_estep(batch, gamma=1.0, beta=0.0, std_floor=1e-8):
    """``gamma * (I - mean_B) / std_B + beta`` per feature over the batch axis.

    ``std_B`` is the population standard deviation, floored at ``std_floor``.
    """
    X = np.asarray(batch, dtype=np.float64)
    if X.ndim == 0 or X.shape[0] < 2:
        raise ValidationError("batch size must be >= 2")
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), std_floor)
    return np.asarray(gamma) * (X - mean) / std + np.asarray(beta)


# --- random and certified models -------------------------------------------

def random_deep(dims, nuisances, n_classes, seed=0, level_noise=1e-2, pixel_noise=1e-2):
    """Unrestricted random DeepRM; ``dims = (D^L, ..., D^0)``."""
    rng = as_rng(seed)
    levels = []
    for d_in, d_out, g in zip(dims[:-1], dims[1:], nuisances):
        levels.append(DeepLevel(rng.normal(size=(g, d_out, d_in)) / math.sqrt(d_in),
                                rng.normal(scale=0.1, size=(g, d_out)),
                                np.full(d_out, level_noise), np.full(g, 1.0 / g)))
    return DeepRM(levels, rng.normal(size=(n_classes, dims[0])), np.full(n_classes, 1.0 / n_classes),
                  pixel_noise)


def certified_deep(dims, nuisances, n_classes, seed=0, level_noise=1e-12, pixel_noise=1e-2,
                   disjoint_nuisances=False):
    """DeepRM meeting the nonnegativity certificate for exact fine-to-coarse inference.

    Every ``Lambda(g)`` is nonnegative with orthonormal columns (disjoint
    supports), ``alpha = 0``, nuisance priors are uniform and top templates are
    nonnegative, so every pooled pre-activation is a nonnegative combination.
    With ``disjoint_nuisances`` the candidates of a level also write to
    disjoint rows (nuisance = location), which needs ``D^(l-1) >= G * D^l``.
    """
    rng = as_rng(seed)
    levels = []
    for d_in, d_out, g in zip(dims[:-1], dims[1:], nuisances):
        if d_out < (g * d_in if disjoint_nuisances else d_in):
            raise ValidationError("certified levels need more output than input units")
        T = np.zeros((g, d_out, d_in))
        blocks = np.array_split(rng.permutation(d_out), g) if disjoint_nuisances else None
        for k in range(g):
            rows = blocks[k] if disjoint_nuisances else rng.permutation(d_out)
            owner = np.concatenate([np.arange(d_in), rng.integers(0, d_in, len(rows) - d_in)])
            for r, j in zip(rows, owner):
                T[k, r, j] = rng.uniform(0.2, 1.0)
            T[k] /= np.linalg.norm(T[k], axis=0, keepdims=True)
        levels.append(DeepLevel(T, np.zeros((g, d_out)), np.full(d_out, level_noise),
                                np.full(g, 1.0 / g)))
    return DeepRM(levels, rng.uniform(0.5, 1.5, size=(n_classes, dims[0])),
                  rng.dirichlet(np.full(n_classes, 5.0)), pixel_noise)


# --- deep EM ----------------------------------------------------------------

def fa_regression(Y, Ex, Cov):
    """Augmented factor-analyzer M-step for one ``(level, g)`` cell.

    ``Y`` (n, D_out) observations, ``Ex`` (n, D_in) posterior means, ``Cov``
    (D_in, D_in) shared posterior covariance. Returns ``(Lambda, alpha)`` from
    ``(sum y E[x~]^T)(sum E[x~ x~^T])^{-1}`` with ``x~ = [x; 1]``. A ridge of
    ``1e-8 * trace / dim`` is added only when the moment matrix is
    ill-conditioned (condition number above 1e12).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    Ex = np.atleast_2d(np.asarray(Ex, dtype=np.float64))
    n, d_in = Ex.shape
    aug = np.hstack([Ex, np.ones((n, 1))])
    S = aug.T @ aug
    S[:d_in, :d_in] += n * np.asarray(Cov, dtype=np.float64).reshape(d_in, d_in)
    R = Y.T @ aug
    if not np.isfinite(np.linalg.cond(S)) or np.linalg.cond(S) > COND_LIMIT:
        S = S + RIDGE * np.trace(S) / S.shape[0] * np.eye(S.shape[0])
    try:
        lam = _refined_solve(S.T, R.T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular moment matrix in deep M-step") from exc
    return lam[:, :d_in], lam[:, d_in]


def _refined_solve(A, B, steps=2):
    """``A^-1 B`` with iterative refinement on correctly rounded residuals."""
    X = np.linalg.solve(A, B)
    for _ in range(steps):
        R = np.array([[math.fsum(np.concatenate(([B[i, j]], -A[i] * X[:, j])).tolist())
                       for j in range(B.shape[1])] for i in range(B.shape[0])])
        if not np.any(R):
            break
        X = X + np.linalg.solve(A, R)
    return X


def _fa_loglik(Y, lam, alpha, psi):
    """Sum of ``ln N(y; alpha, Lambda Lambda^T + Psi)`` over rows of ``Y``."""
    S = lam @ lam.T + np.diag(psi)
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0:
        raise NumericalError("level covariance not positive definite")
    R = Y - alpha
    quad = np.einsum("ni,ni->n", R, np.linalg.solve(S, R.T).T)
    return float(-0.5 * (quad.sum() + Y.shape[0] * (logdet + Y.shape[1] * math.log(2 * math.pi))))


class DeepEMResult(NamedTuple):
    model: DeepRM
    trace: list   # per iteration: {"before": J(old), "after": J(new)} on the same assigned paths


@dataclass
class _Assigned:
    paths: np.ndarray      # (N, L+1) class then g^L..g^1
    inputs: list           # per level L..1: (N, D^(l-1)) observations y
    means: list            # per level L..1: (N, D^l) posterior means
    covs: list             # per level L..1: (G, D^l, D^l) posterior covariances


def _e_step(model, X):
    N = X.shape[0]
    L = model.depth
    filt = [level_filters(lv) for lv in model.levels]
    paths = np.empty((N, L + 1), dtype=np.int64)
    for n in range(N):
        paths[n] = _infer(model, X[n], filt).path.as_tuple()
    inputs = [None] * L
    means = [None] * L
    covs = [None] * L
    y = X
    for i in range(L - 1, 0, -1):
        lv = model.levels[i]
        W, _ = filt[i]
        g = paths[:, i + 1]
        inputs[i] = y
        means[i] = np.einsum("nij,nj->ni", W[g], y - lv.biases[g])
        covs[i] = np.eye(lv.dim_in)[None] - np.einsum("gij,gjk->gik", W, lv.transforms)
        y = means[i]
    # the top latent is the class template itself
    inputs[0] = y
    means[0] = np.array(model.top_templates[paths[:, 0]])
    covs[0] = np.zeros((model.levels[0].n_nuisances, model.levels[0].dim_in,
                        model.levels[0].dim_in))
    return _Assigned(paths, inputs, means, covs)


def _gauss_loglik(R, psi):
    return float(-0.5 * (np.sum(R * R / psi) + R.shape[0] * (np.sum(np.log(psi))
                                                              + R.shape[1] * math.log(2 * math.pi))))


def deep_objective(model, asg: _Assigned) -> float:
    """Objective that one deep M-step cannot decrease on fixed assignments.

    Levels below the top contribute the factor-analyzer marginal
    log-likelihood of their observations given the assigned nuisance; the top
    level contributes ``ln N(y^(L-1); Lambda(g) mu_c + alpha(g), Psi)``; the
    log priors of the assigned paths are added.
    """
    total = []
    top = model.levels[0]
    c = asg.paths[:, 0]
    g_top = asg.paths[:, 1]
    pred = np.einsum("nij,nj->ni", top.transforms[g_top], model.top_templates[c]) + top.biases[g_top]
    total.append(_gauss_loglik(asg.inputs[0] - pred, top.noise))
    for i, lv in enumerate(model.levels):
        g_all = asg.paths[:, i + 1]
        if i > 0:
            for g in np.unique(g_all):
                sel = g_all == g
                total.append(_fa_loglik(asg.inputs[i][sel], lv.transforms[g], lv.biases[g],
                                        lv.noise))
        total.append(float(np.sum(safe_log(lv.prior)[g_all])))
    total.append(float(np.sum(safe_log(model.top_prior)[c])))
    return math.fsum(total)


def _prior_from_counts(idx, k):
    counts = np.bincount(idx, minlength=k).astype(np.float64)
    p = counts / counts.sum()
    p = np.where(p == 0, EMPTY_PRIOR, p)
    return p / p.sum()


def _top_templates(model, asg):
    """Psi-weighted least-squares class templates given the top level's maps."""
    lv = model.levels[0]
    c = asg.paths[:, 0]
    g = asg.paths[:, 1]
    top = np.array(model.top_templates)
    iw = 1.0 / lv.noise
    for k in range(model.n_classes):
        sel = c == k
        if not sel.any():
            continue
        T = lv.transforms[g[sel]]
        A = np.einsum("nji,j,njk->ik", T, iw, T)
        r = np.einsum("nji,j,nj->i", T, iw, asg.inputs[0][sel] - lv.biases[g[sel]])
        if np.linalg.cond(A) > COND_LIMIT:
            A = A + RIDGE * np.trace(A) / A.shape[0] * np.eye(A.shape[0])
        top[k] = np.linalg.solve(A, r)
    return top


def _m_step(model, asg):
    top = _top_templates(model, asg)
    asg.means[0] = top[asg.paths[:, 0]]
    levels = []
    for i, lv in enumerate(model.levels):
        g_all = asg.paths[:, i + 1]
        T = np.array(lv.transforms)
        B = np.array(lv.biases)
        for g in range(lv.n_nuisances):
            sel = g_all == g
            if not sel.any():
                continue
            T[g], B[g] = fa_regression(asg.inputs[i][sel], asg.means[i][sel], asg.covs[i][g])
        Y = asg.inputs[i]
        Ex = asg.means[i]
        pred = np.einsum("nij,nj->ni", T[g_all], Ex) + B[g_all]
        psi = np.einsum("ni,ni->i", Y - pred, Y) / Y.shape[0]
        levels.append(DeepLevel(T, B, np.maximum(psi, PSI_FLOOR),
                                _prior_from_counts(g_all, lv.n_nuisances)))
    new = model.replace(levels=levels, top_templates=top,
                        top_prior=_prior_from_counts(asg.paths[:, 0], model.n_classes))
    if not all(np.all(np.isfinite(lv.transforms)) for lv in new.levels):
        raise NumericalError("deep M-step produced non-finite parameters")
    return new


def _pixel_noise(model, X, paths):
    res = []
    for n in range(X.shape[0]):
        t = render(model, RenderingPath(paths[n, 0], tuple(paths[n, 1:])), noise=False)[-1]
        res.append(float(np.sum((X[n] - t) ** 2)))
    return max(math.fsum(res) / X.size, PSI_FLOOR)


def em_train_deep(data, init: DeepRM, iters: int) -> DeepEMResult:
    """Hard-path EM for the DeepRM.

    E-step: each sample's path is the decoded path of :func:`infer_f2c`. Below
    the top, level-wise posterior moments are ``E[mu^l] = W^l(g)(y^(l-1) -
    alpha)`` with covariance ``1 - W^l(g) Lambda^l(g)``, chained upward; the
    top latent is the class template. M-step: class templates by weighted
    least squares, augmented regression per ``(level, g)`` cell over its
    assigned samples, a shared diagonal ``Psi`` per level, priors from path
    counts, and pixel noise as the mean squared residual of the collapsed
    path templates.
    """
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    ensure_valid(init)
    X = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
    if X.shape[0] == 0:
        raise ValidationError("empty dataset")
    if X.shape[1] != init.dim:
        raise ShapeError(f"data dimension {X.shape[1]} != model dimension {init.dim}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("data has non-finite entries")
    model = init
    trace = []
    for _ in range(iters):
        asg = _e_step(model, X)
        before = deep_objective(model, asg)
        model = _m_step(model, asg)
        after = deep_objective(model, asg)
        if not math.isfinite(after):
            raise NumericalError("deep EM objective is not finite")
        model = model.replace(pixel_noise=_pixel_noise(model, X, asg.paths))
        trace.append({"before": before, "after": after})
    return DeepEMResult(model, trace)


# --- activity maximization ---------------------------------------------------

@dataclass(frozen=True)
class PatchLayout:
    """Square-grid patches of ``(h, w)`` at ``stride`` over every channel."""

    height: int
    width: int
    stride: int

    def patches(self, image_shape):
        ch, H, W = image_shape
        if self.height > H or self.width > W or min(self.height, self.width, self.stride) < 1:
            raise ValidationError(f"patch layout {self} does not fit image {image_shape}")
        out = []
        for i in range(0, H - self.height + 1, self.stride):
            for j in range(0, W - self.width + 1, self.stride):
                m = np.zeros((ch, H, W), dtype=bool)
                m[:, i:i + self.height, j:j + self.width] = True
                out.append(m.reshape(-1))
        return out


def class_templates(model, class_id):
    """``(G, D)`` rendered templates of one class and the image shape."""
    if isinstance(model, ShallowRM):
        t, shape = model.templates, model.shape
    elif isinstance(model, (DeepRM, EvoDRM)):
        sh = collapse(model)
        t, shape = sh.templates, sh.shape
    elif hasattr(model, "class_templates"):
        t, shape = model.class_templates()
    else:
        raise ValidationError(f"no templates for {type(model).__name__}")
    if not 0 <= class_id < t.shape[0]:
        raise ValidationError(f"unknown class {class_id}")
    return np.asarray(t[class_id]), tuple(shape)


def patch_score(templates, patches, image):
    """``sum_i max_g <mu(c, g) | I restricted to patch i>``."""
    x = np.asarray(image, dtype=np.float64).reshape(-1)
    return math.fsum(float(np.max(fsum_dot(templates * m, x))) for m in patches)


def activity_maximize(model, class_id, layout: PatchLayout):
    """Sum over patches of the unit-normalized best restricted template.

    For each patch the nuisance with the largest restricted template norm
    wins; returns the image with the model's image shape.
    """
    t, shape = class_templates(model, class_id)
    out = np.zeros(t.shape[1])
    for m in layout.patches(shape):
        norms = np.sqrt(fsum_sq(t * m))
        g = int(np.argmax(norms))
        if norms[g] > 0:
            out += t[g] * m / norms[g]
    return out.reshape(shape)
