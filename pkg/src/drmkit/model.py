"""Domain types for the shallow RM, the deep RM and the evolutionary DRM.

All arrays are float64 and made read-only on construction, so model objects
can be shared freely. Constructors validate by default; pass ``checked=False``
to build a possibly invalid object and inspect it with :func:`validate`.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._numerics import fsum_sq, log_prior_product
from .errors import EnumerationTooLarge, ShapeError, ValidationError

PRIOR_TOL = 1e-12
DEFAULT_PATH_CAP = 10**6


def _frozen(a, dtype=np.float64):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


def as_image(data, dim=None):
    """Return ``data`` as a flat float64 vector, checking finiteness and size.

    Images are stored ``(channels, height, width)`` row-major; every engine
    works on the flattened view.
    """
    x = np.asarray(data, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ShapeError("image is empty")
    if not np.all(np.isfinite(x)):
        raise ValidationError("image has non-finite entries")
    if dim is not None and x.size != dim:
        raise ShapeError(f"image has {x.size} entries, model expects {dim}")
    return x


def normalize_image(x):
    """Unit-norm copy of ``x`` (opt-in; argmax decisions do not need it)."""
    x = np.asarray(x, dtype=np.float64)
    n = float(np.linalg.norm(x))
    return x / n if n > 0 else x.copy()


def _check_prior(name, p, out):
    p = np.asarray(p)
    if p.ndim != 1 or p.size == 0:
        out.append(f"{name} must be a non-empty vector")
        return
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        out.append(f"{name} has negative or non-finite entries")
    elif abs(math.fsum(p.tolist()) - 1.0) > PRIOR_TOL:
        out.append(f"{name} not normalized")


def _check_shape(name, image_shape, dim, out):
    if image_shape is None:
        return
    if any(int(s) < 1 for s in image_shape) or int(np.prod(image_shape)) != dim:
        out.append(f"{name} {tuple(image_shape)} does not match dimension {dim}")


@dataclass(frozen=True, eq=False)
class ShallowRM:
    """Gaussian rendering model with class prior, nuisance prior and templates.

    ``templates[c, g]`` is the rendered mean image for class ``c`` and nuisance
    ``g``; pixels share the isotropic noise variance ``noise_var``.
    """

    class_prior: np.ndarray
    nuisance_prior: np.ndarray
    templates: np.ndarray
    noise_var: float
    image_shape: Optional[tuple] = None
    checked: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "class_prior", _frozen(self.class_prior))
        object.__setattr__(self, "nuisance_prior", _frozen(self.nuisance_prior))
        object.__setattr__(self, "templates", _frozen(self.templates))
        object.__setattr__(self, "noise_var", float(self.noise_var))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.checked:
            problems = validate(self)
            if problems:
                raise ValidationError(problems)

    @property
    def n_classes(self):
        return self.templates.shape[0]

    @property
    def n_nuisances(self):
        return self.templates.shape[1]

    @property
    def dim(self):
        return self.templates.shape[2]

    @property
    def shape(self):
        return self.image_shape or (1, 1, self.dim)

    def replace(self, **changes):
        kw = dict(class_prior=self.class_prior, nuisance_prior=self.nuisance_prior,
                  templates=self.templates, noise_var=self.noise_var,
                  image_shape=self.image_shape)
        kw.update(changes)
        return ShallowRM(**kw)

    def __eq__(self, other):
        if not isinstance(other, ShallowRM):
            return NotImplemented
        return (self.noise_var == other.noise_var and self.image_shape == other.image_shape
                and _arrays_equal(self.class_prior, other.class_prior)
                and _arrays_equal(self.nuisance_prior, other.nuisance_prior)
                and _arrays_equal(self.templates, other.templates))


@dataclass(frozen=True, eq=False)
class NaturalParams:
    """Canonical-form weights ``w[c, g]`` and biases ``b[c, g]``."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "biases", _frozen(self.biases))
        if self.weights.shape[:2] != self.biases.shape:
            raise ShapeError("weights and biases disagree on (C, G)")


@dataclass(frozen=True, eq=False)
class DeepLevel:
    """One rendering level ``l``: maps ``mu^l`` (dim D^l) to ``mu^(l-1)``.

    transforms: ``(G, D^(l-1), D^l)``; biases: ``(G, D^(l-1))``;
    noise: diagonal of ``Psi^l``, shape ``(D^(l-1),)``; prior: ``(G,)``.
    """

    transforms: np.ndarray
    biases: np.ndarray
    noise: np.ndarray
    prior: np.ndarray

    def __post_init__(self):
        for name in ("transforms", "biases", "noise", "prior"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def n_nuisances(self):
        return self.transforms.shape[0]

    @property
    def dim_in(self):
        """Dimension of the coarser (upper) representation, D^l."""
        return self.transforms.shape[2]

    @property
    def dim_out(self):
        """Dimension of the finer (lower) representation, D^(l-1)."""
        return self.transforms.shape[1]

    def __eq__(self, other):
        if not isinstance(other, DeepLevel):
            return NotImplemented
        return all(_arrays_equal(getattr(self, n), getattr(other, n))
                   for n in ("transforms", "biases", "noise", "prior"))


@dataclass(frozen=True, eq=False)
class DeepRM:
    """Deep rendering model.

    ``levels`` is ordered from the coarsest level L down to level 1, matching
    the order of rendering. ``pixel_noise`` is the variance added to mu^0.
    """

    levels: tuple
    top_templates: np.ndarray
    top_prior: np.ndarray
    pixel_noise: float
    image_shape: Optional[tuple] = None
    checked: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "top_templates", _frozen(self.top_templates))
        object.__setattr__(self, "top_prior", _frozen(self.top_prior))
        object.__setattr__(self, "pixel_noise", float(self.pixel_noise))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.checked:
            problems = validate(self)
            if problems:
                raise ValidationError(problems)

    @property
    def n_classes(self):
        return self.top_templates.shape[0]

    @property
    def depth(self):
        return len(self.levels)

    @property
    def dim(self):
        return self.levels[-1].dim_out if self.levels else self.top_templates.shape[1]

    @property
    def shape(self):
        return self.image_shape or (1, 1, self.dim)

    @property
    def path_count(self):
        return self.n_classes * math.prod(lv.n_nuisances for lv in self.levels)

    def replace(self, **changes):
        kw = dict(levels=self.levels, top_templates=self.top_templates,
                  top_prior=self.top_prior, pixel_noise=self.pixel_noise,
                  image_shape=self.image_shape)
        kw.update(changes)
        return DeepRM(**kw)

    def __eq__(self, other):
        if not isinstance(other, DeepRM):
            return NotImplemented
        return (self.pixel_noise == other.pixel_noise and self.image_shape == other.image_shape
                and len(self.levels) == len(other.levels)
                and all(a == b for a, b in zip(self.levels, other.levels))
                and _arrays_equal(self.top_templates, other.top_templates)
                and _arrays_equal(self.top_prior, other.top_prior))


@dataclass(frozen=True)
class RenderingPath:
    """A configuration ``(c^L, g^L, ..., g^1)``; ``switches`` is optional."""

    class_id: int
    nuisance_ids: tuple = ()
    switches: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "nuisance_ids", tuple(int(g) for g in self.nuisance_ids))
        if self.switches is not None:
            object.__setattr__(self, "switches", tuple(bool(a) for a in self.switches))

    def as_tuple(self):
        return (self.class_id,) + self.nuisance_ids

    def check(self, cardinalities):
        """Raise if an index falls outside ``(|C|, |G^L|, ..., |G^1|)``."""
        idx = self.as_tuple()
        if len(idx) != len(cardinalities):
            raise ValidationError(f"path has {len(idx)} entries, model needs {len(cardinalities)}")
        for i, (v, n) in enumerate(zip(idx, cardinalities)):
            if not 0 <= v < n:
                raise ValidationError(f"path entry {i} = {v} outside [0, {n})")


@dataclass(frozen=True, eq=False)
class EvoDRM:
    """Evolutionary DRM: root templates plus an additive mutation per level.

    ``mutations[i]`` has shape ``(G, D)`` for level ``L - i``. Leaf templates
    are ``root[c] + sum_l mutations_l[g_l]``. ``leaf_histograms`` (optional) has
    one label distribution per leaf, leaves enumerated like collapsed paths.
    """

    root_templates: np.ndarray
    mutations: tuple
    class_prior: np.ndarray
    nuisance_priors: tuple
    pixel_noise: float
    leaf_histograms: Optional[np.ndarray] = None
    image_shape: Optional[tuple] = None
    checked: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "root_templates", _frozen(self.root_templates))
        object.__setattr__(self, "mutations", tuple(_frozen(m) for m in self.mutations))
        object.__setattr__(self, "class_prior", _frozen(self.class_prior))
        object.__setattr__(self, "nuisance_priors", tuple(_frozen(p) for p in self.nuisance_priors))
        object.__setattr__(self, "pixel_noise", float(self.pixel_noise))
        if self.leaf_histograms is not None:
            object.__setattr__(self, "leaf_histograms", _frozen(self.leaf_histograms))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.checked:
            problems = validate(self)
            if problems:
                raise ValidationError(problems)

    @property
    def n_classes(self):
        return self.root_templates.shape[0]

    @property
    def depth(self):
        return len(self.mutations)

    @property
    def dim(self):
        return self.root_templates.shape[1]

    @property
    def shape(self):
        return self.image_shape or (1, 1, self.dim)

    @property
    def path_count(self):
        return self.n_classes * math.prod(m.shape[0] for m in self.mutations)

    def to_deep(self, level_noise=1e-12):
        """Equivalent DeepRM with ``Lambda(g) = [1 | alpha(g)]``."""
        d = self.dim
        levels = []
        for mut, prior in zip(self.mutations, self.nuisance_priors):
            g = mut.shape[0]
            levels.append(DeepLevel(np.broadcast_to(np.eye(d), (g, d, d)), mut,
                                    np.full(d, level_noise), prior))
        return DeepRM(levels, self.root_templates, self.class_prior, self.pixel_noise,
                      image_shape=self.image_shape)

    def __eq__(self, other):
        if not isinstance(other, EvoDRM):
            return NotImplemented
        if (self.leaf_histograms is None) != (other.leaf_histograms is None):
            return False
        return (self.pixel_noise == other.pixel_noise and self.image_shape == other.image_shape
                and len(self.mutations) == len(other.mutations)
                and _arrays_equal(self.root_templates, other.root_templates)
                and _arrays_equal(self.class_prior, other.class_prior)
                and all(_arrays_equal(a, b) for a, b in zip(self.mutations, other.mutations))
                and all(_arrays_equal(a, b) for a, b in zip(self.nuisance_priors, other.nuisance_priors))
                and (self.leaf_histograms is None
                     or _arrays_equal(self.leaf_histograms, other.leaf_histograms)))


def _arrays_equal(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def validate(model):
    """List every invariant violation of ``model``; empty means valid."""
    out = []
    if isinstance(model, ShallowRM):
        t = model.templates
        if t.ndim != 3:
            return ["templates must have shape (C, G, D)"]
        _check_prior("class_prior", model.class_prior, out)
        _check_prior("nuisance_prior", model.nuisance_prior, out)
        if model.class_prior.shape[:1] != t.shape[:1]:
            out.append("class_prior length does not match templates")
        if model.nuisance_prior.shape[:1] != t.shape[1:2]:
            out.append("nuisance_prior length does not match templates")
        if not np.all(np.isfinite(t)):
            out.append("templates not finite")
        if not (model.noise_var > 0 and math.isfinite(model.noise_var)):
            out.append("noise_var must be positive")
        _check_shape("image_shape", model.image_shape, t.shape[2], out)
    elif isinstance(model, DeepRM):
        mu = model.top_templates
        if mu.ndim != 2:
            return ["top_templates must have shape (C, D^L)"]
        _check_prior("top_prior", model.top_prior, out)
        if model.top_prior.shape[:1] != mu.shape[:1]:
            out.append("top_prior length does not match top_templates")
        if not np.all(np.isfinite(mu)):
            out.append("top_templates not finite")
        if not (model.pixel_noise > 0 and math.isfinite(model.pixel_noise)):
            out.append("pixel_noise must be positive")
        if not model.levels:
            out.append("DeepRM needs at least one level")
        upper = mu.shape[1]
        for i, lv in enumerate(model.levels):
            name = f"level {model.depth - i}"
            if lv.transforms.ndim != 3:
                out.append(f"{name} transforms must have shape (G, D_out, D_in)")
                continue
            g, d_out, d_in = lv.transforms.shape
            if d_in != upper:
                out.append("level dimension mismatch")
            if lv.biases.shape != (g, d_out):
                out.append(f"{name} biases shape {lv.biases.shape} != {(g, d_out)}")
            if lv.noise.shape != (d_out,):
                out.append(f"{name} noise shape {lv.noise.shape} != {(d_out,)}")
            elif not np.all(lv.noise > 0):
                out.append(f"{name} noise entries must be > 0")
            if lv.prior.shape != (g,):
                out.append(f"{name} prior length does not match transforms")
            _check_prior(f"{name} prior", lv.prior, out)
            if not (np.all(np.isfinite(lv.transforms)) and np.all(np.isfinite(lv.biases))):
                out.append(f"{name} parameters not finite")
            upper = d_out
        if model.levels and not out:
            _check_shape("image_shape", model.image_shape, model.dim, out)
    elif isinstance(model, EvoDRM):
        r = model.root_templates
        if r.ndim != 2:
            return ["root_templates must have shape (C, D)"]
        _check_prior("class_prior", model.class_prior, out)
        if model.class_prior.shape[:1] != r.shape[:1]:
            out.append("class_prior length does not match root_templates")
        if len(model.mutations) != len(model.nuisance_priors):
            out.append("one nuisance prior per mutation level required")
        for i, (m, p) in enumerate(zip(model.mutations, model.nuisance_priors)):
            name = f"level {model.depth - i}"
            if m.ndim != 2 or m.shape[0] < 1:
                out.append(f"{name} needs at least one child mutation")
                continue
            if m.shape[1] != r.shape[1]:
                out.append(f"{name} mutation dimension differs from template dimension")
            if p.shape != (m.shape[0],):
                out.append(f"{name} prior length does not match mutations")
            _check_prior(f"{name} prior", p, out)
            if not np.all(np.isfinite(m)):
                out.append(f"{name} mutations not finite")
        if not np.all(np.isfinite(r)):
            out.append("root_templates not finite")
        if not (model.pixel_noise > 0 and math.isfinite(model.pixel_noise)):
            out.append("pixel_noise must be positive")
        h = model.leaf_histograms
        if h is not None and not out:
            if h.ndim != 2 or h.shape[0] != model.path_count:
                out.append("leaf_histograms needs one row per leaf")
            else:
                for row in h:
                    _check_prior("leaf histogram", row, out)
                    if out:
                        break
        _check_shape("image_shape", model.image_shape, r.shape[1], out)
    else:
        out.append(f"unsupported model type {type(model).__name__}")
    return out


def ensure_valid(model):
    problems = validate(model)
    if problems:
        raise ValidationError(problems)
    return model


def to_natural(model: ShallowRM) -> NaturalParams:
    """Traditional -> natural parameters.

    ``w = mu / sigma^2`` and ``b = -||mu||^2 / (2 sigma^2) + ln(pi_c pi_g)``.
    The minus sign makes ``<w|I> + b`` equal the log posterior up to a term
    that depends on ``I`` only.
    """
    ensure_valid(model)
    s2 = model.noise_var
    w = model.templates / s2
    b = -fsum_sq(model.templates) / (2.0 * s2) + log_prior_product(
        model.class_prior, model.nuisance_prior)
    return NaturalParams(w, b)


def nuisance_tuples(model):
    """All ``(g^L, ..., g^1)`` combinations in collapsed-index order."""
    if isinstance(model, EvoDRM):
        sizes = [m.shape[0] for m in model.mutations]
    else:
        sizes = [lv.n_nuisances for lv in model.levels]
    return list(itertools.product(*(range(n) for n in sizes)))


def path_to_index(model, nuisance_ids: Sequence[int]) -> int:
    """Collapsed nuisance index of ``(g^L, ..., g^1)`` (level L varies slowest)."""
    sizes = ([m.shape[0] for m in model.mutations] if isinstance(model, EvoDRM)
             else [lv.n_nuisances for lv in model.levels])
    return int(np.ravel_multi_index(tuple(nuisance_ids), sizes)) if sizes else 0


def index_to_path(model, class_id, index) -> RenderingPath:
    sizes = ([m.shape[0] for m in model.mutations] if isinstance(model, EvoDRM)
             else [lv.n_nuisances for lv in model.levels])
    ids = np.unravel_index(int(index), sizes) if sizes else ()
    return RenderingPath(class_id, tuple(int(i) for i in ids))


def collapse(model, cap: int = DEFAULT_PATH_CAP) -> ShallowRM:
    """Enumerate every rendering path of a DeepRM/EvoDRM as a ShallowRM.

    The nuisance axis of the result indexes ``(g^L, ..., g^1)`` tuples in
    C order; its prior is the product of level priors. Level noise is not
    carried over, only ``pixel_noise``.
    """
    if isinstance(model, EvoDRM):
        ensure_valid(model)
        if model.path_count > cap:
            raise EnumerationTooLarge(f"{model.path_count} paths exceed cap {cap}")
        x = model.root_templates[:, None, :]
        prior = np.ones(1)
        for mut, p in zip(model.mutations, model.nuisance_priors):
            x = (x[:, :, None, :] + mut[None, None, :, :]).reshape(x.shape[0], -1, x.shape[2])
            prior = np.outer(prior, p).reshape(-1)
        return ShallowRM(model.class_prior, _renormalize(prior), x, model.pixel_noise,
                         image_shape=model.image_shape)
    if not isinstance(model, DeepRM):
        raise TypeError("collapse expects a DeepRM or EvoDRM")
    ensure_valid(model)
    if model.path_count > cap:
        raise EnumerationTooLarge(f"{model.path_count} paths exceed cap {cap}")
    x = model.top_templates[:, None, :]
    prior = np.ones(1)
    for lv in model.levels:
        y = np.einsum("gij,cpj->cpgi", lv.transforms, x) + lv.biases[None, None, :, :]
        x = y.reshape(x.shape[0], -1, lv.dim_out)
        prior = np.outer(prior, lv.prior).reshape(-1)
    return ShallowRM(model.top_prior, _renormalize(prior), x, model.pixel_noise,
                     image_shape=model.image_shape)


def _renormalize(p):
    # products of normalized priors drift by a few ulps
    return p / math.fsum(p.tolist())
