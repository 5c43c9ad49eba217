"""Brute-force ground truth by exhaustive enumeration.

Everything here is computed from squared distances ``||I - mu||^2`` with
compensated summation, never from the natural parameters the fast engines
use, so the two routes stay independent.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import EnumerationTooLarge, ValidationError
from .model import DEFAULT_PATH_CAP, DeepRM, EvoDRM, ShallowRM, as_image, collapse

MAX_DIM = 10**4


@dataclass(frozen=True)
class EnumerationReport:
    """Per-configuration log joints ``ln p(c, g, I)`` and their summaries."""

    log_joint: np.ndarray          # (C, G)
    map_config: tuple              # (c, g), lowest index on ties
    map_log_joint: float
    class_log_marginal: np.ndarray  # (C,)
    log_partition: float           # ln p(I)


def _log_sum(values):
    values = [v for v in values if v != -math.inf]
    if not values:
        return -math.inf
    m = max(values)
    return m + math.log(math.fsum(math.exp(v - m) for v in values))


def _as_shallow(model, cap):
    if isinstance(model, (DeepRM, EvoDRM)):
        return collapse(model, cap=cap)
    if isinstance(model, ShallowRM):
        return model
    raise TypeError(f"oracle cannot enumerate {type(model).__name__}")


def enumerate_configs(model, image, cap: int = DEFAULT_PATH_CAP) -> EnumerationReport:
    """Score every (class, nuisance) configuration exactly."""
    shallow = _as_shallow(model, cap)
    n_cfg = shallow.n_classes * shallow.n_nuisances
    if n_cfg > cap:
        raise EnumerationTooLarge(f"{n_cfg} configurations exceed cap {cap}")
    if shallow.dim > MAX_DIM:
        raise EnumerationTooLarge(f"dimension {shallow.dim} exceeds oracle cap {MAX_DIM}")
    x = as_image(image, shallow.dim).tolist()
    s2 = shallow.noise_var
    d = shallow.dim
    norm_const = -0.5 * d * math.log(2.0 * math.pi * s2)
    C, G = shallow.n_classes, shallow.n_nuisances
    lj = np.empty((C, G))
    best, best_cfg = -math.inf, (0, 0)
    for c in range(C):
        pc = float(shallow.class_prior[c])
        for g in range(G):
            pg = float(shallow.nuisance_prior[g])
            if pc == 0.0 or pg == 0.0:
                v = -math.inf
            else:
                mu = shallow.templates[c, g].tolist()
                sq = math.fsum((xi - mi) ** 2 for xi, mi in zip(x, mu))
                v = math.log(pc) + math.log(pg) - sq / (2.0 * s2) + norm_const
            lj[c, g] = v
            if v > best:
                best, best_cfg = v, (c, g)
    marg = np.array([_log_sum(lj[c].tolist()) for c in range(C)])
    return EnumerationReport(lj, best_cfg, best, marg, _log_sum(lj.reshape(-1).tolist()))


def exact_map(model, image, cap: int = DEFAULT_PATH_CAP):
    """Exact ``argmax_{c,g} ln p(c, g) + ln N(I; mu_cg, sigma^2 1)``.

    Returns ``((c, g), log_joint)``. For deep models ``g`` is the collapsed
    nuisance index (see :func:`drmkit.model.index_to_path`).
    """
    rep = enumerate_configs(model, image, cap)
    return rep.map_config, rep.map_log_joint


def exact_marginal(model, image, cap: int = DEFAULT_PATH_CAP):
    """Per-class ``ln sum_g p(I, c, g)``."""
    return enumerate_configs(model, image, cap).class_log_marginal


def exact_entropy(labels) -> float:
    """Shannon entropy of a label multiset, in bits (0 log 0 = 0)."""
    counts = Counter(np.asarray(labels).reshape(-1).tolist())
    n = sum(counts.values())
    if n == 0:
        raise ValidationError("entropy of an empty multiset")
    h = -math.fsum((k / n) * math.log2(k / n) for k in counts.values())
    return h + 0.0  # turn -0.0 into 0.0
