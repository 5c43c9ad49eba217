import math

import numpy as np
import pytest

from drmkit import ValidationError, collapse, io
from drmkit.deep import random_deep
from drmkit.model import path_to_index
from drmkit.relax import TrainConfig, relax, sgd_train
from drmkit.workbench import (disentanglement_model, generate, linear_probe,
                              net_representations, path_targets, probe, random_evo,
                              random_shallow, rise_then_fall, spearman)

MODELS = {
    "shallow": lambda: random_shallow(3, 2, 4, seed=0),
    "deep": lambda: random_deep((2, 3, 5), (2, 3), 2, seed=1),
    "evo": lambda: random_evo(2, (2, 3), 4, seed=2),
}


@pytest.mark.parametrize("name", sorted(MODELS))
def test_noiseless_images_are_templates(name):
    m = MODELS[name]()
    ds = generate(m, 50, seed=3, noise=False)
    sh = m if name == "shallow" else collapse(m)
    for x, p in zip(ds.flat, ds.paths):
        k = p[1] if name == "shallow" else path_to_index(m, tuple(p[1:]))
        want = sh.templates[p[0], k].astype(np.float32).astype(np.float64)
        assert np.allclose(x, want, rtol=0, atol=1e-6)


@pytest.mark.parametrize("name", sorted(MODELS))
def test_same_seed_same_bytes(name):
    m = MODELS[name]()
    assert io.dataset_bytes(generate(m, 30, 4)) == io.dataset_bytes(generate(m, 30, 4))
    assert io.dataset_bytes(generate(m, 30, 4)) != io.dataset_bytes(generate(m, 30, 5))


def test_path_frequencies():
    m = random_shallow(3, 4, 2, seed=5)
    n = 10_000
    ds = generate(m, n, seed=6)
    joint = np.outer(m.class_prior, m.nuisance_prior)
    counts = np.zeros_like(joint)
    np.add.at(counts, (ds.paths[:, 0], ds.paths[:, 1]), 1)
    sd = np.sqrt(n * joint * (1 - joint))
    assert np.all(np.abs(counts - n * joint) <= 3 * sd)


def test_invalid_generate():
    with pytest.raises(ValidationError):
        generate(MODELS["shallow"](), 0, 1)


class TestProbe:
    def test_one_hot(self):
        y = np.random.default_rng(0).integers(0, 4, 200)
        assert linear_probe(np.eye(4)[y], y).accuracy == 1.0

    def test_shuffled_labels_at_chance(self):
        rng = np.random.default_rng(1)
        n = 600
        F = rng.normal(size=(n, 5))
        y = rng.permutation(np.arange(n) % 3)
        r = linear_probe(F, y, seed=2)
        n_test = n - round(0.7 * n)
        assert abs(r.accuracy - 1 / 3) <= 3 * math.sqrt((1 / 3) * (2 / 3) / n_test)

    def test_needs_two_classes(self):
        with pytest.raises(ValidationError):
            linear_probe(np.zeros((10, 2)), np.zeros(10, dtype=int))

    def test_report_shape(self):
        rng = np.random.default_rng(3)
        y = rng.integers(0, 2, 50)
        rep = probe({"a": np.eye(2)[y], "b": rng.normal(size=(50, 3))}, {"c": y})
        assert rep.layers == ["a", "b"] and rep.variables == ["c"]
        assert all(0.0 <= v <= 1.0 for layer in rep.accuracy.values() for v in layer.values())

    def test_trained_net_class_trend(self):
        m = disentanglement_model(1)
        ds = generate(m, 900, seed=2)
        net = sgd_train(relax(m), ds.flat, ds.labels, TrainConfig(1e-3, 32, 2, seed=0)).net
        rep = probe(net_representations(net, ds.flat), path_targets(ds))
        assert len(rep.layers) >= 3
        assert spearman(rep.profile("c")) > 0


def test_spearman():
    assert spearman([1, 2, 3]) == pytest.approx(1.0)
    assert spearman([3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 1, 1]) == 0.0


def test_rise_then_fall():
    assert rise_then_fall([0.5, 0.9, 0.4])
    assert not rise_then_fall([0.9, 0.8, 0.4])
    assert not rise_then_fall([0.5, 0.52, 0.5])
