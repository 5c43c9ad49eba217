import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drmkit import ShallowRM, ValidationError
from drmkit.oracle import exact_map, exact_marginal
from drmkit.shallow import (TranslationalSpec, complete_log_likelihood, dropout_em_train,
                            em_train, expand_translational, hard_e_step, init_from_data,
                            ms_classify, ms_classify_relu, ms_classify_translational, relu,
                            sample_shallow, sp_classify, sp_log_offset, switch_max)

I = np.array([0.9, -0.1])


def random_model(seed, C=3, G=4, D=5, s2=0.5):
    rng = np.random.default_rng(seed)
    return ShallowRM(rng.dirichlet(np.ones(C)), rng.dirichlet(np.ones(G)),
                     rng.normal(size=(C, G, D)), s2)


class TestSumProduct:
    def test_toy(self, toy2x2):
        r = sp_classify(toy2x2, I)
        assert r.class_id == 0
        k1 = math.exp(0.9) + math.exp(-0.1)
        k2 = math.exp(-0.9) + math.exp(0.1)
        assert r.scores[0] - r.scores[1] == pytest.approx(math.log(k1 / k2), abs=1e-12)

    def test_single_nuisance_matches_max_sum(self):
        m = random_model(3, G=1)
        rng = np.random.default_rng(4)
        for _ in range(20):
            x = rng.normal(size=5)
            assert sp_classify(m, x).class_id == ms_classify(m, x).class_id

    def test_separated_templates(self):
        m = random_model(5, s2=0.01)
        m = m.replace(templates=m.templates * 20)
        assert sp_classify(m, m.templates[1, 2]).class_id == 1

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_offset_gives_exact_evidence(self, seed):
        m = random_model(seed)
        x = np.random.default_rng(seed + 1).normal(size=5)
        got = sp_classify(m, x).scores + sp_log_offset(m, x)
        want = exact_marginal(m, x)
        assert np.allclose(got, want, rtol=1e-9, atol=0)


class TestMaxSum:
    def test_toy(self, toy2x2):
        r = ms_classify(toy2x2, I)
        assert r.best_path == (0, 0)
        assert r.score == pytest.approx(0.9 - 0.5 + math.log(0.25), abs=1e-15)

    def test_self_match(self, toy2x2):
        m = toy2x2.replace(noise_var=1e-3)
        assert ms_classify(m, m.templates[1, 1]).best_path == (1, 1)

    def test_identical_templates_tie(self):
        t = np.ones((2, 2, 3))
        assert ms_classify(ShallowRM([0.3, 0.7], [0.5, 0.5], t, 1.0), np.zeros(3)).best_path == (1, 0)
        assert ms_classify(ShallowRM([0.5, 0.5], [0.5, 0.5], t, 1.0), np.zeros(3)).best_path == (0, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_enumeration(self, seed):
        m = random_model(seed)
        x = np.random.default_rng(seed + 7).normal(size=5)
        assert ms_classify(m, x).best_path == exact_map(m, x)[0]

    def test_normalize_flag(self, toy2x2):
        a = ms_classify(toy2x2, [9.0, -1.0], normalize=True)
        b = ms_classify(toy2x2, np.array([9.0, -1.0]) / math.hypot(9.0, 1.0))
        assert a.scores.tolist() == b.scores.tolist()


class TestReLU:
    def test_branches(self):
        assert switch_max(2.0)[0] == 2.0 and bool(switch_max(2.0)[1])
        v, on = switch_max(-3.0)
        assert v == 0.0 and not bool(on)
        assert relu(-3.0) == 0.0

    def test_against_two_branch_enumeration(self):
        rng = np.random.default_rng(11)
        m = random_model(12, C=3, G=2, D=4)
        p = 0.3
        for _ in range(100):
            x = rng.normal(size=4)
            r = ms_classify_relu(m, p, x)
            lp = np.log(m.class_prior)[:, None] + np.log(m.nuisance_prior)[None, :]
            s2 = m.noise_var
            on = (m.templates @ x) / s2 - (m.templates ** 2).sum(-1) / (2 * s2) + math.log(p) + lp
            off = math.log(1 - p) + lp
            brute = np.maximum(on, off)
            c, g = np.unravel_index(np.argmax(brute), brute.shape)
            assert r.class_id == c
            assert r.score == pytest.approx(brute[c, g], abs=1e-10)
            assert r.best_path[2] == bool(on[c, g] > off[c, g])

    def test_bad_prior(self, toy2x2):
        with pytest.raises(ValidationError):
            ms_classify_relu(toy2x2, 1.0, I)


class TestTranslational:
    def test_one_d(self):
        r = ms_classify_translational([[1.0, -1.0]], TranslationalSpec((2,)), [0.0, 1.0, 0.0, 2.0])
        assert r.correlations[0].tolist() == [-1.0, 1.0, -2.0]
        assert r.best_offset == 1 and r.offset_position == (0, 1)
        assert r.score == pytest.approx(math.log(1 / 3), abs=1e-15)

    def test_delta(self):
        x = np.array([0.3, -2.0, 4.5, 1.0, 4.4])
        r = ms_classify_translational([[1.0]], TranslationalSpec((1,)), x)
        assert r.best_offset == int(np.argmax(x))
        assert r.correlations.max() == x.max()

    def test_stride(self):
        r = ms_classify_translational([[1.0, -1.0]], TranslationalSpec((2,), 2), [0.0, 1.0, 0.0, 2.0])
        assert r.correlations[0].tolist() == [-1.0, -2.0]
        assert r.best_offset == 0

    def test_matches_expanded(self):
        rng = np.random.default_rng(2)
        t = rng.normal(size=(3, 2, 3))
        spec = TranslationalSpec((2, 3), 1)
        x = rng.normal(size=(5, 6))
        r = ms_classify_translational(t, spec, x, noise_var=0.7)
        e = ms_classify(expand_translational(t, spec, (5, 6), noise_var=0.7), x.reshape(-1))
        assert r.score == e.score
        assert (r.class_id, r.best_offset) == e.best_path


class TestEM:
    def test_two_point_update(self):
        init = ShallowRM([0.5, 0.5], [1.0], [[[0.0, 0.0]], [[2.0, 2.0]]], 1.0)
        X = np.array([[0.1, 0.0], [1.9, 2.1]])
        assert hard_e_step(init, X)[0].tolist() == [[0, 0], [1, 0]]
        m = em_train(X, init, 1).model
        assert m.templates[0, 0].tolist() == [0.1, 0.0]
        assert m.templates[1, 0].tolist() == [1.9, 2.1]

    def test_noiseless_fixed_point(self):
        init = random_model(1, C=2, G=2, D=3).replace(class_prior=[0.5, 0.5],
                                                      nuisance_prior=[0.5, 0.5])
        X = init.templates.reshape(4, 3)
        m = em_train(X, init, 3).model
        assert np.array_equal(m.templates, init.templates)
        assert np.array_equal(m.class_prior, init.class_prior)
        assert np.array_equal(m.nuisance_prior, init.nuisance_prior)

    def test_trace_monotone(self):
        truth = random_model(8, C=2, G=3, D=4, s2=0.3)
        rng = np.random.default_rng(9)
        X = np.array([sample_shallow(truth, rng)[0] for _ in range(150)])
        res = em_train(X, init_from_data(X, 2, 3, seed=1), 15)
        assert all(b >= a - 1e-9 for a, b in zip(res.trace, res.trace[1:]))

    def test_trace_is_complete_likelihood(self):
        truth = random_model(2, C=2, G=2, D=3)
        X = np.array([sample_shallow(truth, np.random.default_rng(k))[0] for k in range(30)])
        init = init_from_data(X, 2, 2, seed=0)
        res = em_train(X, init, 1)
        a = hard_e_step(init, X)[0]
        assert res.trace[0] == complete_log_likelihood(res.model, X, a)

    def test_supervised_clamps_class(self):
        truth = random_model(4, C=2, G=2, D=3)
        rng = np.random.default_rng(0)
        pairs = [sample_shallow(truth, rng) for _ in range(40)]
        X = np.array([p[0] for p in pairs])
        y = np.array([p[1][0] for p in pairs])
        init = init_from_data(X, 2, 2, seed=0, labels=y)
        a = hard_e_step(init, X, labels=y)[0]
        assert np.array_equal(a[:, 0], y)

    def test_rejects_bad_iters(self, toy2x2):
        with pytest.raises(ValidationError):
            em_train(np.zeros((2, 2)), toy2x2, 0)


class TestDropout:
    def data(self):
        rng = np.random.default_rng(3)
        return np.concatenate([rng.normal(0, 0.1, (10, 4)), rng.normal(2, 0.1, (10, 4))])

    def test_zero_rate_is_plain_em(self):
        X = self.data()
        init = init_from_data(X, 1, 2, seed=0)
        a = em_train(X, init, 5)
        b = dropout_em_train(X, init, 5, 0.0, 1, seed=123)
        assert a.model == b.model
        assert a.trace == b.trace

    def test_rate_one_rejected(self):
        X = self.data()
        with pytest.raises(ValidationError):
            dropout_em_train(X, init_from_data(X, 1, 2), 1, 1.0)

    def test_statistics_from_logged_masks(self):
        X = self.data()
        init = init_from_data(X, 1, 2, seed=0)
        res = dropout_em_train(X, init, 3, 0.5, masks_per_epoch=2, seed=7)
        model = init
        for log in res.epochs:
            assert np.array_equal(hard_e_step(model, X, masks=log.masks), log.assignments)
            counts = np.zeros((1, 2))
            wsum = np.zeros((1, 2, 4))
            wts = np.zeros((1, 2, 4))
            for t in range(log.masks.shape[0]):
                for n in range(X.shape[0]):
                    c, g = log.assignments[t, n]
                    if c < 0:
                        continue
                    counts[c, g] += 1
                    for d in range(4):
                        if log.masks[t, n, d]:
                            wsum[c, g, d] += X[n, d]
                            wts[c, g, d] += 1
            assert np.array_equal(counts, log.counts)
            assert np.allclose(wsum, log.weighted_sum, rtol=0, atol=1e-12)
            assert np.array_equal(wts, log.weight)
            mu = np.where(wts > 0, wsum / np.maximum(wts, 1), model.templates)
            model = model.replace(templates=mu)
        assert np.allclose(res.model.templates, model.templates, rtol=0, atol=1e-12)

    def test_per_sample_masks(self):
        X = self.data()
        res = dropout_em_train(X, init_from_data(X, 1, 2), 1, 0.5, seed=0, per_sample=True)
        m = res.epochs[0].masks[0]
        assert all(row.all() or not row.any() for row in m)


def test_sample_noiseless(toy2x2):
    x, (c, g) = sample_shallow(toy2x2, np.random.default_rng(0), noise=False)
    assert np.array_equal(x, toy2x2.templates[c, g])
