import itertools
import math

import numpy as np
import pytest

from drmkit import DeepLevel, DeepRM, NumericalError, RenderingPath, ValidationError, collapse
from drmkit.deep import (PatchLayout, activity_maximize, batchnorm_estep, certified_deep,
                         class_templates, em_train_deep, f2c_certificate, fa_regression,
                         feature_maps, infer_f2c, infer_f2c_meanpool, patch_score, path_log_joint,
                         random_deep, regularized_pinv, render, sample, softmax_head)
from drmkit.model import ShallowRM, path_to_index
from drmkit.oracle import exact_map


TINY = 1e-12   # level noise small enough for W = Lambda^dagger to be the plain pseudoinverse


def identity_level(d):
    return DeepLevel(np.eye(d)[None], np.zeros((1, d)), np.full(d, TINY), [1.0])


def hand_two_level():
    l2 = DeepLevel(np.array([[[1.0], [0.0]]]), np.zeros((1, 2)), np.full(2, 1e-6), [1.0])
    l1 = DeepLevel(np.eye(2)[None], np.array([[0.0, 1.0]]), np.full(2, 1e-6), [1.0])
    return DeepRM([l2, l1], [[1.0]], [1.0], 1e-4)


def selector():
    """One level whose two candidates copy the latent into pixel 0 or pixel 1."""
    T = np.array([[[1.0], [0.0]], [[0.0], [1.0]]])
    return DeepRM([DeepLevel(T, np.zeros((2, 2)), np.full(2, TINY), [0.5, 0.5])], [[1.0]], [1.0], 1.0)


class TestSampling:
    def test_identity_chain(self):
        top = np.array([[0.5, -1.0, 2.0]])
        m = DeepRM([identity_level(3), identity_level(3)], top, [1.0], 0.1)
        assert np.array_equal(sample(m, noise=False).image, top[0])

    def test_hand_model(self):
        s = sample(hand_two_level(), RenderingPath(0, (0, 0)), noise=False)
        assert s.image.tolist() == [1.0, 1.0]
        assert [v.tolist() for v in s.intermediates] == [[1.0], [1.0, 0.0], [1.0, 1.0]]

    def test_noiseless_paths_hit_collapsed_templates(self):
        m = random_deep((2, 3, 5), (2, 3), 3, seed=4)
        sh = collapse(m)
        rng = np.random.default_rng(0)
        for _ in range(300):
            s = sample(m, rng=rng, noise=False)
            k = path_to_index(m, s.path.nuisance_ids)
            assert np.allclose(s.image, sh.templates[s.path.class_id, k], rtol=0, atol=1e-12)

    def test_render_depth(self):
        m = random_deep((2, 3, 4, 5), (2, 2, 2), 2, seed=0)
        out = render(m, RenderingPath(1, (0, 1, 1)), noise=False)
        assert [v.size for v in out] == [2, 3, 4, 5]


class TestF2C:
    def test_two_candidates(self):
        r = infer_f2c(selector(), [3.0, 5.0])
        assert r.feature_maps[1][0] == pytest.approx(5.0, rel=1e-10)
        assert r.unit_choices[0].tolist() == [1]
        assert r.path == RenderingPath(0, (1,))

    def test_meanpool(self):
        assert feature_maps(selector(), [3.0, 5.0], pool="mean")[1][0] == pytest.approx(4.0, rel=1e-10)

    def test_identity_drm(self):
        top = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
        m = DeepRM([identity_level(3), identity_level(3)], top, np.full(3, 1 / 3), 1.0)
        x = np.array([0.2, 0.9, 0.1])
        r = infer_f2c(m, x)
        assert np.allclose(r.feature_maps[-1], x, rtol=1e-10, atol=0)
        want = top @ x - 0.5 * (top ** 2).sum(1)
        assert r.class_id == int(np.argmax(want))

    def test_singleton_meanpool_equals_maxpool(self):
        m = DeepRM([identity_level(3)], [[1.0, 2.0, 0.0], [0.0, 1.0, 1.0]], [0.4, 0.6], 0.5)
        x = np.array([0.3, -0.2, 1.0])
        assert np.array_equal(infer_f2c_meanpool(m, x), infer_f2c(m, x).class_scores)

    def test_equal_candidates_mean(self):
        T = np.stack([np.eye(2), np.eye(2)])
        m = DeepRM([DeepLevel(T, np.zeros((2, 2)), np.full(2, TINY), [0.5, 0.5])], [[1.0, 1.0]], [1.0], 1.0)
        x = np.array([0.7, -0.4])
        assert np.array_equal(feature_maps(m, x, "mean")[1], feature_maps(m, x)[1])

    def test_certified_matches_enumeration(self):
        rng = np.random.default_rng(0)
        checked = 0
        for k in range(120):
            m = certified_deep((2, 4, 8), (2, 2), 2, seed=k, disjoint_nuisances=k % 2 == 0)
            x = np.abs(sample(m, rng=rng).image)
            if not f2c_certificate(m, x).exact:
                continue
            r = infer_f2c(m, x)
            cfg, lj = exact_map(m, x)
            assert (r.path.class_id, path_to_index(m, r.path.nuisance_ids)) == cfg
            assert r.path_log_joint == pytest.approx(lj, rel=1e-12)
            checked += 1
        assert checked >= 60

    def test_nonnegativity_alone_is_not_enough(self):
        T = np.stack([np.eye(2), np.array([[0.0, 1.0], [1.0, 0.0]])])
        lv = DeepLevel(T, np.zeros((2, 2)), np.ones(2), [0.5, 0.5])
        m = DeepRM([lv], [[1.0, 1.0], [1.6, 0.0]], [0.5, 0.5], 1.0)
        x = np.array([3.0, 0.0])
        cert = f2c_certificate(m, x)
        assert cert.nonnegative and not cert.consistent
        assert infer_f2c(m, x).class_id == 0
        assert exact_map(m, x)[0][0] == 1

    def test_path_log_joint_matches_oracle(self):
        m = random_deep((2, 3, 4), (2, 2), 2, seed=3)
        x = np.random.default_rng(1).normal(size=4)
        sh = collapse(m)
        from drmkit.oracle import enumerate_configs
        table = enumerate_configs(sh, x).log_joint
        for c, g2, g1 in itertools.product(range(2), range(2), range(2)):
            p = RenderingPath(c, (g2, g1))
            want = table[c, path_to_index(m, (g2, g1))]
            assert path_log_joint(m, p, x) == pytest.approx(want, rel=1e-12)


class TestFilters:
    def test_pinv_of_orthonormal_is_transpose(self):
        q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 3)))
        assert np.allclose(regularized_pinv(q, np.full(5, TINY)), q.T, atol=1e-10)

    def test_unit_noise_shrinks(self):
        q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 3)))
        assert np.allclose(regularized_pinv(q, np.ones(5)), q.T / 2, atol=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(1)
        lam, psi = rng.normal(size=(4, 2)), rng.uniform(0.1, 1.0, 4)
        want = lam.T @ np.linalg.inv(np.diag(psi) + lam @ lam.T)
        assert np.allclose(regularized_pinv(lam, psi), want, atol=1e-12)

    def test_rank_deficient(self):
        lam = np.array([[1.0, 1.0], [1.0, 1.0]])
        assert np.allclose(regularized_pinv(lam, np.full(2, TINY)), np.linalg.pinv(lam), atol=1e-9)


class TestHead:
    def test_uniform(self):
        assert np.allclose(softmax_head(np.zeros(2), np.zeros((3, 2)), np.zeros(3)), 1 / 3)

    def test_two_to_one(self):
        p = softmax_head([1.0], [[math.log(2)], [0.0]], [0.0, 0.0])
        assert p == pytest.approx([2 / 3, 1 / 3], abs=1e-15)

    def test_shift(self):
        a = softmax_head([1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
        b = softmax_head([1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], [5.0, 5.0])
        assert np.allclose(a, b, atol=1e-15)


class TestBatchNorm:
    def test_two_values(self):
        assert batchnorm_estep([[1.0], [3.0]])[:, 0].tolist() == [-1.0, 1.0]

    def test_inverse(self):
        X = np.random.default_rng(0).normal(size=(6, 3)) * 4 + 2
        out = batchnorm_estep(X, X.std(0), X.mean(0))
        assert np.allclose(out, X, atol=1e-12)

    def test_constant_batch(self):
        out = batchnorm_estep(np.full((4, 2), 7.0))
        assert np.array_equal(out, np.zeros((4, 2)))

    def test_needs_two(self):
        with pytest.raises(ValidationError):
            batchnorm_estep([[1.0]])


class TestDeepEM:
    def test_scalar_regression(self):
        lam, alpha = fa_regression([[3.0], [5.0]], [[1.0], [2.0]], [[0.0]])
        assert lam[0, 0] == pytest.approx(2.0, abs=1e-12)
        assert alpha[0] == pytest.approx(1.0, abs=1e-12)

    def test_singular_cell_is_regularized(self):
        lam, alpha = fa_regression([[3.0], [3.0]], [[1.0], [1.0]], [[0.0]])
        assert np.all(np.isfinite(lam)) and np.all(np.isfinite(alpha))

    def test_objective_never_drops_within_step(self):
        m = certified_deep((1, 2, 6), (2, 1), 2, seed=1, level_noise=1e-3, pixel_noise=1e-2,
                           disjoint_nuisances=True)
        rng = np.random.default_rng(0)
        X = np.array([sample(m, rng=rng).image for _ in range(200)])
        res = em_train_deep(X, m, 3)
        for step in res.trace:
            assert step["after"] >= step["before"] - 1e-6 * abs(step["before"])

    def test_noiseless_fixed_point(self):
        m = recovery_truth(0, level_noise=TINY)
        X = np.array([sample(m, RenderingPath(c, (g, 0)), noise=False).image
                      for c in range(2) for g in range(2)])
        out = em_train_deep(X, m, 1).model
        for a, b in zip(out.levels, m.levels):
            assert np.allclose(a.transforms, b.transforms, rtol=0, atol=1e-9)
            assert np.allclose(a.biases, b.biases, rtol=0, atol=1e-9)
            assert np.all(a.noise == 1e-8)
        assert np.allclose(out.top_templates, m.top_templates, rtol=0, atol=1e-9)

    def test_bad_input(self):
        m = random_deep((2, 3), (2,), 2)
        with pytest.raises(ValidationError):
            em_train_deep(np.zeros((3, 4)), m, 1)
        with pytest.raises(ValidationError):
            em_train_deep(np.zeros((3, 3)), m, 0)


def recovery_truth(seed, level_noise=1e-6):
    t = certified_deep((1, 2, 8), (2, 1), 2, seed=seed, level_noise=level_noise, pixel_noise=1e-4,
                       disjoint_nuisances=True)
    return t.replace(top_templates=t.top_templates + np.arange(2)[:, None], top_prior=[0.5, 0.5])


class TestActivityMaximization:
    def model(self):
        # class 0: nuisance 0 is strong on the left, nuisance 1 on the right
        t = np.array([[[3.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 2.0]],
                      [[1.0, 1.0, 1.0, 1.0], [0.5, 0.5, 0.5, 0.5]]])
        return ShallowRM([0.5, 0.5], [0.5, 0.5], t, 1.0, image_shape=(1, 1, 4))

    def test_single_patch(self):
        m = self.model()
        img = activity_maximize(m, 0, PatchLayout(1, 4, 4)).reshape(-1)
        best = m.templates[0, 0]
        assert np.allclose(img, best / np.linalg.norm(best), atol=1e-15)

    def test_two_patches_mix_nuisances(self):
        m = self.model()
        img = activity_maximize(m, 0, PatchLayout(1, 2, 2)).reshape(-1)
        assert np.allclose(img, [1.0, 0.0, 0.0, 1.0], atol=1e-15)

    def test_beats_every_template_image(self):
        m = self.model()
        layout = PatchLayout(1, 2, 2)
        patches = layout.patches((1, 1, 4))
        for c in range(2):
            t, _ = class_templates(m, c)
            img = activity_maximize(m, c, layout).reshape(-1)
            best = patch_score(t, patches, img)
            for g in range(2):
                unit = t[g] / np.linalg.norm(t[g])
                assert best >= patch_score(t, patches, unit) - 1e-12

    def test_layout_must_fit(self):
        with pytest.raises(ValidationError):
            PatchLayout(2, 2, 1).patches((1, 1, 4))


def test_numerical_error_is_arithmetic():
    assert issubclass(NumericalError, ArithmeticError)
