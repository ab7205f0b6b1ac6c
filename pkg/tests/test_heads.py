import math

import numpy as np
import pytest

from sidehead.data import PlantedSpec, generate_planted
from sidehead.heads import (
    INFODISENT,
    SIDE,
    HeadParams,
    HeadShapeError,
    ScoresSheet,
    backward,
    forward,
    infodisent_forward,
    init_infodisent_head,
    init_side_head,
    materialize_orthogonal,
    orthogonal_backward,
    pre_pool_backward,
    side_backward,
    side_forward,
    skew_from_upper,
)
from sidehead.tensor import grad_check, mxpool


def side_params(w, expansion, mask=None):
    w = np.asarray(w, dtype=float)
    e = np.asarray(expansion, dtype=float)
    mask = np.ones_like(w, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return HeadParams(SIDE, e.shape[1], e.shape[0], w.shape[0], ScoresSheet(w, mask), e)


def signature(params_fn, features):
    """Piecewise regime of the head: argmax cells and clamp states."""
    def sig(theta):
        p = params_fn(theta)
        out = forward(features, p)
        c = out._cache
        return (c["pos_idx"], c["neg_idx"], c["has_pos"], c["has_neg"], p.sheet.weights > 0)
    return sig


class TestInit:
    def test_determinism(self):
        a = init_side_head(8, 16, 5, seed=3)
        b = init_side_head(8, 16, 5, seed=3)
        assert np.array_equal(a.sheet.weights, b.sheet.weights)
        assert np.array_equal(a.expansion, b.expansion)

    def test_weight_distribution(self):
        p = init_side_head(1, 1000, 1000, seed=0)
        w = p.sheet.weights
        assert abs(w.mean() - 1.0) < 1e-3
        assert abs(w.std() - 0.1) < 1e-3
        assert not (~p.sheet.mask).any()

    def test_expansion_scale(self):
        p = init_side_head(64, 512, 2, seed=0)
        assert p.expansion.std() == pytest.approx(1 / 8, rel=0.02)


class TestSideForward:
    def test_hand_example(self):
        x = np.array([1.0, 2.0]).reshape(2, 1, 1)
        out = side_forward(x, side_params([[1.0, 0.0]], np.eye(2)))
        np.testing.assert_array_equal(out.pooled, [[1.0, 2.0]])
        assert out.logits[0, 0] == 1.0
        assert out.probs[0, 0] == pytest.approx(0.7311, abs=1e-4)

    def test_all_negative_weights(self):
        rng = np.random.default_rng(0)
        out = side_forward(rng.normal(size=(3, 4, 4)), side_params(-np.ones((2, 3)), rng.normal(size=(3, 3))))
        np.testing.assert_array_equal(out.logits, 0.0)
        np.testing.assert_array_equal(out.probs, 0.5)

    def test_zero_features(self):
        p = init_side_head(4, 6, 3, seed=1)
        out = side_forward(np.zeros((4, 3, 3)), p)
        assert not out.pooled.any() and not out.logits.any()
        np.testing.assert_array_equal(out.probs, 0.5)
        np.testing.assert_array_equal(out.argmax_sign, 0)

    def test_pooled_matches_scalar_mxpool(self):
        rng = np.random.default_rng(2)
        p = init_side_head(4, 6, 3, seed=2)
        x = rng.normal(size=(5, 4, 3, 3))
        out = side_forward(x, p)
        for b in range(5):
            pre = np.einsum("kd,dhw->khw", p.expansion, x[b])
            np.testing.assert_allclose(out.pooled[b], [mxpool(pre[k]) for k in range(6)], atol=1e-12)

    def test_argmax_location(self):
        x = np.zeros((2, 3, 3))
        x[0, 1, 2] = 4.0
        x[1, 2, 0] = -3.0
        out = side_forward(x, side_params(np.ones((1, 2)), np.eye(2)))
        assert out.argmax_hw[0, 0].tolist() == [1, 2] and out.argmax_sign[0, 0] == 1
        assert out.argmax_hw[0, 1].tolist() == [2, 0] and out.argmax_sign[0, 1] == -1

    def test_dimension_mismatch(self):
        p = init_side_head(4, 6, 3, seed=1)
        with pytest.raises(HeadShapeError):
            side_forward(np.zeros((5, 3, 3)), p)

    def test_non_finite(self):
        p = init_side_head(2, 3, 2, seed=0)
        x = np.zeros((2, 2, 2))
        x[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            side_forward(x, p)

    def test_spatial_permutation_invariance(self):
        rng = np.random.default_rng(4)
        p = init_side_head(4, 8, 3, seed=4)
        x = rng.normal(size=(4, 5, 5))
        perm = rng.permutation(25)
        xp = x.reshape(4, 25)[:, perm].reshape(4, 5, 5)
        pre = np.einsum("kd,dn->kn", p.expansion, x.reshape(4, 25))
        pre_p = np.einsum("kd,dn->kn", p.expansion, xp.reshape(4, 25))
        np.testing.assert_allclose(pre_p, pre[:, perm], atol=1e-12)
        np.testing.assert_allclose(side_forward(xp, p).pooled, side_forward(x, p).pooled, atol=1e-12)

    def test_rows_independent(self):
        rng = np.random.default_rng(5)
        p = init_side_head(4, 8, 5, seed=5)
        x = rng.normal(size=(3, 4, 4, 4))
        before = side_forward(x, p).probs
        p.sheet.weights[2] += rng.normal(size=8)
        after = side_forward(x, p).probs
        changed = np.any(before != after, axis=0)
        assert changed.tolist() == [False, False, True, False, False]


class TestSideBackward:
    @pytest.mark.parametrize("seed", range(10))
    def test_grad_check_full_head(self, seed):
        rng = np.random.default_rng(seed)
        d, cp, nc = 3, 5, 4
        x = rng.normal(size=(3, d, 3, 3))
        base = init_side_head(d, cp, nc, seed)
        base.sheet.weights[rng.uniform(size=base.sheet.weights.shape) < 0.2] *= -1
        up = rng.normal(size=(3, nc))
        n_e = cp * d

        def unpack(theta):
            p = base.copy()
            p.expansion = theta[:n_e].reshape(cp, d).copy()
            p.sheet.weights = theta[n_e:].reshape(nc, cp).copy()
            return p

        def f(theta):
            return float((side_forward(x, unpack(theta)).probs * up).sum())

        def g(theta):
            p = unpack(theta)
            grads = side_backward(x, p, up)
            return np.concatenate([grads["expansion"].ravel(), grads["scores_w"].ravel()])

        theta = np.concatenate([base.expansion.ravel(), base.sheet.weights.ravel()])
        assert grad_check(f, g, theta, h=1e-5, signature=signature(unpack, x)) < 1e-4

    def test_masked_and_dead_entries_get_zero(self):
        rng = np.random.default_rng(1)
        p = init_side_head(3, 4, 2, seed=1)
        p.sheet.weights[0, 1] = -0.5
        p.sheet.mask[1, 2] = False
        p.sheet.weights[1, 2] = 0.0
        x = rng.normal(size=(6, 3, 3, 3))
        grads = side_backward(x, p, rng.normal(size=(6, 2)))
        assert grads["scores_w"][0, 1] == 0.0
        assert grads["scores_w"][1, 2] == 0.0
        assert np.count_nonzero(grads["scores_w"]) == 6

    def test_logit_and_prob_routes_agree(self):
        rng = np.random.default_rng(2)
        p = init_side_head(3, 4, 2, seed=2)
        x = rng.normal(size=(5, 3, 2, 2))
        out = forward(x, p)
        gp = rng.normal(size=(5, 2))
        a = backward(p, out, grad_probs=gp)
        b = backward(p, out, grad_logits=gp * out.probs * (1 - out.probs))
        for k in a:
            np.testing.assert_allclose(a[k], b[k], rtol=1e-12)

    def test_pre_pool_backward(self):
        x = np.zeros((1, 2, 2))
        x[0] = [[2.0, -5.0], [0.0, 0.0]]
        p = side_params(np.ones((1, 1)), np.ones((1, 1)))
        out = forward(x, p)
        g = pre_pool_backward(out, np.array([[2.0]]))
        np.testing.assert_array_equal(g.reshape(2, 2), [[2, 2], [0, 0]])

    @pytest.mark.parametrize("seed", range(10))
    def test_grad_check_composed_ortho(self, seed):
        rng = np.random.default_rng(seed)
        d, cp, nc = 3, 4, 2
        x = rng.normal(size=(2, d, 3, 3))
        base = init_side_head(d, cp, nc, seed, compose_ortho=True)
        base.ortho = rng.normal(0, 0.3, size=3)
        up = rng.normal(size=(2, nc))
        n_e = cp * d

        def unpack(theta):
            p = base.copy()
            p.expansion = theta[:n_e].reshape(cp, d).copy()
            p.ortho = theta[n_e:n_e + 3].copy()
            return p

        f = lambda th: float((forward(x, unpack(th)).probs * up).sum())

        def g(th):
            p = unpack(th)
            grads = backward(p, forward(x, p), grad_probs=up)
            return np.concatenate([grads["expansion"].ravel(), grads["ortho_a"]])

        theta = np.concatenate([base.expansion.ravel(), base.ortho])
        assert grad_check(f, g, theta, h=1e-5, signature=signature(unpack, x)) < 1e-4


class TestOrthogonal:
    def test_zero_is_identity(self):
        np.testing.assert_array_equal(materialize_orthogonal(np.zeros(6), 4), np.eye(4))

    @pytest.mark.parametrize("a", [-3.0, -0.4, 0.25, 1.0, 7.5])
    def test_two_by_two_rotation(self, a):
        u = materialize_orthogonal(np.array([a]), 2)
        th = 2 * math.atan(a)
        np.testing.assert_allclose(u, [[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]],
                                   atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_orthogonality(self, seed):
        rng = np.random.default_rng(seed)
        u = materialize_orthogonal(rng.normal(size=16 * 15 // 2), 16)
        assert np.abs(u.T @ u - np.eye(16)).max() < 1e-10

    def test_full_matrix_input(self):
        rng = np.random.default_rng(3)
        upper = rng.normal(size=10)
        a = skew_from_upper(upper, 5)
        np.testing.assert_allclose(materialize_orthogonal(a), materialize_orthogonal(upper, 5))

    @pytest.mark.parametrize("seed", range(10))
    def test_backward(self, seed):
        rng = np.random.default_rng(seed)
        d = 4
        g_u = rng.normal(size=(d, d))
        upper = rng.normal(size=d * (d - 1) // 2)
        f = lambda th: float((materialize_orthogonal(th, d) * g_u).sum())
        assert grad_check(f, lambda th: orthogonal_backward(th, g_u, d), upper, h=1e-5) < 1e-4


class TestInfoDisent:
    def identity_head(self, d, w):
        w = np.asarray(w, dtype=float)
        return HeadParams(INFODISENT, d, d, w.shape[0], ScoresSheet(w, np.ones_like(w, dtype=bool)),
                          None, np.zeros(d * (d - 1) // 2))

    def test_hand_example(self):
        x = np.array([2.0, -1.0]).reshape(2, 1, 1)
        out = infodisent_forward(x, self.identity_head(2, np.eye(2)))
        np.testing.assert_array_equal(out.logits, [[2.0, -1.0]])
        np.testing.assert_allclose(out.probs, [[0.9526, 0.0474]], atol=1e-4)

    def test_abs_weights(self):
        x = np.array([2.0, -1.0]).reshape(2, 1, 1)
        out = infodisent_forward(x, self.identity_head(2, -np.eye(2)))
        np.testing.assert_array_equal(out.logits, [[2.0, -1.0]])

    def test_probs_normalised(self):
        rng = np.random.default_rng(0)
        p = init_infodisent_head(6, 4, seed=0)
        p.ortho = rng.normal(size=p.ortho.shape)
        out = infodisent_forward(rng.normal(size=(20, 6, 3, 3)), p)
        np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-9)

    def test_requires_square(self):
        p = init_infodisent_head(3, 2, seed=0)
        p.n_protos = 4
        with pytest.raises(HeadShapeError):
            infodisent_forward(np.zeros((3, 2, 2)), p)

    @pytest.mark.parametrize("seed", range(10))
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        d, nc = 3, 4
        x = rng.normal(size=(3, d, 3, 3))
        base = init_infodisent_head(d, nc, seed)
        base.ortho = rng.normal(0, 0.5, size=3)
        up = rng.normal(size=(3, nc))
        n_o = 3

        def unpack(theta):
            p = base.copy()
            p.ortho = theta[:n_o].copy()
            p.sheet.weights = theta[n_o:].reshape(nc, d).copy()
            return p

        f = lambda th: float((forward(x, unpack(th)).probs * up).sum())

        def g(th):
            p = unpack(th)
            grads = backward(p, forward(x, p), grad_probs=up)
            return np.concatenate([grads["ortho_a"], grads["scores_w"].ravel()])

        theta = np.concatenate([base.ortho, base.sheet.weights.ravel()])
        assert grad_check(f, g, theta, h=1e-5, signature=signature(unpack, x)) < 1e-4

    def test_inverse_mixing_recovers_latent(self):
        spec = PlantedSpec(num_classes=5, num_concepts=8, channel_dim=8, noise_std=0.05)
        _, _, truth, tr, _ = generate_planted(spec, 30, 1, seed=1)
        u_target = truth.mixing.T
        # Cayley inverse: A = (I - U)(I + U)^-1, valid when -1 is not an eigenvalue
        eye = np.eye(8)
        if np.linalg.det(u_target) < 0:
            u_target = u_target.copy()
            u_target[-1] *= -1  # rows of unused latent axes only flip sign of noise
        a = np.linalg.solve((eye + u_target).T, (eye - u_target).T).T
        upper = a[np.triu_indices(8, 1)]
        p = HeadParams(INFODISENT, 8, 8, 5, ScoresSheet(np.eye(5, 8), np.ones((5, 8), bool)), None, upper)
        np.testing.assert_allclose(materialize_orthogonal(upper, 8), u_target, atol=1e-8)
        out = infodisent_forward(tr.features, p)
        for b in range(30):
            clean = np.zeros(8)
            clean[truth.class_concepts[tr.labels[b]]] = 5.0
            err = np.abs(out.pooled[b, :7] - clean[:7])
            # spikes carry +-10% magnitude jitter plus small noise
            assert err.max() < 2.0
