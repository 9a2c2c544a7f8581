import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from intrinsic_paradigms.fields import Decomposition, compose
from intrinsic_paradigms.polish import PolishConfig, polish, polish_step, polish_update


def pixel(a, s, c, image):
    col = lambda v: np.asarray(v, dtype=np.float64).reshape(-1, 1, 1)
    return col(image), Decomposition(col(a), col(s), np.asarray(c, dtype=np.float64))


def random_pixels(rng, n=10_000):
    at = rng.uniform(0.01, 2, (3, n))
    s = rng.uniform(0.05, 2, (1, n))
    image = rng.uniform(0, 2, (3, n))
    return image, at, s


class TestUpdate:
    def test_fixed_point(self, rng):
        at = rng.uniform(0, 1, (3, 50))
        s = rng.uniform(0.1, 1, (1, 50))
        ds, dat = polish_update(at * s, at, s)
        assert np.all(ds == 0) and np.all(dat == 0)

    def test_worked_example(self):
        image, dec = pixel((1, 0, 0), 1.0, (1, 1, 1), (1.5, 0, 0))
        ds, dat = polish_update(image, dec.albedo, dec.shading)
        assert ds.item() == pytest.approx(0.25)
        np.testing.assert_allclose(dat[:, 0, 0], [0.25, 0, 0])
        out = polish_step(image, dec)
        resid = image - out.albedo * out.shading
        assert np.abs(resid).max() == pytest.approx(0.0625)

    def test_constraint_identity(self, rng):
        image, at, s = random_pixels(rng)
        ds, dat = polish_update(image, at, s)
        np.testing.assert_allclose(at * ds + s * dat, image - at * s, atol=1e-12)

    def test_minimal_norm(self, rng):
        image, at, s = random_pixels(rng, 200)
        ds, dat = polish_update(image, at, s)
        for k in range(200):
            # generic least-norm solution of [at | s I] x = r
            a_mat = np.hstack([at[:, k:k + 1], s[0, k] * np.eye(3)])
            x = np.linalg.pinv(a_mat) @ (image[:, k] - at[:, k] * s[0, k])
            np.testing.assert_allclose(np.concatenate([ds[:, k], dat[:, k]]), x, atol=1e-9)

    def test_zero_shading_guard(self):
        at = np.array([[0.5], [0.5], [0.5]])
        s = np.array([[0.0]])
        ds, dat = polish_update(np.ones((3, 1)), at, s)
        assert np.all(dat == 0) and np.isfinite(ds).all() and ds.item() > 0

    def test_pointwise(self, rng):
        image, at, s = random_pixels(rng, 100)
        perm = rng.permutation(100)
        ds, dat = polish_update(image, at, s)
        ds_p, dat_p = polish_update(image[:, perm], at[:, perm], s[:, perm])
        np.testing.assert_array_equal(ds[:, perm], ds_p)
        np.testing.assert_array_equal(dat[:, perm], dat_p)


class TestPolish:
    def test_zero_iterations(self, rng):
        image = rng.random((3, 4, 4))
        dec = Decomposition(rng.random((3, 4, 4)), rng.random((1, 4, 4)), np.ones(3))
        out = polish(image, dec, PolishConfig(iterations=0))
        np.testing.assert_array_equal(out.albedo, dec.albedo)
        np.testing.assert_allclose(out.residual, image - compose(dec.albedo, dec.shading, dec.color))

    @pytest.mark.parametrize("iterations", [1, 2, 5])
    def test_exact_decomposition_fixed(self, rng, iterations):
        a = rng.uniform(0.1, 1, (3, 6, 6))
        s = rng.uniform(0.2, 1, (1, 6, 6))
        c = np.array([1.2, 0.9, 0.7])
        out = polish(compose(a, s, c), Decomposition(a, s, c), PolishConfig(iterations))
        np.testing.assert_allclose(out.albedo, a, atol=1e-14)
        np.testing.assert_allclose(out.residual, 0, atol=1e-14)

    def test_new_residual_is_second_order(self, rng):
        image, at, s = random_pixels(rng)
        ds, dat = polish_update(image, at, s)
        np.testing.assert_allclose(image - (at + dat) * (s + ds), -ds * dat, atol=1e-12)

    def test_residual_shrinks_near_solution(self, rng):
        # averaged decompositions sit within a few percent of the image
        n = 10_000
        a = rng.uniform(0.1, 1, (3, n, 1))
        sh = rng.uniform(0.2, 1, (1, n, 1))
        image = a * sh
        dec = Decomposition(a * rng.uniform(0.95, 1.05, a.shape), sh * rng.uniform(0.95, 1.05, sh.shape), np.ones(3))
        norms = []
        for _ in range(4):
            norms.append(np.linalg.norm(image - dec.albedo * dec.shading))
            dec = polish_step(image, dec)
        assert all(b <= a for a, b in zip(norms, norms[1:]))
        assert norms[-1] < 1e-3 * norms[0]

    @settings(max_examples=100)
    @given(st.floats(0.05, 2), st.floats(0.05, 2), st.floats(-1, 1))
    def test_gray_contraction(self, s, a, frac):
        # along the albedo direction the new residual is 3 a s r^2 / (3 a^2 + s^2)^2
        d = 3 * a * a + s * s
        rho = frac * d
        image, dec = pixel((a, a, a), s, (1, 1, 1), (a * s + rho,) * 3)
        out = polish_step(image, dec)
        new = np.abs(image - out.albedo * out.shading).max()
        assert new == pytest.approx(3 * a * s * rho * rho / d ** 2, abs=1e-12)
        assert new <= abs(rho) + 1e-15

    def test_large_residual_can_grow(self):
        # with small shading and a residual orthogonal to the albedo the step overshoots
        image, dec = pixel((1.0, 0.0, 0.0), 0.05, (1, 1, 1), (1.05, 1.0, 0.0))
        before = np.abs(image - dec.albedo * dec.shading).max()
        out = polish_step(image, dec)
        assert np.abs(image - out.albedo * out.shading).max() > before

    def test_bad_config(self):
        with pytest.raises(ValueError):
            PolishConfig(iterations=-1)
