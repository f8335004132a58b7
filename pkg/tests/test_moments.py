import numpy as np
import pytest

from conftest import affine_config
from snnc.errors import ShapeError
from snnc.mathops import SeededRng, sample_gaussian
from snnc.moments import (GaussianTensor, VAR_FLOOR, VarianceMode,
                          exact_rectified_moments, inject_noise,
                          mc_forward_moments, propagate_affine,
                          propagate_meanpool, propagate_relu)
from snnc.network import (FullyConnected, ModelConfig, ParameterSet, ReLU,
                          forward_expectation, forward_stochastic, init_params)


def test_inject_noise_degenerate_and_square():
    x = np.array([1.0, -2.0, 0.5])
    gt0 = inject_noise(x, 0.0)
    assert np.array_equal(gt0.mean, x)
    assert np.all(gt0.var == VAR_FLOOR)
    gt = inject_noise(x, 0.5)
    assert np.all(gt.var == 0.25)
    with pytest.raises(ValueError):
        inject_noise(x, -0.1)


def test_inject_noise_matches_sampling():
    x = np.linspace(-1, 1, 8)
    draws = np.stack([x + sample_gaussian(SeededRng(3, i), x.shape, 0.0, 1.0)
                      for i in range(10 ** 5)])
    emp_var = draws.var(axis=0, ddof=1)
    se = 1.0 * np.sqrt(2.0 / (10 ** 5 - 1))  # SE of a variance estimate
    assert np.max(np.abs(emp_var - 1.0)) <= 4 * se


def test_propagate_affine_fc_basics():
    gt = GaussianTensor(np.array([1.0]), np.array([1.0]))
    out = propagate_affine(gt, np.array([[2.0]]), np.array([0.0]),
                           VarianceMode.DIAGONAL)
    assert out.mean[0] == 2.0 and out.var[0] == 4.0

    eye = np.eye(4)
    gt = GaussianTensor(np.arange(4.0), np.full(4, 0.3))
    out = propagate_affine(gt, eye, np.zeros(4), VarianceMode.DIAGONAL)
    assert np.array_equal(out.mean, gt.mean)
    assert np.allclose(out.var, gt.var)

    out_id = propagate_affine(gt, eye, None, VarianceMode.IDENTITY,
                              sigma_global=0.7)
    assert np.all(out_id.var == 0.7 ** 2)

    with pytest.raises(ShapeError):
        propagate_affine(gt, np.zeros((2, 7)), None, VarianceMode.DIAGONAL)


def test_propagate_affine_matches_mc():
    config = affine_config()
    params = init_params(config, 5).with_sigma(1.0)
    x = np.random.default_rng(11).uniform(-1, 1, size=(1, 1, 6))
    analytic, _ = forward_stochastic(params, x, VarianceMode.DIAGONAL)
    mc = mc_forward_moments(params, x, 1.0, 10 ** 5, seed=77)
    se_mean = np.sqrt(analytic.var / 10 ** 5)
    se_var = analytic.var * np.sqrt(2.0 / (10 ** 5 - 1))
    assert np.all(np.abs(analytic.mean - mc.mean) <= 4 * se_mean)
    assert np.all(np.abs(analytic.var - mc.var) <= 4 * se_var)


def test_propagate_relu_regimes():
    gt = GaussianTensor(np.array([4.0, -4.0, -1.0, 2.0]),
                        np.array([1.0, 1.0, 1.0, 1.0]))
    out = propagate_relu(gt)
    assert np.array_equal(out.mean, [4.0, 0.0, 0.0, 2.0])
    assert out.var[0] == 1.0          # far positive: untruncated
    assert out.var[1] == VAR_FLOOR    # far negative: collapses
    assert out.var[2] == 1.0          # Laplace window keeps sigma^2
    assert out.var[3] == 1.0


def test_propagate_relu_mean_is_relu_of_mean(rng):
    mean = rng.normal(size=(3, 7))
    var = rng.uniform(0.1, 2.0, size=(3, 7))
    out = propagate_relu(GaussianTensor(mean, var))
    assert np.array_equal(out.mean, np.maximum(mean, 0.0))
    assert np.all(out.var >= VAR_FLOOR)


# values from the same high-precision evaluation as the erf table
RECT_CASES = {
    (0.0, 1.0): (0.3989422804014326779399, 0.3408450569081046642311),
    (1.0, 2.0): (1.395593114802612059187, 2.213762817814207751064),
    (-1.0, 0.5): (0.004245351308414818774999, 0.001424158670898123611349),
    (2.0, 1.0): (2.00849070261682963755, 0.9601963707872340800448),
}


def test_exact_rectified_moments_reference_values():
    for (mu, sigma), (m_ref, v_ref) in RECT_CASES.items():
        m, v = exact_rectified_moments(mu, sigma)
        assert abs(m - m_ref) <= 1e-12
        assert abs(v - v_ref) <= 1e-12


def test_exact_rectified_moments_limits():
    m, v = exact_rectified_moments(10.0, 1.0)
    assert abs(m - 10.0) <= 1e-6 and abs(v - 1.0) <= 1e-6
    m, v = exact_rectified_moments(-10.0, 1.0)
    assert m <= 1e-6 and v <= 1e-6
    with pytest.raises(ValueError):
        exact_rectified_moments(0.0, 0.0)


def test_exact_rectified_moments_against_sampling():
    z = sample_gaussian(SeededRng(15), (10 ** 6,), 0.0, 1.0)
    y = np.maximum(z, 0.0)
    m_ref, v_ref = exact_rectified_moments(0.0, 1.0)
    assert abs(y.mean() - m_ref) <= 4 * np.sqrt(v_ref / 10 ** 6)


def test_meanpool_selects_max_mean():
    mean = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    var = np.array([[[5.0, 6.0], [7.0, 8.0]]])
    out, sel = propagate_meanpool(GaussianTensor(mean, var), 2, 2)
    assert out.mean[0, 0, 0] == 4.0 and out.var[0, 0, 0] == 8.0
    assert sel.indices[0, 0, 0] == 3
    assert sel.in_region()


def test_meanpool_tie_breaks_row_major():
    mean = np.ones((1, 2, 2))
    var = np.array([[[0.1, 0.2], [0.3, 0.4]]])
    out, sel = propagate_meanpool(GaussianTensor(mean, var), 2, 2)
    assert sel.indices[0, 0, 0] == 0
    assert out.var[0, 0, 0] == 0.1


def test_meanpool_matches_brute_force(rng):
    mean = rng.normal(size=(2, 4, 4))
    var = rng.uniform(0.1, 1.0, size=(2, 4, 4))
    out, sel = propagate_meanpool(GaussianTensor(mean, var), 2, 2)
    for c in range(2):
        for i in range(2):
            for j in range(2):
                region_m = mean[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].ravel()
                region_v = var[c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].ravel()
                pick = int(np.argmax(region_m))
                assert out.mean[c, i, j] == region_m[pick]
                assert out.var[c, i, j] == region_v[pick]
                assert sel.indices[c, i, j] == pick


def test_meanpool_rejects_bad_geometry():
    gt = GaussianTensor(np.zeros((1, 3, 3)), np.full((1, 3, 3), 0.1))
    with pytest.raises(ShapeError):
        propagate_meanpool(gt, 4, 4)
    with pytest.raises(ShapeError):
        propagate_meanpool(gt, 2, 2)  # 3x3 does not tile with 2/2


def test_selection_reproduces_pooled_mean(rng):
    mean = rng.normal(size=(1, 3, 6, 6))
    var = rng.uniform(0.5, 1.0, size=mean.shape)
    out, sel = propagate_meanpool(GaussianTensor(mean, var), 2, 2)
    oh, ow = out.mean.shape[2:]
    for c in range(3):
        for i in range(oh):
            for j in range(ow):
                r = sel.indices[0, c, i, j]
                ri, rj = 2 * i + r // 2, 2 * j + r % 2
                assert out.mean[0, c, i, j] == mean[0, c, ri, rj]


def test_mc_forward_sigma_zero():
    config = affine_config()
    params = init_params(config, 2)
    x = np.random.default_rng(3).uniform(-1, 1, size=(1, 1, 6))
    mc = mc_forward_moments(params, x, 0.0, 500, seed=4)
    assert np.all(mc.var <= VAR_FLOOR)
    assert np.allclose(mc.mean, forward_expectation(params, x), atol=1e-12)
    with pytest.raises(ValueError):
        mc_forward_moments(params, x, 0.0, 1, seed=4)


def test_mc_forward_single_relu_unit():
    # one linear unit into a ReLU output: rectified standard normal
    config = ModelConfig((1, 1, 1), (FullyConnected(1), ReLU()), 1)
    params = ParameterSet(config, (np.array([[1.0]]), None),
                          (np.array([0.0]), None), 1.0)
    x = np.zeros((1, 1, 1))
    mc = mc_forward_moments(params, x, 1.0, 10 ** 6, seed=21)
    m_ref, v_ref = exact_rectified_moments(0.0, 1.0)
    assert abs(mc.mean[0] - m_ref) <= 4 * np.sqrt(v_ref / 10 ** 6)


def test_variance_floor_invariant(rng):
    from conftest import tiny_config
    for config, shape in ((affine_config(), (1, 1, 6)),
                          (tiny_config(), (1, 8, 8))):
        for seed in range(3):
            params = init_params(config, seed).with_sigma(rng.uniform(0, 1.5))
            x = rng.uniform(-1, 1, size=shape)
            for mode in VarianceMode:
                out, cache = forward_stochastic(params, x, mode)
                assert np.all(out.var >= VAR_FLOOR)
                assert np.all(cache.out_var >= VAR_FLOOR)


def test_mean_path_noise_independent(rng):
    from conftest import tiny_config
    config = tiny_config()
    params = init_params(config, 9)
    x = rng.uniform(0, 1, size=(1, 8, 8))
    reference = forward_expectation(params, x)
    for sigma in (0.0, 0.7, 2.0):
        for mode in VarianceMode:
            out, _ = forward_stochastic(params.with_sigma(sigma), x, mode)
            assert np.max(np.abs(out.mean - reference)) <= 1e-12


def test_affine_variance_scales_with_sigma_squared():
    config = affine_config()
    params = init_params(config, 7)
    x = np.random.default_rng(8).uniform(-1, 1, size=(1, 1, 6))
    v1 = forward_stochastic(params.with_sigma(1.0), x,
                            VarianceMode.DIAGONAL)[0].var
    v2 = forward_stochastic(params.with_sigma(2.0), x,
                            VarianceMode.DIAGONAL)[0].var
    assert np.max(np.abs(v2 / v1 - 4.0)) <= 1e-10
