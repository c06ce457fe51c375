import numpy as np
import pytest
from scipy import stats

from presgan.diffcore import MlpSpec, ParamVector
from presgan.errors import ConfigError
from presgan.models import (
    D_CLAMP,
    DiscriminatorParams,
    NoiseBounds,
    conditional_grads_theta,
    conditional_logpdf,
    conditional_score_x,
    diag_gaussian_logpdf,
    discriminate,
    encode,
    generator_mean,
    make_discriminator,
    make_encoder,
    make_generator,
    noise_real_data,
    prior_logpdf,
    reparam_sample,
    truncate_sigma,
)

from conftest import rel_err, small_generator


def test_reparam_sample_is_mean_plus_scaled_noise(rng):
    gen = small_generator(rng)
    z = rng.standard_normal((4, 3))
    eps = rng.standard_normal((4, 2))
    np.testing.assert_allclose(reparam_sample(gen, z, eps), generator_mean(gen, z) + gen.sigma * eps)
    np.testing.assert_allclose(reparam_sample(gen, z, np.zeros((4, 2))), generator_mean(gen, z))


def test_noise_real_data_uses_generator_sigma(rng):
    x = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))
    ls = np.log([0.1, 0.2])
    np.testing.assert_allclose(noise_real_data(x, ls, eps), x + np.array([0.1, 0.2]) * eps)
    with pytest.raises(ConfigError):
        noise_real_data(x, ls, eps[:, :1])


def test_truncate_sigma_clamps_to_interval():
    b = NoiseBounds(0.01, 0.3)
    out = np.exp(truncate_sigma(np.log([1e-4, 0.05, 2.0]), b))
    np.testing.assert_allclose(out, [0.01, 0.05, 0.3])
    with pytest.raises(ConfigError):
        NoiseBounds(0.3, 0.01)
    with pytest.raises(ConfigError):
        NoiseBounds(0.0, 0.3)


def test_logpdfs_match_scipy(rng):
    gen = small_generator(rng)
    z = rng.standard_normal((6, 3))
    x = rng.standard_normal((6, 2))
    mu = generator_mean(gen, z)
    ref = stats.norm.logpdf(x, mu, gen.sigma).sum(axis=1)
    np.testing.assert_allclose(conditional_logpdf(gen, x, z), ref, rtol=1e-12)
    np.testing.assert_allclose(prior_logpdf(z), stats.norm.logpdf(z).sum(axis=1), rtol=1e-12)
    np.testing.assert_allclose(diag_gaussian_logpdf(x, 0.0, np.log(4.0)), stats.norm.logpdf(x, 0, 2).sum(axis=1))


def test_conditional_score_matches_finite_difference(rng):
    gen = small_generator(rng)
    z = rng.standard_normal(3)
    x = rng.standard_normal(2)
    h = 1e-6
    fd = [
        (conditional_logpdf(gen, x + h * e, z) - conditional_logpdf(gen, x - h * e, z)) / (2 * h)
        for e in np.eye(2)
    ]
    np.testing.assert_allclose(conditional_score_x(gen, x, z), fd, rtol=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_conditional_theta_grads_match_finite_difference(seed):
    rng = np.random.default_rng(seed)
    gen = small_generator(rng)
    z = rng.standard_normal((4, 3))
    x = rng.standard_normal((4, 2))
    g_eta, g_ls = conditional_grads_theta(gen, x, z)

    def f(p):
        g = gen.copy()
        g.eta = p
        return conditional_logpdf(g, x, z).sum()

    from presgan.diffcore import finite_diff_grad

    assert rel_err(g_eta.flatten(), finite_diff_grad(f, gen.eta).flatten()) < 1e-4
    ls = ParamVector([("ls", gen.log_sigma.copy())])

    def f_ls(p):
        g = gen.copy()
        g.log_sigma = p["ls"]
        return conditional_logpdf(g, x, z).sum()

    assert rel_err(g_ls, finite_diff_grad(f_ls, ls)["ls"]) < 1e-4


def test_discriminator_output_is_clamped():
    spec = MlpSpec((1, 1), output_activation="sigmoid")
    disc = DiscriminatorParams(spec, ParamVector([("W0", np.array([[100.0]])), ("b0", np.zeros(1))]))
    d = discriminate(disc, np.array([[-10.0], [10.0]]))
    np.testing.assert_allclose(d, [D_CLAMP, 1 - D_CLAMP])


def test_discriminator_requires_single_sigmoid_output(rng):
    from presgan.diffcore import init_mlp

    spec = MlpSpec((2, 3, 2), output_activation="sigmoid")
    with pytest.raises(ConfigError):
        DiscriminatorParams(spec, init_mlp(spec, rng))


def test_factories_build_expected_shapes(rng):
    gen = make_generator(10, 2, (128, 128, 128), rng)
    assert gen.latent_dim == 10 and gen.data_dim == 2
    np.testing.assert_array_equal(gen.log_sigma, [0.0, 0.0])
    disc = make_discriminator(2, (128, 128, 128), rng)
    assert disc.spec.layer_sizes == (2, 128, 128, 128, 1)
    enc = make_encoder(2, 10, (16,), rng)
    mean, log_var = encode(enc, rng.standard_normal((5, 2)))
    assert mean.shape == (5, 10) and log_var.shape == (5, 10)


def test_generator_copy_is_independent(rng):
    gen = small_generator(rng)
    c = gen.copy()
    c.log_sigma[0] = 5.0
    c.eta["W0"][0, 0] = 99.0
    assert gen.log_sigma[0] != 5.0 and gen.eta["W0"][0, 0] != 99.0
