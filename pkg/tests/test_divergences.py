import math

import numpy as np
import pytest

from robustrisk import (
    Divergence,
    DivergenceOverflowError,
    chi_squared,
    conjugate_term,
    divergence_of_weights,
    from_name,
    kl,
    scaled_kl,
    validate_divergence,
    z_of_loss,
)


@pytest.mark.parametrize(
    "div", [kl(), scaled_kl(2.0), scaled_kl(0.5), chi_squared()],
    ids=["kl", "scaled2", "scaled05", "chi2"],
)
def test_builtins_pass_structural_checks(div):
    validate_divergence(div)


def test_from_name_resolves_config_names():
    assert from_name("kl").name == "kl"
    assert from_name("scaled_kl", d=3.0).kl_scale == 3.0
    assert from_name("chi2").a == -2.0
    with pytest.raises(ValueError):
        from_name("wasserstein")


def test_z_kl_unit_point():
    # theta (x - c) = 1 lands on g(1) = exp(0) = 1
    assert z_of_loss(kl(), 1.0, -1.0, 0.0) == 1.0


def test_z_chi2_two_sided():
    div = chi_squared()
    assert z_of_loss(div, 1.0, 0.5, 0.0) == pytest.approx(0.75)
    assert z_of_loss(div, 1.0, 0.5, 1.0) == pytest.approx(1.25)


def test_z_chi2_truncates_outside_domain():
    # theta (x - c) = -2.5 < a = -2 forces density 0
    assert z_of_loss(chi_squared(), 1.0, 0.5, -2.0) == 0.0
    # the boundary point itself sits outside the open interval
    assert z_of_loss(chi_squared(), 1.0, 0.5, -1.5) == 0.0


def test_z_vectorized_matches_scalar():
    div = chi_squared()
    xs = np.linspace(-3, 3, 13)
    vec = z_of_loss(div, 0.7, 0.2, xs)
    assert vec.shape == xs.shape
    for x, v in zip(xs, vec):
        assert v == z_of_loss(div, 0.7, 0.2, float(x))


def test_z_rejects_nonpositive_theta():
    with pytest.raises(ValueError):
        z_of_loss(kl(), 0.0, 0.0, 1.0)


def test_divergence_of_unit_weights_is_zero():
    assert divergence_of_weights(kl(), np.ones(10)) == 0.0
    assert divergence_of_weights(chi_squared(), np.ones(3)) == 0.0


def test_two_point_kl_divergence_value():
    # exact tilted weights for equiprobable {0, 1} at theta = 1
    w0 = 2.0 / (1.0 + math.e)
    w1 = 2.0 * math.e / (1.0 + math.e)
    got = divergence_of_weights(kl(), np.array([w0, w1]))
    brute = 0.5 * (w0 * math.log(w0) + w1 * math.log(w1))
    assert got == pytest.approx(brute, abs=1e-15)
    assert got == pytest.approx(0.11095, abs=1e-4)


def test_two_point_chi2_divergence_value():
    got = divergence_of_weights(chi_squared(), np.array([0.75, 1.25]))
    assert got == (0.25**2 + 0.25**2) / 2.0


def test_weights_validation():
    with pytest.raises(ValueError, match="nonnegative"):
        divergence_of_weights(kl(), np.array([-0.1, 2.1]))
    with pytest.raises(ValueError, match="average"):
        divergence_of_weights(kl(), np.array([0.4, 0.4]))


def test_divergence_nonnegative_on_random_weights():
    rng = np.random.default_rng(6)
    for div in (kl(), chi_squared(), scaled_kl(3.0)):
        for _ in range(50):
            w = rng.exponential(size=40)
            w /= w.mean()
            assert divergence_of_weights(div, w) >= -1e-12


def test_kl_weight_zero_contributes_zero():
    # xlogx limit at 0
    w = np.array([0.0, 2.0])
    assert divergence_of_weights(kl(), w) == pytest.approx(
        0.5 * 2.0 * math.log(2.0)
    )


def test_chi2_f_extends_to_zero():
    assert float(chi_squared().f(np.array(0.0))) == 1.0
    assert float(kl().f(np.array(0.0))) == 0.0


def test_overflow_guard_carries_exponent():
    with pytest.raises(DivergenceOverflowError) as err:
        z_of_loss(kl(), 1.0, 0.0, 800.0)
    # the recorded exponent is the actual exp argument, y - 1
    assert err.value.exponent == pytest.approx(799.0)
    # scaled family divides the exponent by d first
    assert z_of_loss(scaled_kl(2.0), 1.0, 0.0, 800.0) > 0


def test_conjugate_term_values_and_zero_limit():
    z = np.array([0.0, 0.75, 1.25])
    chi = conjugate_term(chi_squared(), z)
    # z f'(z) - f(z) = 2 z (z - 1) - (z - 1)^2, limit -1 at z = 0
    assert chi[0] == -1.0
    assert chi[1] == pytest.approx(0.75 * 2 * (-0.25) - 0.0625)
    assert chi[2] == pytest.approx(1.25 * 2 * 0.25 - 0.0625)
    klv = conjugate_term(kl(), z)
    assert klv[0] == 0.0
    assert klv[1] == pytest.approx(0.75)  # x f'(x) - f(x) = x for KL
    assert klv[2] == pytest.approx(1.25)


def test_validate_rejects_flat_generator():
    flat = Divergence(
        name="flat",
        f=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        f_prime=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        f_second=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
        g=lambda y: np.asarray(y, dtype=float),
        a=0.0,
    )
    with pytest.raises(ValueError):
        validate_divergence(flat)
