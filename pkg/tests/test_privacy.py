import numpy as np
import pytest

from fedcl.core import encoder_forward, init_encoder
from fedcl.privacy import (
    IDENTITY,
    OFF,
    EncryptionSpec,
    encrypted_feature_batch,
    instahide_encrypt,
    mixing_weights,
)


def test_identity_configuration_returns_input():
    x = np.array([1.0, -2.0, 3.0])
    out = instahide_encrypt(x, np.zeros((0, 3)), IDENTITY, np.random.default_rng(0))
    np.testing.assert_array_equal(out, x)


def test_convex_mix_of_equal_inputs_is_the_input():
    x = np.array([0.5, 1.5, -1.0])
    spec = EncryptionSpec(k_mix=2, lambda_floor=0.25, sign_mask_mode=OFF)
    out = instahide_encrypt(x, x[None], spec, np.random.default_rng(0), weights=np.array([0.5, 0.5]))
    np.testing.assert_allclose(out, x, rtol=1e-15)


def test_sign_mask_has_zero_mean():
    x = np.array([2.0, -1.0, 0.5, 3.0])
    spec = EncryptionSpec(k_mix=1, lambda_floor=0.0)
    rng = np.random.default_rng(1)
    draws = np.stack([instahide_encrypt(x, np.zeros((0, 4)), spec, rng) for _ in range(10_000)])
    sigma = np.abs(x)
    assert np.all(np.abs(draws.mean(axis=0)) < 3 * sigma / 100)


def test_mixing_weights_sum_to_one():
    rng = np.random.default_rng(2)
    for k in (1, 2, 3, 5):
        for _ in range(200):
            lam = mixing_weights(k, 0.1 / k, rng)
            assert abs(lam.sum() - 1.0) < 1e-6
            assert np.all(lam > 0)


def test_encryption_deterministic_given_rng_state():
    rng = np.random.default_rng(3)
    x, pool = rng.standard_normal(5), rng.standard_normal((6, 5))
    spec = EncryptionSpec(k_mix=3, lambda_floor=0.1)
    a = instahide_encrypt(x, pool, spec, np.random.default_rng(9))
    b = instahide_encrypt(x, pool, spec, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_pool_too_small_and_bad_spec():
    with pytest.raises(ValueError):
        instahide_encrypt(np.ones(3), np.zeros((0, 3)), EncryptionSpec(k_mix=2), np.random.default_rng(0))
    with pytest.raises(ValueError):
        EncryptionSpec(k_mix=2, lambda_floor=0.6)
    with pytest.raises(ValueError):
        EncryptionSpec(sign_mask_mode="sometimes")


def _setup(n=200):
    rng = np.random.default_rng(4)
    params = init_encoder([8, 16, 4], rng)
    x = rng.standard_normal((n, 8)) + 2.0
    return params, x


def test_encrypted_features_are_unit_norm():
    params, x = _setup()
    feats, _ = encrypted_feature_batch(params, x, 50, EncryptionSpec(), np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-6)
    assert feats.dtype == np.float32


def test_identity_features_equal_raw_features():
    params, x = _setup()
    feats, prim = encrypted_feature_batch(params, x, 30, IDENTITY, np.random.default_rng(0))
    np.testing.assert_array_equal(feats, encoder_forward(params, x[prim]).astype(np.float32))


def test_masking_lowers_similarity_to_primary():
    params, x = _setup(200)

    def mean_cos(spec):
        feats, prim = encrypted_feature_batch(params, x, 200, spec, np.random.default_rng(5))
        raw = encoder_forward(params, x[prim])
        return float(np.mean(np.sum(feats * raw, axis=1)))

    assert mean_cos(EncryptionSpec()) < mean_cos(IDENTITY)
