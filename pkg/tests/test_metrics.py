import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import least_squares

from compgen import metrics
from compgen.metrics import (comp_contrast, compositionality_check, hessian_cross_check, irreducibility_check,
                             kernel_ridge_fit, kernel_ridge_predict, numerical_rank, r2_score,
                             slot_identifiability)
from compgen.model import Autoencoder, ModelConfig
from compgen.scene import SceneConfig, render, render_flat, render_object, sample_in_band, sample_ood

CFG = SceneConfig()


# --- contrast and influence sets -------------------------------------------

def test_contrast_closed_form():
    # f(z) = (z0 * z1, z0): pixel 0 touches both slots with norms |z1|, |z0|
    f = lambda z: np.array([z[0] * z[1], z[0]])
    assert comp_contrast(f, np.array([2.0, 3.0]), K=2) == pytest.approx(6.0, rel=1e-8)


def test_contrast_zero_for_separable_function():
    f = lambda z: np.array([np.sin(z[0]), z[1] ** 2, np.exp(z[1])])
    assert comp_contrast(f, np.array([0.3, -0.7]), K=2) == 0.0
    ok, sets = compositionality_check(f, np.array([0.3, -0.7]), K=2)
    assert ok and sets.sets == [[0], [1, 2]]


def test_render_is_compositional_everywhere():
    rng = np.random.default_rng(0)
    f = render_flat(CFG)
    for z in rng.random((50, 4)):
        assert comp_contrast(f, z, K=2) < 1e-12
        assert compositionality_check(f, z, K=2)[0]
        assert hessian_cross_check(f, z, K=2) < 1e-5


def test_trained_style_network_is_not_compositional():
    ae = Autoencoder(ModelConfig(decoder="masked_softmax"))
    z = np.random.default_rng(1).normal(size=6)
    assert comp_contrast(ae.decoder_flat(), z, K=2) > 1e-6
    assert not compositionality_check(ae.decoder_flat(), z, K=2)[0]
    assert hessian_cross_check(ae.decoder_flat(), z, K=2) > 1e-5


def test_numerical_rank():
    assert numerical_rank(np.zeros((3, 2))) == 0
    assert numerical_rank(np.array([[1.0, 2.0], [2.0, 4.0]])) == 1
    assert numerical_rank(np.eye(3)) == 3
    assert numerical_rank(np.zeros((0, 2))) == 0


def test_irreducibility_witnesses():
    # slot 0 controls pixels {0, 1} through disjoint coordinates -> reducible
    reducible = lambda z: np.array([z[0], z[1], z[2] + z[3]])
    assert not irreducibility_check(reducible, np.zeros(4), K=2, exhaustive=True)
    # a third pixel mixing both coordinates ties the set together
    irreducible = lambda z: np.array([z[0], z[1], z[0] + z[1], z[2] + z[3]])
    assert irreducibility_check(irreducible, np.zeros(4), K=2, exhaustive=True)
    # duplicated rows are still irreducible: both halves keep full rank 1
    dup = lambda z: np.array([z[0] + z[1], z[0] + z[1], z[2], z[2]])
    assert irreducibility_check(dup, np.zeros(4), K=2, exhaustive=True)


def test_render_is_irreducible():
    rng = np.random.default_rng(2)
    for z in rng.random((20, 4)):
        assert irreducibility_check(render_flat(CFG), z, K=2, rng=np.random.default_rng(0))


def test_irreducibility_warns_on_empty_set():
    f = lambda z: np.array([z[0] + z[1]])
    with pytest.warns(UserWarning, match="slot 1"):
        assert irreducibility_check(f, np.zeros(4), K=2)


# --- regression oracles -----------------------------------------------------

def test_r2_closed_form():
    assert r2_score([1, 2, 3, 4, 5], [1.1, 1.9, 3.2, 3.7, 5.3]) == pytest.approx(0.976, abs=1e-9)
    assert r2_score([1, 2, 3], [1, 2, 3]) == 1.0
    assert r2_score([1, 2, 3], [2, 2, 2]) == 0.0
    assert r2_score([2, 2, 2], [2, 2, 2]) == 1.0
    assert r2_score([2, 2, 2], [2, 2, 3]) == -np.inf


def test_kernel_ridge_matches_reference_solver():
    # frozen from an independent RBF kernel-ridge implementation on mean-centered targets
    X = np.arange(5.0)[:, None]
    Y = np.array([1.0, 3.0, 2.0, 5.0, 4.0])
    m = kernel_ridge_fit(X, Y, bandwidth=1.0, ridge=1e-3)
    pred = kernel_ridge_predict(m, np.array([[0.0], [2.5], [10.0]]))
    np.testing.assert_allclose(pred, [1.00619759, 3.29622256, 2.99999995], atol=1e-8)


def test_kernel_ridge_closed_form_system():
    rng = np.random.default_rng(3)
    X, Y = rng.normal(size=(5, 2)), rng.normal(size=(5, 3))
    m = kernel_ridge_fit(X, Y, bandwidth=0.7, ridge=0.1)
    G = np.exp(-((X[:, None] - X[None]) ** 2).sum(-1) / (2 * 0.49))
    alpha = np.linalg.solve(G + 0.1 * np.eye(5), Y - Y.mean(axis=0))
    np.testing.assert_allclose(m.alpha, alpha, atol=1e-9)
    np.testing.assert_allclose(kernel_ridge_predict(m, X), G @ alpha + Y.mean(axis=0), atol=1e-9)


def test_kernel_ridge_errors():
    with pytest.raises(ValueError, match="at least 2"):
        kernel_ridge_fit(np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError, match="finite"):
        kernel_ridge_fit(np.array([[0.0], [np.nan]]), np.zeros(2))


# --- slot identifiability fixtures -----------------------------------------

def gt_latents(n=1000, seed=4):
    return np.random.default_rng(seed).random((n, 2, 2))


def test_identifiability_recovers_permutation():
    z = gt_latents()
    score, perm, R = slot_identifiability(z[:, ::-1], z)
    assert score >= 0.99
    assert tuple(perm) == (1, 0)
    assert R[0, 0] < 0.5 and R[1, 1] < 0.5


def test_identifiability_low_for_noise():
    z = gt_latents()
    noise = np.random.default_rng(5).normal(size=(1000, 2, 3))
    assert slot_identifiability(noise, z)[0] < 0.1


def test_identifiability_high_for_slotwise_cubic():
    z = gt_latents()
    inferred = np.concatenate([(2 * z - 1) ** 3, np.sin(3 * z[..., :1])], axis=-1)
    assert slot_identifiability(inferred, z)[0] > 0.95


def test_identifiability_input_checks():
    with pytest.raises(ValueError, match="100"):
        slot_identifiability(np.zeros((10, 2, 3)), gt_latents(10))
    z = gt_latents()
    z[:, 1, 0] = 0.5
    with pytest.raises(ValueError, match="slot 1"):
        slot_identifiability(z, z)


# --- isolated decoder error with an oracle model ----------------------------

class OracleModel:
    """Inverts the generator by least squares; decodes with the true renderer.

    ``swap`` reverses slot order in the encoder output to exercise matching.
    """

    def __init__(self, cfg, swap=False):
        self.cfg = cfg
        self.swap = swap

    def encode(self, x):
        cfg = self.cfg
        u = (np.arange(cfg.N) + 0.5) / cfg.N
        out = np.zeros((len(x), 2, 3))
        for i, xi in enumerate(np.atleast_2d(x)):
            for k in range(2):
                part = xi * self._mask(k)
                # start from the brightest pixel, then refine
                p0 = (u[np.argmax(part)] - k / 2 - cfg.w) / (0.5 - 2 * cfg.w)
                r = least_squares(lambda q: render_object(cfg, k, q) - part, [np.clip(p0, 0, 1), 0.5],
                                  bounds=([0, 0], [1, 1]), xtol=1e-15, ftol=1e-15, gtol=1e-15)
                out[i, k, :2] = r.x
        return out[:, ::-1] if self.swap else out

    def _mask(self, k):
        half = self.cfg.N // 2
        m = np.zeros(self.cfg.N)
        m[k * half:(k + 1) * half] = 1
        return m

    def slot_contributions(self, zhat):
        zhat = zhat[:, ::-1] if self.swap else zhat
        return np.stack([render_object(self.cfg, k, zhat[:, k, :2]) for k in range(2)], axis=1)[
            :, ::-1 if self.swap else 1]

    def decode(self, zhat):
        return self.slot_contributions(zhat).sum(axis=1)

    def reconstruct(self, x):
        return self.decode(self.encode(x))


@pytest.mark.parametrize("swap", [False, True])
def test_isolated_error_vanishes_for_oracle(swap):
    model = OracleModel(CFG, swap)
    zo = sample_ood(CFG, 6, np.random.default_rng(6))
    zi = sample_in_band(CFG, 3, np.random.default_rng(7))
    err = metrics.isolated_decoder_errors(model, CFG, np.concatenate([zi, zo]))
    assert err.shape == (9,)
    assert np.all(err < 1e-12)


def test_isolated_error_uses_full_ae_in_band():
    ae = Autoencoder(ModelConfig())
    zi = sample_in_band(CFG, 20, np.random.default_rng(8))
    np.testing.assert_array_equal(metrics.isolated_decoder_errors(ae, CFG, zi),
                                  metrics.per_sample_mse(ae, render(CFG, zi)))


def test_reconstruction_r2_of_oracle():
    model = OracleModel(CFG)
    x = render(CFG, sample_ood(CFG, 5, np.random.default_rng(9)))
    assert metrics.reconstruction_r2(model, x) == pytest.approx(1.0, abs=1e-9)


# --- heatmaps ----------------------------------------------------------------

def test_heatmap_regions_and_outputs():
    ae = Autoencoder(ModelConfig())
    rng = np.random.default_rng(10)
    z = np.concatenate([sample_in_band(CFG, 300, rng), sample_ood(CFG, 300, rng)])
    hm = metrics.heatmap_grid(ae, CFG, z, resolution=8)
    assert hm.values.shape == (8, 8)
    assert np.all(hm.region.diagonal() == "ID")
    assert hm.region[0, 7] == "OOD"
    assert np.all((hm.values >= 0) | (hm.counts == 0))
    csv = hm.to_csv().splitlines()
    assert csv[0] == "row,col,value,region" and len(csv) == 65
    pgm = hm.to_pgm()
    assert pgm.startswith(b"P5\n# max=")
    assert pgm.endswith(bytes(pgm[-64:])) and len(pgm.split(b"\n255\n", 1)[1]) == 64
    with pytest.raises(ValueError, match="resolution"):
        metrics.heatmap_grid(ae, CFG, z, resolution=4)


def test_report_json_round_trip():
    r = metrics.MetricsReport(0.9, 0.8, 0.99, 0.7, 0.1, 1e-5, 1e-3, 1e-5, 1e-4, [0, 1], [1, 0])
    d = json.loads(r.to_json())
    assert d["ood_identifiability"] == 0.8 and d["permutation"] == [0, 1]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_contrast_nonnegative(seed):
    ae = Autoencoder(ModelConfig(N=8, enc_hidden=(4,), dec_hidden=(4,)))
    z = np.random.default_rng(seed).normal(size=6)
    assert comp_contrast(ae.decoder_flat(), z, K=2) >= 0.0
