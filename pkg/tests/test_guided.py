import numpy as np
import pytest

from cuedepth import engine as E
from cuedepth.guided import (
    FilterConfig,
    bruteforce_guided_filter,
    guided_filter,
    guided_filter_upsample,
)


def t64(x):
    return E.Tensor(np.asarray(x), dtype=np.float64)


def total_variation(x):
    return np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum()


def test_defaults():
    cfg = FilterConfig()
    assert cfg.radius == 4
    assert cfg.epsilon == 1e-3


def test_constant_guidance_gives_double_box_average():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(20, 20))
    cfg = FilterConfig(radius=3)
    out = guided_filter(t64(d), t64(np.full((20, 20), 2.0)), cfg).data
    # a == 0 when var(G) == 0, so the output is box(box(D))
    want = E.box_filter(E.box_filter(t64(d), 3), 3).data
    assert np.abs(out - want).max() < 1e-10


def test_perfect_linear_model_small_epsilon():
    rng = np.random.default_rng(1)
    d = rng.normal(size=(16, 16))
    cfg = FilterConfig(radius=2, epsilon=1e-12)
    out = guided_filter(t64(d), t64(d), cfg).data
    assert np.abs(out - d).max() < 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(32, 32))
    g = rng.normal(size=(32, 32))
    cfg = FilterConfig()
    got = guided_filter(t64(d), t64(g), cfg).data
    want = bruteforce_guided_filter(d, g, cfg.radius, cfg.epsilon)
    assert np.abs(got - want).max() < 1e-5


def test_upsample_path_identity_at_same_size():
    rng = np.random.default_rng(7)
    d = rng.normal(size=(16, 16))
    g = rng.normal(size=(16, 16))
    cfg = FilterConfig(radius=2)
    a = guided_filter_upsample(t64(d), t64(g), cfg).data
    b = guided_filter(t64(d), t64(g), cfg).data
    assert np.array_equal(a, b)


def test_affine_equivariance():
    rng = np.random.default_rng(2)
    d = rng.normal(size=(24, 24))
    g = rng.normal(size=(24, 24))
    cfg = FilterConfig()
    base = guided_filter(t64(d), t64(g), cfg).data
    shifted = guided_filter(t64(d + 5.0), t64(g), cfg).data
    assert np.abs(shifted - (base + 5.0)).max() < 1e-9


def test_smoothing_reduces_total_variation_constant_guidance():
    for seed in range(4):
        rng = np.random.default_rng(seed)
        low = rng.normal(size=(8, 8))
        up = E.bilinear_resize(t64(low), (32, 32))
        cfg = FilterConfig()
        out = guided_filter_upsample(t64(low), t64(np.ones((32, 32))), cfg).data
        assert total_variation(out) <= total_variation(up.data) + 1e-12


def test_gradients_wrt_depth_and_guidance():
    rng = np.random.default_rng(3)
    d = E.parameter(rng.normal(size=(6, 6)), dtype=np.float64)
    g = E.parameter(rng.normal(size=(12, 12)), dtype=np.float64)
    cfg = FilterConfig(radius=2)

    def f():
        return E.mean_(E.square(guided_filter_upsample(d, g, cfg)))

    err = E.gradient_check(f, [d, g], step=1e-5)
    assert err < 1e-5


def test_fast_mode_close_to_full():
    rng = np.random.default_rng(4)
    low = rng.normal(size=(8, 8))
    g = rng.normal(size=(32, 32))
    full = guided_filter_upsample(t64(low), t64(g), FilterConfig()).data
    fast = guided_filter_upsample(t64(low), t64(g), FilterConfig(mode="fast")).data
    # different algorithms, same scale of result
    assert fast.shape == full.shape
    assert np.isfinite(fast).all()


def test_uncertainty_weights_accepted():
    rng = np.random.default_rng(5)
    low = rng.normal(size=(8, 8))
    g = rng.normal(size=(16, 16))
    sig = np.full((16, 16), 0.5)
    out = guided_filter_upsample(t64(low), t64(g), FilterConfig(radius=2), edge_log_var=sig).data
    assert out.shape == (16, 16)
    assert np.isfinite(out).all()
    # uniform weights must reproduce the unweighted result
    out_uniform = guided_filter_upsample(
        t64(low), t64(g), FilterConfig(radius=2), edge_log_var=np.zeros((16, 16))).data
    out_plain = guided_filter_upsample(t64(low), t64(g), FilterConfig(radius=2)).data
    assert np.abs(out_uniform - out_plain).max() < 1e-9


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        FilterConfig(radius=0)
    with pytest.raises(ValueError):
        FilterConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        FilterConfig(mode="nope")
