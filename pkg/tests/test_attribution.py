import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cass.attribution import (integrated_gradients, normalise, read_raw_map, render_heatmap,
                              write_raw_map)
from cass.imageio import read_png
from cass.model import Model, ModelConfig, StemSpec
from cass.tensor import DimensionError


class LinearModel:
    """F(x) = W x.ravel() + b, with the same forward/backward surface as Model."""

    def __init__(self, w, b):
        self.w, self.b = w, b

    def forward(self, x, train=False):
        self._n = x.shape
        return x.reshape(len(x), -1) @ self.w.T + self.b

    def backward(self, dlogits):
        return (dlogits @ self.w).reshape(self._n)


class TanhModel:
    """F(x) = V tanh(W x + c): smooth, so the Riemann error shrinks like 1/steps."""

    def __init__(self, seed, shape=(8, 8), hidden=16):
        rng = np.random.default_rng(seed)
        n = int(np.prod(shape))
        self.w = rng.normal(0, 2 / np.sqrt(n), (hidden, n))
        self.c = rng.normal(0, 0.5, hidden)
        self.v = rng.normal(0, 1, (3, hidden))

    def forward(self, x, train=False):
        self._shape = x.shape
        self._h = np.tanh(x.reshape(len(x), -1) @ self.w.T + self.c)
        return self._h @ self.v.T

    def backward(self, dlogits):
        dz = (dlogits @ self.v) * (1 - self._h ** 2)
        return (dz @ self.w).reshape(self._shape)


def tiny_model(seed=0):
    cfg = ModelConfig(input_shape=(1, 16, 16), stem=StemSpec(8), stages=((1, 16),), seed=seed)
    model = Model(cfg, dtype=np.float64)
    # random BN shifts: without them the net is positively homogeneous and IG
    # from a zero baseline is exact, which would make the convergence tests vacuous
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        if p.name.endswith(".beta"):
            p.value[...] = rng.normal(0, 0.5, p.value.shape)
    return model


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_linear_model_exact(seed, steps):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 36))
    x, base = rng.random((6, 6)), rng.random((6, 6))
    target = int(rng.integers(3))
    amap = integrated_gradients(LinearModel(w, rng.normal(size=3)), x, target, base, steps)
    np.testing.assert_allclose(amap.values, w[target].reshape(6, 6) * (x - base), atol=1e-12)
    assert amap.completeness_gap < 1e-9


def test_zero_path():
    model = tiny_model()
    x = np.random.default_rng(0).random((16, 16))
    amap = integrated_gradients(model, x, 1, baseline=x, steps=8)
    assert not amap.values.any() and amap.completeness_gap == pytest.approx(0, abs=1e-12)


def test_shape_checks():
    model = tiny_model()
    with pytest.raises(DimensionError):
        integrated_gradients(model, np.zeros((16, 16)), 0, baseline=np.zeros((8, 8)))
    with pytest.raises(ValueError):
        integrated_gradients(model, np.zeros((16, 16)), 0, steps=0)


def test_deterministic_and_leaves_no_grads():
    model = tiny_model()
    x = np.random.default_rng(1).random((16, 16))
    a = integrated_gradients(model, x, 2, steps=16)
    b = integrated_gradients(model, x, 2, steps=16)
    np.testing.assert_array_equal(a.values, b.values)
    assert all(not p.grad.any() for p in model.parameters())


def test_gap_shrinks_with_steps():
    model = tiny_model(3)
    x = np.random.default_rng(3).random((16, 16))
    gaps = [integrated_gradients(model, x, 0, steps=s).completeness_gap for s in (4, 256)]
    assert gaps[1] < gaps[0]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([8, 16, 32, 64]), st.integers(0, 2))
def test_doubling_steps_never_much_worse(seed, steps, target):
    model = TanhModel(seed % 50)
    x = np.random.default_rng(seed).random((8, 8))
    g1 = integrated_gradients(model, x, target, steps=steps).completeness_gap
    g2 = integrated_gradients(model, x, target, steps=2 * steps).completeness_gap
    assert g2 <= 1.5 * g1 + 1e-12


def test_piecewise_linear_gap_is_not_monotone():
    # with ReLU kinks along the path the Riemann error oscillates in the step count
    model = tiny_model(0)
    x = np.random.default_rng(0).random((16, 16))
    g128, g256 = (integrated_gradients(model, x, 0, steps=s).completeness_gap for s in (128, 256))
    assert g256 > 1.5 * g128


# -- rendering --------------------------------------------------------------------------

def test_zero_map_is_plain_underlay(tmp_path):
    under = np.random.default_rng(0).random((8, 8))
    out = render_heatmap(np.zeros((8, 8)), under, tmp_path / "h.png")
    gray = np.round(under * 255).astype(np.uint8)
    for ch in range(3):
        np.testing.assert_array_equal(out[..., ch], gray)
    np.testing.assert_array_equal(read_png(tmp_path / "h.png"), out)


def test_one_hot_pixel():
    vals = np.zeros((10, 10))
    vals[3, 4] = -2.5
    under = np.full((10, 10), 0.4)
    out = render_heatmap(vals, under)
    assert normalise(vals)[3, 4] == 1
    assert out[3, 4].tolist() == [round(0.5 * 102 + 0.5 * 255), 51, 51]
    mask = np.ones((10, 10), bool)
    mask[3, 4] = False
    assert (out[mask] == 102).all()


def test_render_shape_check():
    with pytest.raises(DimensionError):
        render_heatmap(np.zeros((4, 4)), np.zeros((5, 5)))


def test_raw_map_round_trip(tmp_path):
    vals = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    write_raw_map(tmp_path / "m.bin", vals)
    blob = (tmp_path / "m.bin").read_bytes()
    assert blob[:8] == b"CASSIG1\0" and len(blob) == 16 + 4 * 35
    np.testing.assert_array_equal(read_raw_map(tmp_path / "m.bin"), vals)
