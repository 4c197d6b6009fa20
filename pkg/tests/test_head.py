import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from radtriage import autodiff as ad
from radtriage.autodiff import RngStream, Tensor, grad_check
from radtriage.errors import ConfigurationError, DimensionError, LabelError
from radtriage.head import HeadConfig, bce_loss, head_forward, head_logit, head_shapes, init_head_params


def f64_head(cfg, seed=0):
    return {k: Tensor(v.data.astype(np.float64)) for k, v in init_head_params(cfg, RngStream(seed)).items()}


def test_head_shapes_default():
    shapes = head_shapes(HeadConfig())
    assert shapes["l1.weight"] == (512, 1152)
    assert shapes["l2.weight"] == (128, 512)
    assert shapes["l3.weight"] == (1, 128)


def test_zero_weights_give_one_half():
    cfg = HeadConfig(in_dim=8, hidden=(4, 3))
    params = {k: Tensor(np.zeros(s)) for k, s in head_shapes(cfg).items()}
    out = head_forward(Tensor(np.ones((2, 8))), params, cfg)
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_eval_mode_is_deterministic(np_rng):
    cfg = HeadConfig(in_dim=8, hidden=(6, 4))
    params = f64_head(cfg)
    z = Tensor(np_rng.normal(size=(5, 8)))
    a = head_forward(z, params, cfg, train=False).data
    b = head_forward(z, params, cfg, train=False).data
    assert a.tobytes() == b.tobytes()


def test_head_matches_numpy_composition(np_rng):
    cfg = HeadConfig(in_dim=8, hidden=(6, 4))
    params = f64_head(cfg)
    p = {k: v.data for k, v in params.items()}
    z = np_rng.normal(size=(3, 8))
    h = np.maximum(z @ p["l1.weight"].T + p["l1.bias"], 0)
    h = np.maximum(h @ p["l2.weight"].T + p["l2.bias"], 0)
    logit = (h @ p["l3.weight"].T + p["l3.bias"])[:, 0]
    expected = 1 / (1 + np.exp(-logit))
    np.testing.assert_allclose(head_forward(Tensor(z), params, cfg).data, expected, atol=1e-12)


def test_zero_dropout_train_equals_eval(np_rng):
    cfg = HeadConfig(in_dim=8, hidden=(6, 4), dropout=(0.0, 0.0))
    params = f64_head(cfg)
    z = Tensor(np_rng.normal(size=(4, 8)))
    train = head_forward(z, params, cfg, train=True, rng=RngStream(1)).data
    np.testing.assert_array_equal(train, head_forward(z, params, cfg).data)


def test_dropout_changes_train_output(np_rng):
    cfg = HeadConfig(in_dim=8, hidden=(64, 32))
    params = f64_head(cfg)
    z = Tensor(np_rng.normal(size=(4, 8)))
    train = head_forward(z, params, cfg, train=True, rng=RngStream(1)).data
    assert not np.array_equal(train, head_forward(z, params, cfg).data)


def test_width_mismatch():
    cfg = HeadConfig(in_dim=8)
    with pytest.raises(ConfigurationError):
        head_forward(Tensor(np.zeros((1, 7))), f64_head(cfg), cfg)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (3, 8), elements=st.floats(-1e6, 1e6)))
def test_output_strictly_inside_unit_interval(z):
    cfg = HeadConfig(in_dim=8, hidden=(6, 4))
    params = f64_head(cfg, seed=2)
    for t in params.values():
        t.data = t.data * 50
    p = head_forward(Tensor(z), params, cfg).data
    assert ((p > 0) & (p < 1)).all()


# ---------------------------------------------------------------- loss


def test_bce_examples():
    assert bce_loss(Tensor([0.5]), [1]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(Tensor([0.2]), [0]).item() == pytest.approx(-math.log(0.8), abs=1e-12)
    assert bce_loss(Tensor([0.5]), [1], pos_weight=3.0).item() == pytest.approx(3 * math.log(2), abs=1e-12)


def test_bce_is_finite_at_extremes():
    assert math.isfinite(bce_loss(Tensor([0.0, 1.0]), [1, 0]).item())


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.98), st.floats(0.001, 0.01))
def test_bce_monotone(p, dp):
    pos_lo = bce_loss(Tensor([p]), [1]).item()
    pos_hi = bce_loss(Tensor([p + dp]), [1]).item()
    neg_lo = bce_loss(Tensor([p]), [0]).item()
    neg_hi = bce_loss(Tensor([p + dp]), [0]).item()
    assert pos_hi < pos_lo
    assert neg_hi > neg_lo


def test_bce_errors():
    with pytest.raises(LabelError):
        bce_loss(Tensor([0.5]), [0.5])
    with pytest.raises(DimensionError):
        bce_loss(Tensor([0.5, 0.5]), [1])


def test_bce_gradient_wrt_logit(np_rng):
    for _ in range(20):
        logit = Tensor(np_rng.normal(size=6) * 2)
        y = np_rng.integers(0, 2, size=6)
        pw = float(np_rng.uniform(0.5, 3))
        assert grad_check(lambda: bce_loss(ad.sigmoid(logit), y, pos_weight=pw), [logit]) < 1e-6


def test_bce_logit_gradient_closed_form():
    # d/dlogit of mean BCE (pos_weight 1) is (p - y) / n
    logit = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    y = np.array([1, 0])
    bce_loss(ad.sigmoid(logit), y).backward()
    p = 1 / (1 + np.exp(-logit.data))
    np.testing.assert_allclose(logit.grad, (p - y) / 2, atol=1e-12)


def test_head_gradient(np_rng):
    cfg = HeadConfig(in_dim=6, hidden=(5, 4))
    params = f64_head(cfg, seed=3)
    z = Tensor(np_rng.normal(size=(4, 6)))
    y = np.array([1, 0, 1, 0])
    fn = lambda: bce_loss(ad.sigmoid(head_logit(z, params, cfg)), y)  # noqa: E731
    assert grad_check(fn, [z, *params.values()]) < 1e-3
