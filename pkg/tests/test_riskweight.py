import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transferrisk import autodiff as ad
from transferrisk import riskweight as rw
from transferrisk.autodiff import Tensor
from transferrisk.errors import ShapeError, ValidationError

from oracles import central_difference, max_rel_error

LOSSES = np.array([[[1.0, 2.0], [3.0, 4.0]]])


def test_normalize_examples():
    t = np.array([-2.0, -1.0, 0.0])
    np.testing.assert_array_equal(rw.normalize_map(t, "hardness"), [1, 0.5, 0])
    np.testing.assert_array_equal(rw.normalize_map(t, "paper-eq"), [0, 0.5, 1])
    np.testing.assert_array_equal(rw.normalize_map(np.full(4, -0.3)), np.zeros(4))


def test_normalize_rejects_bad_input():
    with pytest.raises(ValidationError):
        rw.normalize_map(np.array([0.0, np.nan]))
    with pytest.raises(ValidationError):
        rw.normalize_map(np.array([0.0, 1.0]), "inverted")


def test_risk_map_examples():
    r = rw.risk_map(np.array([0.0, 1.0, 0.5]))
    assert r.weights[0] == 1.0 and r.weights[1] == 10.0
    assert r.weights[2] == pytest.approx(3.162278, abs=1e-6)
    np.testing.assert_array_equal(rw.risk_map(np.zeros((3, 3))).weights, np.ones((3, 3)))


@pytest.mark.parametrize("bad", [-0.01, 1.01, np.nan])
def test_risk_map_rejects_out_of_range(bad):
    with pytest.raises(ValidationError):
        rw.risk_map(np.array([0.2, bad]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.floats(0.01, 50), st.integers(0, 2**31 - 1))
def test_hardness_weights_monotone_in_leep(h, w, spread, seed):
    t = -np.random.default_rng(seed).uniform(0, spread, size=(h, w))
    weights = rw.risk_map(rw.normalize_map(t)).weights
    a, b = t.ravel(), weights.ravel()
    lower = a[:, None] < a[None, :]
    assert np.all((b[:, None] > b[None, :])[lower])


# ------------------------------------------------------------ weighted loss


def test_weighted_loss_hand_value():
    loss = Tensor(LOSSES)
    w = np.array([[1.0, 1.0], [2.0, 2.0]])
    labels = np.array([[[0, 1], [1, 0]]])
    assert rw.weighted_loss(loss, w, labels).item() == 8.5


def test_weighted_loss_reduces_to_mean():
    labels = np.ones((1, 2, 2), int)
    assert rw.weighted_loss(Tensor(LOSSES), np.ones((2, 2)), labels).item() == 2.5


def test_weighted_loss_zero_foreground_fallback():
    out = rw.weighted_loss(Tensor(np.ones((2, 2, 2))), np.ones((2, 2)), np.zeros((2, 2, 2), int))
    assert out.item() == 1.0


def test_weighted_loss_gradient_is_weight_over_denominator():
    rng = np.random.default_rng(0)
    loss = Tensor(rng.uniform(size=(3, 4, 4)), requires_grad=True)
    w = rw.risk_map(rng.uniform(size=(4, 4)))
    labels = rng.integers(0, 3, size=(3, 4, 4))
    with ad.Tape() as tape:
        out = rw.weighted_loss(loss, w, labels)
    ad.backward(out, tape)
    denom = np.count_nonzero(labels)
    np.testing.assert_allclose(loss.grad, np.broadcast_to(w.weights / denom, (3, 4, 4)), rtol=1e-15)
    num = central_difference(lambda: rw.weighted_loss(loss, w, labels).item(), loss.data)
    assert np.max(np.abs(num - loss.grad)) < 1e-6
    assert max_rel_error(loss.grad, num) < 1e-6


def test_weighted_loss_shape_errors():
    with pytest.raises(ShapeError):
        rw.weighted_loss(Tensor(LOSSES), np.ones((3, 3)), np.ones((1, 2, 2), int))
    with pytest.raises(ShapeError):
        rw.weighted_loss(Tensor(LOSSES), np.ones((2, 2)), np.ones((2, 2), int))


# ---------------------------------------------------------- class weights


def test_class_weights_examples():
    labels = np.array([0] * 90 + [1] * 10)
    np.testing.assert_allclose(rw.class_weights(labels, 2).weights, [100 / 180, 5.0])
    np.testing.assert_array_equal(rw.class_weights(np.array([0, 1, 2, 0, 1, 2]), 3).weights, [1, 1, 1])
    w = rw.class_weights(np.array([0, 0, 0, 2]), 3).weights
    np.testing.assert_allclose(w, [4 / 9, 1.0, 4 / 3])


# ----------------------------------------------------------------- schemes


def test_scheme_vanilla():
    assert rw.scheme_loss(rw.WeightingScheme("vanilla"), Tensor(LOSSES), np.zeros((1, 2, 2), int)).item() == 2.5


def test_scheme_class_hand_case():
    labels = np.array([[[0, 1], [0, 0]]])
    cw = rw.ClassWeights(np.array([0.5556, 5.0]))
    got = rw.scheme_loss(rw.WeightingScheme("class", class_weights=cw), Tensor(LOSSES), labels).item()
    assert got == pytest.approx((0.5556 * 1 + 5.0 * 2 + 0.5556 * 3 + 0.5556 * 4) / 4, rel=1e-15)


def test_scheme_trsmap_uses_scaled_map_without_exponent():
    ts = np.array([[0.0, 0.5], [1.0, 0.25]])
    got = rw.scheme_loss(rw.WeightingScheme("trsmap", scaled_map=ts), Tensor(LOSSES), np.ones((1, 2, 2), int))
    assert got.item() == pytest.approx((0 + 1 + 3 + 1) / 4)


def test_scheme_riskmap_equals_vanilla_on_constant_map():
    rng = np.random.default_rng(1)
    loss = Tensor(rng.uniform(size=(2, 3, 3)))
    labels = rng.integers(1, 3, size=(2, 3, 3))
    risk = rw.risk_map(rw.normalize_map(np.full((3, 3), -0.7)))
    a = rw.scheme_loss(rw.WeightingScheme("riskmap", risk=risk), loss, labels).item()
    b = rw.scheme_loss(rw.WeightingScheme("vanilla"), loss, labels).item()
    assert a == pytest.approx(b, rel=1e-15)


@pytest.mark.parametrize("kind", ["class", "trsmap", "riskmap"])
def test_scheme_missing_payload_names_scheme(kind):
    with pytest.raises(ValidationError, match=kind):
        rw.scheme_loss(rw.WeightingScheme(kind), Tensor(LOSSES), np.ones((1, 2, 2), int))


def test_unknown_scheme_rejected():
    with pytest.raises(ValidationError):
        rw.WeightingScheme("focal")


# ----------------------------------------------------------------- exports


def test_pgm_mapping_and_round_trip(tmp_path):
    w = np.array([[1.0, 10.0], [5.5, 3.162278]])
    path = tmp_path / "r.pgm"
    rw.write_pgm(path, w)
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    grey = rw.read_pgm(path)
    np.testing.assert_array_equal(grey, [[0, 255], [128, 61]])


def test_pgm_pixel_bytes_that_look_like_whitespace(tmp_path):
    # grey values 9..13 are ASCII whitespace; the header parser must not eat them
    w = 1.0 + 9.0 * np.array([[9, 10, 11, 12, 13, 32]]) / 255.0
    path = tmp_path / "ws.pgm"
    rw.write_pgm(path, w)
    np.testing.assert_array_equal(rw.read_pgm(path), [[9, 10, 11, 12, 13, 32]])
