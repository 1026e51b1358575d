import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcuenc.qcore import (
    QTensor,
    QuantParams,
    QuantizationError,
    dequantize,
    quantize,
    requantize,
)


def test_quantize_trivial_values():
    qp = QuantParams(0.5, 0)
    assert quantize(np.array([0.0]), qp).data[0] == 0
    assert quantize(np.array([1.0]), qp).data[0] == 2
    assert quantize(np.array([200.0]), QuantParams(1.0, 0)).data[0] == 127


def test_quantize_clamps_low():
    assert quantize(np.array([-500.0]), QuantParams(1.0, 0)).data[0] == -128


def test_dequantize_inverts_exact_codes():
    qp = QuantParams(0.5, 0)
    q = QTensor(np.array([0, 2], dtype=np.int8), qp)
    assert dequantize(q).tolist() == [0.0, 1.0]


def test_round_half_even():
    qp = QuantParams(1.0, 0)
    # 0.5 and 1.5 both round toward the even neighbor
    assert quantize(np.array([0.5, 1.5, 2.5, -0.5]), qp).data.tolist() == [0, 2, 2, 0]


def test_rejects_non_finite_with_index():
    x = np.array([[1.0, 2.0], [np.nan, 3.0]])
    with pytest.raises(QuantizationError, match=r"\(1, 0\)"):
        quantize(x, QuantParams(1.0, 0))


def test_bad_params_rejected():
    with pytest.raises(QuantizationError):
        QuantParams(0.0, 0)
    with pytest.raises(QuantizationError):
        QuantParams(1.0, 200)


def test_requantize_trivial():
    assert requantize(np.array([10]), 0.5, 0)[0] == 5
    assert requantize(np.array([0]), 0.123, 7)[0] == 7
    assert requantize(np.array([1000]), 0.2, 0)[0] == 127


@given(
    scale=st.floats(1e-3, 10.0),
    zp=st.integers(-128, 127),
    data=st.lists(st.floats(-50.0, 50.0), min_size=1, max_size=64),
)
@settings(max_examples=200, deadline=None)
def test_round_trip_bound(scale, zp, data):
    """|dequantize(quantize(x)) - x| <= scale/2 for in-range x."""
    qp = QuantParams(scale, zp)
    lo, hi = (-128 - zp) * scale, (127 - zp) * scale
    x = np.clip(np.array(data), lo, hi)
    err = np.abs(dequantize(quantize(x, qp)) - x)
    assert np.all(err <= scale / 2 + 1e-12)


@given(
    scale=st.floats(1e-3, 10.0),
    zp=st.integers(-128, 127),
    xs=st.lists(st.floats(-100.0, 100.0), min_size=2, max_size=32),
)
@settings(max_examples=200, deadline=None)
def test_quantize_monotone(scale, zp, xs):
    qp = QuantParams(scale, zp)
    x = np.sort(np.array(xs))
    q = quantize(x, qp).data.astype(int)
    assert np.all(np.diff(q) >= 0)


def test_determinism():
    rng = np.random.default_rng(42)
    x = rng.normal(0, 3, 1000)
    qp = QuantParams(0.07, 3)
    assert quantize(x, qp).data.tobytes() == quantize(x.copy(), qp).data.tobytes()
