import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lasafl.update import (
    LayeredUpdate,
    UpdateBatch,
    from_bytes,
    l2_norm,
    linear_combine,
    make_layout,
    slice_layer,
    to_bytes,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def updates(draw, max_layers=4, max_len=6):
    lens = draw(st.lists(st.integers(1, max_len), min_size=1, max_size=max_layers))
    layout = make_layout((f"p{i}", n) for i, n in enumerate(lens))
    vals = draw(arrays(np.float64, sum(lens), elements=finite))
    return LayeredUpdate(vals, layout)


def test_slice_examples():
    u = LayeredUpdate([1, 2, 3, 4], make_layout([("A", 1), ("B", 3)]))
    assert slice_layer(u, 1).tolist() == [2, 3, 4]
    single = LayeredUpdate([7.0, 8.0], make_layout([("w", 2)]))
    assert slice_layer(single, 0).tolist() == [7.0, 8.0]
    v = LayeredUpdate([5, -5], make_layout([("A", 1), ("B", 1)]))
    assert slice_layer(v, 0).tolist() == [5]


def test_slice_out_of_range_and_read_only():
    u = LayeredUpdate([1, 2], make_layout([("A", 2)]))
    with pytest.raises(IndexError):
        slice_layer(u, 1)
    with pytest.raises(IndexError):
        slice_layer(u, -1)
    with pytest.raises(ValueError):
        slice_layer(u, 0)[0] = 3.0


def test_construction_rejects_bad_values():
    layout = make_layout([("A", 2)])
    with pytest.raises(ValueError):
        LayeredUpdate([1.0, np.nan], layout)
    with pytest.raises(ValueError):
        LayeredUpdate([1.0, np.inf], layout)
    with pytest.raises(ValueError):
        LayeredUpdate([1.0, 2.0, 3.0], layout)


def test_constructor_copies_input():
    arr = np.array([1.0, 2.0])
    u = LayeredUpdate(arr, make_layout([("A", 2)]))
    arr[0] = 99.0
    assert u.values[0] == 1.0


def test_batch_requires_shared_layout():
    a = LayeredUpdate([1, 2], make_layout([("A", 2)]))
    b = LayeredUpdate([1, 2], make_layout([("A", 1), ("B", 1)]))
    with pytest.raises(ValueError):
        UpdateBatch((a, b), (0, 1))
    with pytest.raises(ValueError):
        UpdateBatch((), ())


def test_linear_combine_examples():
    layout = make_layout([("A", 2)])
    batch = UpdateBatch((LayeredUpdate([1, 1], layout), LayeredUpdate([3, 3], layout)), (0, 1))
    assert linear_combine(batch, [0.5, 0.5]).values.tolist() == [2, 2]
    assert linear_combine(batch, [1, 0]).values.tolist() == [1, 1]
    assert linear_combine(batch, [0, 0]).values.tolist() == [0, 0]
    with pytest.raises(ValueError):
        linear_combine(batch, [1.0])


def test_l2_norm_examples():
    assert l2_norm([3, 4]) == 5
    assert l2_norm([0, 0, 0]) == 0
    assert l2_norm([1, 1, 1, 1]) == 2


@given(updates())
def test_slices_reconstruct(u):
    parts = [slice_layer(u, l) for l in range(u.num_layers)]
    assert np.array_equal(np.concatenate(parts), u.values)


@given(updates())
def test_norm_splits_over_layers(u):
    total = l2_norm(u) ** 2
    per_layer = sum(l2_norm(slice_layer(u, l)) ** 2 for l in range(u.num_layers))
    assert per_layer == pytest.approx(total, rel=1e-10, abs=1e-300)


@settings(max_examples=50)
@given(
    st.integers(1, 5),
    st.integers(1, 6),
    st.floats(-10, 10),
    st.floats(-10, 10),
    st.integers(0, 2**32 - 1),
)
def test_linear_combine_is_linear(n, d, a, b, seed):
    rng = np.random.default_rng(seed)
    batch = UpdateBatch.from_matrix(rng.normal(size=(n, d)), make_layout([("w", d)]))
    w1, w2 = rng.normal(size=n), rng.normal(size=n)
    lhs = linear_combine(batch, a * w1 + b * w2).values
    rhs = a * linear_combine(batch, w1).values + b * linear_combine(batch, w2).values
    scale = max(1.0, np.abs(lhs).max(), np.abs(rhs).max())
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * scale)


@given(updates())
def test_binary_record_round_trip(u):
    blob = to_bytes(u)
    back = from_bytes(blob)
    assert back.layout == u.layout
    assert np.array_equal(back.values, u.values)
    assert to_bytes(back) == blob


def test_binary_record_layout():
    u = LayeredUpdate([1.5, -2.0], make_layout([("wé", 1), ("b", 1)]))
    blob = to_bytes(u)
    name = "wé".encode()
    expected = (
        (2).to_bytes(4, "little")
        + len(name).to_bytes(2, "little") + name + (1).to_bytes(4, "little")
        + (1).to_bytes(2, "little") + b"b" + (1).to_bytes(4, "little")
        + np.array([1.5, -2.0], dtype="<f8").tobytes()
    )
    assert blob == expected
    with pytest.raises(ValueError):
        from_bytes(blob[:-1])
    with pytest.raises(ValueError):
        from_bytes(blob + b"\0")
