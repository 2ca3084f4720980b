import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddpnet.errors import ShapeError
from ddpnet.tensor import Shape, Tensor, add, concat_channels, negate, split_channels, zeros_like


def t(shape, rng):
    return Tensor.wrap(rng.standard_normal(shape).astype(np.float32))


def test_storage_is_read_only(rng):
    x = t((1, 2, 3, 3), rng)
    with pytest.raises(ValueError):
        x.data[0, 0, 0, 0] = 1.0


def test_constructor_copies_input():
    src = np.ones((2, 2))
    x = Tensor(src)
    src[0, 0] = 5.0
    assert x.data[0, 0] == 1.0


def test_scalar_keeps_rank_zero():
    loss = Tensor.wrap(np.asarray(2.5))
    assert loss.shape == () and loss.item() == 2.5


def test_integer_input_becomes_float32():
    assert Tensor(np.arange(4)).dtype == np.float32


def test_shape_of_rejects_wrong_rank():
    assert Shape.of((1, 2, 3, 4)).size == 24
    with pytest.raises(ShapeError):
        Shape.of((2, 3))


def test_concat_adds_channel_counts(rng):
    assert concat_channels([t((1, 2, 4, 4), rng), t((1, 3, 4, 4), rng)]).shape == (1, 5, 4, 4)


def test_concat_single_is_unchanged(rng):
    x = t((1, 3, 2, 2), rng)
    assert np.array_equal(concat_channels([x]).data, x.data)


def test_concat_of_stem_branches():
    a = Tensor.wrap(np.zeros((1, 32, 256, 512), np.float32))
    assert concat_channels([a, a]).shape == (1, 64, 256, 512)


def test_concat_rejects_mismatched_extents(rng):
    with pytest.raises(ShapeError):
        concat_channels([t((1, 2, 4, 4), rng), t((1, 2, 4, 5), rng)])


def test_split_halves(rng):
    parts = split_channels(t((1, 128, 8, 8), rng), [64, 64])
    assert [p.shape for p in parts] == [(1, 64, 8, 8)] * 2


def test_split_values():
    x = Tensor(np.array([1, 2, 3, 4], np.float32).reshape(1, 4, 1, 1))
    a, b = split_channels(x, [1, 3])
    assert a.data.ravel().tolist() == [1] and b.data.ravel().tolist() == [2, 3, 4]


def test_split_sizes_must_cover_channels(rng):
    with pytest.raises(ShapeError):
        split_channels(t((1, 4, 2, 2), rng), [1, 2])


def test_add_examples(rng):
    assert add(Tensor([1.0, 2.0]), Tensor([3.0, 5.0])).data.tolist() == [4.0, 7.0]
    x = t((2, 3, 4, 4), rng)
    assert np.array_equal(add(x, zeros_like(x)).data, x.data)
    assert not add(x, negate(x)).data.any()


def test_add_rejects_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        add(t((1, 2, 2, 2), rng), t((1, 3, 2, 2), rng))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=4), st.integers(1, 3), st.integers(1, 4))
def test_split_then_concat_round_trips(sizes, n, hw):
    x = Tensor.wrap(np.random.default_rng(0).standard_normal((n, sum(sizes), hw, hw)))
    assert np.array_equal(concat_channels(split_channels(x, sizes)).data, x.data)
