import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from lgrad import (
    ChannelMatrix,
    CorruptionError,
    DegenerateChannelError,
    FormatError,
    ImageStack,
    ObserverTemplate,
    SignalImage,
    ValidationError,
    read_image_stack,
    write_image_stack,
)
from lgrad.core import MOBS_HEADER_SIZE, image_stack_to_bytes


def _stack(n=2, h=2, w=2, seed=0):
    rng = np.random.default_rng(seed)
    return ImageStack(rng.standard_normal((n, h * w)), rng.integers(0, 2, n), h, w)


class TestImageStack:
    def test_shapes_and_dtype(self):
        s = ImageStack(np.arange(12).reshape(3, 4), [0, 1, 1], 2, 2)
        assert (s.n, s.m, len(s)) == (3, 4, 3)
        assert s.data.dtype == np.float64
        assert s.labels.dtype == np.uint8

    def test_empty_stack_allowed_in_memory(self):
        s = ImageStack(np.empty((0, 4)), np.empty(0), 2, 2)
        assert s.n == 0

    @pytest.mark.parametrize(
        "data, labels, h, w",
        [
            (np.zeros((2, 5)), [0, 1], 2, 2),
            (np.zeros((2, 4)), [0], 2, 2),
            (np.zeros((2, 4)), [0, 2], 2, 2),
            (np.zeros((1, 4)), [0], 0, 4),
        ],
    )
    def test_invalid(self, data, labels, h, w):
        with pytest.raises(ValidationError):
            ImageStack(data, labels, h, w)

    def test_read_only(self):
        s = _stack()
        with pytest.raises(ValueError):
            s.data[0, 0] = 1.0

    def test_split_by_label_counts(self):
        s = _stack(n=37, seed=3)
        s0, s1 = s.split_by_label()
        assert s0.n + s1.n == s.n
        assert np.all(s0.labels == 0) and np.all(s1.labels == 1)

    def test_concatenate_and_subset(self):
        a, b = _stack(3, seed=1), _stack(4, seed=2)
        c = ImageStack.concatenate([a, b])
        assert c.n == 7
        assert c.subset(np.arange(3)) == a


class TestSmallTypes:
    def test_signal_image(self):
        s = SignalImage(np.arange(6.0), 2, 3)
        np.testing.assert_array_equal(s.image(), np.arange(6.0).reshape(2, 3))
        with pytest.raises(ValidationError):
            SignalImage(np.arange(5.0), 2, 3)

    def test_channel_matrix_bounds(self):
        with pytest.raises(ValidationError):
            ChannelMatrix(np.ones((3, 2)))
        with pytest.raises(DegenerateChannelError) as info:
            ChannelMatrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert info.value.indices == (1,)

    def test_channel_matrix_normalized(self):
        c = ChannelMatrix(np.array([[3.0, 4.0], [0.0, 2.0]])).normalized()
        np.testing.assert_allclose(np.linalg.norm(c.rows, axis=1), 1.0)

    def test_template_finite(self):
        with pytest.raises(ValidationError):
            ObserverTemplate([1.0, np.inf], "HO")
        with pytest.raises(ValidationError):
            ObserverTemplate([1.0], "XYZ")


class TestMobsFormat:
    def test_header_is_32_bytes(self):
        assert MOBS_HEADER_SIZE == 32

    def test_two_2x2_images_is_98_bytes(self):
        assert len(image_stack_to_bytes(_stack(2, 2, 2))) == 32 + 2 * 4 * 8 + 2 == 98

    def test_empty_stack_rejected(self):
        with pytest.raises(ValidationError, match="empty stack"):
            write_image_stack(ImageStack(np.empty((0, 4)), [], 2, 2), io.BytesIO())

    def test_round_trip_100_8x8(self, tmp_path):
        s = _stack(100, 8, 8, seed=7)
        path = tmp_path / "s.mobs"
        write_image_stack(s, path)
        r = read_image_stack(path)
        assert r.data.tobytes() == s.data.tobytes()
        np.testing.assert_array_equal(r.labels, s.labels)
        assert (r.height, r.width) == (8, 8)

    def test_bad_magic(self):
        raw = bytearray(image_stack_to_bytes(_stack()))
        raw[:4] = b"XXXX"
        with pytest.raises(FormatError):
            read_image_stack(io.BytesIO(bytes(raw)))

    def test_truncated_payload(self):
        raw = image_stack_to_bytes(_stack())
        with pytest.raises(CorruptionError):
            read_image_stack(io.BytesIO(raw[:-5]))

    def test_label_byte_7(self):
        raw = bytearray(image_stack_to_bytes(_stack()))
        raw[-1] = 7
        with pytest.raises(ValidationError):
            read_image_stack(io.BytesIO(bytes(raw)))

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(1, 6).flatmap(
            lambda n: st.tuples(
                st.integers(1, 5).flatmap(
                    lambda h: st.integers(1, 5).flatmap(
                        lambda w: st.tuples(
                            st.just(h),
                            st.just(w),
                            hnp.arrays(np.float64, (n, h * w), elements=st.floats(allow_nan=False)),
                        )
                    )
                ),
                hnp.arrays(np.uint8, n, elements=st.integers(0, 1)),
            )
        )
    )
    def test_round_trip_property(self, args):
        (h, w, data), labels = args
        s = ImageStack(data, labels, h, w)
        r = read_image_stack(io.BytesIO(image_stack_to_bytes(s)))
        assert r == s
