import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tierkv.errors import FormatError
from tierkv.tensorfile import decode_tensor, encode_tensor, read_tensor, write_tensor

# 2x2 tensor [[1.0, -2.0], [0.5, 0.0]] stored as shape (1, 1, 2, 2), written by hand from the layout
FIXTURE_2X2 = bytes.fromhex(
    "534b5654"  # SKVT
    "0100"  # version 1
    "0100"  # dtype f32
    "01000000" "01000000" "02000000" "02000000"
    "0000803f"  # 1.0
    "000000c0"  # -2.0
    "0000003f"  # 0.5
    "00000000"  # 0.0
)


def test_known_bytes_fixture():
    x = np.array([[1.0, -2.0], [0.5, 0.0]], dtype=np.float32).reshape(1, 1, 2, 2)
    assert encode_tensor(x) == FIXTURE_2X2
    np.testing.assert_array_equal(decode_tensor(FIXTURE_2X2), x)


def test_empty_payload():
    x = np.zeros((2, 0, 3, 4), dtype=np.float32)
    buf = encode_tensor(x)
    assert len(buf) == 24
    assert decode_tensor(buf).shape == (2, 0, 3, 4)


def test_bad_magic():
    with pytest.raises(FormatError) as e:
        decode_tensor(b"XKVT" + FIXTURE_2X2[4:])
    assert e.value.offset == 0


def test_bad_version():
    with pytest.raises(FormatError) as e:
        decode_tensor(FIXTURE_2X2[:4] + b"\x02\x00" + FIXTURE_2X2[6:])
    assert e.value.offset == 4


def test_truncated_payload():
    with pytest.raises(FormatError) as e:
        decode_tensor(FIXTURE_2X2[:-3])
    assert e.value.offset == len(FIXTURE_2X2) - 3


def test_truncated_header():
    with pytest.raises(FormatError):
        decode_tensor(FIXTURE_2X2[:10])


def test_trailing_bytes():
    with pytest.raises(FormatError):
        decode_tensor(FIXTURE_2X2 + b"\x00")


def test_path_and_stream(tmp_path):
    x = np.random.default_rng(0).standard_normal((1, 2, 3, 4)).astype(np.float32)
    write_tensor(tmp_path / "t.skvt", x)
    assert read_tensor(tmp_path / "t.skvt").tobytes() == x.tobytes()
    buf = io.BytesIO()
    write_tensor(buf, x)
    buf.seek(0)
    assert read_tensor(buf).tobytes() == x.tobytes()


@settings(max_examples=60)
@given(
    arrays(
        np.float32,
        st.tuples(*[st.integers(0, 4)] * 4),
        elements=st.floats(width=32, allow_nan=True, allow_infinity=True),
    )
)
def test_round_trip_bit_exact(x):
    assert decode_tensor(encode_tensor(x)).tobytes() == x.tobytes()
