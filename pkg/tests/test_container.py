import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from salient_grounding import container
from salient_grounding.container import ContainerError


def minimal_reader(buf):
    """Second, independent parser: walks the bytes with plain int.from_bytes."""
    assert buf[:4] == b"DCF1"
    count = int.from_bytes(buf[4:8], "little")
    off = 8
    records = []
    for _ in range(count):
        nlen = int.from_bytes(buf[off:off + 2], "little")
        name = buf[off + 2:off + 2 + nlen].decode("utf-8")
        off += 2 + nlen
        rank = buf[off]
        off += 1
        shape = [int.from_bytes(buf[off + 4 * i:off + 4 * i + 4], "little") for i in range(rank)]
        off += 4 * rank
        n = 1
        for s in shape:
            n *= s
        values = [struct.unpack("<f", buf[off + 4 * i:off + 4 * i + 4])[0] for i in range(n)]
        records.append((name, tuple(shape), off, values))
        off += 4 * n
    return records, off


def test_empty_container_is_valid():
    buf = container.encode({})
    assert buf == b"DCF1" + b"\x00" * 4
    assert container.decode(buf) == {}


def test_layout_of_a_single_record():
    buf = container.encode({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    expected = (b"DCF1" + struct.pack("<I", 1) + struct.pack("<H", 2) + b"ab" + bytes([2])
                + struct.pack("<2I", 1, 2) + struct.pack("<2f", 1.0, 2.0))
    assert buf == expected


def test_scalar_and_zero_size_records_round_trip():
    recs = {"s": np.float32(3.5), "z": np.zeros((0, 4), dtype=np.float32)}
    out = container.decode(container.encode(recs))
    assert out["s"].shape == () and out["s"] == 3.5
    assert out["z"].shape == (0, 4)


def test_bad_magic():
    buf = b"XCF1" + container.encode({})[4:]
    with pytest.raises(ContainerError, match="bad magic"):
        container.decode(buf, "f.dcf")


@pytest.mark.parametrize("cut", [3, 7, 9, 12, 14, 20])
def test_truncation_names_the_record(cut):
    buf = container.encode({"weights": np.arange(4, dtype=np.float32)})
    with pytest.raises(ContainerError, match="truncated"):
        container.decode(buf[:cut], "f.dcf")


def test_trailing_bytes_rejected():
    with pytest.raises(ContainerError, match="trailing"):
        container.decode(container.encode({"a": np.ones(2)}) + b"\x00")


def test_file_round_trip(tmp_path):
    recs = {"x/1": np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32)}
    container.write(tmp_path / "a.dcf", recs)
    out = container.read(tmp_path / "a.dcf")
    assert out["x/1"].tobytes() == recs["x/1"].tobytes()
    assert not (tmp_path / "a.dcf.tmp").exists()
    with pytest.raises(ContainerError, match="no such"):
        container.read(tmp_path / "missing.dcf")


names = st.text(st.characters(blacklist_categories=("Cs",)), min_size=0, max_size=12)
arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4),
                    elements=st.floats(width=32, allow_nan=False))


@settings(max_examples=1000, deadline=None)
@given(st.dictionaries(names, arrays, max_size=4))
def test_round_trip_matches_independent_reader(recs):
    buf = container.encode(recs)
    out = container.decode(buf)
    assert list(out) == list(recs)
    for k, v in recs.items():
        assert out[k].shape == v.shape and out[k].tobytes() == v.tobytes()
    parsed, end = minimal_reader(buf)
    assert end == len(buf)
    assert len(parsed) == len(recs)
    for (name, shape, _, values), (k, v) in zip(parsed, recs.items()):
        assert name == k and shape == v.shape
        assert values == v.reshape(-1).tolist()
