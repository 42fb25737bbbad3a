import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stockpot.tensor_store import (
    Checkpoint,
    FormatError,
    TensorRecord,
    encode,
    load_checkpoint,
    parse,
    save_checkpoint,
    serialize,
    validate_schema,
)


def handmade(header: dict, data: bytes) -> bytes:
    raw = json.dumps(header).encode("utf-8")
    return struct.pack("<Q", len(raw)) + raw + data


def test_load_handmade_f32_file(tmp_path):
    buf = handmade(
        {"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}},
        struct.pack("<ff", 1.0, 2.0),
    )
    path = tmp_path / "a.st"
    path.write_bytes(buf)
    ckpt = load_checkpoint(path)
    assert ckpt.names == ["a"]
    assert ckpt["a"].data == struct.pack("<ff", 1.0, 2.0)
    assert len(ckpt["a"].data) == 8
    assert ckpt["a"].values.tolist() == [1.0, 2.0]
    save_checkpoint(ckpt, tmp_path / "b.st")
    assert load_checkpoint(tmp_path / "b.st") == ckpt


def test_empty_header_is_rejected():
    with pytest.raises(FormatError, match="empty header"):
        parse(struct.pack("<Q", 0))


def test_duplicate_names_are_rejected():
    raw = b'{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}'
    buf = struct.pack("<Q", len(raw)) + raw + b"\0" * 8
    with pytest.raises(FormatError, match="duplicate") as exc:
        parse(buf)
    assert exc.value.tensor == "a"


@pytest.mark.parametrize(
    "entry, data, match",
    [
        ({"dtype": "I8", "shape": [1], "data_offsets": [0, 1]}, b"\0", "unknown dtype"),
        ({"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}, b"\0" * 4, "exceed"),
        ({"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}, b"\0" * 8, "do not match"),
        ({"dtype": "F32", "shape": [-1], "data_offsets": [0, 4]}, b"\0" * 8, "invalid shape"),
    ],
)
def test_bad_entries_name_the_tensor(entry, data, match):
    with pytest.raises(FormatError, match=match) as exc:
        parse(handmade({"w": entry}, data))
    assert exc.value.tensor == "w"


def test_overlapping_offsets_are_rejected():
    header = {
        "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
        "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
    }
    with pytest.raises(FormatError, match="overlap"):
        parse(handmade(header, b"\0" * 12))


@pytest.mark.parametrize("payload", [b"{not json", b"[1, 2]", b"\xff\xfe"])
def test_malformed_header(payload):
    with pytest.raises(FormatError, match="malformed"):
        parse(struct.pack("<Q", len(payload)) + payload)


def test_zero_tensors_roundtrip(tmp_path):
    buf = serialize(Checkpoint())
    (hlen,) = struct.unpack("<Q", buf[:8])
    assert json.loads(buf[8 : 8 + hlen]) == {}
    assert len(buf) == 8 + hlen
    assert parse(buf) == Checkpoint()


def test_f64_3x3_data_region_is_72_bytes():
    buf = serialize(Checkpoint.from_arrays({"m": np.arange(9.0).reshape(3, 3)}, "F64"))
    (hlen,) = struct.unpack("<Q", buf[:8])
    assert len(buf) - 8 - hlen == 72


def test_file_order_does_not_matter():
    a = struct.pack("<d", 1.5)
    b = struct.pack("<dd", 2.5, 3.5)
    forward = handmade(
        {"a": {"dtype": "F64", "shape": [], "data_offsets": [0, 8]},
         "b": {"dtype": "F64", "shape": [2], "data_offsets": [8, 24]}},
        a + b,
    )
    backward = handmade(
        {"b": {"dtype": "F64", "shape": [2], "data_offsets": [0, 16]},
         "a": {"dtype": "F64", "shape": [], "data_offsets": [16, 24]}},
        b + a,
    )
    assert parse(forward) == parse(backward)
    assert serialize(parse(forward)) == serialize(parse(backward))


def test_metadata_survives_and_canonical_resave_is_stable():
    ckpt = Checkpoint.from_arrays({"x": np.ones(3)}, "F32", metadata={"format": "pt", "note": "héllo"})
    buf = serialize(ckpt)
    again = parse(buf)
    assert again.metadata == {"format": "pt", "note": "héllo"}
    assert serialize(again) == buf


def test_bytewise_name_order():
    ckpt = Checkpoint.from_arrays({"b": np.zeros(1), "B": np.zeros(1), "a": np.zeros(1), "é": np.zeros(1)})
    assert ckpt.names == ["B", "a", "b", "é"]


def test_record_checks_byte_length():
    with pytest.raises(FormatError):
        TensorRecord("x", "F32", (3,), b"\0" * 8)
    assert TensorRecord("s", "F16", (), b"\0\0").numel == 1


# -- rounding oracles: enumerate every 16-bit pattern and pick the nearest


def _all_half_values(dtype):
    bits = np.arange(2**16, dtype=np.uint32)
    with np.errstate(invalid="ignore"):
        if dtype == "BF16":
            vals = (bits << 16).view(np.float32).astype(np.float64)
        else:
            vals = bits.astype(np.uint16).view(np.float16).astype(np.float64)
    finite = np.isfinite(vals)
    return vals[finite], bits[finite]


def _nearest_even(x, vals, bits):
    d = np.abs(vals - x)
    best = d.min()
    cands = bits[d == best]
    # among ties prefer an even mantissa; -0/+0 tie only at x == 0
    even = [c for c in cands if c % 2 == 0]
    return int(even[0] if even else cands[0])


@pytest.mark.parametrize("dtype", ["BF16", "F16"])
def test_rounding_matches_exhaustive_oracle(dtype):
    vals, bits = _all_half_values(dtype)
    rng = np.random.default_rng(7)
    limit = 6.0e4 if dtype == "F16" else 1e30
    xs = np.concatenate([
        rng.standard_normal(300) * 10.0 ** rng.integers(-6, 4, 300),
        # exact midpoints between neighbouring representable values
        (vals[1000:1200] + vals[1001:1201]) / 2,
    ])
    xs = xs[np.abs(xs) < limit]
    got = np.frombuffer(encode(xs, dtype), dtype="<u2")
    for x, g in zip(xs, got):
        want = _nearest_even(x, vals, bits)
        gv = vals[bits == g][0]
        wv = vals[bits == want][0]
        assert gv == wv, (dtype, x, hex(int(g)), hex(want))


def test_bf16_subnormal_and_nan():
    tiny = 3 * 2.0**-133
    got = np.frombuffer(encode(np.array([tiny, np.nan]), "BF16"), dtype="<u2")
    assert got[0] == 3
    assert got[1] == 0x7FC0


# -- properties

_dtypes = st.sampled_from(["F16", "BF16", "F32", "F64"])
_names = st.text(min_size=1, max_size=8)
_shapes = st.lists(st.integers(0, 4), max_size=3)


@st.composite
def checkpoints(draw):
    names = draw(st.lists(_names, min_size=0, max_size=4, unique=True))
    records = []
    for name in names:
        dtype = draw(_dtypes)
        shape = draw(_shapes)
        n = int(np.prod(shape)) if shape else 1
        data = draw(st.binary(min_size=n * {"F16": 2, "BF16": 2, "F32": 4, "F64": 8}[dtype],
                              max_size=n * {"F16": 2, "BF16": 2, "F32": 4, "F64": 8}[dtype]))
        records.append(TensorRecord(name, dtype, tuple(shape), data))
    meta = draw(st.dictionaries(st.text(max_size=5).filter(lambda k: k != ""), st.text(max_size=5), max_size=3))
    return Checkpoint(tuple(records), meta)


@given(checkpoints())
def test_roundtrip_is_bit_exact(ckpt):
    buf = serialize(ckpt)
    back = parse(buf)
    assert back == ckpt
    assert serialize(back) == buf


@given(checkpoints())
def test_saved_offsets_are_packed_from_zero(ckpt):
    buf = serialize(ckpt)
    (hlen,) = struct.unpack("<Q", buf[:8])
    header = json.loads(buf[8 : 8 + hlen])
    header.pop("__metadata__", None)
    spans = sorted(tuple(v["data_offsets"]) for v in header.values())
    pos = 0
    for begin, end in spans:
        assert begin == pos
        pos = end
    assert pos == len(buf) - 8 - hlen


def test_validate_schema_examples():
    a = Checkpoint.from_arrays({"a": np.zeros(2)})
    b = Checkpoint.from_arrays({"a": np.ones(2)})
    c = Checkpoint.from_arrays({"a": np.zeros(3)})
    assert validate_schema([a, b]).compatible
    assert validate_schema([a]).compatible
    report = validate_schema([a, c])
    assert not report.compatible
    (m,) = report.mismatches
    assert (m.tensor, m.field, m.values) == ("a", "shape", ([2], [3]))


def test_validate_schema_dtype_and_missing():
    a = Checkpoint.from_arrays({"a": np.zeros(2)}, "F32")
    b = Checkpoint.from_arrays({"a": np.zeros(2), "b": np.zeros(1)}, "F64")
    report = validate_schema([a, b])
    fields = {(m.tensor, m.field) for m in report.mismatches}
    assert fields == {("a", "dtype"), ("b", "present")}
