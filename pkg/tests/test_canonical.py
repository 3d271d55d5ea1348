import json
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, strategies as st

from chainiot import canonical

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-2**53, 2**53) | st.text(max_size=20),
    lambda children: st.lists(children, max_size=5) | st.dictionaries(st.text(max_size=8), children, max_size=5),
    max_leaves=25,
)


def test_sorted_compact_utf8():
    assert canonical.encode({"b": 1, "a": [1, 2], "é": "ü"}) == '{"a":[1,2],"b":1,"é":"ü"}'.encode("utf-8")


@given(json_values)
def test_round_trip_and_stability(v):
    data = canonical.encode(v)
    assert canonical.decode(data) == v
    assert canonical.encode(canonical.decode(data)) == data
    assert canonical.is_canonical(data)


@given(st.dictionaries(st.text(max_size=6), st.integers(), min_size=2, max_size=6))
def test_key_order_independent(d):
    reversed_d = dict(reversed(list(d.items())))
    assert canonical.encode(d) == canonical.encode(reversed_d)


def test_non_canonical_detected():
    assert not canonical.is_canonical(b'{"b":1, "a":2}')
    assert not canonical.is_canonical(b'{"b":1,"a":2}')
    assert not canonical.is_canonical(b"not json")


def test_nan_rejected():
    with pytest.raises(ValueError):
        canonical.encode(float("nan"))


@given(st.binary(max_size=64))
def test_b64_round_trip(b):
    assert canonical.b64d(canonical.b64e(b)) == b


def test_b64_strict():
    with pytest.raises(ValueError):
        canonical.b64d("YQ=")  # bad padding
    with pytest.raises(ValueError):
        canonical.b64d("YR==")  # nonzero trailing bits
    with pytest.raises(ValueError):
        canonical.b64d("a b=")
    with pytest.raises(ValueError):
        canonical.b64d(5)


def test_time_format():
    dt = datetime(2024, 3, 1, 12, 30, 5, 123, tzinfo=timezone.utc)
    assert canonical.format_time(dt) == "2024-03-01T12:30:05.000123Z"
    assert canonical.parse_time("2024-03-01T12:30:05.000123Z") == dt
    assert canonical.parse_time("2024-03-01T12:30:05Z") == dt.replace(microsecond=0)
    other = dt.astimezone(timezone(timedelta(hours=5)))
    assert canonical.format_time(other) == canonical.format_time(dt)
    with pytest.raises(ValueError):
        canonical.format_time(datetime(2024, 1, 1))
    with pytest.raises(ValueError):
        canonical.parse_time("2024-03-01T12:30:05+00:00")


def test_matches_stdlib_reference():
    # independent rendering with the stdlib's own options
    obj = {"z": [3, {"y": None, "x": True}], "a": "text"}
    ref = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()
    assert canonical.encode(obj) == ref


def test_dump_load_file(tmp_path):
    p = tmp_path / "x.json"
    canonical.dump_file(p, {"k": 1})
    assert p.read_bytes() == b'{"k":1}'
    assert canonical.load_file(p) == {"k": 1}
    assert not list(tmp_path.glob("*.tmp*"))
