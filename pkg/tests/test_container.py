import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flab.container import load_container, save_container
from flab.errors import InputError


def test_round_trip_values(tmp_path):
    arrays = {"w": np.arange(12, dtype=np.float32).reshape(3, 4),
              "b": np.array([1.5, -2.5], dtype=np.float32),
              "scalar": np.float32(7.0)}
    meta = {"stage": "x", "step": 3, "nested": {"a": [1, 2]}}
    path = tmp_path / "c.flab"
    save_container(path, arrays, meta)
    loaded, loaded_meta = load_container(path)
    assert loaded_meta == meta
    assert set(loaded) == set(arrays)
    np.testing.assert_array_equal(loaded["w"], arrays["w"])
    np.testing.assert_array_equal(loaded["b"], arrays["b"])
    assert loaded["scalar"].shape == ()


def test_save_load_save_byte_identical(tmp_path):
    arrays = {"z.second": np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32),
              "a.first": np.ones(3, dtype=np.float32)}
    p1, p2 = tmp_path / "a.flab", tmp_path / "b.flab"
    save_container(p1, arrays, {"k": "v"})
    loaded, meta = load_container(p1)
    save_container(p2, loaded, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_insertion_order_does_not_matter(tmp_path):
    a = np.ones(2, dtype=np.float32)
    b = np.zeros(3, dtype=np.float32)
    p1, p2 = tmp_path / "1.flab", tmp_path / "2.flab"
    save_container(p1, {"a": a, "b": b})
    save_container(p2, {"b": b, "a": a})
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_check(tmp_path):
    p = tmp_path / "bad.flab"
    p.write_bytes(b"NOTIT" + b"\x00" * 16)
    with pytest.raises(InputError):
        load_container(p)


def test_empty_name_rejected(tmp_path):
    with pytest.raises(InputError):
        save_container(tmp_path / "x.flab", {"": np.ones(1)})


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(
    st.text(alphabet="abcdefg.xyz_0123456789", min_size=1, max_size=20),
    st.lists(st.floats(allow_nan=False, allow_infinity=False, width=32), min_size=0, max_size=8),
    min_size=1, max_size=5))
def test_round_trip_property(tmp_path_factory, named):
    path = tmp_path_factory.mktemp("cont") / "p.flab"
    arrays = {k: np.asarray(v, dtype=np.float32) for k, v in named.items()}
    save_container(path, arrays)
    loaded, _ = load_container(path)
    for k, v in arrays.items():
        np.testing.assert_array_equal(loaded[k], v)
