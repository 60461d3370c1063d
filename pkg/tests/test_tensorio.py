import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from volnav.tensorio import TensorFileError, load_tensors, save_tensors

names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=12)
arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                    elements=st.floats(-1e6, 1e6, width=32))


@given(st.dictionaries(names, arrays, max_size=5))
def test_round_trip(tmp_path_factory, tensors):
    path = tmp_path_factory.mktemp("t") / "x.vnpt"
    save_tensors(tensors, path)
    back = load_tensors(path)
    assert sorted(back) == sorted(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape and np.array_equal(back[k], v.astype(np.float64))


def test_rejects_non_finite(tmp_path):
    with pytest.raises(TensorFileError):
        save_tensors({"a": np.array([np.nan])}, tmp_path / "x")


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-2],
    lambda b: b + b"\0",
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
])
def test_rejects_corrupt_files(tmp_path, mutate):
    path = tmp_path / "x.vnpt"
    save_tensors({"w": np.ones((2, 3))}, path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(TensorFileError):
        load_tensors(path)


def test_layout_is_stable(tmp_path):
    save_tensors({"b": np.zeros(1), "a": np.ones((1, 2))}, tmp_path / "x")
    blob = (tmp_path / "x").read_bytes()
    assert blob[:4] == b"VNPT"
    assert blob[8:12] == (2).to_bytes(4, "little")
    assert blob[12:14] == (1).to_bytes(2, "little") and blob[14:15] == b"a"
