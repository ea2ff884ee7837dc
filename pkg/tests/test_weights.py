import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from ssmtrack import weights
from ssmtrack.errors import WeightFormatError
from ssmtrack.models import init_models, load_models, models_state, save_models

names = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12)
blobs = arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
               elements=st.floats(allow_nan=False, width=64))


@given(st.dictionaries(names, blobs, max_size=5))
def test_bit_exact_round_trip(entries):
    buf = weights.dumps(entries)
    back = weights.loads(buf)
    assert list(back) == list(entries)
    for k in entries:
        assert back[k].shape == np.shape(entries[k])
        assert back[k].tobytes() == np.asarray(entries[k], "<f8").tobytes()
    assert weights.dumps(back) == buf


def test_header_layout():
    buf = weights.dumps({"a": np.array([1.0, 2.0])})
    assert buf[:4] == b"S3MW"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:12], "little") == 1
    assert len(buf) == 12 + 4 + 1 + 4 + 4 + 16


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-3],
    lambda b: b + b"\0",
    lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:],
])
def test_corrupt_containers_rejected(mutate):
    buf = weights.dumps({"w": np.ones((2, 2))})
    with pytest.raises(WeightFormatError):
        weights.loads(mutate(buf))


def test_models_round_trip(tmp_path):
    m = init_models(seed=3)
    path = tmp_path / "m.s3mw"
    save_models(m, path)
    back = load_models(path)
    a, b = models_state(m), models_state(back)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_shipped_weights_load():
    m = load_models()
    assert m.predictor.config.d >= 1
