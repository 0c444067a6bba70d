import pytest
import torch
from hypothesis import given, strategies as st

from tcvedit import containers


shapes = st.lists(st.integers(1, 4), min_size=0, max_size=3)


@given(shape_list=st.lists(shapes, min_size=0, max_size=4), seed=st.integers(0, 1000))
def test_round_trip(shape_list, seed):
    g = torch.Generator().manual_seed(seed)
    tensors = {f"t{i}": torch.randn(tuple(s), generator=g) for i, s in enumerate(shape_list)}
    data = containers.encode(b"TEST", tensors, {"k": [1, 2]})
    back, meta = containers.decode(b"TEST", data)
    assert meta == {"k": [1, 2]}
    assert back.keys() == tensors.keys()
    for k in tensors:
        assert torch.equal(back[k], tensors[k])


def test_errors():
    data = containers.encode(b"TEST", {"a": torch.zeros(2)})
    with pytest.raises(containers.ContainerError):
        containers.decode(b"OTHR", data)
    with pytest.raises(containers.ContainerError):
        containers.decode(b"TEST", data + b"\0")
    with pytest.raises(ValueError):
        containers.encode(b"TOOLONG", {})


def test_digest_depends_on_content():
    a = containers.digest(b"TEST", {"a": torch.zeros(2)})
    assert a == containers.digest(b"TEST", {"a": torch.zeros(2)})
    assert a != containers.digest(b"TEST", {"a": torch.ones(2)})
