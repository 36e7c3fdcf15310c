import numpy as np
import pytest

from lightdepth import checkpoint, network
from lightdepth.autodiff import Tensor
from lightdepth.checkpoint import CheckpointError

import oracles


@pytest.fixture
def trained_toy(rng):
    net = network.build("toy")
    net.forward(Tensor(rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)), "train")
    return net


def test_encode_decode_round_trip(rng):
    tensors = [("a", rng.standard_normal((2, 3)).astype(np.float32)),
               ("b.c", rng.standard_normal(4)), ("s", np.array(3.0))]
    cfg, out = checkpoint.decode(checkpoint.encode({"x": [1, 2]}, tensors))
    assert cfg == {"x": [1, 2]}
    assert list(out) == ["a", "b.c", "s"]
    for name, arr in tensors:
        assert out[name].dtype == arr.dtype and np.array_equal(out[name], arr)


def test_header_layout():
    blob = checkpoint.encode({}, [("w", np.ones((1, 2), dtype=np.float32))])
    assert blob[:4] == b"MDEC"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert blob[-8:] == np.ones(2, dtype="<f4").tobytes()


def test_save_load_save_is_byte_identical(tmp_path, trained_toy):
    network.save(trained_toy, tmp_path / "a.mdec")
    network.save(network.load(tmp_path / "a.mdec"), tmp_path / "b.mdec")
    assert (tmp_path / "a.mdec").read_bytes() == (tmp_path / "b.mdec").read_bytes()


def test_loaded_network_forward_is_bit_identical(tmp_path, trained_toy, rng):
    x = rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
    before = trained_toy.predict(x)
    network.save(trained_toy, tmp_path / "n.mdec")
    after = network.load(tmp_path / "n.mdec").predict(x)
    assert np.array_equal(before, after)


def test_truncated_file(tmp_path, trained_toy):
    blob = trained_toy.to_bytes()
    path = tmp_path / "t.mdec"
    path.write_bytes(blob[: len(blob) - 10])
    with pytest.raises(CheckpointError, match="truncated"):
        network.load(path)


def test_truncation_names_tensor(trained_toy):
    blob = trained_toy.to_bytes()
    with pytest.raises(CheckpointError, match="head.bias|num_batches"):
        checkpoint.decode(blob[:-3])


def test_bad_magic_and_version(trained_toy):
    blob = trained_toy.to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.decode(blob[:4] + (7).to_bytes(4, "little") + blob[8:])


def test_trailing_bytes_rejected(trained_toy):
    with pytest.raises(CheckpointError):
        checkpoint.decode(trained_toy.to_bytes() + b"\0")


def test_name_set_mismatch_names_tensor(trained_toy):
    cfg, tensors = checkpoint.decode(trained_toy.to_bytes())
    del tensors["head.weight"]
    with pytest.raises(CheckpointError, match="head.weight"):
        network.from_checkpoint(cfg, tensors)
    cfg, tensors = checkpoint.decode(trained_toy.to_bytes())
    tensors["stray"] = np.zeros(1, dtype=np.float32)
    with pytest.raises(CheckpointError, match="stray"):
        network.from_checkpoint(cfg, tensors)


def test_shape_mismatch_names_tensor(trained_toy):
    cfg, tensors = checkpoint.decode(trained_toy.to_bytes())
    tensors["head.bias"] = np.zeros(2, dtype=np.float32)
    with pytest.raises(CheckpointError, match="head.bias"):
        network.from_checkpoint(cfg, tensors)


def test_duplicate_names_rejected():
    with pytest.raises(CheckpointError):
        checkpoint.encode({}, [("a", np.ones(1)), ("a", np.ones(1))])


@pytest.mark.parametrize("name", sorted(network.PRESETS))
def test_byte_accounting(name):
    net = network.build(name)
    state = net.state_tensors()
    structure = oracles.checkpoint_structure_bytes(net.checkpoint_config(),
                                                   [(n, a.shape) for n, a in state])
    buffers = sum(a.nbytes for n, a in state) - 4 * net.param_count()
    assert net.size_bytes() == 4 * net.param_count() + buffers + structure


def test_atomic_write_leaves_no_temp(tmp_path, trained_toy):
    network.save(trained_toy, tmp_path / "c.mdec")
    assert [p.name for p in tmp_path.iterdir()] == ["c.mdec"]
