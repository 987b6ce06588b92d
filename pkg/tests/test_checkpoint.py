"""Checkpoint container round trips and corruption handling."""

import numpy as np
import pytest

from uwstereo.nn import GraphBuilder, checkpoint
from uwstereo.nn.checkpoint import CheckpointError


def demo_net(seed=0):
    g = GraphBuilder(rng=np.random.default_rng(seed))
    x = g.input("image")
    h = g.relu(g.conv(x, 1, 4))
    h = g.maxpool(h)
    h = g.upsample(g.conv(h, 4, 4))
    return g.build(g.conv(g.concat([h]), 4, 2))


class TestRoundTrip:
    def test_forward_bit_identical_after_reload(self, tmp_path, rng):
        net = demo_net(seed=3)
        path = tmp_path / "model.uwnn"
        checkpoint.save(net, path)
        loaded = checkpoint.load(path)
        x = rng.standard_normal((1, 1, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(net.forward(x), loaded.forward(x))

    def test_sidecar_written_next_to_weights(self, tmp_path):
        path = tmp_path / "model.uwnn"
        checkpoint.save(demo_net(), path)
        assert (tmp_path / "model.uwnn.json").exists()

    def test_magic_and_version_present(self, tmp_path):
        path = tmp_path / "model.uwnn"
        checkpoint.save(demo_net(), path)
        head = path.read_bytes()[:9]
        assert head.startswith(b"UWNN\x00")
        assert int.from_bytes(head[5:9], "little") == checkpoint.VERSION

    def test_payload_is_little_endian_f32(self, tmp_path):
        net = demo_net()
        path = tmp_path / "model.uwnn"
        checkpoint.save(net, path)
        loaded = checkpoint.load(path)
        first = net.param_nodes()[0].layer.weight
        np.testing.assert_array_equal(loaded.param_nodes()[0].layer.weight, first)
        assert loaded.param_nodes()[0].layer.weight.dtype == np.float32

    def test_meta_round_trip(self, tmp_path):
        path = tmp_path / "model.uwnn"
        checkpoint.save(demo_net(), path, meta={"model": "demo", "k": 3})
        assert checkpoint.load_meta(path) == {"model": "demo", "k": 3}

    def test_parameter_count_preserved(self, tmp_path):
        net = demo_net()
        path = tmp_path / "model.uwnn"
        checkpoint.save(net, path)
        assert checkpoint.load(path).parameter_count == net.parameter_count


class TestCorruption:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.uwnn"
        checkpoint.save(demo_net(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint.load(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "model.uwnn"
        checkpoint.save(demo_net(), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-40])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint.load(path)

    def test_missing_sidecar(self, tmp_path):
        path = tmp_path / "model.uwnn"
        checkpoint.save(demo_net(), path)
        (tmp_path / "model.uwnn.json").unlink()
        with pytest.raises(CheckpointError, match="sidecar"):
            checkpoint.load(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "model.uwnn"
        checkpoint.save(demo_net(), path)
        raw = bytearray(path.read_bytes())
        raw[5:9] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            checkpoint.load(path)
