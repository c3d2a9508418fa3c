import numpy as np
import pytest

from llpf.harness_cli.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from llpf.nn_engine import init_params, lenet_micro, mlp2


@pytest.fixture
def graph():
    return mlp2(20, 16, 3)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, graph, tmp_path):
        params = init_params(graph, 3)
        path = tmp_path / "mode.ckpt"
        save_checkpoint(params, graph, path)
        assert path.read_bytes()[:4] == b"LLPF"
        loaded = load_checkpoint(graph, path)
        assert np.array_equal(loaded.data, params.data)
        assert loaded.layout == params.layout

    def test_f64_params_round_trip_at_storage_precision(self, graph, tmp_path):
        params = init_params(graph, 3, np.float64)
        path = tmp_path / "mode.ckpt"
        save_checkpoint(params, graph, path)
        loaded = load_checkpoint(graph, path, np.float64)
        assert np.array_equal(
            loaded.data, params.data.astype(np.float32).astype(np.float64)
        )

    def test_flipped_payload_byte_detected(self, graph, tmp_path):
        params = init_params(graph, 3)
        path = tmp_path / "mode.ckpt"
        save_checkpoint(params, graph, path)
        blob = bytearray(path.read_bytes())
        blob[-20] ^= 0xFF  # inside the payload
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="corrupt payload"):
            load_checkpoint(graph, path)

    def test_wrong_model_rejected(self, graph, tmp_path):
        params = init_params(graph, 3)
        path = tmp_path / "mode.ckpt"
        save_checkpoint(params, graph, path)
        with pytest.raises(CheckpointError, match="model/checkpoint mismatch"):
            load_checkpoint(lenet_micro(), path)
        with pytest.raises(CheckpointError, match="model/checkpoint mismatch"):
            load_checkpoint(mlp2(20, 17, 3), path)

    def test_truncation_reports_offset(self, graph, tmp_path):
        params = init_params(graph, 3)
        path = tmp_path / "mode.ckpt"
        save_checkpoint(params, graph, path)
        path.write_bytes(path.read_bytes()[:30])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(graph, path)

    def test_bad_magic(self, graph, tmp_path):
        path = tmp_path / "mode.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(graph, path)

    def test_trailing_garbage_rejected(self, graph, tmp_path):
        params = init_params(graph, 3)
        path = tmp_path / "mode.ckpt"
        save_checkpoint(params, graph, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(graph, path)

    def test_no_temp_file_left_behind(self, graph, tmp_path):
        params = init_params(graph, 3)
        save_checkpoint(params, graph, tmp_path / "mode.ckpt")
        assert [p.name for p in tmp_path.iterdir()] == ["mode.ckpt"]
