import struct

import numpy as np
import pytest

from hm2bp.core import ConfigError
from hm2bp.io import format_network, load_checkpoint, parse_network, save_checkpoint

CNN = """# comment line
input shape=1x28x28
conv channels=15 kernel=5
pool
conv channels=40 kernel=5 threshold=6
pool threshold=2
dense n=300
dense n=10 lateral_w0=-1   # output
"""


def test_parse_defaults_and_shapes():
    net = parse_network(CNN, 1.0)
    assert [l.kind for l in net.layers] == ["input", "conv", "pool", "conv", "pool", "dense", "dense"]
    assert net.shapes[-2:] == [(300,), (10,)]
    assert [net.params(i).threshold for i in range(1, 7)] == [5, 5, 6, 2, 10, 20]
    assert net.params(1).tau_m == 64.0 and net.params(1).tau_s == 8.0
    assert net.layers[6].lateral_w0 == -1.0


def test_time_constants_scale_with_grid():
    net = parse_network("input shape=4\ndense n=2\n", 0.6)
    assert net.params(1).tau_m == pytest.approx(38.4)
    net = parse_network("defaults tau_m=20 tau_s=5\ninput shape=4\ndense n=2 tau_s=2\n", 1.0)
    assert (net.params(1).tau_m, net.params(1).tau_s) == (20.0, 2.0)


def test_format_parse_round_trip():
    net = parse_network(CNN, 1.0)
    again = parse_network(format_network(net), 1.0)
    assert format_network(again) == format_network(net)
    assert again.shapes == net.shapes


@pytest.mark.parametrize("text", [
    "input shape=4\nsoma n=3\n",
    "input shape=4\ndense size=3\n",
    "input shape=4\ndense n\n",
    "input shape=4\ndense n=three\n",
    "dense n=3\n",
    "",
    "input shape=4\ndense n=3 tau_m=2 tau_s=4\n",
])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_network(text, 1.0)


def test_checkpoint_bitwise_round_trip(tmp_path, rng):
    net = parse_network(CNN.replace("300", "30"), 1.0)
    net.init_weights(rng)
    net.weights[5] = net.weights[5] + 1e-300  # subnormal-adjacent values survive too
    save_checkpoint(tmp_path / "w.hm2b", net)
    raw = (tmp_path / "w.hm2b").read_bytes()
    assert raw[:4] == b"HM2B" and struct.unpack_from("<II", raw, 4) == (1, 4)
    loaded = load_checkpoint(tmp_path / "w.hm2b", net)
    for a, b in zip(net.weights, loaded):
        assert (a is None and b is None) or (a.tobytes() == b.tobytes() and a.shape == b.shape)
    save_checkpoint(tmp_path / "w2.hm2b", net)
    assert (tmp_path / "w2.hm2b").read_bytes() == raw


def test_checkpoint_mismatch_errors(tmp_path, rng):
    net = parse_network("input shape=4\ndense n=3\ndense n=2\n", 1.0)
    net.init_weights(rng)
    save_checkpoint(tmp_path / "w", net)
    other = parse_network("input shape=4\ndense n=5\ndense n=2\n", 1.0)
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "w", other)
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "bad")
    raw = (tmp_path / "w").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "short", net)
    (tmp_path / "v2").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "v2", net)
