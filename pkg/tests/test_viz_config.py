import colorsys
import dataclasses
import math

import numpy as np
import pytest

from pillarflow.config import RunConfig, dump_config, load_config, parse_config
from pillarflow.errors import ConfigError, FormatError
from pillarflow.grid import FlowGrid, GridSpec
from pillarflow.viz import decode_ppm, encode_ppm, flow_colorize, hsv_to_rgb, read_ppm, write_ppm

G = GridSpec(-1.0, 1.0, -1.0, 1.0, 0.5)


def test_hsv_matches_colorsys():
    rng = np.random.default_rng(0)
    hsv = rng.random((200, 3))
    hsv[:10, 0] = np.arange(10) / 6.0 % 1.0       # sector boundaries
    ours = hsv_to_rgb(hsv)
    ref = np.array([colorsys.hsv_to_rgb(*row) for row in hsv])
    assert np.allclose(ours, ref, atol=1e-12)


def test_colorize_wheel():
    vals = np.zeros((4, 4, 2))
    vals[0, 0] = [3.0, 0.0]
    vals[0, 1] = [-3.0, 0.0]
    valid = np.ones((4, 4), bool)
    valid[3, 3] = False
    img = flow_colorize(FlowGrid(vals, valid, grid=G), max_speed=3.0)
    assert img.shape == (4, 4, 3) and img.dtype == np.uint8
    assert np.all(img[1, 1] == 255)                  # zero flow: white
    assert np.all(img[3, 3] == 0)                    # invalid: black
    h = [colorsys.rgb_to_hsv(*(img[0, c] / 255.0))[0] for c in (0, 1)]
    assert abs(abs(h[0] - h[1]) - 0.5) < 1e-2
    with pytest.raises(ValueError):
        flow_colorize(FlowGrid(vals, valid), max_speed=0.0)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    data = encode_ppm(img)
    assert data.startswith(b"P6\n7 5\n255\n")
    with pytest.raises(FormatError):
        decode_ppm(data[:-1])
    with pytest.raises(FormatError):
        decode_ppm(b"P3\n1 1\n255\n000")


def test_config_defaults_and_round_trip():
    base = RunConfig()
    assert parse_config("") == base
    text = dump_config(base)
    assert parse_config(text) == base
    custom = parse_config("[run]\nseed = 7\n[net]\nchannels = 8, 16, 16\n[train]\naugment = false\n"
                          "[grid]\nresolution = 0.5\n")
    assert custom.run.seed == 7 and custom.scene.seed == 7
    assert custom.net.channels == (8, 16, 16) and custom.train.augment is False
    assert custom.net.grid.resolution == 0.5 and custom.tracker.grid == custom.net.grid
    assert parse_config(dump_config(custom)) == custom
    assert custom.digest() != base.digest() and base.digest() == RunConfig().digest()


@pytest.mark.parametrize("text", ["[nope]\na = 1\n", "[run]\nsee = 1\n", "[run]\nseed = x\n",
                                  "[train]\naugment = maybe\n", "not an ini", "[net]\nlevels = 1\n"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_missing_file(tmp_path):
    assert load_config(None) == RunConfig()
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.ini")


def test_with_seed_updates_scene():
    c = RunConfig().with_seed(11)
    assert c.run.seed == 11 and c.scene.seed == 11
