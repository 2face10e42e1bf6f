"""Run configuration: an INI file with one section per component.

Sections mirror the dataclasses they build. Every key has the dataclass default;
unknown sections or keys raise ConfigError.

    [run]       seed, out, n_train, n_val, n_frames
    [grid]      GridSpec
    [net]       NetConfig (grid comes from [grid])
    [scene]     SceneConfig (grid from [grid], seed from [run])
    [train]     TrainConfig
    [loss]      LossWeights
    [tracker]   TrackerConfig
    [dogma]     DogmaConfig
    [icp]       gate, max_iters, tol
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .baselines.dogma import DogmaConfig
from .datagen import SceneConfig
from .errors import ConfigError
from .flownet import LossWeights, NetConfig, TrainConfig
from .grid import GridSpec
from .tracking.tracker import TrackerConfig


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs"
    n_train: int = 500
    n_val: int = 100
    n_frames: int = 8


@dataclass(frozen=True)
class IcpSection:
    gate: float = 3.0
    max_iters: int = 100
    tol: float = 1e-12


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    grid: GridSpec = field(default_factory=lambda: NetConfig.desk().grid)
    net: NetConfig = field(default_factory=NetConfig.desk)
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(base_lr=1e-3))
    loss: LossWeights = field(default_factory=LossWeights)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    dogma: DogmaConfig = field(default_factory=DogmaConfig)
    icp: IcpSection = field(default_factory=IcpSection)

    def to_dict(self):
        out = {}
        for f in fields(self):
            d = dataclasses.asdict(getattr(self, f.name))
            d.pop("grid", None)
            out[f.name] = d
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, run=dataclasses.replace(self.run, seed=int(seed)),
                                   scene=dataclasses.replace(self.scene, seed=int(seed)))


_SKIP = {"net": {"grid"}, "scene": {"grid", "seed"}, "tracker": {"grid"}}


def _convert(raw: str, default, where):
    try:
        if isinstance(default, bool):
            v = raw.strip().lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return v in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _section(cls_default, values: dict, section: str, skip=()):
    known = {f.name: getattr(cls_default, f.name) for f in fields(cls_default) if f.name not in skip}
    kw = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        kw[key] = _convert(raw, known[key], f"[{section}] {key}")
    return kw


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    base = RunConfig()
    names = {f.name for f in fields(RunConfig)}
    for s in cp.sections():
        if s not in names:
            raise ConfigError(f"unknown section [{s}]")
    get = lambda s: dict(cp[s]) if cp.has_section(s) else {}
    try:
        run = dataclasses.replace(base.run, **_section(base.run, get("run"), "run"))
        grid = dataclasses.replace(base.grid, **_section(base.grid, get("grid"), "grid"))
        net = dataclasses.replace(base.net, grid=grid, **_section(base.net, get("net"), "net", _SKIP["net"]))
        scene = dataclasses.replace(base.scene, grid=grid, seed=run.seed,
                                    **_section(base.scene, get("scene"), "scene", _SKIP["scene"]))
        train = dataclasses.replace(base.train, **_section(base.train, get("train"), "train"))
        loss = dataclasses.replace(base.loss, **_section(base.loss, get("loss"), "loss"))
        tracker = dataclasses.replace(base.tracker, grid=grid,
                                      **_section(base.tracker, get("tracker"), "tracker", _SKIP["tracker"]))
        dogma = dataclasses.replace(base.dogma, **_section(base.dogma, get("dogma"), "dogma"))
        icp = dataclasses.replace(base.icp, **_section(base.icp, get("icp"), "icp"))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    return RunConfig(run, grid, net, scene, train, loss, tracker, dogma, icp)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def dump_config(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""
    lines = []
    for name, d in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in d.items():
            if name in _SKIP and k in _SKIP[name]:
                continue
            if isinstance(v, (list, tuple)):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
