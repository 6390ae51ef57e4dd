"""INI configuration covering data mapping and all sampler hyperparameters.

Example::

    [data]
    time = time
    event = event
    cluster = site
    trt = arm
    categorical = stage, grade
    exclude = id

    [sampler]
    n_draws = 3500
    n_burn = 1000
    n_trees = 200
    seed = 7
    moves = 0.25, 0.25, 0.40, 0.10

    [effects]
    level = 0.95
    grid = 2048

    [sensitivity]
    q1 = 30
    q2 = 30
    cluster_sd = 1.0
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .exceptions import DataError
from .sampler import SamplerConfig

_INT = {"n_draws", "n_burn", "thin", "n_trees", "seed", "chains", "n_min", "max_depth", "n_cut", "workers"}
_FLOAT = {"k", "nu", "q", "gamma", "beta"}


def _list(s: str):
    return tuple(t.strip() for t in s.split(",") if t.strip())


@dataclass(frozen=True)
class RunConfig:
    schema: dict = field(default_factory=dict)
    categorical: tuple = ()
    exclude: tuple = ()
    sampler: SamplerConfig = SamplerConfig()
    level: float = 0.95
    grid: int = 2048
    q1: int = 30
    q2: int = 30
    cluster_sd: float = 1.0

    def with_sampler(self, **overrides) -> "RunConfig":
        kw = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, sampler=replace(self.sampler, **kw)) if kw else self


def load_config(path=None) -> RunConfig:
    """Parse an INI file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    cp = configparser.ConfigParser()
    try:
        if not cp.read(path):
            raise DataError(f"config file not found: {path}")
    except configparser.Error as e:
        raise ValueError(f"malformed config file: {e}") from None
    known = {f.name for f in fields(SamplerConfig)}
    out = {}
    if cp.has_section("data"):
        d = cp["data"]
        out["schema"] = {r: d[r] for r in ("time", "event", "cluster", "trt") if r in d}
        out["categorical"] = _list(d.get("categorical", ""))
        out["exclude"] = _list(d.get("exclude", ""))
    if cp.has_section("sampler"):
        kw = {}
        for key, val in cp["sampler"].items():
            if key not in known:
                raise ValueError(f"unknown sampler option {key!r}")
            try:
                if key in _INT:
                    kw[key] = int(val)
                elif key in _FLOAT:
                    kw[key] = float(val)
                elif key == "moves":
                    kw[key] = tuple(float(t) for t in _list(val))
                elif key == "drop_reference":
                    kw[key] = cp["sampler"].getboolean(key)
                else:
                    kw[key] = val.strip()
            except ValueError:
                raise ValueError(f"bad value {val!r} for sampler option {key!r}") from None
        out["sampler"] = SamplerConfig(**kw)
    if cp.has_section("effects"):
        out["level"] = cp["effects"].getfloat("level", 0.95)
        out["grid"] = cp["effects"].getint("grid", 2048)
    if cp.has_section("sensitivity"):
        s = cp["sensitivity"]
        out["q1"] = s.getint("q1", 30)
        out["q2"] = s.getint("q2", 30)
        out["cluster_sd"] = s.getfloat("cluster_sd", 1.0)
    return RunConfig(**out)


def write_config(cfg: RunConfig, path) -> Path:
    """Write ``cfg`` back to INI (round-trips through `load_config`)."""
    cp = configparser.ConfigParser()
    cp["data"] = dict(cfg.schema, categorical=", ".join(cfg.categorical), exclude=", ".join(cfg.exclude))
    s = cfg.sampler.to_dict()
    s["moves"] = ", ".join(repr(m) for m in cfg.sampler.moves)
    cp["sampler"] = {k: str(v) for k, v in s.items()}
    cp["effects"] = {"level": repr(cfg.level), "grid": str(cfg.grid)}
    cp["sensitivity"] = {"q1": str(cfg.q1), "q2": str(cfg.q2), "cluster_sd": repr(cfg.cluster_sd)}
    path = Path(path)
    with path.open("w") as fh:
        cp.write(fh)
    return path
