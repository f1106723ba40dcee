"""Run configuration: defaults, ``key=value`` config files and seeded sub-streams."""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .descriptor import RegionMap


@dataclass
class RunConfig:
    # model sizes
    c: int = 32
    frt_hidden: int = 32
    gcn_layers: int = 1
    steps: int = 3
    frt_layers: int = 1
    k_neighbors: int = 5
    scaled_attention: bool = False
    # thresholds
    delta: float = 0.2
    gamma: float = 0.5
    # losses / optimisation
    theta_E: float = 0.3
    theta_G: float = 0.3
    theta_T: float = 0.3
    t_triplet: str = "cross"
    optimizer: str = "sgd"
    momentum: float = 0.0
    lr_E: float = 0.005
    lr_G: float = 0.002
    lr_T: float = 0.002
    epochs_E: int = 40
    epochs_G: int = 20
    epochs_T: int = 30
    batch_size: int = 64
    per_id: int = 4
    seed: int = 0
    regions: str = RegionMap().to_string()
    # post-processing
    rerank_k1: int = 20
    rerank_k2: int = 6
    rerank_lambda: float = 0.3
    aqe_top_m: int = 2

    def region_map(self) -> RegionMap:
        return RegionMap.from_string(self.regions)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def _coerce(kind, raw: str):
    if kind is bool or kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int or kind == "int":
        return int(raw)
    if kind is float or kind == "float":
        return float(raw)
    return raw.strip()


def _field_types(cls):
    return {f.name: f.type for f in fields(cls)}


def parse_kv_lines(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def apply_overrides(cfg, values: dict):
    types = _field_types(type(cfg))
    kw = {}
    for key, raw in values.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        kw[key] = _coerce(types[key], raw) if isinstance(raw, str) else raw
    return dataclasses.replace(cfg, **kw)


def load_config(path=None, overrides: dict = None, cls=RunConfig):
    cfg = cls()
    if path is not None:
        cfg = apply_overrides(cfg, parse_kv_lines(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (data, init, batch, ...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
