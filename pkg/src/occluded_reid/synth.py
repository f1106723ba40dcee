"""Seeded synthetic occluded-person datasets written as PFV1 files.

Each identity owns four part prototypes, drawn inside a per-part subspace of
rank ``proto_rank``. An image's raw part features are the prototype plus
isotropic within-identity noise plus a per-camera offset. Occlusion is
sampled per body region (head, torso, leg): the region's keypoint confidences
are attenuated and the features of every part touching those keypoints are
blended toward random occluder content, in proportion to the fraction of that
part's keypoints affected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np

from .config import apply_overrides, parse_kv_lines, substream
from .descriptor import N_KEYPOINTS, N_PARTS, DescriptorSet, RegionMap, write_pfv

SPLITS = ("train", "query", "gallery")


@dataclass
class SynthConfig:
    n_ids: int = 50
    train_per_id: int = 8
    query_per_id: int = 2
    gallery_per_id: int = 10
    c_raw: int = 48
    cameras: int = 2
    sigma_within: float = 1.0
    proto_rank: int = 16  # capped at c_raw; 0 means full rank
    camera_scale: float = 0.3
    p_head: float = 0.0
    p_torso: float = 0.1
    p_leg: float = 0.5
    severity: float = 1.0
    conf_low: float = 0.7
    conf_high: float = 1.0
    occluder_scale: float = 1.0
    shared_ids: bool = True
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_ids", "train_per_id", "query_per_id", "gallery_per_id", "c_raw", "cameras"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("p_head", "p_torso", "p_leg", "severity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.conf_low <= self.conf_high <= 1.0:
            raise ValueError("need 0 <= conf_low <= conf_high <= 1")
        if self.proto_rank < 0:
            raise ValueError("proto_rank must be >= 0")
        if self.sigma_within <= 0:
            raise ValueError("sigma_within must be positive")
        if not self.shared_ids and self.n_ids < 2:
            raise ValueError("disjoint identity protocol needs n_ids >= 2")

    @property
    def clean_conf_mean(self) -> float:
        return 0.5 * (self.conf_low + self.conf_high)

    def replace(self, **kw) -> "SynthConfig":
        return dataclasses.replace(self, **kw)

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]


def split_ids(cfg: SynthConfig) -> Dict[str, np.ndarray]:
    ids = np.arange(cfg.n_ids)
    if cfg.shared_ids:
        return {"train": ids, "query": ids, "gallery": ids}
    n_train = (cfg.n_ids + 1) // 2
    return {"train": ids[:n_train], "query": ids[n_train:], "gallery": ids[n_train:]}


def _render(cfg: SynthConfig, rng, protos, cam_off, ids, per_id, cam_shift, regions: RegionMap):
    region_kp = regions.regions()
    n = len(ids) * per_id
    pid = np.repeat(ids, per_id)
    cam = (np.tile(np.arange(per_id), len(ids)) + cam_shift) % cfg.cameras
    kp = rng.uniform(cfg.conf_low, cfg.conf_high, size=(n, N_KEYPOINTS))
    raw = protos[pid] + rng.normal(0.0, cfg.sigma_within, size=(n, N_PARTS, cfg.c_raw)) + cam_off[cam]
    occluded_kp = np.zeros((n, N_KEYPOINTS), dtype=bool)
    for r, prob in zip(region_kp[1:], (cfg.p_head, cfg.p_torso, cfg.p_leg)):
        hit = rng.random(n) < prob
        occluded_kp[np.ix_(hit, list(r))] = True
    kp = np.where(occluded_kp, kp * (1.0 - cfg.severity), kp)
    occluder = rng.normal(0.0, cfg.occluder_scale, size=(n, N_PARTS, cfg.c_raw))
    frac = np.stack([occluded_kp[:, list(r)].mean(axis=1) for r in region_kp], axis=1) * cfg.severity
    raw = (1.0 - frac[..., None]) * raw + frac[..., None] * occluder
    return DescriptorSet.from_arrays(pid, cam, kp, raw, regions)


def generate_sets(cfg: SynthConfig, regions: RegionMap = RegionMap()) -> Dict[str, DescriptorSet]:
    """Build train/query/gallery descriptor sets in memory (deterministic per seed)."""
    cfg.validate()
    rng = substream(cfg.seed, "data")
    protos = rng.normal(0.0, 1.0, size=(cfg.n_ids, N_PARTS, cfg.c_raw))
    r = min(cfg.proto_rank, cfg.c_raw)
    if 0 < r < cfg.c_raw:
        # identities vary only inside a per-part subspace; unit variance per raw channel overall
        basis = np.linalg.qr(rng.normal(size=(N_PARTS, cfg.c_raw, r)))[0]
        coef = protos[..., :r] * np.sqrt(cfg.c_raw / r)
        protos = np.einsum("npr,pcr->npc", coef, basis)
    cam_off = rng.normal(0.0, cfg.camera_scale, size=(cfg.cameras, N_PARTS, cfg.c_raw))
    ids = split_ids(cfg)
    per_id = {"train": cfg.train_per_id, "query": cfg.query_per_id, "gallery": cfg.gallery_per_id}
    # queries start on the camera after the gallery's first so each has a cross-camera match
    shift = {"train": 0, "query": 1, "gallery": 0}
    out = {}
    for split in SPLITS:
        out[split] = _render(cfg, substream(cfg.seed, f"data.{split}"), protos, cam_off,
                             ids[split], per_id[split], shift[split], regions)
    return out


def write_manifest(path, cfg: SynthConfig, extra: dict = None) -> None:
    lines = ["# synthetic dataset manifest"]
    lines += [f"{k}={v}" for k, v in cfg.items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> SynthConfig:
    vals = parse_kv_lines(Path(path).read_text(encoding="utf-8"))
    known = {f.name for f in dataclasses.fields(SynthConfig)}
    return apply_overrides(SynthConfig(), {k: v for k, v in vals.items() if k in known})


def generate(cfg: SynthConfig, outdir, regions: RegionMap = RegionMap()) -> Dict[str, Path]:
    """Write train/query/gallery PFV1 files plus a manifest into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sets = generate_sets(cfg, regions)
    paths = {}
    for split, data in sets.items():
        paths[split] = outdir / f"{split}.pfv"
        write_pfv(paths[split], data)
    paths["manifest"] = outdir / "manifest"
    write_manifest(paths["manifest"], cfg, {"regions": regions.to_string()})
    return paths
