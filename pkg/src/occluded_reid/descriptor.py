"""Part-feature descriptors, visibility scoring and the PFV1 text format."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

N_PARTS = 4
N_KEYPOINTS = 12
PART_NAMES = ("global", "head", "torso", "leg")
KEYPOINT_NAMES = (
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)
DEFAULT_DELTA = 0.2


class ConfigError(ValueError):
    pass


class PFVParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class RegionMap:
    """Keypoint indices per local part (head, torso, leg); global uses all of them."""

    head: Tuple[int, ...] = (0, 1)
    torso: Tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    leg: Tuple[int, ...] = (6, 7, 8, 9, 10, 11)
    n_keypoints: int = N_KEYPOINTS

    def __post_init__(self):
        for name in ("head", "torso", "leg"):
            idx = getattr(self, name)
            if len(idx) == 0:
                raise ConfigError(f"region {name!r} is empty")
            if any(i < 0 or i >= self.n_keypoints for i in idx):
                raise ConfigError(f"region {name!r} has keypoint index outside [0, {self.n_keypoints})")

    def regions(self) -> List[Tuple[int, ...]]:
        return [tuple(range(self.n_keypoints)), self.head, self.torso, self.leg]

    def to_string(self) -> str:
        return ";".join(",".join(str(i) for i in r) for r in (self.head, self.torso, self.leg))

    @classmethod
    def from_string(cls, s: str) -> "RegionMap":
        parts = s.split(";")
        if len(parts) != 3:
            raise ConfigError(f"region map needs 3 groups separated by ';', got {s!r}")
        try:
            groups = [tuple(int(x) for x in p.split(",") if x.strip()) for p in parts]
        except ValueError:
            raise ConfigError(f"bad region map {s!r}") from None
        return cls(*groups)


def visibility_scores(kp_conf, regions: RegionMap = RegionMap()) -> np.ndarray:
    kp = np.asarray(kp_conf, dtype=np.float64)
    out = np.empty(kp.shape[:-1] + (N_PARTS,))
    for i, r in enumerate(regions.regions()):
        if len(r) == 0:
            raise ConfigError(f"region {i} is empty")
        out[..., i] = kp[..., list(r)].mean(axis=-1)
    return out


@dataclass(frozen=True, eq=False)
class PersonDescriptor:
    id: int
    camera: int
    kp_conf: np.ndarray
    parts: np.ndarray  # (4, c)
    vis: np.ndarray  # (4,)

    @property
    def c(self) -> int:
        return self.parts.shape[1]

    def equals(self, other: "PersonDescriptor") -> bool:
        return (
            self.id == other.id
            and self.camera == other.camera
            and np.array_equal(self.kp_conf, other.kp_conf)
            and np.array_equal(self.parts, other.parts)
            and np.array_equal(self.vis, other.vis)
        )


def make_descriptor(pid, camera, kp_conf, parts, regions: RegionMap = RegionMap()) -> PersonDescriptor:
    kp = np.array(kp_conf, dtype=np.float64)
    parts = np.array(parts, dtype=np.float64)
    if parts.ndim != 2 or parts.shape[0] != N_PARTS:
        raise ValueError(f"parts must have shape (4, c), got {parts.shape}")
    return PersonDescriptor(int(pid), int(camera), kp, parts, visibility_scores(kp, regions))


def threshold_mask(vis: np.ndarray, delta: float) -> np.ndarray:
    """True where a part is kept (strictly, v >= delta)."""
    return ~(np.asarray(vis) < delta)


def apply_occlusion_threshold(d: PersonDescriptor, delta: float = DEFAULT_DELTA) -> PersonDescriptor:
    if not 0.0 <= delta <= 1.0:
        raise ValueError("delta must lie in [0, 1]")
    parts = d.parts.copy()
    parts[~threshold_mask(d.vis, delta)] = 0.0
    return PersonDescriptor(d.id, d.camera, d.kp_conf, parts, d.vis)


@dataclass(eq=False)
class DescriptorSet:
    """Column-wise collection of descriptors; the pipeline works on these."""

    ids: np.ndarray
    cams: np.ndarray
    kp_conf: np.ndarray  # (N, K)
    parts: np.ndarray  # (N, 4, c)
    vis: np.ndarray  # (N, 4)
    c: int = field(default=0)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.cams = np.asarray(self.cams, dtype=np.int64).reshape(-1)
        n = len(self.ids)
        kp = np.asarray(self.kp_conf, dtype=np.float64)
        self.kp_conf = kp.reshape(n, -1) if n else kp.reshape(0, kp.shape[-1] if kp.ndim == 2 else N_KEYPOINTS)
        if self.parts is None or np.size(self.parts) == 0:
            self.parts = np.zeros((n, N_PARTS, self.c))
        parts = np.asarray(self.parts, dtype=np.float64)
        self.parts = parts.reshape(n, N_PARTS, -1) if n else parts.reshape(0, N_PARTS, self.c)
        self.vis = np.asarray(self.vis, dtype=np.float64).reshape(n, N_PARTS)
        self.c = self.parts.shape[2]

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i: int) -> PersonDescriptor:
        return PersonDescriptor(int(self.ids[i]), int(self.cams[i]), self.kp_conf[i].copy(),
                                self.parts[i].copy(), self.vis[i].copy())

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "DescriptorSet":
        idx = np.asarray(idx, dtype=np.int64)
        return DescriptorSet(self.ids[idx], self.cams[idx], self.kp_conf[idx],
                             self.parts[idx], self.vis[idx], self.c)

    def with_parts(self, parts: np.ndarray) -> "DescriptorSet":
        return DescriptorSet(self.ids, self.cams, self.kp_conf, parts, self.vis)

    def thresholded(self, delta: float = DEFAULT_DELTA) -> "DescriptorSet":
        parts = self.parts.copy()
        parts[~threshold_mask(self.vis, delta)] = 0.0
        return self.with_parts(parts)

    def concat_features(self) -> np.ndarray:
        return self.parts.reshape(len(self), -1)

    def equals(self, other: "DescriptorSet") -> bool:
        return (
            len(self) == len(other)
            and self.parts.shape == other.parts.shape
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.cams, other.cams)
            and np.array_equal(self.kp_conf, other.kp_conf)
            and np.array_equal(self.parts, other.parts)
            and np.array_equal(self.vis, other.vis)
        )

    @classmethod
    def from_descriptors(cls, descs: Sequence[PersonDescriptor], c: int = 0) -> "DescriptorSet":
        if not descs:
            return cls(np.zeros(0), np.zeros(0), np.zeros((0, N_KEYPOINTS)), None, np.zeros((0, N_PARTS)), c)
        return cls(
            [d.id for d in descs], [d.camera for d in descs],
            np.stack([d.kp_conf for d in descs]), np.stack([d.parts for d in descs]),
            np.stack([d.vis for d in descs]),
        )

    @classmethod
    def from_arrays(cls, ids, cams, kp_conf, parts, regions: RegionMap = RegionMap()) -> "DescriptorSet":
        kp = np.asarray(kp_conf, dtype=np.float64)
        return cls(ids, cams, kp, parts, visibility_scores(kp, regions))


# ---------------------------------------------------------------------------
# PFV1

def _fmt(x: float) -> str:
    return repr(float(x))


def write_pfv(path, data, c: int = None) -> None:
    if not isinstance(data, DescriptorSet):
        data = DescriptorSet.from_descriptors(list(data), c or 0)
    c = data.c if c is None else c
    k = data.kp_conf.shape[1] if len(data) else N_KEYPOINTS
    lines = [f"PFV1 {c} {k}"]
    for i in range(len(data)):
        fields = [str(int(data.ids[i])), str(int(data.cams[i]))]
        fields += [_fmt(v) for v in data.kp_conf[i]]
        fields += [_fmt(v) for v in data.parts[i].reshape(-1)]
        lines.append(" ".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pfv(path, regions: RegionMap = RegionMap()) -> DescriptorSet:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    head = lines[0].split() if lines else []
    if len(head) != 3 or head[0] != "PFV1":
        raise PFVParseError(1, f"malformed header {lines[0]!r}" if lines else "empty file")
    try:
        c, k = int(head[1]), int(head[2])
    except ValueError:
        raise PFVParseError(1, "header sizes must be integers") from None
    if c < 1 or k < 1:
        raise PFVParseError(1, "header sizes must be positive")
    if k != regions.n_keypoints:
        raise PFVParseError(1, f"keypoint count {k} does not match region map ({regions.n_keypoints})")
    expected = 2 + k + N_PARTS * c
    ids, cams, kps, parts = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        toks = line.split()
        if len(toks) != expected:
            raise PFVParseError(lineno, f"expected {expected} fields, got {len(toks)}")
        try:
            pid, cam = int(toks[0]), int(toks[1])
            vals = [float(t) for t in toks[2:]]
        except ValueError as exc:
            raise PFVParseError(lineno, str(exc)) from None
        if pid < 0 or cam < 0:
            raise PFVParseError(lineno, "id and camera must be non-negative")
        if not all(math.isfinite(v) for v in vals):
            raise PFVParseError(lineno, "non-finite value")
        ids.append(pid)
        cams.append(cam)
        kps.append(vals[:k])
        parts.append(vals[k:])
    if not ids:
        return DescriptorSet(np.zeros(0), np.zeros(0), np.zeros((0, k)), np.zeros((0, N_PARTS, c)),
                             np.zeros((0, N_PARTS)), c)
    kp = np.array(kps)
    return DescriptorSet(ids, cams, kp, np.array(parts).reshape(-1, N_PARTS, c),
                         visibility_scores(kp, regions))
