"""Deterministic synthetic point-cloud datasets with injected anomalies.

Four closed surface categories (sphere, box, cylinder, torus) sampled with
mild surface noise and a random pose per sample.  Anomalies are local
geometric deformations with exact point-level labels:

  dent / bump       inward / outward displacement with a cosine profile
  crack             a narrow elongated groove
  missing-region    points removed from a cap; the surrounding rim is labeled

Region membership (one id per injected anomaly) is recorded for PRO.
Pseudo-RGB appearance is a pure function of point position, category and
seed (palette plus octant-coded tints plus noise), so the RGB modality
carries color semantics the shaded rendering does not.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import io_formats
from .geometry import PointCloud

Array = np.ndarray

CATEGORIES = ("sphere", "box", "cylinder", "torus")
ANOMALY_KINDS = ("dent", "bump", "crack", "missing-region")

_PALETTE = {
    "sphere": (0.80, 0.35, 0.25),
    "box": (0.25, 0.45, 0.80),
    "cylinder": (0.30, 0.70, 0.35),
    "torus": (0.75, 0.60, 0.20),
}
_OCTANT_TINT = np.array([
    [0.00, 0.00, 0.00], [0.15, -0.05, -0.05], [-0.05, 0.15, -0.05],
    [-0.05, -0.05, 0.15], [0.12, 0.12, -0.08], [0.12, -0.08, 0.12],
    [-0.08, 0.12, 0.12], [-0.10, -0.10, -0.10],
])


@dataclass(frozen=True)
class SynthSpec:
    category: str = "sphere"
    train_count: int = 8
    test_count: int = 8
    points: int = 4000
    anomaly_kinds: tuple[str, ...] = ANOMALY_KINDS
    anomaly_fraction: float = 0.1
    seed: int = 0
    noise: float = 0.003

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if not set(self.anomaly_kinds) <= set(ANOMALY_KINDS):
            raise ValueError("unknown anomaly kind")
        if not self.anomaly_kinds:
            raise ValueError("need at least one anomaly kind")
        if not (0.0 < self.anomaly_fraction <= 0.3):
            raise ValueError("anomaly fraction must lie in (0, 0.3]")
        if self.test_count < 2 or self.train_count < 2:
            raise ValueError("each split needs at least 2 samples")
        if self.points < 50:
            raise ValueError("too few points per cloud")


@dataclass
class SynthSample:
    name: str
    category: str
    split: str
    label: int
    cloud: PointCloud
    region_ids: Array
    seed: int
    anomaly_kind: str | None = None


def _surface(category: str, rng: np.random.Generator, n: int) -> tuple[Array, Array]:
    """Sample n surface points and their outward normals."""
    if category == "sphere":
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d.copy(), d.copy()
    if category == "box":
        h = np.array([1.0, 0.75, 0.55])
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]]).repeat(2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        pts = rng.uniform(-1.0, 1.0, (n, 3)) * h
        normals = np.zeros((n, 3))
        for f in range(6):
            axis, sign = f // 2, 1.0 if f % 2 == 0 else -1.0
            m = face == f
            pts[m, axis] = sign * h[axis]
            normals[m, axis] = sign
        return pts, normals
    if category == "cylinder":
        # Beveled edges: sharp circular rims read as damage-like texture
        # at render scale, which no real machined part has.
        r, hh, b = 0.7, 0.9, 0.12
        rc = r - b
        zc = hh - b
        lateral = 2 * np.pi * r * 2 * zc
        cap = np.pi * rc * rc
        bevel = 2 * np.pi * (rc + 2 * b / np.pi) * (np.pi * b / 2)
        weights = np.array([lateral, cap, cap, bevel, bevel])
        part = rng.choice(5, size=n, p=weights / weights.sum())
        theta = rng.uniform(0, 2 * np.pi, n)
        pts = np.zeros((n, 3))
        normals = np.zeros((n, 3))
        side = part == 0
        pts[side] = np.stack([r * np.cos(theta[side]), r * np.sin(theta[side]),
                              rng.uniform(-zc, zc, side.sum())], axis=1)
        normals[side] = np.stack([np.cos(theta[side]), np.sin(theta[side]),
                                  np.zeros(side.sum())], axis=1)
        for which, sign in ((1, 1.0), (2, -1.0)):
            m = part == which
            rad = rc * np.sqrt(rng.uniform(0, 1, m.sum()))
            pts[m] = np.stack([rad * np.cos(theta[m]), rad * np.sin(theta[m]),
                               np.full(m.sum(), sign * hh)], axis=1)
            normals[m, 2] = sign
        for which, sign in ((3, 1.0), (4, -1.0)):
            m = part == which
            k = m.sum()
            psi = np.empty(k)
            done = 0
            while done < k:
                cand = rng.uniform(0, np.pi / 2, 2 * (k - done))
                keep = rng.uniform(0, 1, cand.size) < (rc + b * np.cos(cand)) / r
                take = cand[keep][: k - done]
                psi[done:done + take.size] = take
                done += take.size
            ring = rc + b * np.cos(psi)
            pts[m] = np.stack([ring * np.cos(theta[m]), ring * np.sin(theta[m]),
                               sign * (zc + b * np.sin(psi))], axis=1)
            normals[m] = np.stack([np.cos(psi) * np.cos(theta[m]),
                                   np.cos(psi) * np.sin(theta[m]),
                                   sign * np.sin(psi)], axis=1)
        return pts, normals
    if category == "torus":
        R, r = 0.7, 0.45
        theta = rng.uniform(0, 2 * np.pi, n)
        phi = np.empty(n)
        done = 0
        while done < n:
            cand = rng.uniform(0, 2 * np.pi, 2 * (n - done))
            keep = rng.uniform(0, 1, cand.size) < (R + r * np.cos(cand)) / (R + r)
            take = cand[keep][: n - done]
            phi[done:done + take.size] = take
            done += take.size
        ring = R + r * np.cos(phi)
        pts = np.stack([ring * np.cos(theta), ring * np.sin(theta), r * np.sin(phi)], axis=1)
        normals = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta),
                            np.sin(phi)], axis=1)
        return pts, normals
    raise ValueError(category)


def _random_rotation(rng: np.random.Generator) -> Array:
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _tangent_frame(n: Array) -> tuple[Array, Array]:
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(n, t1)
    return t1, t2


def _inject(points: Array, normals: Array, kind: str, count: int,
            rng: np.random.Generator) -> tuple[Array, Array, Array | None, Array]:
    """Deform `count` points around a visible center; returns
    (points, touched mask, keep mask or None, per-point displacement)."""
    n_pts = points.shape[0]
    # The camera sweeps the y-z plane (rotation about X), so a surface
    # normal's x-component never rotates toward the camera: anomaly
    # centers must sit on surface that faces the sweep.  Outward-facing
    # filters out inner-tube placements on the torus.
    centroid = points.mean(axis=0)
    outward = ((points - centroid) * normals).sum(axis=1) > 0.05
    facing = np.abs(normals[:, 0]) < 0.35
    eligible = np.nonzero(facing & outward)[0]
    if eligible.size == 0:
        eligible = np.nonzero(outward)[0]
    center_idx = int(rng.choice(eligible if eligible.size else np.arange(n_pts)))
    c = points[center_idx]
    n_c = normals[center_idx]

    delta = points - c
    if kind == "crack":
        t1, t2 = _tangent_frame(n_c)
        d = np.sqrt((delta @ t1 / 2.5) ** 2 + (delta @ t2 / 0.7) ** 2
                    + (delta @ n_c) ** 2)
    else:
        d = np.linalg.norm(delta, axis=1)

    sel = np.argsort(d, kind="stable")[:count]
    rho = d[sel].max()
    u = d[sel] / rho if rho > 0 else np.zeros(count)
    profile = np.cos(u * np.pi / 2.0)

    labeled = np.zeros(n_pts, dtype=bool)
    keep = None
    displacement = np.zeros(n_pts)
    if kind == "missing-region":
        inner = sel[u < 0.62]
        rim = sel[u >= 0.62]
        keep = np.ones(n_pts, dtype=bool)
        keep[inner] = False
        labeled[rim] = True
        points = points.copy()
        rim_disp = _damage_texture(points[rim], rng)
        points[rim] += rim_disp[:, None] * normals[rim]
        displacement[rim] = rim_disp
    else:
        # Shallow enough that crater interiors stay visible from oblique
        # views; the ripple texture, not raw depth, carries the signal.
        lo, hi = (0.10, 0.18) if kind == "crack" else (0.08, 0.16)
        depth = rng.uniform(lo, hi)
        sign = 1.0 if kind == "bump" else -1.0
        points = points.copy()
        # Damaged surfaces are wrinkled, not just displaced; spatially
        # coherent ripples are the shape-independent shading cue.  The
        # sqrt taper keeps the texture strong over most of the region.
        ripple = _damage_texture(points[sel], rng) * np.sqrt(profile)
        disp = sign * depth * profile + ripple
        points[sel] += disp[:, None] * normals[sel]
        displacement[sel] = disp
        labeled[sel] = True
    return points, labeled, keep, displacement


def _damage_texture(pts: Array, rng: np.random.Generator,
                    amplitude: float = 0.075) -> Array:
    """Coherent ripple displacement: sum of a few directional sinusoids
    with wavelengths of a few pixels, so the texture survives render-side
    depth smoothing."""
    out = np.zeros(pts.shape[0])
    for _ in range(4):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        freq = rng.uniform(25.0, 45.0)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(freq * (pts @ direction) + phase)
    return amplitude * out / 2.0


def make_sample(category: str, anomalous: bool, spec: SynthSpec, seed: int,
                name: str, split: str) -> SynthSample:
    rng = np.random.default_rng(seed)
    pts, normals = _surface(category, rng, spec.points)
    rot = _random_rotation(rng)
    pts = pts @ rot.T
    normals = normals @ rot.T
    pts = pts + spec.noise * rng.standard_normal(pts.shape)

    labels = np.zeros(spec.points, dtype=np.uint8)
    region_ids = np.zeros(spec.points, dtype=np.int64)
    kind = None
    if anomalous:
        kind = str(rng.choice(list(spec.anomaly_kinds)))
        target = max(8, int(round(spec.anomaly_fraction * spec.points)))
        multi_ok = kind != "missing-region" and target >= 400
        n_regions = 2 if (multi_ok and rng.uniform() < 0.5) else 1
        per_region = target // n_regions
        keep_all = np.ones(spec.points, dtype=bool)
        total_disp = np.zeros(spec.points)
        for r in range(n_regions):
            pts, touched, keep, disp = _inject(pts, normals, kind, per_region, rng)
            region_ids[touched] = r + 1
            total_disp += disp
            if keep is not None:
                keep_all &= keep
        if kind == "missing-region":
            labels[region_ids > 0] = 1
        else:
            # Label by the net displacement actually applied; overlapping
            # regions may cancel locally.
            labels[(region_ids > 0) & (np.abs(total_disp) >= 0.035)] = 1
            region_ids[labels == 0] = 0
        if not keep_all.all():
            pts, labels, region_ids = pts[keep_all], labels[keep_all], region_ids[keep_all]
            normals = normals[keep_all]
        if labels.sum() == 0:
            raise RuntimeError("anomaly injection produced no labeled points")

    cloud = PointCloud(points=pts, labels=labels)
    return SynthSample(name=name, category=category, split=split,
                       label=int(labels.max()), cloud=cloud,
                       region_ids=region_ids, seed=seed, anomaly_kind=kind)


def sample_seed(base_seed: int, category: str, split: str, index: int) -> int:
    ss = np.random.SeedSequence([base_seed, CATEGORIES.index(category),
                                 0 if split == "train" else 1, index])
    return int(ss.generate_state(1, np.uint64)[0])


def generate(spec: SynthSpec, out_dir: str | None = None) -> list[SynthSample]:
    """Create the train and test splits for one category.

    Samples alternate normal/anomalous so both classes appear in each
    split.  With `out_dir`, clouds (A3PC), region sidecars (A3RG) and a
    manifest (path, split, label, seed, category per line) are written;
    identical specs produce byte-identical trees.
    """
    samples: list[SynthSample] = []
    for split, count in (("train", spec.train_count), ("test", spec.test_count)):
        for i in range(count):
            seed = sample_seed(spec.seed, spec.category, split, i)
            name = f"{spec.category}-{split}-{i:03d}"
            samples.append(make_sample(spec.category, anomalous=(i % 2 == 1),
                                       spec=spec, seed=seed, name=name, split=split))
    if out_dir is not None:
        write_dataset(samples, out_dir)
    return samples


def write_dataset(samples: list[SynthSample], out_dir: str) -> str:
    """Write clouds, region sidecars and the manifest; returns manifest path."""
    lines = []
    for s in samples:
        split_dir = os.path.join(out_dir, s.split)
        os.makedirs(split_dir, exist_ok=True)
        rel = os.path.join(s.split, f"{s.name}.a3pc")
        io_formats.write_point_cloud(os.path.join(out_dir, rel), s.cloud)
        io_formats.write_regions(os.path.join(out_dir, rel[:-5] + ".a3rg"), s.region_ids)
        lines.append(f"{rel}\t{s.split}\t{s.label}\t{s.seed}\t{s.category}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return manifest


@dataclass
class ManifestEntry:
    path: str
    split: str
    label: int
    seed: int
    category: str

    @property
    def name(self) -> str:
        return os.path.splitext(os.path.basename(self.path))[0]


def read_manifest(path: str) -> list[ManifestEntry]:
    entries = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rel, split, label, seed, category = line.split("\t")
            entries.append(ManifestEntry(path=rel, split=split, label=int(label),
                                         seed=int(seed), category=category))
    return entries


def colorize(points: Array, category: str, seed: int) -> Array:
    """Per-point pseudo-RGB in [0, 1]: palette + octant tints + noise."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    base = np.asarray(_PALETTE[category])
    octant = ((points[:, 0] > 0).astype(int)
              + 2 * (points[:, 1] > 0).astype(int)
              + 4 * (points[:, 2] > 0).astype(int))
    colors = base + _OCTANT_TINT[octant] + 0.03 * rng.standard_normal((points.shape[0], 3))
    return np.clip(colors, 0.0, 1.0)
