"""Binary containers shared by the pipeline stages.

All containers are little-endian with a 4-byte ASCII magic:

  A3PC  point cloud: version u32, P u64, P x 3 float32, label flag u8,
        optional P x u8 labels
  A3VB  view bundle: version u32, V u32, H u32, W u32, P u64, rgb flag u8,
        scale f64, V x f64 angles; per view: render HxW f32,
        [rgb HxWx3 f32], mask HxW u8, pixel_to_point HxW i64 (-1 = empty)
  A3CK  checkpoint: version u32, tensor count u32; per tensor: name length
        u32 + UTF-8 name, ndim u32, dims u32 each, float32 values
  A3FC  feature cache: version u32, modality count u8; per modality:
        tag u8 (0=R, 1=r), V u32, N u32, d u32; per view: G (d f32),
        F (N x d f32)
  A3SC  per-point scores: count u64, float32 values
  A3RG  per-point anomaly region ids: count u64, u32 ids (0 = none)

Values cross the file boundary as float32; loaders return float64 arrays.
Writing is byte-deterministic for identical inputs.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Sequence

import numpy as np

from .errors import CacheFormatError
from .geometry import PointCloud, ViewBundle, ViewSpec

VERSION = 1


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CacheFormatError(f"truncated file while reading {what}")
    return data


def _expect_magic(f: BinaryIO, magic: bytes) -> None:
    got = f.read(4)
    if got != magic:
        raise CacheFormatError(f"bad magic {got!r}, expected {magic!r}")


def _read_u32(f: BinaryIO, what: str) -> int:
    return struct.unpack("<I", _read_exact(f, 4, what))[0]


def _read_u64(f: BinaryIO, what: str) -> int:
    return struct.unpack("<Q", _read_exact(f, 8, what))[0]


def _check_version(f: BinaryIO) -> None:
    v = _read_u32(f, "version")
    if v != VERSION:
        raise CacheFormatError(f"unsupported version {v}")


def _read_array(f: BinaryIO, dtype: str, count: int, what: str) -> np.ndarray:
    nbytes = count * np.dtype(dtype).itemsize
    return np.frombuffer(_read_exact(f, nbytes, what), dtype=dtype).copy()


# -- A3PC: point clouds -----------------------------------------------------

def write_point_cloud(path, cloud: PointCloud) -> None:
    with open(path, "wb") as f:
        f.write(b"A3PC")
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", cloud.n_points))
        f.write(cloud.points.astype("<f4").tobytes())
        if cloud.labels is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(cloud.labels.astype(np.uint8).tobytes())


def read_point_cloud(path) -> PointCloud:
    with open(path, "rb") as f:
        _expect_magic(f, b"A3PC")
        _check_version(f)
        n = _read_u64(f, "point count")
        if n < 1:
            raise CacheFormatError("point count must be >= 1")
        pts = _read_array(f, "<f4", n * 3, "points").astype(np.float64).reshape(n, 3)
        flag = _read_exact(f, 1, "label flag")[0]
        labels = None
        if flag == 1:
            labels = _read_array(f, "u1", n, "labels")
        elif flag != 0:
            raise CacheFormatError(f"bad label flag {flag}")
        return PointCloud(points=pts, labels=labels)


# -- A3VB: view bundles -------------------------------------------------------

def write_view_bundle(path, views: ViewBundle) -> None:
    V, H, W = views.render.shape
    with open(path, "wb") as f:
        f.write(b"A3VB")
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<III", V, H, W))
        f.write(struct.pack("<Q", views.n_points))
        f.write(struct.pack("<B", 1 if views.rgb is not None else 0))
        f.write(struct.pack("<d", views.spec.scale))
        f.write(np.asarray(views.spec.rotation_angles, dtype="<f8").tobytes())
        for v in range(V):
            f.write(views.render[v].astype("<f4").tobytes())
            if views.rgb is not None:
                f.write(views.rgb[v].astype("<f4").tobytes())
            f.write(views.mask[v].astype(np.uint8).tobytes())
            f.write(views.pixel_to_point[v].astype("<i8").tobytes())


def read_view_bundle(path) -> ViewBundle:
    with open(path, "rb") as f:
        _expect_magic(f, b"A3VB")
        _check_version(f)
        V, H, W = struct.unpack("<III", _read_exact(f, 12, "V/H/W"))
        P = _read_u64(f, "point count")
        has_rgb = _read_exact(f, 1, "rgb flag")[0]
        scale = struct.unpack("<d", _read_exact(f, 8, "scale"))[0]
        angles = tuple(float(a) for a in _read_array(f, "<f8", V, "angles"))
        spec = ViewSpec(view_count=V, rotation_angles=angles,
                        height=H, width=W, scale=scale)

        render = np.empty((V, H, W))
        rgb = np.empty((V, H, W, 3)) if has_rgb else None
        mask = np.empty((V, H, W), dtype=np.uint8)
        ptp = np.empty((V, H, W), dtype=np.int64)
        for v in range(V):
            render[v] = _read_array(f, "<f4", H * W, "render").astype(np.float64).reshape(H, W)
            if has_rgb:
                rgb[v] = _read_array(f, "<f4", H * W * 3, "rgb").astype(np.float64).reshape(H, W, 3)
            mask[v] = _read_array(f, "u1", H * W, "mask").reshape(H, W)
            ptp[v] = _read_array(f, "<i8", H * W, "pixel_to_point").reshape(H, W)

        if ptp.max(initial=-1) >= P:
            raise CacheFormatError("pixel_to_point indexes past the point count")
        point_pixel = np.full((V, P, 2), -1, dtype=np.int64)
        for v in range(V):
            rows, cols = np.nonzero(ptp[v] >= 0)
            point_pixel[v, ptp[v, rows, cols], 0] = rows
            point_pixel[v, ptp[v, rows, cols], 1] = cols
        return ViewBundle(spec=spec, render=render, mask=mask,
                          pixel_to_point=ptp, point_pixel=point_pixel, rgb=rgb)


# -- A3CK: named-tensor checkpoints ------------------------------------------

def write_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Named float tensors; iteration order is sorted for byte determinism."""
    with open(path, "wb") as f:
        f.write(b"A3CK")
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(arr.astype("<f4").tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        _expect_magic(f, b"A3CK")
        _check_version(f)
        count = _read_u32(f, "tensor count")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = _read_u32(f, "name length")
            name = _read_exact(f, name_len, "name").decode("utf-8")
            ndim = _read_u32(f, "ndim")
            shape = tuple(_read_u32(f, "dim") for _ in range(ndim))
            n = int(np.prod(shape)) if shape else 1
            vals = _read_array(f, "<f4", n, f"tensor {name}").astype(np.float64)
            out[name] = vals.reshape(shape) if shape else vals.reshape(())
        return out


# -- A3FC: feature caches ------------------------------------------------------

TAG_RGB = 0
TAG_RENDER = 1


def write_feature_cache(path, entries: Sequence[tuple[int, np.ndarray, np.ndarray]]) -> None:
    """Entries are (tag, G (V, d), F (V, N, d)); values stored as float32."""
    if not entries:
        raise CacheFormatError("feature cache needs at least one modality")
    with open(path, "wb") as f:
        f.write(b"A3FC")
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<B", len(entries)))
        for tag, G, F in entries:
            if tag not in (TAG_RGB, TAG_RENDER):
                raise CacheFormatError(f"unknown modality tag {tag}")
            G = np.asarray(G, dtype=np.float64)
            F = np.asarray(F, dtype=np.float64)
            V, d = G.shape
            if F.shape[0] != V or F.shape[2] != d:
                raise CacheFormatError("G and F disagree on V or d")
            N = F.shape[1]
            f.write(struct.pack("<B", tag))
            f.write(struct.pack("<III", V, N, d))
            for v in range(V):
                f.write(G[v].astype("<f4").tobytes())
                f.write(F[v].astype("<f4").tobytes())


def read_feature_cache(path) -> list[tuple[int, np.ndarray, np.ndarray]]:
    with open(path, "rb") as f:
        _expect_magic(f, b"A3FC")
        _check_version(f)
        n_mod = _read_exact(f, 1, "modality count")[0]
        if n_mod < 1:
            raise CacheFormatError("empty feature cache")
        out = []
        shape_seen: tuple[int, int] | None = None
        for _ in range(n_mod):
            tag = _read_exact(f, 1, "modality tag")[0]
            if tag not in (TAG_RGB, TAG_RENDER):
                raise CacheFormatError(f"unknown modality tag {tag}")
            V, N, d = struct.unpack("<III", _read_exact(f, 12, "V/N/d"))
            if V < 1 or N < 1 or d < 2:
                raise CacheFormatError("invalid feature dimensions")
            if shape_seen is None:
                shape_seen = (N, d)
            elif shape_seen != (N, d):
                raise CacheFormatError("modalities disagree on N or d")
            G = np.empty((V, d))
            F = np.empty((V, N, d))
            for v in range(V):
                G[v] = _read_array(f, "<f4", d, "global feature").astype(np.float64)
                F[v] = _read_array(f, "<f4", N * d, "patch features").astype(np.float64).reshape(N, d)
            out.append((tag, G, F))
        return out


# -- A3SC: per-point scores ------------------------------------------------------

def write_scores(path, scores: np.ndarray) -> None:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    with open(path, "wb") as f:
        f.write(b"A3SC")
        f.write(struct.pack("<Q", scores.size))
        f.write(scores.astype("<f4").tobytes())


def read_scores(path) -> np.ndarray:
    with open(path, "rb") as f:
        _expect_magic(f, b"A3SC")
        n = _read_u64(f, "score count")
        return _read_array(f, "<f4", n, "scores").astype(np.float64)


# -- A3RG: anomaly region ids -----------------------------------------------------

def write_regions(path, region_ids: np.ndarray) -> None:
    ids = np.asarray(region_ids).ravel()
    if ids.min(initial=0) < 0:
        raise CacheFormatError("region ids must be >= 0")
    with open(path, "wb") as f:
        f.write(b"A3RG")
        f.write(struct.pack("<Q", ids.size))
        f.write(ids.astype("<u4").tobytes())


def read_regions(path) -> np.ndarray:
    with open(path, "rb") as f:
        _expect_magic(f, b"A3RG")
        n = _read_u64(f, "region count")
        return _read_array(f, "<u4", n, "region ids").astype(np.int64)
