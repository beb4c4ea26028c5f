"""Multi-view rendering of point clouds and 2D <-> 3D score transport.

A cloud is rotated about the X-axis by a per-view angle, orthographically
projected onto the image plane, and occlusion-resolved with a depth buffer
(nearest point per pixel wins; ties go to the lowest point index).  The
rendered image is a grayscale Lambertian shading of per-pixel surface
normals estimated from finite differences of a denoised depth buffer; it
covers every pixel the front-surface splat reaches and is 0 elsewhere.
Visibility masks and score transport follow single-pixel ownership
exactly: H_i marks owned pixels only.

The per-view pixel/point correspondence recorded here is exact, so score
maps painted in image space can be carried back to points and labels can be
carried forward to masks without approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import GeometryError

Array = np.ndarray

#: 9 rotation angles about the X-axis: -4pi/5 ... 4pi/5 in steps of pi/5.
DEFAULT_VIEW_ANGLES: tuple[float, ...] = tuple(k * math.pi / 5.0 for k in range(-4, 5))


def centered_angles(count: int) -> tuple[float, ...]:
    """`count` angles in steps of pi/5, centered on 0 (the default 9 for count=9)."""
    if count < 1:
        raise GeometryError("view count must be >= 1")
    return tuple((k - (count - 1) / 2.0) * math.pi / 5.0 for k in range(count))


@dataclass(frozen=True)
class ViewSpec:
    """Camera sweep: rotation angles about the X-axis plus image geometry."""

    view_count: int = 9
    rotation_angles: tuple[float, ...] = DEFAULT_VIEW_ANGLES
    height: int = 84
    width: int = 84
    scale: float = 1.25

    def __post_init__(self):
        if self.view_count < 1:
            raise GeometryError("view count must be >= 1")
        if len(self.rotation_angles) != self.view_count:
            raise GeometryError("rotation_angles length must equal view_count")
        if not all(math.isfinite(a) for a in self.rotation_angles):
            raise GeometryError("invalid input")
        if self.height < 1 or self.width < 1:
            raise GeometryError("image dimensions must be >= 1")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise GeometryError("orthographic scale must be positive")

    @classmethod
    def with_count(cls, count: int, **kwargs) -> "ViewSpec":
        return cls(view_count=count, rotation_angles=centered_angles(count), **kwargs)


@dataclass
class PointCloud:
    """P_n points with optional binary per-point anomaly labels."""

    points: Array
    labels: Array | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise GeometryError("points must be a non-empty (P, 3) array")
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("invalid input")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (self.points.shape[0],):
                raise GeometryError("labels must be a (P,) vector")
            if not np.isin(self.labels, (0, 1)).all():
                raise GeometryError("labels must be binary")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass
class ViewBundle:
    """Per-view renders, visibility masks and exact pixel/point correspondence.

    `pixel_to_point[v, y, x]` holds the owning point index or -1;
    `point_pixel[v, p]` holds (row, col) of the pixel a point owns in view v,
    or (-1, -1) when the point is not the frontmost hit anywhere.
    """

    spec: ViewSpec
    render: Array                      # (V, H, W) float64 in [0, 1]
    mask: Array                        # (V, H, W) uint8
    pixel_to_point: Array              # (V, H, W) int64, -1 = empty
    point_pixel: Array                 # (V, P, 2) int64, -1 = invisible
    rgb: Array | None = None           # (V, H, W, 3) float64 in [0, 1]

    @property
    def view_count(self) -> int:
        return self.render.shape[0]

    @property
    def n_points(self) -> int:
        return self.point_pixel.shape[1]

    def visible_counts(self) -> Array:
        """Number of views in which each point is visible."""
        return (self.point_pixel[:, :, 0] >= 0).sum(axis=0)


@dataclass
class MaskSet:
    """Image-level label plus per-view binary masks projected from point labels."""

    image_label: int
    masks: Array                       # (V, H, W) uint8

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.uint8)
        if self.image_label not in (0, 1):
            raise GeometryError("image label must be binary")

    def view_labels(self) -> Array:
        """max{Y_i} per view."""
        return self.masks.reshape(self.masks.shape[0], -1).max(axis=1)


def _rotation_x(angle: float) -> Array:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def make_views(cloud: PointCloud, spec: ViewSpec, colors: Array | None = None) -> ViewBundle:
    """Render a cloud from every view in `spec`.

    The cloud is centered at its centroid, rotated about X, and projected
    orthographically: x -> columns, y -> rows (flipped), z -> depth with the
    camera on the +Z side.  `colors` ((P, 3) in [0, 1]) optionally produces
    the paired RGB observation, shaded by the same estimated normals.
    """
    pts = cloud.points
    if not np.all(np.isfinite(pts)):
        raise GeometryError("invalid input")
    if pts.shape[0] >= 2 and np.ptp(pts, axis=0).max() == 0.0:
        raise GeometryError("degenerate geometry")
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64)
        if colors.shape != (pts.shape[0], 3):
            raise GeometryError("colors must be (P, 3)")

    V, H, W, s = spec.view_count, spec.height, spec.width, spec.scale
    P = pts.shape[0]
    centered = pts - pts.mean(axis=0)

    render = np.zeros((V, H, W))
    rgb = np.zeros((V, H, W, 3)) if colors is not None else None
    mask = np.zeros((V, H, W), dtype=np.uint8)
    pixel_to_point = np.full((V, H, W), -1, dtype=np.int64)
    point_pixel = np.full((V, P, 2), -1, dtype=np.int64)

    px = 2.0 * s / max(W - 1, 1)
    py = 2.0 * s / max(H - 1, 1)

    for v, angle in enumerate(spec.rotation_angles):
        q = centered @ _rotation_x(angle).T
        uf = (q[:, 0] / s + 1.0) * 0.5 * (W - 1)
        rf = (-q[:, 1] / s + 1.0) * 0.5 * (H - 1)
        u = np.rint(uf).astype(np.int64)
        r = np.rint(rf).astype(np.int64)
        depth = -q[:, 2]

        inb = (u >= 0) & (u < W) & (r >= 0) & (r < H)
        idx = np.nonzero(inb)[0]
        if idx.size == 0:
            continue
        flat = r[idx] * W + u[idx]
        # Stable winner per pixel: smallest depth, then smallest point index.
        order = np.lexsort((idx, depth[idx], flat))
        sorted_flat = flat[order]
        sorted_depth = depth[idx][order]
        uniq_flat, first = np.unique(sorted_flat, return_index=True)
        winners = idx[order][first]
        win_depth = sorted_depth[first]

        ptp_v = pixel_to_point[v].ravel()
        ptp_v[uniq_flat] = winners
        mask[v].ravel()[uniq_flat] = 1
        point_pixel[v, winners, 0] = uniq_flat // W
        point_pixel[v, winners, 1] = uniq_flat % W

        # Depth for shading: bilinear-splat front-surface points at their
        # continuous image positions.  Snapping every point to one pixel
        # quantizes depth by up to half a pixel of surface slope, which
        # turns into shading speckle; interpolated splatting keeps the
        # sub-pixel surface.  Front membership is tested against a 3x3
        # local minimum of the nearest-depth buffer so back-surface points
        # cannot leak in through single-pixel holes in the front surface.
        tol = 4.0 * max(px, py)
        dmin = np.full((H, W), np.inf)
        dmin.ravel()[uniq_flat] = win_depth
        envelope = _min_filter3(dmin)
        accept = depth[idx] <= envelope.ravel()[flat] + tol
        near_idx = idx[accept]
        depth_map = _splat_depth(uf[near_idx], rf[near_idx], depth[near_idx], H, W)
        depth_map.ravel()[uniq_flat] = np.where(
            np.isfinite(depth_map.ravel()[uniq_flat]),
            depth_map.ravel()[uniq_flat], win_depth)
        # The rendered surface covers every pixel the front-surface splat
        # reaches, not only pixels that own a point: visibility (H_i) is
        # still the exact ownership mask, but the image shows the
        # interpolated surface so sampling gaps do not read as texture.
        covered = np.isfinite(depth_map)
        shade = _shade_from_depth(depth_map, covered, px, py)
        render[v] = shade
        if rgb is not None:
            color_map = _splat_colors(uf[near_idx], rf[near_idx],
                                      colors[near_idx], H, W)
            tone = 0.4 + 0.6 * shade[covered]
            rgb[v][covered] = color_map[covered] * tone[:, None]

    return ViewBundle(spec=spec, render=render, mask=mask,
                      pixel_to_point=pixel_to_point, point_pixel=point_pixel, rgb=rgb)


def _splat_colors(uf: Array, rf: Array, colors: Array, H: int, W: int) -> Array:
    """Bilinear color splatting companion to `_splat_depth`."""
    acc = np.zeros((H * W, 3))
    wacc = np.zeros(H * W)
    x0 = np.floor(uf).astype(np.int64)
    y0 = np.floor(rf).astype(np.int64)
    fx = uf - x0
    fy = rf - y0
    for dy in (0, 1):
        for dx in (0, 1):
            xx = x0 + dx
            yy = y0 + dy
            w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            m = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H) & (w > 0)
            fl = yy[m] * W + xx[m]
            np.add.at(acc, fl, w[m, None] * colors[m])
            np.add.at(wacc, fl, w[m])
    nz = wacc > 0
    acc[nz] /= wacc[nz, None]
    return acc.reshape(H, W, 3)


def _min_filter3(d: Array) -> Array:
    """3x3 minimum filter (inf-aware)."""
    out = d.copy()
    H, W = d.shape
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ys = slice(max(dy, 0), H + min(dy, 0))
            yd = slice(max(-dy, 0), H + min(-dy, 0))
            xs = slice(max(dx, 0), W + min(dx, 0))
            xd = slice(max(-dx, 0), W + min(-dx, 0))
            np.minimum(out[yd, xd], d[ys, xs], out=out[yd, xd])
    return out


def _splat_depth(uf: Array, rf: Array, depth: Array, H: int, W: int) -> Array:
    """Bilinear depth splatting at continuous image coordinates.

    Returns the weighted-average depth per pixel (inf where nothing
    landed)."""
    acc = np.zeros(H * W)
    wacc = np.zeros(H * W)
    x0 = np.floor(uf).astype(np.int64)
    y0 = np.floor(rf).astype(np.int64)
    fx = uf - x0
    fy = rf - y0
    for dy in (0, 1):
        for dx in (0, 1):
            xx = x0 + dx
            yy = y0 + dy
            w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            m = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H) & (w > 0)
            fl = yy[m] * W + xx[m]
            np.add.at(acc, fl, w[m] * depth[m])
            np.add.at(wacc, fl, w[m])
    out = np.full(H * W, np.inf)
    nz = wacc > 0
    out[nz] = acc[nz] / wacc[nz]
    return out.reshape(H, W)


def _smooth_depth(depth: Array, vis: Array) -> Array:
    """3x3 median of visible depths around each visible pixel.

    Single-pixel splats jitter the depth buffer by up to half a pixel of
    surface slope, and interior holes let back-surface points show
    through; a median rejects those outliers where a box average would
    smear them into the shading.
    """
    H, W = depth.shape
    stack = np.full((9, H, W), np.nan)
    k = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys = slice(max(dy, 0), H + min(dy, 0))
            yd = slice(max(-dy, 0), H + min(-dy, 0))
            xs = slice(max(dx, 0), W + min(dx, 0))
            xd = slice(max(-dx, 0), W + min(-dx, 0))
            plane = stack[k]
            src = np.where(vis, depth, np.nan)
            plane[yd, xd] = src[ys, xs]
            k += 1
    has_any = ~np.isnan(stack).all(axis=0)
    med = np.zeros_like(depth)
    med[has_any] = np.nanmedian(stack[:, has_any], axis=0)
    return np.where(vis, med, 0.0)


def _shade_from_depth(depth: Array, vis: Array, px: float, py: float) -> Array:
    """Lambertian shading of normals from finite differences of the depth buffer.

    Central differences where both neighbors are visible, one-sided where a
    single neighbor is, zero slope for isolated pixels.  The light direction
    is the view axis, so shade = n_z = 1/sqrt(1 + gx^2 + gy^2).
    """
    d = _smooth_depth(depth, vis)

    def axis_grad(shift_axis: int, step: float) -> Array:
        fwd_ok = np.zeros_like(vis)
        bwd_ok = np.zeros_like(vis)
        fwd = np.zeros_like(d)
        bwd = np.zeros_like(d)
        if shift_axis == 1:
            fwd_ok[:, :-1] = vis[:, 1:]
            bwd_ok[:, 1:] = vis[:, :-1]
            fwd[:, :-1] = d[:, 1:]
            bwd[:, 1:] = d[:, :-1]
        else:
            fwd_ok[:-1, :] = vis[1:, :]
            bwd_ok[1:, :] = vis[:-1, :]
            fwd[:-1, :] = d[1:, :]
            bwd[1:, :] = d[:-1, :]
        g = np.zeros_like(d)
        both = fwd_ok & bwd_ok
        g[both] = (fwd[both] - bwd[both]) / (2.0 * step)
        onlyf = fwd_ok & ~bwd_ok
        g[onlyf] = (fwd[onlyf] - d[onlyf]) / step
        onlyb = bwd_ok & ~fwd_ok
        g[onlyb] = (d[onlyb] - bwd[onlyb]) / step
        return g

    gx = axis_grad(1, px)
    gy = axis_grad(0, py)
    shade = np.zeros_like(d)
    shade[vis] = 1.0 / np.sqrt(1.0 + gx[vis] ** 2 + gy[vis] ** 2)
    return shade


def project_labels(cloud: PointCloud, views: ViewBundle) -> MaskSet:
    """Carry point labels to per-view 2D masks; empty pixels stay 0."""
    if cloud.labels is None:
        raise GeometryError("cloud has no labels to project")
    lab = cloud.labels
    vis = views.mask.astype(bool)
    masks = np.zeros_like(views.mask)
    masks[vis] = lab[views.pixel_to_point[vis]]
    return MaskSet(image_label=int(lab.max()), masks=masks)


@lru_cache(maxsize=64)
def bilinear_index_weights(h: int, w: int, H: int, W: int) -> tuple[Array, Array]:
    """Corner-aligned bilinear gather: flat source indices and weights.

    Returns (idx, wt), both (H*W, 4); output = (src.flat[idx] * wt).sum(-1).
    """
    if h < 1 or w < 1 or H < 1 or W < 1:
        raise GeometryError("map sizes must be >= 1")
    ys = np.arange(H) * ((h - 1) / (H - 1)) if H > 1 else np.zeros(H)
    xs = np.arange(W) * ((w - 1) / (W - 1)) if W > 1 else np.zeros(W)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    fy = ys - y0
    fx = xs - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)

    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    FY, FX = np.meshgrid(fy, fx, indexing="ij")
    idx = np.stack([Y0 * w + X0, Y0 * w + X1, Y1 * w + X0, Y1 * w + X1],
                   axis=-1).reshape(-1, 4)
    wt = np.stack([(1 - FY) * (1 - FX), (1 - FY) * FX, FY * (1 - FX), FY * FX],
                  axis=-1).reshape(-1, 4)
    return idx, wt


def upsample_bilinear(map2d: Array, H: int, W: int) -> Array:
    """Corner-aligned bilinear interpolation to (H, W); identity at equal sizes."""
    m = np.asarray(map2d, dtype=np.float64)
    if m.ndim != 2:
        raise GeometryError("upsample_bilinear expects a 2-D map")
    idx, wt = bilinear_index_weights(m.shape[0], m.shape[1], H, W)
    return (m.ravel()[idx] * wt).sum(axis=-1).reshape(H, W)


def back_project(score_maps: Array, views: ViewBundle,
                 normalize_by_visibility: bool = False) -> Array:
    """Average per-view pixel scores onto points.

    Each point receives (1/V) * sum over views of its owned pixel's score
    (0 where invisible).  With `normalize_by_visibility` the divisor is the
    per-point count of views in which it is visible instead of V.
    """
    maps = np.asarray(score_maps, dtype=np.float64)
    V, H, W = views.render.shape
    if maps.shape != (V, H, W):
        raise GeometryError("score maps must be shaped (V, H, W)")
    P = views.n_points
    acc = np.zeros(P)
    for v in range(V):
        pp = views.point_pixel[v]
        vis = pp[:, 0] >= 0
        acc[vis] += maps[v, pp[vis, 0], pp[vis, 1]]
    if normalize_by_visibility:
        return acc / np.maximum(views.visible_counts(), 1)
    return acc / V


# -- differentiable counterparts ------------------------------------------

def upsample_bilinear_op(t: ad.Tensor, H: int, W: int) -> ad.Tensor:
    """Tape-aware upsampling of (V, h, w) maps to (V, H, W)."""
    V, h, w = t.data.shape
    idx, wt = bilinear_index_weights(h, w, H, W)
    flat = t.data.reshape(V, h * w)
    out = (flat[:, idx] * wt).sum(axis=-1).reshape(V, H, W)

    def bwd(g: Array) -> None:
        gi = np.zeros((V, h * w))
        g2 = g.reshape(V, H * W)
        for v in range(V):
            for k in range(4):
                np.add.at(gi[v], idx[:, k], g2[v] * wt[:, k])
        t._accum(gi.reshape(V, h, w))

    return ad.from_op(out, (t,), bwd)


def back_project_op(t: ad.Tensor, views: ViewBundle,
                    normalize_by_visibility: bool = False) -> ad.Tensor:
    """Tape-aware back-projection of (V, H, W) maps to per-point scores."""
    V, H, W = t.data.shape
    out = back_project(t.data, views, normalize_by_visibility)
    denom = (np.maximum(views.visible_counts(), 1).astype(np.float64)
             if normalize_by_visibility else np.full(views.n_points, float(V)))

    def bwd(g: Array) -> None:
        gm = np.zeros((V, H, W))
        gp = g / denom
        for v in range(V):
            pp = views.point_pixel[v]
            vis = pp[:, 0] >= 0
            np.add.at(gm[v], (pp[vis, 0], pp[vis, 1]), gp[vis])
        t._accum(gm)

    return ad.from_op(out, (t,), bwd)
