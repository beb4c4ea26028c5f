"""Vision-encoder contract: per-view global and patch features.

Two kinds of encoder satisfy the contract:

* ``surrogate`` — a deterministic, dependency-free stand-in: every
  non-overlapping patch is described by its raw pixels plus (mean, std,
  min, max) and a constant bias term, pushed through a random projection
  frozen at construction from a recorded seed.  The global feature is the
  mean of the raw patch features.  Every output is L2-normalized, so cosine
  similarity reduces to a dot product downstream.
* ``cached`` — features come from an external encoder via an A3FC cache
  file; calling encode directly is an error.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import io_formats
from .errors import CacheFormatError, EncoderError

Array = np.ndarray

MODALITY_RGB = "R"
MODALITY_RENDER = "r"
MODALITY_ALIGNED = "r_a"

TAG_BY_MODALITY = {MODALITY_RGB: io_formats.TAG_RGB,
                   MODALITY_RENDER: io_formats.TAG_RENDER}
MODALITY_BY_TAG = {v: k for k, v in TAG_BY_MODALITY.items()}


@dataclass
class FeatureSet:
    """Per-view global vectors G (V, d) and patch matrices F (V, N, d)."""

    modality: str
    G: Array
    F: Array
    grid: tuple[int, int]

    def __post_init__(self):
        if self.modality not in (MODALITY_RGB, MODALITY_RENDER, MODALITY_ALIGNED):
            raise EncoderError(f"unknown modality {self.modality!r}")
        self.G = np.asarray(self.G, dtype=np.float64)
        self.F = np.asarray(self.F, dtype=np.float64)
        if self.G.ndim != 2 or self.F.ndim != 3:
            raise EncoderError("G must be (V, d) and F must be (V, N, d)")
        if self.G.shape[0] != self.F.shape[0] or self.G.shape[1] != self.F.shape[2]:
            raise EncoderError("G and F disagree on V or d")
        if self.grid[0] * self.grid[1] != self.F.shape[1]:
            raise EncoderError("patch grid does not match N")
        if not (np.all(np.isfinite(self.G)) and np.all(np.isfinite(self.F))):
            raise EncoderError("non-finite feature values")

    @property
    def view_count(self) -> int:
        return self.G.shape[0]

    @property
    def n_patches(self) -> int:
        return self.F.shape[1]

    @property
    def dim(self) -> int:
        return self.G.shape[1]


@dataclass(frozen=True)
class EncoderSpec:
    patch_size: int = 14
    dim: int = 64
    kind: str = "surrogate"
    seed: int = 7

    def __post_init__(self):
        if self.kind not in ("surrogate", "cached"):
            raise EncoderError(f"unknown encoder kind {self.kind!r}")
        if self.dim < 2:
            raise EncoderError("feature dimension must be >= 2")
        if self.patch_size < 1:
            raise EncoderError("patch size must be >= 1")


N_STATS = 20


@lru_cache(maxsize=8)
def _projection(patch_size: int, dim: int, seed: int) -> Array:
    """Frozen random projection: (dim, patch_size^2 * 3 + N_STATS)."""
    rng = np.random.default_rng(seed)
    n_in = patch_size * patch_size * 3 + N_STATS
    return rng.standard_normal((dim, n_in)) / np.sqrt(n_in)


def _plane_residual(patches: Array, ps: int) -> Array:
    """RMS residual of a least-squares plane fit over each patch's nonzero
    pixels (zero pixels are background).  Vectorized via per-patch 3x3
    normal equations."""
    N = patches.shape[0]
    yy, xx = np.meshgrid(np.arange(ps, dtype=np.float64),
                         np.arange(ps, dtype=np.float64), indexing="ij")
    basis = np.stack([yy.ravel(), xx.ravel(), np.ones(ps * ps)], axis=1)
    m = (patches > 0).astype(np.float64)
    cnt = m.sum(axis=1)
    mb = m[:, :, None] * basis[None, :, :]
    ata = np.einsum("npi,npj->nij", mb, basis[None, :, :].repeat(N, axis=0))
    atb = np.einsum("npi,np->ni", mb, patches)
    ata += 1e-9 * np.eye(3)
    coef = np.linalg.solve(ata, atb[:, :, None])[:, :, 0]
    fitted = np.einsum("pi,ni->np", basis, coef)
    sq = (m * (patches - fitted) ** 2).sum(axis=1)
    ok = cnt >= 6
    out = np.zeros(N)
    out[ok] = np.sqrt(sq[ok] / cnt[ok])
    return out


def _grad_energy(img2d: Array, ps: int, n_h: int, n_w: int) -> Array:
    """Mean absolute pixel difference inside each patch (both axes)."""
    gx = np.zeros_like(img2d)
    gy = np.zeros_like(img2d)
    gx[:, 1:] = np.abs(np.diff(img2d, axis=1))
    gy[1:, :] = np.abs(np.diff(img2d, axis=0))
    g = gx + gy
    return (g.reshape(n_h, ps, n_w, ps)
             .transpose(0, 2, 1, 3)
             .reshape(n_h * n_w, ps * ps)
             .mean(axis=1))


def _grad_anisotropy(img2d: Array, ps: int, n_h: int, n_w: int) -> Array:
    """Structure-tensor anisotropy per patch, in [0, 1].

    Depth discontinuities (silhouettes, self-occlusion boundaries) give
    line-like gradients (-> 1); damaged, rough surface gives isotropic
    gradients (-> 0); flat shading gives 0 by convention."""
    gx = np.zeros_like(img2d)
    gy = np.zeros_like(img2d)
    gx[:, 1:] = np.diff(img2d, axis=1)
    gy[1:, :] = np.diff(img2d, axis=0)

    def pooled(a: Array) -> Array:
        return (a.reshape(n_h, ps, n_w, ps)
                 .transpose(0, 2, 1, 3)
                 .reshape(n_h * n_w, ps * ps)
                 .sum(axis=1))

    ixx = pooled(gx * gx)
    iyy = pooled(gy * gy)
    ixy = pooled(gx * gy)
    root = np.sqrt((ixx - iyy) ** 2 + 4.0 * ixy * ixy)
    trace = ixx + iyy
    # Fixed regularizer keeps the ratio Lipschitz and sends flat patches
    # (negligible gradient mass) to 0.
    kappa = 0.01 * ps * ps
    return root / (trace + kappa)


def _patch_inputs(image: Array, patch_size: int) -> Array:
    """Split into non-overlapping patches; rows are raw pixels plus local
    contrast statistics and a bias.

    The statistics (mean, std, min, max, zero fraction, plane-fit
    residual, gradient energy) are scaled by sqrt(pixel count)/2 so the
    random projection gives them aggregate weight comparable to the pixel
    block; they carry the level- and shape-independent texture cues."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise EncoderError("image must be (H, W) or (H, W, 3)")
    H, W, _ = img.shape
    ps = patch_size
    if H % ps or W % ps:
        raise EncoderError(f"image {H}x{W} not divisible by patch size {ps}")
    n_h, n_w = H // ps, W // ps
    patches = (img.reshape(n_h, ps, n_w, ps, 3)
                  .transpose(0, 2, 1, 3, 4)
                  .reshape(n_h * n_w, ps * ps * 3))
    gray = img.mean(axis=2)
    gray_patches = (gray.reshape(n_h, ps, n_w, ps)
                        .transpose(0, 2, 1, 3)
                        .reshape(n_h * n_w, ps * ps))
    base = np.stack([
        patches.mean(axis=1),
        patches.std(axis=1),
        patches.min(axis=1),
        patches.max(axis=1),
        (gray_patches == 0.0).mean(axis=1),
        _plane_residual(gray_patches, ps),
        _grad_energy(gray, ps, n_h, n_w),
        _grad_anisotropy(gray, ps, n_h, n_w),
    ], axis=1)
    # Neighborhood context over the patch grid: damage is texture in
    # excess of its surroundings, while silhouettes and occlusion
    # boundaries carry ring-like context of equally textured neighbors.
    ctx = _grid_box_mean(base.reshape(n_h, n_w, -1)).reshape(n_h * n_w, -1)
    rel = base[:, 5:8] - ctx[:, 5:8]
    # Standardize every channel within the image (floored, clipped): the
    # typical patch of any object then sits at 0 with unit spread, which
    # keeps score distributions comparable across object categories.
    block = np.concatenate([base, ctx, rel], axis=1)
    mu = block.mean(axis=0)
    sd = block.std(axis=0) + 0.05
    block = np.clip((block - mu) / sd, -6.0, 6.0)
    scale = np.sqrt(patches.shape[1])
    stats = np.concatenate([block * scale,
                            np.ones((patches.shape[0], 1)) * scale], axis=1)
    # Raw pixels enter at low weight: the standardized statistics carry
    # the discriminative and cross-category-calibrated signal, and a
    # dominant pixel block would leak category-specific image means into
    # the global feature.
    return np.concatenate([0.15 * patches, stats], axis=1)


def _grid_box_mean(grid_stats: Array) -> Array:
    """3x3 mean over the patch grid (available-neighbor average)."""
    n_h, n_w, C = grid_stats.shape
    acc = np.zeros_like(grid_stats)
    cnt = np.zeros((n_h, n_w, 1))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys = slice(max(dy, 0), n_h + min(dy, 0))
            yd = slice(max(-dy, 0), n_h + min(-dy, 0))
            xs = slice(max(dx, 0), n_w + min(dx, 0))
            xd = slice(max(-dx, 0), n_w + min(-dx, 0))
            acc[yd, xd] += grid_stats[ys, xs]
            cnt[yd, xd] += 1.0
    return acc / cnt


def _l2_rows(x: Array) -> Array:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise EncoderError("zero-norm feature vector")
    return x / norms


def encode(image: Array, spec: EncoderSpec) -> tuple[Array, Array, tuple[int, int]]:
    """Encode one image into (G (d,), F (N, d), patch grid).

    Deterministic per spec seed.  Cached encoders refuse direct calls.
    """
    if spec.kind == "cached":
        raise EncoderError("features must be loaded")
    inputs = _patch_inputs(image, spec.patch_size)
    proj = _projection(spec.patch_size, spec.dim, spec.seed)
    raw = inputs @ proj.T
    G = _l2_rows(raw.mean(axis=0))
    F = _l2_rows(raw)
    H = np.asarray(image).shape[0]
    W = np.asarray(image).shape[1]
    return G, F, (H // spec.patch_size, W // spec.patch_size)


def encode_views(images: Array, spec: EncoderSpec, modality: str) -> FeatureSet:
    """Encode a stack of per-view images into a FeatureSet."""
    Gs, Fs, grid = [], [], None
    for image in images:
        G, F, grid = encode(image, spec)
        Gs.append(G)
        Fs.append(F)
    return FeatureSet(modality=modality, G=np.stack(Gs), F=np.stack(Fs), grid=grid)


def lipschitz_bound(spec: EncoderSpec) -> float:
    """Bound on the sup-norm change of a raw patch feature per unit of
    per-pixel perturbation, valid for perturbations that do not change the
    zero set: pixels, mean, min and max move by <= delta; std and the
    plane residual by <= sqrt(n) * delta; gradient energy by <= 4 * delta;
    anisotropy by <= 24/kappa * delta; the zero-fraction and bias inputs
    are constant."""
    proj = np.abs(_projection(spec.patch_size, spec.dim, spec.seed))
    n_pix = spec.patch_size * spec.patch_size * 3
    scale = np.sqrt(n_pix)
    root_n = np.sqrt(n_pix)
    kappa = 0.01 * spec.patch_size * spec.patch_size
    # Per-channel sensitivities of the 8 base stats; context means share
    # them and the 3 relative channels double them.  The per-image
    # standardization (floor 0.05, clip 6) multiplies every channel's
    # sensitivity by at most (1 + 1 + 6) / 0.05 = 160.
    chan = np.array([1.0, root_n, 1.0, 1.0, 0.0, root_n, 4.0, 24.0 / kappa])
    std_amp = 160.0
    s = proj[:, n_pix:]
    per_row = (0.15 * proj[:, :n_pix].sum(axis=1)
               + scale * std_amp * (s[:, 0:8] @ chan
                                    + s[:, 8:16] @ chan
                                    + s[:, 16:19] @ (2.0 * chan[5:8])))
    return float(per_row.max())


# -- feature caches ---------------------------------------------------------

def save_cache(sets: list[FeatureSet], path) -> None:
    """Write R/r feature sets as an A3FC cache (r_a is never cached)."""
    if not sets:
        raise CacheFormatError("nothing to cache")
    entries = []
    for fs in sets:
        if fs.modality not in TAG_BY_MODALITY:
            raise CacheFormatError(f"modality {fs.modality!r} is not cacheable")
        entries.append((TAG_BY_MODALITY[fs.modality], fs.G, fs.F))
    first = sets[0]
    for fs in sets[1:]:
        if fs.n_patches != first.n_patches or fs.dim != first.dim:
            raise CacheFormatError("feature sets disagree on N or d")
    io_formats.write_feature_cache(path, entries)


def load_cache(path, grid: tuple[int, int] | None = None) -> list[FeatureSet]:
    """Load an A3FC cache; the patch grid is taken from `grid` or assumed
    square when N is a perfect square."""
    sets = []
    for tag, G, F in io_formats.read_feature_cache(path):
        n = F.shape[1]
        if grid is not None:
            g = grid
        else:
            side = int(round(np.sqrt(n)))
            g = (side, n // side) if side * side == n else (1, n)
        sets.append(FeatureSet(modality=MODALITY_BY_TAG[tag], G=G, F=F, grid=g))
    return sets
