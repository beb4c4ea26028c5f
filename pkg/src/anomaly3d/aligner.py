"""Stage 1: project rendering features into the RGB feature space.

Two independent 3-layer MLPs (GELU between layers) map global and patch
features.  The final layer is zero-initialized and the block carries a
residual skip followed by row normalization, so an untrained aligner is the
identity on unit-norm inputs.

The alignment objective is one minus cosine similarity, averaged over views
(global term) and over views and patches (local term).  Semantic
consistency reweighting (SCR) multiplies each patch residual by
w = 1 + lambda * sigmoid(c), where c is the patch's mean similarity row of
the rendering/RGB consistency matrix; it activates late in training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .encoder import FeatureSet, MODALITY_ALIGNED, MODALITY_RENDER

Array = np.ndarray


def _l2norm_rows_t(x: Tensor) -> Tensor:
    n = ad.tsqrt(ad.tsum(x * x, axis=1, keepdims=True))
    return x / n


def _cosine_rows(a: Array, b: Array) -> Array:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("zero-norm vector has no cosine")
    return (a * b).sum(axis=-1) / (na * nb)


def _cosine_rows_t(a: Tensor, b: Array) -> Tensor:
    nb = np.linalg.norm(b, axis=-1)
    if np.any(nb == 0.0):
        raise ValueError("zero-norm vector has no cosine")
    na = ad.tsqrt(ad.tsum(a * a, axis=1))
    dots = ad.tsum(a * ad.const(b), axis=1)
    return dots / (na * ad.const(nb))


class Mlp3:
    """d -> d_h -> d_h -> d with GELU, residual skip and row normalization."""

    def __init__(self, d: int, d_h: int, rng: np.random.Generator, prefix: str):
        self.w1 = Parameter(rng.standard_normal((d, d_h)) / np.sqrt(d), f"{prefix}.w1")
        self.b1 = Parameter(np.zeros(d_h), f"{prefix}.b1")
        self.w2 = Parameter(rng.standard_normal((d_h, d_h)) / np.sqrt(d_h), f"{prefix}.w2")
        self.b2 = Parameter(np.zeros(d_h), f"{prefix}.b2")
        self.w3 = Parameter(np.zeros((d_h, d)), f"{prefix}.w3")
        self.b3 = Parameter(np.zeros(d), f"{prefix}.b3")

    def params(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def apply(self, x: Tensor) -> Tensor:
        h = ad.gelu(x @ self.w1.t + self.b1.t)
        h = ad.gelu(h @ self.w2.t + self.b2.t)
        y = x + (h @ self.w3.t + self.b3.t)
        return _l2norm_rows_t(y)


class AlignerParams:
    """Global and local aligner MLPs (independent weights)."""

    def __init__(self, d: int, d_h: int | None = None, seed: int = 0):
        self.d = d
        self.d_h = d_h if d_h is not None else d
        rng = np.random.default_rng(seed)
        self.g = Mlp3(d, self.d_h, rng, "aligner.g")
        self.l = Mlp3(d, self.d_h, rng, "aligner.l")

    def parameters(self) -> list[Parameter]:
        return self.g.params() + self.l.params()

    def apply_tape(self, features: FeatureSet) -> tuple[Tensor, Tensor]:
        """Map a rendering FeatureSet on the tape; returns (G (V,d), F (V*N,d))."""
        if features.modality != MODALITY_RENDER:
            raise ValueError(f"aligner input must be rendering features, got {features.modality!r}")
        V, N, d = features.F.shape
        if d != self.d:
            raise ValueError(f"dimension mismatch: features d={d}, aligner d={self.d}")
        g_t = self.g.apply(ad.const(features.G))
        f_t = self.l.apply(ad.const(features.F.reshape(V * N, d)))
        return g_t, f_t

    def align(self, features: FeatureSet) -> FeatureSet:
        """RGB-aligned copy of a rendering FeatureSet (no gradient tracking)."""
        g_t, f_t = self.apply_tape(features)
        V, N, d = features.F.shape
        return FeatureSet(modality=MODALITY_ALIGNED, G=g_t.data.copy(),
                          F=f_t.data.reshape(V, N, d).copy(), grid=features.grid)

    def state_tensors(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for p in self.parameters():
            out[p.name] = p.data.copy()
            out[f"{p.name}.adam.m"] = p.m.copy()
            out[f"{p.name}.adam.v"] = p.v.copy()
            out[f"{p.name}.adam.step"] = np.asarray(float(p.step))
        return out

    def load_state(self, tensors: dict[str, Array]) -> None:
        for p in self.parameters():
            p.data = tensors[p.name]
            p.m = np.asarray(tensors[f"{p.name}.adam.m"], dtype=np.float64).reshape(p.m.shape)
            p.v = np.asarray(tensors[f"{p.name}.adam.v"], dtype=np.float64).reshape(p.v.shape)
            p.step = int(float(tensors[f"{p.name}.adam.step"]))


@dataclass
class ScrConfig:
    """Semantic consistency reweighting knobs."""

    strength: float = 1.0            # lambda
    activation_epoch: int = 200
    detach_weights: bool = True
    normalized_consistency: bool = True

    def __post_init__(self):
        if self.strength < 0:
            raise ValueError("reweighting strength must be >= 0")


def consistency_matrix(f_render: Array, f_rgb: Array, normalized: bool = True) -> Array:
    """C = F^r (F^R)^T for one view; entries are cosines when rows are unit."""
    a = np.asarray(f_render, dtype=np.float64)
    b = np.asarray(f_rgb, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("consistency matrix needs matching (N, d) inputs")
    if normalized:
        na = np.linalg.norm(a, axis=1, keepdims=True)
        nb = np.linalg.norm(b, axis=1, keepdims=True)
        if np.any(na == 0.0) or np.any(nb == 0.0):
            raise ValueError("zero-norm vector has no cosine")
        a, b = a / na, b / nb
    return a @ b.T


def scr_weights(C: Array, strength: float) -> tuple[Array, Array]:
    """Row means c and weights w = 1 + lambda * sigmoid(c)."""
    if strength < 0:
        raise ValueError("reweighting strength must be >= 0")
    c = np.asarray(C, dtype=np.float64).mean(axis=1)
    w = 1.0 + strength / (1.0 + np.exp(-c))
    return c, w


def _sample_weights(f_r: FeatureSet, f_rgb: FeatureSet, scr: ScrConfig) -> Array:
    """(V*N,) SCR weights; constants w.r.t. the aligner by construction."""
    V = f_r.view_count
    w = np.empty((V, f_r.n_patches))
    for i in range(V):
        C = consistency_matrix(f_r.F[i], f_rgb.F[i], scr.normalized_consistency)
        _, w[i] = scr_weights(C, scr.strength)
    return w.reshape(-1)


def loss_align(f_aligned: FeatureSet, f_rgb: FeatureSet) -> tuple[float, float, float]:
    """(L_g, L_l, L_align): global/local one-minus-cosine residual means."""
    if f_aligned.G.shape != f_rgb.G.shape or f_aligned.F.shape != f_rgb.F.shape:
        raise ValueError("feature sets disagree on V, N or d")
    lg = float(np.mean(1.0 - _cosine_rows(f_aligned.G, f_rgb.G)))
    ll = float(np.mean(1.0 - _cosine_rows(f_aligned.F, f_rgb.F)))
    return lg, ll, lg + ll


def loss_align_weighted(f_aligned: FeatureSet, f_rgb: FeatureSet, f_render: FeatureSet,
                        strength: float, normalized: bool = True
                        ) -> tuple[float, float, float]:
    """(L_g, L_l^w, L_align^w) with SCR weights from the raw rendering features."""
    lg, _, _ = loss_align(f_aligned, f_rgb)
    scr = ScrConfig(strength=strength, normalized_consistency=normalized)
    w = _sample_weights(f_render, f_rgb, scr)
    resid = 1.0 - _cosine_rows(f_aligned.F.reshape(-1, f_aligned.dim),
                               f_rgb.F.reshape(-1, f_rgb.dim))
    llw = float(np.mean(w * resid))
    return lg, llw, lg + llw


def stage1_loss(params: AlignerParams, f_render: FeatureSet, f_rgb: FeatureSet,
                scr: ScrConfig | None = None) -> Tensor:
    """Tape-built alignment loss; pass `scr` to apply reweighting."""
    g_t, f_t = params.apply_tape(f_render)
    V, N, d = f_render.F.shape
    lg = ad.tmean(1.0 - _cosine_rows_t(g_t, f_rgb.G))
    resid = 1.0 - _cosine_rows_t(f_t, f_rgb.F.reshape(V * N, d))
    if scr is None:
        ll = ad.tmean(resid)
    else:
        w = _sample_weights(f_render, f_rgb, scr)
        ll = ad.tmean(ad.const(w) * resid)
    return lg + ll


def train_stage1(pairs: Sequence[tuple[FeatureSet, FeatureSet]],
                 params: AlignerParams,
                 scr: ScrConfig,
                 epochs: int = 250,
                 lr: float = 1e-3,
                 batch_size: int = 4,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8) -> dict:
    """Minimize L_align, switching to the reweighted loss at the SCR epoch.

    `pairs` yields (rendering FeatureSet, RGB FeatureSet) per sample, in a
    fixed order; the run is deterministic.  Returns per-epoch mean losses
    and the objective label per epoch.
    """
    if not pairs:
        raise ValueError("empty dataset")
    if scr.activation_epoch > epochs:
        raise ValueError("SCR activation epoch exceeds stage-1 epochs")
    plist = params.parameters()
    history = {"loss": [], "objective": []}
    for epoch in range(epochs):
        use_scr = epoch >= scr.activation_epoch
        cfg = scr if use_scr else None
        epoch_losses = []
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            ad.zero_grads(plist)
            for f_render, f_rgb in chunk:
                loss = stage1_loss(params, f_render, f_rgb, cfg) * (1.0 / len(chunk))
                epoch_losses.append(ad.backward(loss) * len(chunk))
            for p in plist:
                ad.adam_step(p, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        history["loss"].append(float(np.mean(epoch_losses)))
        history["objective"].append("align_w" if use_scr else "align")
    return history
