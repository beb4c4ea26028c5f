"""Stage 2: modality-aware dual-prompt learning.

Each branch (RGB-aligned and rendering) owns an independent pair of
unit-norm prompt embeddings for the normal and anomalous states.  Image
predictions are a temperature-scaled two-way softmax over the global
feature's similarity to the two prompts; 2D score maps apply the same
two-way softmax per patch (without temperature, following the printed
form), are upsampled bilinearly, and are carried to 3D through the view
correspondence.

Training objectives: classification cross-entropy (per view and averaged),
Dice at the 3D point level and per-view at pixel level, Focal on the
concatenated normal/anomalous channels, and the dual-prompt contrastive
alignment (DpCA) that pulls same-state prompts together across modalities
while holding the complementary branch fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .autodiff import _stable_sigmoid as _sig
from .aligner import AlignerParams
from .encoder import FeatureSet, MODALITY_ALIGNED, MODALITY_RENDER
from .geometry import (MaskSet, ViewBundle, back_project, back_project_op,
                       upsample_bilinear, upsample_bilinear_op)

Array = np.ndarray

PROMPT_MODALITIES = (MODALITY_ALIGNED, MODALITY_RENDER)
PROMPT_STATES = ("N", "A")
_SHORT = {MODALITY_ALIGNED: "ra", MODALITY_RENDER: "r"}
CE_CLAMP = 1e-7


class PromptBank:
    """Unit-norm normal/anomalous prompt embeddings per modality, plus tau.

    `prompt_length` is carried as metadata only; prompts are optimized
    directly as embeddings.
    """

    def __init__(self, dim: int, tau: float = 0.07, prompt_length: int = 12,
                 seed: int = 0):
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.dim = dim
        self.tau = float(tau)
        self.prompt_length = prompt_length
        rng = np.random.default_rng(seed)
        self.prompts: dict[tuple[str, str], Parameter] = {}
        for m in PROMPT_MODALITIES:
            for s in PROMPT_STATES:
                v = rng.standard_normal(dim)
                v /= np.linalg.norm(v)
                self.prompts[(m, s)] = Parameter(v, f"prompt.{_SHORT[m]}.{s}")

    def param(self, modality: str, state: str) -> Parameter:
        return self.prompts[(modality, state)]

    def vec(self, modality: str, state: str) -> Array:
        return self.prompts[(modality, state)].data

    def parameters(self) -> list[Parameter]:
        return [self.prompts[(m, s)] for m in PROMPT_MODALITIES for s in PROMPT_STATES]

    def renormalize(self) -> None:
        for p in self.parameters():
            p.data = p.data / np.linalg.norm(p.data)

    def state_tensors(self) -> dict[str, Array]:
        out: dict[str, Array] = {"prompt.tau": np.asarray(self.tau),
                                 "prompt.length": np.asarray(float(self.prompt_length))}
        for p in self.parameters():
            out[p.name] = p.data.copy()
            out[f"{p.name}.adam.m"] = p.m.copy()
            out[f"{p.name}.adam.v"] = p.v.copy()
            out[f"{p.name}.adam.step"] = np.asarray(float(p.step))
        return out

    def load_state(self, tensors: dict[str, Array]) -> None:
        tau = float(tensors["prompt.tau"])
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.tau = tau
        self.prompt_length = int(float(tensors.get("prompt.length", 12.0)))
        for p in self.parameters():
            p.data = tensors[p.name]
            p.m = np.asarray(tensors[f"{p.name}.adam.m"], dtype=np.float64).reshape(p.m.shape)
            p.v = np.asarray(tensors[f"{p.name}.adam.v"], dtype=np.float64).reshape(p.v.shape)
            p.step = int(float(tensors[f"{p.name}.adam.step"]))


@dataclass
class ScoreBundle:
    """Per-branch predictions for one sample."""

    modality: str
    y_views: Array                 # (V,) in (0, 1)
    y_image: float
    maps_a: Array                  # (V, n_h, n_w)
    maps_n: Array
    points_a: Array                # (P,)
    points_n: Array


@dataclass
class Stage2Sample:
    """Training record: rendering features plus geometry and labels."""

    features: FeatureSet
    views: ViewBundle
    masks: MaskSet
    labels: Array                  # (P,) binary point labels
    aligned: FeatureSet | None = None


def two_way_softmax(s_pos: Array, s_neg: Array, tau: float | None) -> Array:
    """exp(s_pos/tau) / (exp(s_neg/tau) + exp(s_pos/tau)), computed stably."""
    diff = np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)
    if tau is not None:
        if tau <= 0:
            raise ValueError("temperature must be positive")
        diff = diff / tau
    return _sig(diff)


def _check_prompt_modality(features: FeatureSet) -> str:
    if features.modality not in PROMPT_MODALITIES:
        raise ValueError(f"prompts exist for {PROMPT_MODALITIES}, got {features.modality!r}")
    return features.modality


def _cosine_to_prompt(rows: Array, prompt: Array) -> Array:
    nr = np.linalg.norm(rows, axis=-1)
    np_ = np.linalg.norm(prompt)
    if np_ == 0.0 or np.any(nr == 0.0):
        raise ValueError("zero-norm vector has no cosine")
    return rows @ prompt / (nr * np_)


def _cosine_to_prompt_t(rows: Array, prompt: Tensor) -> Tensor:
    nr = np.linalg.norm(rows, axis=-1)
    if np.any(nr == 0.0):
        raise ValueError("zero-norm vector has no cosine")
    pn = ad.tsqrt(ad.tsum(prompt * prompt))
    dots = ad.tsum(ad.const(rows) * prompt, axis=1)
    return dots / (ad.const(nr) * pn)


def _cosine_pair_t(a: Tensor, b: Tensor) -> Tensor:
    na = ad.tsqrt(ad.tsum(a * a))
    nb = ad.tsqrt(ad.tsum(b * b))
    return ad.tsum(a * b) / (na * nb)


# -- forward scoring -----------------------------------------------------------

def predict_image(features: FeatureSet, bank: PromptBank) -> tuple[Array, float]:
    """Per-view anomaly probabilities and their mean."""
    m = _check_prompt_modality(features)
    s_a = _cosine_to_prompt(features.G, bank.vec(m, "A"))
    s_n = _cosine_to_prompt(features.G, bank.vec(m, "N"))
    y_views = two_way_softmax(s_a, s_n, bank.tau)
    return y_views, float(y_views.mean())


def predict_image_t(features: FeatureSet, bank: PromptBank) -> tuple[Tensor, Tensor]:
    m = _check_prompt_modality(features)
    s_a = _cosine_to_prompt_t(features.G, bank.param(m, "A").t)
    s_n = _cosine_to_prompt_t(features.G, bank.param(m, "N").t)
    y_views = ad.sigmoid((s_a - s_n) * (1.0 / bank.tau))
    return y_views, ad.tmean(y_views)


def score_map_2d(features: FeatureSet, bank: PromptBank,
                 use_tau: bool = False) -> tuple[Array, Array]:
    """Per-patch two-way softmax maps (anomalous, normal) at grid resolution."""
    m = _check_prompt_modality(features)
    V, N, d = features.F.shape
    rows = features.F.reshape(V * N, d)
    s_a = _cosine_to_prompt(rows, bank.vec(m, "A"))
    s_n = _cosine_to_prompt(rows, bank.vec(m, "N"))
    maps_a = two_way_softmax(s_a, s_n, bank.tau if use_tau else None)
    maps_a = maps_a.reshape(V, *features.grid)
    return maps_a, 1.0 - maps_a


def score_map_2d_t(features: FeatureSet, bank: PromptBank,
                   use_tau: bool = False) -> tuple[Tensor, Tensor]:
    m = _check_prompt_modality(features)
    V, N, d = features.F.shape
    rows = features.F.reshape(V * N, d)
    s_a = _cosine_to_prompt_t(rows, bank.param(m, "A").t)
    s_n = _cosine_to_prompt_t(rows, bank.param(m, "N").t)
    diff = s_a - s_n
    if use_tau:
        diff = diff * (1.0 / bank.tau)
    maps_a = ad.reshape(ad.sigmoid(diff), (V, *features.grid))
    return maps_a, 1.0 - maps_a


def score_map_3d(maps_2d: Array, views: ViewBundle,
                 normalize_by_visibility: bool = False) -> Array:
    """Upsample patch maps to image size and back-project onto points."""
    V, H, W = views.render.shape
    ups = np.stack([upsample_bilinear(m, H, W) for m in maps_2d])
    return back_project(ups, views, normalize_by_visibility)


def score_sample(features_r: FeatureSet, views: ViewBundle,
                 aligner: AlignerParams, bank: PromptBank,
                 use_tau_2d: bool = False,
                 normalize_by_visibility: bool = False) -> dict[str, ScoreBundle]:
    """Inference for one sample from rendering features only."""
    branches = {MODALITY_RENDER: features_r, MODALITY_ALIGNED: aligner.align(features_r)}
    out: dict[str, ScoreBundle] = {}
    for m, fs in branches.items():
        y_views, y_image = predict_image(fs, bank)
        maps_a, maps_n = score_map_2d(fs, bank, use_tau_2d)
        out[m] = ScoreBundle(
            modality=m, y_views=y_views, y_image=y_image,
            maps_a=maps_a, maps_n=maps_n,
            points_a=score_map_3d(maps_a, views, normalize_by_visibility),
            points_n=score_map_3d(maps_n, views, normalize_by_visibility))
    return out


# -- losses ---------------------------------------------------------------------

def _ce(target: float, p: Tensor) -> Tensor:
    p = ad.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    return -(target * ad.tlog(p) + (1.0 - target) * ad.tlog(1.0 - p))


def loss_cls(y_views, y_image, masks: MaskSet) -> Tensor:
    """Mean per-view cross-entropy against max{Y_i} plus image-level CE."""
    y_views = ad.const(y_views)
    y_image = ad.const(y_image)
    t_views = masks.view_labels().astype(np.float64)
    p = ad.clip(y_views, CE_CLAMP, 1.0 - CE_CLAMP)
    per_view = -(ad.const(t_views) * ad.tlog(p)
                 + ad.const(1.0 - t_views) * ad.tlog(1.0 - p))
    return ad.tmean(per_view) + _ce(float(masks.image_label), y_image)


def dice_loss(pred, target, eps: float = 1.0) -> Tensor:
    """1 - (2 * sum(p*t) + eps) / (sum(p) + sum(t) + eps)."""
    pred = ad.const(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ValueError("dice_loss shape mismatch")
    if pred.data.min() < 0:
        raise ValueError("dice_loss requires nonnegative predictions")
    inter = ad.tsum(pred * ad.const(target))
    denom = ad.tsum(pred) + float(target.sum()) + eps
    return 1.0 - (2.0 * inter + eps) / denom


def focal_loss(pred_n, pred_a, target, gamma: float = 2.0,
               alpha: float = 0.25) -> Tensor:
    """Mean of -alpha_t * (1 - p_t)^gamma * log(p_t) over pixels.

    `pred_n`/`pred_a` are the concatenated channels and must sum to one
    elementwise; p_t follows the binary target.
    """
    pred_n, pred_a = ad.const(pred_n), ad.const(pred_a)
    target = np.asarray(target, dtype=np.float64)
    if pred_n.data.shape != target.shape or pred_a.data.shape != target.shape:
        raise ValueError("focal_loss shape mismatch")
    if np.abs(pred_n.data + pred_a.data - 1.0).max() > 1e-6:
        raise ValueError("focal channels must sum to 1")
    t = target
    p_t = pred_a * ad.const(t) + pred_n * ad.const(1.0 - t)
    p_t = ad.clip(p_t, CE_CLAMP, 1.0 - CE_CLAMP)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    return ad.tmean(ad.const(-alpha_t) * ad.power(1.0 - p_t, gamma) * ad.tlog(p_t))


@dataclass
class SegLossConfig:
    dice_eps: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    full_res: bool = True
    normalize_by_visibility: bool = False


def _pool_mask_max(mask: Array, grid: tuple[int, int]) -> Array:
    """Max-pool a binary HxW mask down to the patch grid."""
    H, W = mask.shape
    nh, nw = grid
    return mask.reshape(nh, H // nh, nw, W // nw).max(axis=(1, 3))


def loss_seg_terms(maps_a: Tensor, maps_n: Tensor, views: ViewBundle,
                   masks: MaskSet, labels: Array,
                   cfg: SegLossConfig = SegLossConfig()) -> Tensor:
    """3D Dice on back-projected scores plus per-view 2D Dice and Focal."""
    V, H, W = views.render.shape
    y3 = np.asarray(labels, dtype=np.float64)

    up_a = upsample_bilinear_op(maps_a, H, W)
    up_n = upsample_bilinear_op(maps_n, H, W)
    pts_a = back_project_op(up_a, views, cfg.normalize_by_visibility)
    pts_n = back_project_op(up_n, views, cfg.normalize_by_visibility)
    l3d = dice_loss(pts_a, y3, cfg.dice_eps) + dice_loss(pts_n, 1.0 - y3, cfg.dice_eps)

    if cfg.full_res:
        view_a, view_n = up_a, up_n
        targets = masks.masks.astype(np.float64)
    else:
        grid = maps_a.data.shape[1:]
        view_a, view_n = maps_a, maps_n
        targets = np.stack([_pool_mask_max(m, grid) for m in masks.masks]).astype(np.float64)

    terms = []
    for i in range(V):
        a_i = ad.slice0(view_a, i)
        n_i = ad.slice0(view_n, i)
        t_i = targets[i]
        terms.append(dice_loss(a_i, t_i, cfg.dice_eps)
                     + dice_loss(n_i, 1.0 - t_i, cfg.dice_eps)
                     + focal_loss(n_i, a_i, t_i, cfg.focal_gamma, cfg.focal_alpha))
    l2d = sum(terms[1:], terms[0]) * (1.0 / V)
    return l3d + l2d


def loss_seg(bundle: ScoreBundle, masks: MaskSet, labels: Array,
             views: ViewBundle, cfg: SegLossConfig = SegLossConfig()) -> float:
    """Segmentation loss of an already-scored sample (no gradients)."""
    return float(loss_seg_terms(ad.const(bundle.maps_a), ad.const(bundle.maps_n),
                                views, masks, labels, cfg).data)


def init_prompts_from_stats(bank: PromptBank, samples: Sequence[Stage2Sample],
                            spread: float = 0.5,
                            refine_iters: int = 4000) -> None:
    """Discriminative prompt initialization from the training split.

    Per modality, patches are labeled by max-pooling the view masks to the
    patch grid; a separating direction w is computed as the ridge-whitened
    mean difference refined by a fixed number of class-balanced logistic
    iterations, and the prompts are set to unit vectors c +/- spread * w
    around the common mean direction c.  Stage-2 training then refines
    from a direction that already separates the classes, which random
    unit vectors cannot reach within the short schedule at the configured
    learning rate.
    """
    for modality in PROMPT_MODALITIES:
        rows_a, rows_n = [], []
        for s in samples:
            fs = s.aligned if modality == MODALITY_ALIGNED else s.features
            if fs is None:
                raise ValueError("sample is missing aligned features")
            grid = fs.grid
            pooled = np.stack([_pool_mask_max(m, grid) for m in s.masks.masks])
            lab = pooled.reshape(-1).astype(bool)
            rows = fs.F.reshape(-1, fs.dim)
            rows_a.append(rows[lab])
            rows_n.append(rows[~lab])
        Xa = np.concatenate(rows_a)
        Xn = np.concatenate(rows_n)
        if len(Xa) == 0 or len(Xn) == 0:
            continue
        mu_a, mu_n = Xa.mean(axis=0), Xn.mean(axis=0)

        X = np.concatenate([Xa, Xn])
        y = np.concatenate([np.ones(len(Xa)), np.zeros(len(Xn))])
        w = np.zeros(bank.dim)
        bias = 0.0
        lr = 2.0 / len(X)
        for _ in range(refine_iters):
            p = _sig(X @ w + bias)
            err = p - y
            w -= lr * (X.T @ err)
            bias -= lr * err.sum()
        w /= np.linalg.norm(w)

        c = mu_a + mu_n
        c /= np.linalg.norm(c)
        # Base the pair on the component of c orthogonal to w: both
        # prompts then share the same norm, so after normalization
        # T_A - T_N stays exactly proportional to the fitted direction
        # (including its component along the common mean).
        u = c - (w @ c) * w
        norm_u = np.linalg.norm(u)
        u = u / norm_u if norm_u > 1e-9 else np.zeros_like(c)
        for state, sign in (("A", 1.0), ("N", -1.0)):
            v = u + sign * spread * w
            bank.param(modality, state).data = v / np.linalg.norm(v)


def loss_con(bank: PromptBank, modality: str) -> Tensor:
    """Dual-prompt contrastive alignment for one branch.

    The complementary branch is a fixed reference: gradients flow only to
    `modality`'s prompts.
    """
    other = MODALITY_RENDER if modality == MODALITY_ALIGNED else MODALITY_ALIGNED
    t_n = bank.param(modality, "N").t
    t_a = bank.param(modality, "A").t
    ref_n = ad.const(bank.vec(other, "N") / np.linalg.norm(bank.vec(other, "N")))
    ref_a = ad.const(bank.vec(other, "A") / np.linalg.norm(bank.vec(other, "A")))
    cos_nref = _cosine_pair_t(t_n, ref_n)
    cos_aref = _cosine_pair_t(t_a, ref_a)
    cos_na = _cosine_pair_t(t_n, t_a)
    return 0.5 * (ad.softplus(cos_na - cos_nref) + ad.softplus(cos_na - cos_aref))


def stage2_sample_loss(sample: Stage2Sample, bank: PromptBank,
                       seg_cfg: SegLossConfig, use_tau_2d: bool = False) -> Tensor:
    """Sum of classification and segmentation losses over both branches."""
    if sample.aligned is None:
        raise ValueError("sample is missing aligned features")
    total = None
    for fs in (sample.aligned, sample.features):
        y_views, y_image = predict_image_t(fs, bank)
        maps_a, maps_n = score_map_2d_t(fs, bank, use_tau_2d)
        term = (loss_cls(y_views, y_image, sample.masks)
                + loss_seg_terms(maps_a, maps_n, sample.views, sample.masks,
                                 sample.labels, seg_cfg))
        total = term if total is None else total + term
    return total


def train_stage2(samples: Sequence[Stage2Sample], aligner: AlignerParams,
                 bank: PromptBank,
                 epochs: int = 15,
                 dpca_start: int = 10,
                 lambda_con: float = 0.05,
                 lr: float = 1e-3,
                 batch_size: int = 4,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8,
                 seg_cfg: SegLossConfig = SegLossConfig(),
                 use_tau_2d: bool = False,
                 data_init: bool = True) -> dict:
    """Optimize the prompt bank with the aligner frozen.

    The contrastive term joins the objective at `dpca_start`; prompts are
    re-normalized to unit norm after every optimizer step.  `data_init`
    replaces the random prompt initialization with class statistics of the
    training split before the first step.
    """
    if not samples:
        raise ValueError("empty dataset")
    if dpca_start > epochs:
        raise ValueError("DpCA activation epoch exceeds stage-2 epochs")
    for s in samples:
        if s.labels is None:
            raise ValueError("stage-2 samples require point labels")
        if s.aligned is None:
            s.aligned = aligner.align(s.features)
    if data_init:
        init_prompts_from_stats(bank, samples)

    plist = bank.parameters()
    history = {"loss": [], "objective": []}
    for epoch in range(epochs):
        with_con = epoch >= dpca_start
        epoch_losses = []
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            ad.zero_grads(plist)
            for s in chunk:
                loss = stage2_sample_loss(s, bank, seg_cfg, use_tau_2d)
                if with_con:
                    con = loss_con(bank, MODALITY_ALIGNED) + loss_con(bank, MODALITY_RENDER)
                    loss = loss + lambda_con * con
                loss = loss * (1.0 / len(chunk))
                epoch_losses.append(ad.backward(loss) * len(chunk))
            for p in plist:
                ad.adam_step(p, lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
            bank.renormalize()
        history["loss"].append(float(np.mean(epoch_losses)))
        history["objective"].append("cls+seg+con" if with_con else "cls+seg")
    return history
