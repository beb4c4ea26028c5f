"""Random-instance builders for the finite-difference gradient suite.

Shared by the `gradcheck` CLI subcommand and the acceptance tests: every
training loss is rebuilt from fresh random inputs and its reverse-mode
gradient is compared against central finite differences.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .aligner import AlignerParams, ScrConfig, stage1_loss
from .encoder import FeatureSet, MODALITY_ALIGNED, MODALITY_RENDER, MODALITY_RGB
from .geometry import PointCloud, ViewSpec, make_views, project_labels
from .prompts import (PromptBank, SegLossConfig, dice_loss, focal_loss,
                      loss_cls, loss_con, loss_seg_terms, predict_image_t,
                      score_map_2d_t)


def _unit_rows(rng: np.random.Generator, *shape: int) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _feature_set(rng: np.random.Generator, modality: str, V: int = 2,
                 grid: tuple[int, int] = (2, 2), d: int = 6) -> FeatureSet:
    N = grid[0] * grid[1]
    return FeatureSet(modality=modality, G=_unit_rows(rng, V, d),
                      F=_unit_rows(rng, V, N, d), grid=grid)


def _aligner_pair(rng: np.random.Generator) -> tuple[AlignerParams, FeatureSet, FeatureSet]:
    params = AlignerParams(d=6, seed=int(rng.integers(2 ** 31)))
    # Give every layer nonzero weights so gradients reach all of them.
    for p in params.parameters():
        p.data = p.data + 0.05 * rng.standard_normal(p.data.shape)
    f_r = _feature_set(rng, MODALITY_RENDER)
    f_rgb = _feature_set(rng, MODALITY_RGB)
    return params, f_r, f_rgb


def _check_global(rng: np.random.Generator) -> float:
    from .aligner import _cosine_rows_t
    params, f_r, f_rgb = _aligner_pair(rng)

    def build():
        g_t, _ = params.apply_tape(f_r)
        return ad.tmean(1.0 - _cosine_rows_t(g_t, f_rgb.G))

    return ad.check_gradients(build, params.g.params(), rng)


def _check_local(rng: np.random.Generator) -> float:
    params, f_r, f_rgb = _aligner_pair(rng)

    def build():
        return stage1_loss(params, f_r, f_rgb, scr=None)

    return ad.check_gradients(build, params.parameters(), rng)


def _check_local_weighted(rng: np.random.Generator) -> float:
    params, f_r, f_rgb = _aligner_pair(rng)
    scr = ScrConfig(strength=float(rng.uniform(0.2, 3.0)), activation_epoch=0)

    def build():
        return stage1_loss(params, f_r, f_rgb, scr=scr)

    return ad.check_gradients(build, params.parameters(), rng)


def _bank(rng: np.random.Generator, d: int = 6) -> PromptBank:
    return PromptBank(dim=d, tau=0.07, seed=int(rng.integers(2 ** 31)))


def _geometry_instance(rng: np.random.Generator):
    pts = rng.standard_normal((60, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    labels = (rng.uniform(size=60) < 0.3).astype(np.uint8)
    if labels.max() == 0:
        labels[0] = 1
    cloud = PointCloud(points=pts, labels=labels)
    spec = ViewSpec.with_count(2, height=12, width=12, scale=1.3)
    views = make_views(cloud, spec)
    return cloud, views, project_labels(cloud, views)


def _check_cls(rng: np.random.Generator) -> float:
    bank = _bank(rng)
    fs = _feature_set(rng, MODALITY_RENDER)
    _, views, masks = _geometry_instance(rng)
    del views

    def build():
        y_views, y_image = predict_image_t(fs, bank)
        return loss_cls(y_views, y_image, masks)

    return ad.check_gradients(build, bank.parameters(), rng)


def _check_dice(rng: np.random.Generator) -> float:
    raw = ad.Parameter(rng.standard_normal((5, 7)), "raw")
    target = (rng.uniform(size=(5, 7)) < 0.4).astype(np.float64)

    def build():
        return dice_loss(ad.sigmoid(raw.t), target)

    return ad.check_gradients(build, [raw], rng)


def _check_focal(rng: np.random.Generator) -> float:
    raw = ad.Parameter(rng.standard_normal((5, 7)), "raw")
    target = (rng.uniform(size=(5, 7)) < 0.4).astype(np.float64)
    gamma = float(rng.choice([0.0, 1.0, 2.0]))

    def build():
        p_a = ad.sigmoid(raw.t)
        return focal_loss(1.0 - p_a, p_a, target, gamma=gamma, alpha=0.25)

    return ad.check_gradients(build, [raw], rng)


def _check_seg(rng: np.random.Generator) -> float:
    bank = _bank(rng)
    cloud, views, masks = _geometry_instance(rng)
    fs = _feature_set(rng, MODALITY_ALIGNED, V=2, grid=(3, 3))
    cfg = SegLossConfig()

    def build():
        maps_a, maps_n = score_map_2d_t(fs, bank)
        return loss_seg_terms(maps_a, maps_n, views, masks, cloud.labels, cfg)

    return ad.check_gradients(build, bank.parameters(), rng, coords_per_param=4)


def _check_con(rng: np.random.Generator) -> float:
    bank = _bank(rng)
    modality = MODALITY_ALIGNED if rng.uniform() < 0.5 else MODALITY_RENDER
    # The complementary branch is a frozen reference: its analytic gradient
    # is zero by design, so the FD oracle applies to this branch only.
    own = [bank.param(modality, "N"), bank.param(modality, "A")]

    def build():
        return loss_con(bank, modality)

    return ad.check_gradients(build, own, rng)


LOSS_CHECKS = {
    "global_align": _check_global,
    "local_align": _check_local,
    "local_align_weighted": _check_local_weighted,
    "classification": _check_cls,
    "dice": _check_dice,
    "focal": _check_focal,
    "segmentation_2d3d": _check_seg,
    "prompt_contrastive": _check_con,
}


def gradient_suite(instances: int = 50, seed: int = 0) -> dict[str, float]:
    """Worst finite-difference relative error per loss over random instances."""
    worst = {}
    for i, (name, check) in enumerate(sorted(LOSS_CHECKS.items())):
        rng = np.random.default_rng([seed, i])
        worst[name] = max(check(rng) for _ in range(instances))
    return worst
