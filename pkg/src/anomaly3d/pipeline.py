"""Experiment orchestration: gen -> render -> encode -> align -> prompt ->
infer -> eval, plus the timing harness and the one-vs-rest benchmark.

Every stage reads its inputs from files written by earlier stages and
writes its own artifacts, so stages can be re-run in isolation and byte
determinism holds end to end.  Logs carry no timestamps for the same
reason.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import io_formats, metrics, synth
from .aligner import AlignerParams, ScrConfig, train_stage1
from .config import RunConfig
from .encoder import (FeatureSet, MODALITY_ALIGNED, MODALITY_RENDER,
                      MODALITY_RGB, encode_views, load_cache, save_cache)
from .errors import MissingArtifactError
from .geometry import PointCloud, make_views, project_labels
from .metrics import EvalSample, MetricsReport, evaluate, report_text, report_tsv
from .prompts import (PromptBank, SegLossConfig, Stage2Sample, score_sample,
                      train_stage2)

STAGES = ("gen", "render", "encode", "align", "prompt", "infer", "eval")


def _dirs(cfg: RunConfig) -> dict[str, str]:
    base = cfg.out_dir
    return {
        "base": base,
        "dataset": os.path.join(base, "dataset"),
        "views": os.path.join(base, "views"),
        "features": os.path.join(base, "features"),
        "ckpts": os.path.join(base, "ckpts"),
        "scores": os.path.join(base, "scores"),
        "logs": os.path.join(base, "logs"),
    }


def _require(path: str, stage: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(
            f"missing artifact {path!r}: run stage '{stage}' first")
    return path


def _manifest(cfg: RunConfig, needed_by: str) -> list[synth.ManifestEntry]:
    path = os.path.join(_dirs(cfg)["dataset"], "manifest.txt")
    _require(path, "gen")
    del needed_by
    return synth.read_manifest(path)


def _write_log(cfg: RunConfig, name: str, lines: list[str]) -> None:
    d = _dirs(cfg)["logs"]
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, name), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


# -- stages -------------------------------------------------------------------

def stage_gen(cfg: RunConfig) -> str:
    """One-vs-rest dataset: train split of the configured category, test
    splits of the test categories."""
    d = _dirs(cfg)
    os.makedirs(d["dataset"], exist_ok=True)
    samples: list[synth.SynthSample] = []
    specs = {}
    for category in (cfg.data.category, *cfg.data.resolved_test_categories()):
        specs[category] = synth.SynthSpec(
            category=category, train_count=cfg.data.train_count,
            test_count=cfg.data.test_count, points=cfg.data.points,
            anomaly_kinds=cfg.data.anomaly_kinds,
            anomaly_fraction=cfg.data.anomaly_fraction, seed=cfg.seed)
    for i in range(cfg.data.train_count):
        seed = synth.sample_seed(cfg.seed, cfg.data.category, "train", i)
        samples.append(synth.make_sample(
            cfg.data.category, anomalous=(i % 2 == 1), spec=specs[cfg.data.category],
            seed=seed, name=f"{cfg.data.category}-train-{i:03d}", split="train"))
    for category in cfg.data.resolved_test_categories():
        for i in range(cfg.data.test_count):
            seed = synth.sample_seed(cfg.seed, category, "test", i)
            samples.append(synth.make_sample(
                category, anomalous=(i % 2 == 1), spec=specs[category],
                seed=seed, name=f"{category}-test-{i:03d}", split="test"))
    manifest = synth.write_dataset(samples, d["dataset"])
    _write_log(cfg, "gen.log", [f"samples: {len(samples)}"])
    return manifest


def _load_cloud(cfg: RunConfig, entry: synth.ManifestEntry) -> PointCloud:
    return io_formats.read_point_cloud(os.path.join(_dirs(cfg)["dataset"], entry.path))


def _views_path(cfg: RunConfig, entry: synth.ManifestEntry) -> str:
    return os.path.join(_dirs(cfg)["views"], entry.split, f"{entry.name}.a3vb")


def _features_path(cfg: RunConfig, entry: synth.ManifestEntry) -> str:
    return os.path.join(_dirs(cfg)["features"], entry.split, f"{entry.name}.a3fc")


def _map_entries(cfg: RunConfig, entries, fn) -> None:
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            list(pool.map(fn, entries))
    else:
        for e in entries:
            fn(e)


def stage_render(cfg: RunConfig) -> None:
    """A3PC -> A3VB; RGB planes are rendered for train samples only."""
    entries = _manifest(cfg, "render")
    spec = cfg.views.to_spec()

    def render_one(entry: synth.ManifestEntry) -> None:
        cloud = _load_cloud(cfg, entry)
        colors = (synth.colorize(cloud.points, entry.category, entry.seed)
                  if entry.split == "train" else None)
        views = make_views(cloud, spec, colors=colors)
        path = _views_path(cfg, entry)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        io_formats.write_view_bundle(path, views)

    _map_entries(cfg, entries, render_one)
    _write_log(cfg, "render.log", [f"views per sample: {spec.view_count}",
                                   f"rendered: {len(entries)}"])


def stage_encode(cfg: RunConfig) -> None:
    """A3VB -> A3FC; the RGB modality is cached only where RGB planes exist."""
    entries = _manifest(cfg, "encode")
    spec = cfg.encoder.to_spec()

    def encode_one(entry: synth.ManifestEntry) -> None:
        views = io_formats.read_view_bundle(_require(_views_path(cfg, entry), "render"))
        sets = [encode_views(views.render, spec, MODALITY_RENDER)]
        if views.rgb is not None:
            sets.append(encode_views(views.rgb, spec, MODALITY_RGB))
        path = _features_path(cfg, entry)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        save_cache(sets, path)

    _map_entries(cfg, entries, encode_one)
    _write_log(cfg, "encode.log", [f"dim: {spec.dim}", f"encoded: {len(entries)}"])


def _grid(cfg: RunConfig) -> tuple[int, int]:
    return (cfg.views.height // cfg.encoder.patch_size,
            cfg.views.width // cfg.encoder.patch_size)


def _load_features(cfg: RunConfig, entry: synth.ManifestEntry) -> dict[str, FeatureSet]:
    path = _require(_features_path(cfg, entry), "encode")
    return {fs.modality: fs for fs in load_cache(path, grid=_grid(cfg))}


def stage_align(cfg: RunConfig, out_path: str | None = None) -> str:
    """Train the feature aligner on train-split (render, RGB) feature pairs."""
    entries = [e for e in _manifest(cfg, "align") if e.split == "train"]
    pairs = []
    for entry in entries:
        feats = _load_features(cfg, entry)
        if MODALITY_RGB not in feats:
            raise MissingArtifactError(
                f"sample {entry.name} has no RGB features: re-run 'render'+'encode'")
        pairs.append((feats[MODALITY_RENDER], feats[MODALITY_RGB]))
    d_h = cfg.loss.hidden_dim or cfg.encoder.dim
    params = AlignerParams(cfg.encoder.dim, d_h, seed=cfg.seed)
    scr = ScrConfig(strength=cfg.loss.scr_lambda,
                    activation_epoch=cfg.schedule.scr_start,
                    detach_weights=cfg.loss.detach_weights,
                    normalized_consistency=cfg.loss.normalized_consistency)
    history = train_stage1(pairs, params, scr,
                           epochs=cfg.schedule.stage1_epochs, lr=cfg.schedule.lr,
                           batch_size=cfg.schedule.batch,
                           betas=(cfg.schedule.adam_beta1, cfg.schedule.adam_beta2),
                           eps=cfg.schedule.adam_eps)
    d = _dirs(cfg)
    os.makedirs(d["ckpts"], exist_ok=True)
    path = out_path or os.path.join(d["ckpts"], "stage1.a3ck")
    io_formats.write_checkpoint(path, params.state_tensors())
    _write_log(cfg, "stage1_loss.txt",
               [f"{i}\t{obj}\t{loss:.8f}" for i, (loss, obj)
                in enumerate(zip(history["loss"], history["objective"]))])
    return path


def _load_aligner(cfg: RunConfig, path: str | None = None) -> AlignerParams:
    ckpt = path or os.path.join(_dirs(cfg)["ckpts"], "stage1.a3ck")
    _require(ckpt, "align")
    d_h = cfg.loss.hidden_dim or cfg.encoder.dim
    params = AlignerParams(cfg.encoder.dim, d_h, seed=cfg.seed)
    params.load_state(io_formats.read_checkpoint(ckpt))
    return params


def _load_bank(cfg: RunConfig, path: str | None = None) -> PromptBank:
    ckpt = path or os.path.join(_dirs(cfg)["ckpts"], "stage2.a3ck")
    _require(ckpt, "prompt")
    bank = PromptBank(cfg.encoder.dim, tau=cfg.loss.tau,
                      prompt_length=cfg.loss.prompt_length, seed=cfg.seed)
    bank.load_state(io_formats.read_checkpoint(ckpt))
    return bank


def _seg_cfg(cfg: RunConfig) -> SegLossConfig:
    return SegLossConfig(dice_eps=cfg.loss.dice_eps,
                         focal_gamma=cfg.loss.focal_gamma,
                         focal_alpha=cfg.loss.focal_alpha,
                         normalize_by_visibility=cfg.loss.visibility_normalized)


def stage_prompt(cfg: RunConfig, aligner_path: str | None = None,
                 out_path: str | None = None) -> str:
    """Train the prompt bank on the train split with the aligner frozen."""
    entries = [e for e in _manifest(cfg, "prompt") if e.split == "train"]
    aligner = _load_aligner(cfg, aligner_path)
    samples = []
    for entry in entries:
        cloud = _load_cloud(cfg, entry)
        views = io_formats.read_view_bundle(_require(_views_path(cfg, entry), "render"))
        feats = _load_features(cfg, entry)
        samples.append(Stage2Sample(features=feats[MODALITY_RENDER], views=views,
                                    masks=project_labels(cloud, views),
                                    labels=cloud.labels))
    bank = PromptBank(cfg.encoder.dim, tau=cfg.loss.tau,
                      prompt_length=cfg.loss.prompt_length, seed=cfg.seed)
    history = train_stage2(samples, aligner, bank,
                           epochs=cfg.schedule.stage2_epochs,
                           dpca_start=cfg.schedule.dpca_start,
                           lambda_con=cfg.loss.lambda_con,
                           lr=cfg.schedule.lr, batch_size=cfg.schedule.batch,
                           betas=(cfg.schedule.adam_beta1, cfg.schedule.adam_beta2),
                           eps=cfg.schedule.adam_eps, seg_cfg=_seg_cfg(cfg),
                           use_tau_2d=cfg.loss.tau_on_2d_maps)
    d = _dirs(cfg)
    os.makedirs(d["ckpts"], exist_ok=True)
    path = out_path or os.path.join(d["ckpts"], "stage2.a3ck")
    io_formats.write_checkpoint(path, bank.state_tensors())
    _write_log(cfg, "stage2_loss.txt",
               [f"{i}\t{obj}\t{loss:.8f}" for i, (loss, obj)
                in enumerate(zip(history["loss"], history["objective"]))])
    return path


def _score_one(cfg: RunConfig, entry: synth.ManifestEntry,
               aligner: AlignerParams, bank: PromptBank):
    views = io_formats.read_view_bundle(_require(_views_path(cfg, entry), "render"))
    feats = _load_features(cfg, entry)
    return score_sample(feats[MODALITY_RENDER], views, aligner, bank,
                        use_tau_2d=cfg.loss.tau_on_2d_maps,
                        normalize_by_visibility=cfg.loss.visibility_normalized)


def stage_infer(cfg: RunConfig) -> None:
    """Score the test split from rendering features only; write per-branch
    and fused point scores (A3SC) plus image-level predictions."""
    entries = [e for e in _manifest(cfg, "infer") if e.split == "test"]
    aligner = _load_aligner(cfg)
    bank = _load_bank(cfg)
    d = _dirs(cfg)
    os.makedirs(d["scores"], exist_ok=True)
    lines = ["name\ty_ra\ty_r\ty_fused"]
    for entry in entries:
        bundles = _score_one(cfg, entry, aligner, bank)
        fused_map, fused_y = metrics.fuse(bundles[MODALITY_ALIGNED],
                                          bundles[MODALITY_RENDER], cfg.loss.alpha)
        io_formats.write_scores(os.path.join(d["scores"], f"{entry.name}.ra.a3sc"),
                                bundles[MODALITY_ALIGNED].points_a)
        io_formats.write_scores(os.path.join(d["scores"], f"{entry.name}.r.a3sc"),
                                bundles[MODALITY_RENDER].points_a)
        io_formats.write_scores(os.path.join(d["scores"], f"{entry.name}.fused.a3sc"),
                                fused_map)
        lines.append(f"{entry.name}\t{bundles[MODALITY_ALIGNED].y_image:.8f}"
                     f"\t{bundles[MODALITY_RENDER].y_image:.8f}\t{fused_y:.8f}")
    with open(os.path.join(d["scores"], "image_scores.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _eval_samples(cfg: RunConfig) -> list[EvalSample]:
    entries = [e for e in _manifest(cfg, "eval") if e.split == "test"]
    d = _dirs(cfg)
    image_path = _require(os.path.join(d["scores"], "image_scores.txt"), "infer")
    image_scores: dict[str, tuple[float, float]] = {}
    with open(image_path, encoding="utf-8") as f:
        next(f)
        for line in f:
            name, y_ra, y_r, _ = line.strip().split("\t")
            image_scores[name] = (float(y_ra), float(y_r))
    samples = []
    for entry in entries:
        cloud = _load_cloud(cfg, entry)
        region_path = os.path.join(d["dataset"], entry.path[:-5] + ".a3rg")
        if os.path.exists(region_path):
            regions = io_formats.read_regions(region_path)
        else:
            regions = metrics.connected_regions(cloud.points, cloud.labels)
        ra = io_formats.read_scores(
            _require(os.path.join(d["scores"], f"{entry.name}.ra.a3sc"), "infer"))
        r = io_formats.read_scores(
            _require(os.path.join(d["scores"], f"{entry.name}.r.a3sc"), "infer"))
        y_ra, y_r = image_scores[entry.name]
        samples.append(EvalSample(name=entry.name, label=entry.label,
                                  point_labels=cloud.labels, region_ids=regions,
                                  point_scores={"r_a": ra, "r": r},
                                  image_scores={"r_a": y_ra, "r": y_r}))
    return samples


def stage_eval(cfg: RunConfig) -> dict[str, MetricsReport]:
    """Fused plus per-branch metrics over the test split."""
    samples = _eval_samples(cfg)
    reports = {mode: evaluate(samples, mode, alpha=cfg.loss.alpha,
                              fpr_limit=cfg.loss.fpr_limit)
               for mode in metrics.EVAL_MODES}
    header = {"category": cfg.data.category,
              "test_categories": ",".join(cfg.data.resolved_test_categories()),
              "seed": cfg.seed, "views": cfg.views.count,
              "alpha": cfg.loss.alpha}
    base = _dirs(cfg)["base"]
    with open(os.path.join(base, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report_text(reports, header))
    with open(os.path.join(base, "report.tsv"), "w", encoding="utf-8") as f:
        f.write(report_tsv(reports))
    return reports


_STAGE_FNS = {"gen": stage_gen, "render": stage_render, "encode": stage_encode,
              "align": stage_align, "prompt": stage_prompt, "infer": stage_infer,
              "eval": stage_eval}


def run_pipeline(cfg: RunConfig, stages: tuple[str, ...] = STAGES):
    """Execute the requested stages in canonical order."""
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages: {sorted(unknown)}")
    result = None
    for stage in STAGES:
        if stage in stages:
            result = _STAGE_FNS[stage](cfg)
    return result


# -- timing harness ---------------------------------------------------------------

def bench(cfg: RunConfig, repeats: int = 30) -> dict[str, float]:
    """Median per-image inference latency over >= 30 repetitions, batch 1."""
    entries = [e for e in _manifest(cfg, "bench") if e.split == "test"]
    if not entries:
        raise MissingArtifactError("no test samples: run 'gen' first")
    aligner = _load_aligner(cfg)
    bank = _load_bank(cfg)
    entry = entries[0]
    _score_one(cfg, entry, aligner, bank)      # warm cache
    times = []
    for _ in range(max(repeats, 30)):
        t0 = time.perf_counter()
        _score_one(cfg, entry, aligner, bank)
        times.append(time.perf_counter() - t0)
    median = float(np.median(times))
    report = {"median_latency_s": median,
              "throughput_fps": 1.0 / median,
              "repeats": float(len(times)),
              "batch_size": 1.0}
    try:
        import resource
        report["peak_rss_kb"] = float(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)
    except ImportError:
        pass
    lines = [f"{k}: {v:.6f}" for k, v in report.items()]
    _write_log(cfg, "bench.txt", lines)
    return report


def export_scr_weights(cfg: RunConfig, sample_name: str | None = None,
                       out_dir: str | None = None) -> list[str]:
    """Per-view SCR weight maps of a train sample, as A3SC (one file per view)."""
    from .aligner import consistency_matrix, scr_weights

    entries = [e for e in _manifest(cfg, "export-weights") if e.split == "train"]
    if sample_name is not None:
        entries = [e for e in entries if e.name == sample_name]
        if not entries:
            raise MissingArtifactError(f"train sample {sample_name!r} not found")
    entry = entries[0]
    feats = _load_features(cfg, entry)
    if MODALITY_RGB not in feats:
        raise MissingArtifactError("RGB features required for SCR weights")
    f_r, f_rgb = feats[MODALITY_RENDER], feats[MODALITY_RGB]
    out = out_dir or os.path.join(_dirs(cfg)["base"], "scr_weights")
    os.makedirs(out, exist_ok=True)
    paths = []
    for i in range(f_r.view_count):
        C = consistency_matrix(f_r.F[i], f_rgb.F[i], cfg.loss.normalized_consistency)
        _, w = scr_weights(C, cfg.loss.scr_lambda)
        path = os.path.join(out, f"{entry.name}.view{i}.a3sc")
        io_formats.write_scores(path, w)
        paths.append(path)
    return paths


# -- one-vs-rest benchmark -----------------------------------------------------------

def one_vs_rest(cfg: RunConfig, categories: tuple[str, ...] = synth.CATEGORIES
                ) -> dict[str, dict[str, MetricsReport]]:
    """Train on each category in turn, evaluate on the remaining ones.

    Runs the full file-mediated pipeline per category under
    `<out_dir>/<category>/`; returns reports per training category.
    """
    from dataclasses import replace
    results: dict[str, dict[str, MetricsReport]] = {}
    for category in categories:
        sub = replace(cfg,
                      data=replace(cfg.data, category=category, test_categories=None),
                      out_dir=os.path.join(cfg.out_dir, category))
        run_pipeline(sub, STAGES[:-1])
        results[category] = stage_eval(sub)
    return results


def mean_scores(results: dict[str, dict[str, MetricsReport]], mode: str
                ) -> dict[str, float]:
    keys = ("image_auroc", "image_ap", "point_auroc", "point_pro")
    out = {}
    for k in keys:
        out[k] = float(np.mean([results[c][mode].as_dict()[k] for c in results]))
    return out
