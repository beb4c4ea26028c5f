"""Branch fusion and exact evaluation metrics.

AUROC is the Mann-Whitney statistic with ties counted 1/2 (computed from
average ranks, not a trapezoid over an ROC sample).  AP follows the ranked
list with stable tie-breaking on (score desc, index asc).  PRO sweeps the
achieved score thresholds, averaging per-region overlap against the global
false-positive rate, and integrates by trapezoid up to `fpr_limit`
(normalized by the limit).  Documented conventions: predictions use
`score >= threshold`; a constant score map degenerates PRO to the single
achievable threshold's mean overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricError
from .prompts import ScoreBundle

Array = np.ndarray


def fuse(score_ra: ScoreBundle, score_r: ScoreBundle, alpha: float = 0.5
         ) -> tuple[Array, float]:
    """Linear fusion of branch point maps and image scores.

    Returns (M_A, y_hat) with y_hat = alpha*y_ra + (1-alpha)*y_r + max(M_A);
    y_hat is a ranking score and may exceed 1.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    m = alpha * score_ra.points_a + (1.0 - alpha) * score_r.points_a
    y = alpha * score_ra.y_image + (1.0 - alpha) * score_r.y_image + float(m.max())
    return m, y


def _validate_binary(labels: Array) -> Array:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be binary")
    return labels.astype(bool)


def _average_ranks(scores: Array) -> Array:
    """1-based ranks with ties averaged."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores: Array, labels: Array) -> float:
    """Exact area under the ROC curve (Mann-Whitney with half-credit ties)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = _validate_binary(labels)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("undefined metric: both classes required")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores: Array, labels: Array) -> float:
    """AP over the ranked list; ties broken by (score desc, index asc)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = _validate_binary(labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise MetricError("undefined metric: no positives")
    order = np.argsort(-scores, kind="stable")
    hits = pos[order].astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, scores.size + 1)
    return float((precision * hits).sum() / n_pos)


def pro(point_scores: Array, point_labels: Array, region_ids: Array,
        fpr_limit: float = 0.3) -> float:
    """Per-region overlap integrated over FPR in [0, fpr_limit].

    `region_ids` is 0 on normal points and partitions anomalous points into
    regions 1..K.  Thresholds sweep the unique scores (descending); at each,
    prediction is `score >= t`.
    """
    scores = np.asarray(point_scores, dtype=np.float64)
    labels = _validate_binary(point_labels)
    ids = np.asarray(region_ids)
    if scores.shape != labels.shape or ids.shape != labels.shape:
        raise MetricError("scores, labels and region ids must align")
    if not (0.0 < fpr_limit <= 1.0):
        raise MetricError("fpr_limit must lie in (0, 1]")
    if np.any((ids > 0) != labels):
        raise MetricError("region ids must cover exactly the anomalous points")
    regions = np.unique(ids[ids > 0])
    if regions.size == 0:
        raise MetricError("undefined metric: no anomalous regions")
    n_neg = int((~labels).sum())
    if n_neg == 0:
        raise MetricError("undefined metric: no normal points")

    # Descending sweep via one sort: cumulative per-region hits and false
    # positives at every unique-score boundary.
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    # Last index of each unique score run = state after applying that
    # threshold (prediction is score >= t).
    boundary = np.nonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))[0]

    ids_sorted = ids[order]
    neg_sorted = (~labels[order]).astype(np.float64)
    fpr_at = np.cumsum(neg_sorted)[boundary] / n_neg

    region_index = np.searchsorted(regions, ids_sorted)
    region_index[ids_sorted == 0] = regions.size        # overflow slot
    hit = np.zeros((boundary.size, regions.size + 1))
    run_id = np.searchsorted(boundary, np.arange(scores.size))
    np.add.at(hit, (run_id, region_index), 1.0)
    region_sizes = np.array([(ids == r).sum() for r in regions], dtype=np.float64)
    overlap_at = (np.cumsum(hit[:, :-1], axis=0) / region_sizes).mean(axis=1)

    if boundary.size == 1:
        # Degenerate sweep: report the single achievable mean overlap.
        return float(overlap_at[0])

    curve_f = np.concatenate([[0.0], fpr_at])
    curve_o = np.concatenate([[0.0], overlap_at])

    area = 0.0
    for (f0, o0), (f1, o1) in zip(zip(curve_f[:-1], curve_o[:-1]),
                                  zip(curve_f[1:], curve_o[1:])):
        if f1 <= f0:
            continue
        if f1 <= fpr_limit:
            area += (f1 - f0) * 0.5 * (o0 + o1)
        elif f0 < fpr_limit:
            o_lim = o0 + (o1 - o0) * (fpr_limit - f0) / (f1 - f0)
            area += (fpr_limit - f0) * 0.5 * (o0 + o_lim)
            break
        else:
            break
    return float(area / fpr_limit)


def connected_regions(points: Array, labels: Array, radius: float | None = None) -> Array:
    """Region ids for anomalous points via radius-graph connectivity.

    Default radius is twice the median nearest-neighbor distance of the
    cloud.  Used when a dataset supplies labels but no region partition.
    """
    pts = np.asarray(points, dtype=np.float64)
    lab = _validate_binary(labels)
    ids = np.zeros(pts.shape[0], dtype=np.int64)
    anom = np.nonzero(lab)[0]
    if anom.size == 0:
        return ids
    if radius is None:
        sub = pts if pts.shape[0] <= 2000 else pts[:: max(1, pts.shape[0] // 2000)]
        d2 = ((sub[:, None, :] - sub[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(d2, np.inf)
        radius = 2.0 * float(np.median(np.sqrt(d2.min(axis=1))))

    apts = pts[anom]
    n = anom.size
    parent = np.arange(n)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    r2 = radius * radius
    for i in range(n):
        d2 = ((apts[i + 1:] - apts[i]) ** 2).sum(-1)
        for j in np.nonzero(d2 <= r2)[0]:
            ri, rj = find(i), find(int(i + 1 + j))
            if ri != rj:
                parent[rj] = ri
    roots = np.array([find(i) for i in range(n)])
    _, comp = np.unique(roots, return_inverse=True)
    ids[anom] = comp + 1
    return ids


@dataclass
class EvalSample:
    """Everything evaluation needs for one test sample."""

    name: str
    label: int
    point_labels: Array
    region_ids: Array
    point_scores: dict[str, Array]      # per branch: "r_a", "r"
    image_scores: dict[str, float]


@dataclass
class MetricsReport:
    mode: str
    image_auroc: float
    image_ap: float
    point_auroc: float
    point_pro: float

    def __post_init__(self):
        for v in (self.image_auroc, self.image_ap, self.point_auroc, self.point_pro):
            if not (0.0 <= v <= 1.0):
                raise MetricError("metrics must lie in [0, 1]")

    def as_dict(self) -> dict[str, float]:
        return {"image_auroc": self.image_auroc, "image_ap": self.image_ap,
                "point_auroc": self.point_auroc, "point_pro": self.point_pro}


EVAL_MODES = ("fused", "r_a-only", "r-only")


def _sample_outputs(sample: EvalSample, mode: str, alpha: float) -> tuple[Array, float]:
    if mode == "fused":
        m = (alpha * sample.point_scores["r_a"]
             + (1.0 - alpha) * sample.point_scores["r"])
        y = (alpha * sample.image_scores["r_a"]
             + (1.0 - alpha) * sample.image_scores["r"] + float(m.max()))
        return m, y
    branch = {"r_a-only": "r_a", "r-only": "r"}[mode]
    m = sample.point_scores[branch]
    return m, sample.image_scores[branch] + float(m.max())


def evaluate(samples: list[EvalSample], mode: str = "fused",
             alpha: float = 0.5, fpr_limit: float = 0.3) -> MetricsReport:
    """Image metrics over image scores, point metrics over concatenated maps."""
    if mode not in EVAL_MODES:
        raise MetricError(f"unknown evaluation mode {mode!r}")
    if not samples:
        raise MetricError("no samples to evaluate")
    image_scores, image_labels = [], []
    point_scores, point_labels, region_ids = [], [], []
    next_region = 0
    for s in samples:
        m, y = _sample_outputs(s, mode, alpha)
        image_scores.append(y)
        image_labels.append(s.label)
        point_scores.append(m)
        point_labels.append(s.point_labels)
        ids = np.asarray(s.region_ids, dtype=np.int64).copy()
        ids[ids > 0] += next_region
        next_region = max(next_region, int(ids.max(initial=0)))
        region_ids.append(ids)
    image_scores = np.asarray(image_scores)
    image_labels = np.asarray(image_labels)
    cat_scores = np.concatenate(point_scores)
    cat_labels = np.concatenate(point_labels)
    cat_ids = np.concatenate(region_ids)
    return MetricsReport(
        mode=mode,
        image_auroc=auroc(image_scores, image_labels),
        image_ap=average_precision(image_scores, image_labels),
        point_auroc=auroc(cat_scores, cat_labels),
        point_pro=pro(cat_scores, cat_labels, cat_ids, fpr_limit))


def report_text(reports: dict[str, MetricsReport], header: dict | None = None) -> str:
    """UTF-8 key: value report grouped by section (deterministic bytes)."""
    lines: list[str] = []
    if header:
        lines.append("[run]")
        for k in sorted(header):
            lines.append(f"{k}: {header[k]}")
        lines.append("")
    for mode in sorted(reports):
        r = reports[mode]
        lines.append(f"[{mode}]")
        for k, v in r.as_dict().items():
            lines.append(f"{k}: {v:.6f}")
        lines.append("")
    return "\n".join(lines)


def report_tsv(reports: dict[str, MetricsReport]) -> str:
    cols = ["mode", "image_auroc", "image_ap", "point_auroc", "point_pro"]
    lines = ["\t".join(cols)]
    for mode in sorted(reports):
        r = reports[mode]
        lines.append("\t".join([mode] + [f"{r.as_dict()[c]:.6f}" for c in cols[1:]]))
    return "\n".join(lines) + "\n"
