"""Occupancy-flow challenge metrics, per waypoint.

Per-waypoint entries whose ground truth is empty are undefined for that
metric and reported as NaN; means skip them.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import torch

from . import grid_ops as G
from .errors import ShapeError

COLUMNS = ("observed_auc", "observed_soft_iou", "occluded_auc", "occluded_soft_iou",
           "flow_epe", "flow_grounded_auc", "flow_grounded_soft_iou")
NUM_THRESHOLDS = 100


def auc_pr(pred, gt, num_thresholds: int = NUM_THRESHOLDS) -> float:
    """Area under the interpolated precision-recall curve.

    A cell counts as predicted positive at threshold ``tau`` when
    ``pred >= tau``; thresholds are ``linspace(0, 1, num_thresholds)``.
    Thresholds with no predicted positives contribute no point. Precision is
    replaced by its upper envelope ``max{p_i : r_i >= r}`` and integrated
    with the trapezoid rule from recall 0.
    """
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt).ravel() > 0.5
    n_pos = int(g.sum())
    if n_pos == 0:
        return 0.0
    tau = np.linspace(0.0, 1.0, num_thresholds)
    pos = np.sort(p[g])
    neg = np.sort(p[~g])
    tp = n_pos - np.searchsorted(pos, tau, side="left")
    fp = len(neg) - np.searchsorted(neg, tau, side="left")
    keep = (tp + fp) > 0
    if not keep.any():
        return 0.0
    recall = tp[keep] / n_pos
    precision = tp[keep] / (tp[keep] + fp[keep])
    r_unique = np.unique(recall)
    envelope = np.array([precision[recall >= r].max() for r in r_unique])
    if r_unique[0] > 0:
        r_unique = np.concatenate([[0.0], r_unique])
        envelope = np.concatenate([[envelope[0]], envelope])
    area = float(np.sum(np.diff(r_unique) * (envelope[1:] + envelope[:-1]) / 2))
    return min(max(area, 0.0), 1.0)


def soft_iou(pred, gt) -> float:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    inter = float((p * g).sum())
    union = float(p.sum() + g.sum()) - inter
    return inter / union if union > 0 else 0.0


def flow_epe(pred_flow, gt_flow, gt_occ) -> float:
    """Mean endpoint error over cells with ``gt_occ > 0``; flows are (2, H, W)."""
    pf = np.asarray(pred_flow, dtype=np.float64)
    gf = np.asarray(gt_flow, dtype=np.float64)
    if pf.shape != gf.shape or pf.shape[0] != 2:
        raise ShapeError(f"flow shapes {pf.shape} / {gf.shape} must match and lead with 2")
    mask = np.asarray(gt_occ) > 0
    if not mask.any():
        return 0.0
    err = np.sqrt(((pf - gf) ** 2).sum(axis=0))
    return float(err[mask].mean())


def warp_numpy(source: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Warp one (H, W) grid by one (2, H, W) flow, in float64."""
    src = torch.as_tensor(np.asarray(source, dtype=np.float64))[None, None]
    fl = torch.as_tensor(np.asarray(flow, dtype=np.float64))[None]
    return G.bilinear_warp(src, fl)[0, 0].numpy()


def flow_grounded(pred_occ, pred_flow, gt_occ_prev, gt_occ) -> tuple[float, float]:
    grounded = np.asarray(pred_occ, dtype=np.float64) * np.clip(warp_numpy(gt_occ_prev, pred_flow), 0.0, 1.0)
    return auc_pr(grounded, gt_occ), soft_iou(grounded, gt_occ)


@dataclass
class WaypointReport:
    values: np.ndarray  # (T_f, len(COLUMNS)), NaN where undefined

    @property
    def waypoints(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, COLUMNS.index(name)]

    def means(self) -> dict[str, float]:
        out = {}
        for j, name in enumerate(COLUMNS):
            col = self.values[:, j]
            col = col[~np.isnan(col)]
            out[name] = float(col.mean()) if col.size else float("nan")
        return out

    def __getitem__(self, name: str) -> float:
        return self.means()[name]


def evaluate(occupancy, flow, sample) -> WaypointReport:
    """Score one sample.

    ``occupancy`` is (T_f, 2, H, W) probabilities (observed, occluded) and
    ``flow`` is (T_f, 2, H, W). ``sample`` is a :class:`SampleRecord`.
    """
    occupancy = np.asarray(occupancy, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    T = sample.future_frames
    if occupancy.shape[0] != T or flow.shape[0] != T:
        raise ShapeError(f"prediction has {occupancy.shape[0]}/{flow.shape[0]} waypoints, targets have {T}")
    prev = sample.previous_occupancy()
    out = np.full((T, len(COLUMNS)), np.nan)
    for k in range(T):
        obs, occl = sample.observed[k], sample.occluded[k]
        if obs.any():
            out[k, 0] = auc_pr(occupancy[k, 0], obs)
            out[k, 1] = soft_iou(occupancy[k, 0], obs)
            out[k, 5], out[k, 6] = flow_grounded(occupancy[k, 0], flow[k], prev[k], obs)
            out[k, 4] = flow_epe(flow[k], sample.flow[k], obs)
        if occl.any():
            out[k, 2] = auc_pr(occupancy[k, 1], occl)
            out[k, 3] = soft_iou(occupancy[k, 1], occl)
    return WaypointReport(out)


def aggregate(reports: list[WaypointReport]) -> WaypointReport:
    """Per-waypoint means across samples (NaN entries skipped)."""
    if not reports:
        return WaypointReport(np.full((0, len(COLUMNS)), np.nan))
    stack = np.stack([r.values for r in reports])
    counts = (~np.isnan(stack)).sum(axis=0)
    sums = np.nansum(stack, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return WaypointReport(mean)


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else repr(float(v))


def report_csv(reports: list[WaypointReport], sample_ids: list | None = None) -> str:
    """One row per (sample, waypoint), then per-waypoint means and an overall mean row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("sample", "waypoint") + COLUMNS)
    ids = sample_ids if sample_ids is not None else list(range(len(reports)))
    for sid, rep in zip(ids, reports):
        for k in range(rep.waypoints):
            w.writerow([sid, k + 1] + [_fmt(v) for v in rep.values[k]])
    agg = aggregate(reports)
    for k in range(agg.waypoints):
        w.writerow(["mean", k + 1] + [_fmt(v) for v in agg.values[k]])
    means = agg.means()
    w.writerow(["mean", "all"] + [_fmt(means[c]) for c in COLUMNS])
    return buf.getvalue()
