import math
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score

from vesselprune import settings
from vesselprune.dual_graph import SegmentSet
from vesselprune.geometry import tree_distances
from vesselprune.vessel_tree import VesselTree, resample_polyline, subset_tree


@dataclass
class EvalParams:
    """Distances used by the reconstruction metrics, in mm."""

    catch_dist: float = settings.CATCH_DISTANCE
    sig_dist: float = settings.SIGNIFICANT_DISTANCE
    resample_step: float = settings.RESAMPLE_STEP

    def validate(self):
        for name in ("catch_dist", "sig_dist", "resample_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be positive, got {getattr(self, name)}")


@dataclass
class MetricReport:
    """Catching and spatial distance metrics of one reconstruction.

    Spatial values are `nan` and `spatial_valid` is False when either tree is empty.
    """

    precision: float
    recall: float
    f1: float
    sd_mm: float
    ssd_mm: float
    pssd: float
    sd_pred_to_gt_mm: float
    sd_gt_to_pred_mm: float
    n_pred: int
    n_gt: int
    pred_caught: int
    gt_caught: int
    spatial_valid: bool
    catch_dist_mm: float
    sig_dist_mm: float

    def to_json_dict(self) -> Dict:
        def number(value):
            return None if isinstance(value, float) and math.isnan(value) else value

        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "sd_mm": number(self.sd_mm),
            "ssd_mm": number(self.ssd_mm),
            "pssd": number(self.pssd),
            "directed": {
                "pred_to_gt_mm": number(self.sd_pred_to_gt_mm),
                "gt_to_pred_mm": number(self.sd_gt_to_pred_mm),
            },
            "counts": {
                "n_pred": self.n_pred,
                "n_gt": self.n_gt,
                "pred_caught": self.pred_caught,
                "gt_caught": self.gt_caught,
            },
            "spatial_valid": self.spatial_valid,
            "config": {"catch_dist_mm": self.catch_dist_mm, "sig_dist_mm": self.sig_dist_mm},
        }

    @classmethod
    def from_json_dict(cls, data) -> "MetricReport":
        def number(value):
            return math.nan if value is None else float(value)

        return cls(
            precision=float(data["precision"]),
            recall=float(data["recall"]),
            f1=float(data["f1"]),
            sd_mm=number(data["sd_mm"]),
            ssd_mm=number(data["ssd_mm"]),
            pssd=number(data["pssd"]),
            sd_pred_to_gt_mm=number(data["directed"]["pred_to_gt_mm"]),
            sd_gt_to_pred_mm=number(data["directed"]["gt_to_pred_mm"]),
            n_pred=int(data["counts"]["n_pred"]),
            n_gt=int(data["counts"]["n_gt"]),
            pred_caught=int(data["counts"]["pred_caught"]),
            gt_caught=int(data["counts"]["gt_caught"]),
            spatial_valid=bool(data["spatial_valid"]),
            catch_dist_mm=float(data["config"]["catch_dist_mm"]),
            sig_dist_mm=float(data["config"]["sig_dist_mm"]),
        )

    def metrics(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in settings.METRIC_COLUMNS}


def prune(forest: VesselTree, segments: SegmentSet, scores, threshold) -> VesselTree:
    """Drops the nodes that only belong to segments scored below `threshold`.

    Junction and cut nodes survive when any incident segment survives; survivors whose parent
    was dropped become roots.

    Args:
        forest (VesselTree): the forest the segments were cut from
        segments (SegmentSet): its segments
        scores (np.ndarray): one confidence per segment
        threshold (float): segments with a score below it are discarded

    Returns:
        VesselTree:
            the pruned forest, node ids and positions unchanged
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if len(scores) != len(segments):
        raise ValueError(f"Got {len(scores)} scores for {len(segments)} segments")

    kept_ids = set()
    for seg, score in zip(segments, scores):
        if score >= threshold:
            kept_ids.update(seg.node_ids)
    return subset_tree(forest, [int(i) in kept_ids for i in forest.ids])


def f1_score(precision, recall) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def _catch(d_pred, d_gt, catch_dist) -> Tuple[float, float, float, int, int]:
    pred_caught = int(np.count_nonzero(d_pred <= catch_dist))
    gt_caught = int(np.count_nonzero(d_gt <= catch_dist))
    precision = pred_caught / len(d_pred) if len(d_pred) else 1.0
    if len(d_gt) == 0:
        recall = 1.0
    else:
        recall = gt_caught / len(d_gt) if len(d_pred) else 0.0
    return precision, recall, f1_score(precision, recall), pred_caught, gt_caught


def _spatial(d_pred, d_gt, sig_dist) -> Tuple[float, float, float]:
    if len(d_pred) == 0 or len(d_gt) == 0:
        return math.nan, math.nan, math.nan
    # sorted so that swapping the trees gives bit-identical means
    union = np.sort(np.concatenate([d_pred, d_gt]))
    significant = union[union > sig_dist]
    ssd = float(significant.mean()) if len(significant) else 0.0
    return float(union.mean()), ssd, len(significant) / len(union)


def catch_metrics(pred: VesselTree, gt: VesselTree, catch_dist) -> Tuple[float, float, float]:
    """Precision, recall and F1 of node catching against the other tree's polyline.

    An empty prediction scores precision 1 and recall 0; an empty ground truth scores
    precision 0 and recall 1.

    Args:
        pred (VesselTree): the reconstruction, resampled to at most 1 mm node spacing
        gt (VesselTree): the ground truth, resampled likewise
        catch_dist (float): catching distance in mm

    Returns:
        tuple:
            `(precision, recall, f1)`
    """
    if not catch_dist > 0:
        raise ValueError(f"catch_dist must be positive, got {catch_dist}")
    d_pred = tree_distances(pred.positions, gt)
    d_gt = tree_distances(gt.positions, pred)
    return _catch(d_pred, d_gt, catch_dist)[:3]


def spatial_metrics(pred: VesselTree, gt: VesselTree, sig_dist) -> Tuple[float, float, float]:
    """Spatial distance scores over the union of both directed node-to-polyline distances.

    Args:
        pred (VesselTree): the reconstruction, resampled to at most 1 mm node spacing
        gt (VesselTree): the ground truth, resampled likewise
        sig_dist (float): significance threshold in mm

    Returns:
        tuple:
            `(sd, ssd, pssd)`, all `nan` when either tree is empty
    """
    if not sig_dist > 0:
        raise ValueError(f"sig_dist must be positive, got {sig_dist}")
    d_pred = tree_distances(pred.positions, gt)
    d_gt = tree_distances(gt.positions, pred)
    return _spatial(d_pred, d_gt, sig_dist)


def evaluate_pipeline(pred: VesselTree, gt: VesselTree, params: EvalParams = None) -> MetricReport:
    """Resamples both trees and computes every reconstruction metric.

    Args:
        pred (VesselTree): the reconstruction
        gt (VesselTree): the ground truth
        params (EvalParams): catching and significance distances

    Returns:
        MetricReport:
            the report
    """
    params = EvalParams() if params is None else params
    params.validate()
    pred = resample_polyline(pred, params.resample_step)
    gt = resample_polyline(gt, params.resample_step)
    d_pred = tree_distances(pred.positions, gt)
    d_gt = tree_distances(gt.positions, pred)

    precision, recall, f1, pred_caught, gt_caught = _catch(d_pred, d_gt, params.catch_dist)
    sd, ssd, pssd = _spatial(d_pred, d_gt, params.sig_dist)
    valid = len(pred) > 0 and len(gt) > 0
    return MetricReport(
        precision=precision,
        recall=recall,
        f1=f1,
        sd_mm=sd,
        ssd_mm=ssd,
        pssd=pssd,
        sd_pred_to_gt_mm=float(d_pred.mean()) if valid else math.nan,
        sd_gt_to_pred_mm=float(d_gt.mean()) if valid else math.nan,
        n_pred=len(pred),
        n_gt=len(gt),
        pred_caught=pred_caught,
        gt_caught=gt_caught,
        spatial_valid=valid,
        catch_dist_mm=float(params.catch_dist),
        sig_dist_mm=float(params.sig_dist),
    )


def reports_to_frame(reports: Sequence[MetricReport], index=None) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(r) for r in reports])
    if index is not None:
        frame.index = pd.Index(index)
    return frame


def summarize_reports(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """Mean and standard deviation of every metric over scenes, skipping invalid spatial values.

    Args:
        reports (list): per-scene reports

    Returns:
        pd.DataFrame:
            one row per metric with columns `mean` and `std`
    """
    frame = reports_to_frame(reports)[settings.METRIC_COLUMNS]
    return pd.DataFrame({"mean": frame.mean(), "std": frame.std(ddof=0)})


def format_summary(summary: pd.DataFrame, title=None) -> str:
    """Plain-text `metric  mean ± std` table with 9 significant digits."""
    fmt = "{:.%dg}" % settings.TEXT_PRECISION
    lines = [title] if title else []
    for metric, row in summary.iterrows():
        lines.append(f"{metric:<10} {fmt.format(row['mean'])} ± {fmt.format(row['std'])}")
    return "\n".join(lines) + "\n"


def _metric_values(report) -> Dict[str, float]:
    return report.metrics() if isinstance(report, MetricReport) else dict(report)


def compare_reports(baseline, pruned) -> pd.DataFrame:
    """Absolute and relative change of every metric from the baseline to the pruned report.

    Args:
        baseline (MetricReport | dict): the unpruned reconstruction's report, or metric means
        pruned (MetricReport | dict): the pruned reconstruction's report, or metric means

    Returns:
        pd.DataFrame:
            one row per metric with `baseline`, `pruned`, `change` and `relative_change`
    """
    before_values, after_values = _metric_values(baseline), _metric_values(pruned)
    rows = {}
    for metric in settings.METRIC_COLUMNS:
        before, after = before_values[metric], after_values[metric]
        relative = (after - before) / abs(before) if before else math.nan
        rows[metric] = {
            "baseline": before,
            "pruned": after,
            "change": after - before,
            "relative_change": relative,
        }
    return pd.DataFrame.from_dict(rows, orient="index")


def pruning_outcomes(targets, scores, threshold, true_target=settings.TRUE_SEGMENT_TARGET):
    """Counts kept and discarded segments split by whether their target marks them as true.

    Args:
        targets (np.ndarray): soft targets per segment
        scores (np.ndarray): predicted confidences per segment
        threshold (float): pruning threshold
        true_target (float): targets at or above this label the segment true

    Returns:
        dict:
            counts of `kept_true`, `kept_false`, `discarded_true` and `discarded_false`
    """
    is_true = np.asarray(targets) >= true_target
    kept = np.asarray(scores) >= threshold
    return {
        "kept_true": int(np.count_nonzero(kept & is_true)),
        "kept_false": int(np.count_nonzero(kept & ~is_true)),
        "discarded_true": int(np.count_nonzero(~kept & is_true)),
        "discarded_false": int(np.count_nonzero(~kept & ~is_true)),
    }


def score_auc(targets, scores, true_target=settings.TRUE_SEGMENT_TARGET) -> Optional[float]:
    """ROC AUC of the scores against the binarized targets, None with only one class present."""
    labels = np.asarray(targets) >= true_target
    if labels.all() or not labels.any():
        return None
    return float(roc_auc_score(labels, np.asarray(scores)))
