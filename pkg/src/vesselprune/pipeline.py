import dataclasses
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from alpineer import io_utils, misc_utils
from tqdm.auto import tqdm

from vesselprune import settings
from vesselprune.config import ConfigError, PipelineConfig, derive_seed
from vesselprune.dual_graph import DualGraph, featurize_forest, segments_from_dual
from vesselprune.gat import init_model, load_checkpoint, predict, save_checkpoint, train
from vesselprune.heatmap_synth import compute_heatmap, corrupt_heatmap, generate_forest
from vesselprune.json_utils import read_json_file, write_json_file
from vesselprune.manifest import verify_manifest, write_manifest
from vesselprune.prune_eval import (
    MetricReport,
    compare_reports,
    evaluate_pipeline,
    format_summary,
    prune,
    pruning_outcomes,
    reports_to_frame,
    score_auc,
    summarize_reports,
)
from vesselprune.swc_utils import read_swc, write_swc
from vesselprune.tracer import trace_all
from vesselprune.volume_utils import load_feature_stack, read_volume, write_volume

SWEEP_FIELDS = {
    "nmd": "dual_graph.nmd",
    "sampling_length": "dual_graph.sampling_length",
    "threshold": "gat.threshold",
}


class SweepCheckError(RuntimeError):
    """Raised when a sweep violates a monotonicity property it is expected to satisfy."""


def _log(message):
    logging.info(f'{datetime.now().strftime("%d/%m/%Y %H:%M:%S")} -- {message}')


def scene_name(index) -> str:
    return f"scene_{index:03d}"


class Layout:
    """Resolves stage directories across output roots.

    Stages are written below the first root; inputs are read from the first root holding the
    stage, so sweep points can share upstream stages with the base run.

    Args:
        roots (list): directories searched in order
        strict (bool): verify the manifest of every stage read from
    """

    def __init__(self, roots, strict=False):
        self.roots = [str(r) for r in roots]
        self.strict = strict

    def output_dir(self, stage) -> str:
        """A fresh, empty directory for `stage` below the first root."""
        stage_dir = os.path.join(self.roots[0], stage)
        if os.path.exists(stage_dir):
            shutil.rmtree(stage_dir)
        os.makedirs(stage_dir)
        return stage_dir

    def input_dir(self, stage) -> str:
        for root in self.roots:
            stage_dir = os.path.join(root, stage)
            if os.path.isdir(stage_dir):
                if self.strict:
                    verify_manifest(stage_dir)
                return stage_dir
        raise FileNotFoundError(
            f"A bad path, {os.path.join(self.roots[0], stage)}, was provided.\n"
            f"Run the {stage} stage first, searched {self.roots}"
        )

    def input_path(self, stage, file_name) -> str:
        path = os.path.join(self.input_dir(stage), file_name)
        io_utils.validate_paths(path)
        return path


def _as_layout(out_dir, strict) -> Layout:
    return out_dir if isinstance(out_dir, Layout) else Layout([out_dir], strict)


def _finish(layout: Layout, stage, stage_dir, config: PipelineConfig, inputs=None):
    write_manifest(stage_dir, stage, config.config_hash(), config.rng_seed, inputs)
    _log(f"Finished stage {stage} in {stage_dir}")
    return stage_dir


def cmd_synth(config: PipelineConfig, out_dir, strict=False):
    """Generates the ground-truth forests of all scenes as SWC files."""
    layout = _as_layout(out_dir, strict)
    stage_dir = layout.output_dir("synth")
    _log(f"Starting stage synth for {config.benchmark.n_scenes} scenes")
    for i in tqdm(range(config.benchmark.n_scenes), desc="Generating forests"):
        seed = derive_seed(config.rng_seed, "synth", i)
        params = dataclasses.replace(config.synth, rng_seed=seed)
        write_swc(os.path.join(stage_dir, f"{scene_name(i)}.swc"), generate_forest(params))
    return _finish(layout, "synth", stage_dir, config)


def cmd_heatmap(config: PipelineConfig, out_dir, strict=False):
    """Writes the clean and the corrupted centerline heatmap of every scene."""
    layout = _as_layout(out_dir, strict)
    inputs = {
        f"synth/{scene_name(i)}.swc": layout.input_path("synth", f"{scene_name(i)}.swc")
        for i in range(config.benchmark.n_scenes)
    }
    stage_dir = layout.output_dir("heatmap")
    _log("Starting stage heatmap")
    synth = config.synth
    for i in tqdm(range(config.benchmark.n_scenes), desc="Computing heatmaps"):
        gt = read_swc(inputs[f"synth/{scene_name(i)}.swc"])
        clean = compute_heatmap(gt, synth.volume_dims, synth.spacing, config.heatmap)
        seed = derive_seed(config.rng_seed, "heatmap", i)
        corrupted = corrupt_heatmap(clean, seed, config.corruption, config.heatmap, tree=gt)
        write_volume(os.path.join(stage_dir, f"{scene_name(i)}_clean.cvol"), clean)
        write_volume(os.path.join(stage_dir, f"{scene_name(i)}.cvol"), corrupted)
    return _finish(layout, "heatmap", stage_dir, config, inputs)


def cmd_trace(config: PipelineConfig, out_dir, strict=False):
    """Traces the over-complete initial forest of every corrupted heatmap."""
    layout = _as_layout(out_dir, strict)
    inputs = {
        f"heatmap/{scene_name(i)}.cvol": layout.input_path("heatmap", f"{scene_name(i)}.cvol")
        for i in range(config.benchmark.n_scenes)
    }
    stage_dir = layout.output_dir("trace")
    _log("Starting stage trace")
    summary = {}
    for i in tqdm(range(config.benchmark.n_scenes), desc="Tracing"):
        forest = trace_all(read_volume(inputs[f"heatmap/{scene_name(i)}.cvol"]), config.tracer)
        write_swc(os.path.join(stage_dir, f"{scene_name(i)}.swc"), forest)
        summary[scene_name(i)] = {
            "n_nodes": len(forest),
            "n_roots": len(forest.roots),
            "empty_forest": len(forest) == 0,
        }
        if len(forest) == 0:
            _log(f"Scene {scene_name(i)} traced to an empty forest")
    write_json_file(os.path.join(stage_dir, "trace_summary.json"), summary)
    return _finish(layout, "trace", stage_dir, config, inputs)


def _external_features(inputs, name, n_layers):
    if not n_layers:
        return None
    return load_feature_stack([inputs[f"features/{name}_{k}"] for k in range(n_layers)])


def cmd_featurize(config: PipelineConfig, out_dir, strict=False):
    """Segments every traced forest and writes its labeled, featurized dual graph."""
    layout = _as_layout(out_dir, strict)
    inputs = {}
    for i in range(config.benchmark.n_scenes):
        name = scene_name(i)
        inputs[f"trace/{name}.swc"] = layout.input_path("trace", f"{name}.swc")
        inputs[f"heatmap/{name}.cvol"] = layout.input_path("heatmap", f"{name}.cvol")
        inputs[f"synth/{name}.swc"] = layout.input_path("synth", f"{name}.swc")
        feature_paths = config.dual_graph.feature_paths(name)
        if feature_paths:
            io_utils.validate_paths(feature_paths)
        for k, path in enumerate(feature_paths):
            inputs[f"features/{name}_{k}"] = path
    n_layers = len(config.dual_graph.feature_volumes)
    stage_dir = layout.output_dir("featurize")
    _log(f"Starting stage featurize with {config.dual_graph}")
    summary = {}
    for i in tqdm(range(config.benchmark.n_scenes), desc="Featurizing"):
        name = scene_name(i)
        forest, _, graph = featurize_forest(
            read_swc(inputs[f"trace/{name}.swc"]),
            read_volume(inputs[f"heatmap/{name}.cvol"]),
            config.dual_graph,
            gt=read_swc(inputs[f"synth/{name}.swc"]),
            stack=_external_features(inputs, name, n_layers),
        )
        write_swc(os.path.join(stage_dir, f"{name}_forest.swc"), forest)
        write_json_file(os.path.join(stage_dir, f"{name}_dual.json"), graph.to_json_dict())
        summary[name] = {
            "n_segments": graph.n_nodes,
            "n_edges": len(graph.edges),
            "n_components": graph.n_components(),
            "n_roots": len(forest.roots),
        }
    write_json_file(os.path.join(stage_dir, "featurize_summary.json"), summary)
    return _finish(layout, "featurize", stage_dir, config, inputs)


def _read_dual(path) -> DualGraph:
    return DualGraph.from_json_dict(read_json_file(path))


def cmd_train(config: PipelineConfig, out_dir, strict=False):
    """Trains the attention network on the training scenes and writes the checkpoint."""
    layout = _as_layout(out_dir, strict)
    inputs = {
        f"featurize/{scene_name(i)}_dual.json": layout.input_path(
            "featurize", f"{scene_name(i)}_dual.json"
        )
        for i in range(config.benchmark.n_train)
    }
    graphs = [_read_dual(path) for path in inputs.values()]
    populated = [g for g in graphs if g.n_nodes]
    if not populated:
        raise ValueError("None of the training scenes produced a branch segment")

    stage_dir = layout.output_dir("train")
    _log(f"Starting stage train on {len(populated)} graphs with {config.gat}")
    model = init_model(
        populated[0].features.shape[1], config.gat, derive_seed(config.rng_seed, "train", 0)
    )
    model, history = train(
        model, populated, rng_seed=derive_seed(config.rng_seed, "train", 1), verbose=True
    )
    save_checkpoint(os.path.join(stage_dir, "model.ckpt"), model)
    losses = pd.DataFrame({"epoch": np.arange(1, len(history) + 1), "loss": history})
    losses.to_csv(os.path.join(stage_dir, "loss_history.csv"), index=False, float_format="%.9g")
    return _finish(layout, "train", stage_dir, config, inputs)


def _test_scenes(config: PipelineConfig) -> List[int]:
    return list(range(config.benchmark.n_train, config.benchmark.n_scenes))


def cmd_prune(config: PipelineConfig, out_dir, strict=False):
    """Scores the test scenes' segments and removes those below the threshold."""
    layout = _as_layout(out_dir, strict)
    inputs = {"train/model.ckpt": layout.input_path("train", "model.ckpt")}
    for i in _test_scenes(config):
        name = scene_name(i)
        for suffix in ("_forest.swc", "_dual.json"):
            inputs[f"featurize/{name}{suffix}"] = layout.input_path("featurize", name + suffix)
    model = load_checkpoint(inputs["train/model.ckpt"])

    stage_dir = layout.output_dir("prune")
    threshold = config.gat.threshold
    _log(f"Starting stage prune at threshold {threshold}")
    for i in _test_scenes(config):
        name = scene_name(i)
        forest = read_swc(inputs[f"featurize/{name}_forest.swc"])
        graph = _read_dual(inputs[f"featurize/{name}_dual.json"])
        scores = predict(model, graph) if graph.n_nodes else np.zeros(0)
        pruned = prune(forest, segments_from_dual(forest, graph), scores, threshold)
        write_swc(os.path.join(stage_dir, f"{name}.swc"), pruned)
        scored = graph.replace(scores=scores)
        write_json_file(os.path.join(stage_dir, f"{name}_dual.json"), scored.to_json_dict())
    return _finish(layout, "prune", stage_dir, config, inputs)


def evaluate_files(pred_path, gt_path, config: PipelineConfig) -> MetricReport:
    """Report of an SWC reconstruction against an SWC ground truth."""
    return evaluate_pipeline(read_swc(pred_path), read_swc(gt_path), config.eval)


def cmd_eval(config: PipelineConfig, out_dir, strict=False, pred_path=None, gt_path=None):
    """Evaluates the baseline and pruned test reconstructions, or a single given pair.

    With `pred_path` and `gt_path`, writes `eval/report.json` for that pair only. Otherwise
    writes per-scene baseline and pruned reports, their mean ± std summary, the per-metric
    comparison, the pruning outcome counts and the score AUC.
    """
    layout = _as_layout(out_dir, strict)
    if (pred_path is None) != (gt_path is None):
        raise ConfigError("eval: a prediction and a ground truth SWC must be given together")
    if pred_path is not None:
        io_utils.validate_paths([pred_path, gt_path])
        stage_dir = layout.output_dir("eval")
        report = evaluate_files(pred_path, gt_path, config)
        write_json_file(os.path.join(stage_dir, "report.json"), report.to_json_dict())
        return _finish(layout, "eval", stage_dir, config, {"pred": pred_path, "gt": gt_path})

    inputs = {}
    for i in _test_scenes(config):
        name = scene_name(i)
        for stage, file_name in (
            ("synth", f"{name}.swc"),
            ("featurize", f"{name}_forest.swc"),
            ("prune", f"{name}.swc"),
            ("prune", f"{name}_dual.json"),
        ):
            inputs[f"{stage}/{file_name}"] = layout.input_path(stage, file_name)

    stage_dir = layout.output_dir("eval")
    _log("Starting stage eval")
    baseline, pruned, targets, scores = [], [], [], []
    outcomes = {}
    for i in _test_scenes(config):
        name = scene_name(i)
        gt = read_swc(inputs[f"synth/{name}.swc"])
        for kind, key, reports in (
            ("baseline", f"featurize/{name}_forest.swc", baseline),
            ("pruned", f"prune/{name}.swc", pruned),
        ):
            report = evaluate_pipeline(read_swc(inputs[key]), gt, config.eval)
            reports.append(report)
            write_json_file(os.path.join(stage_dir, f"{name}_{kind}.json"), report.to_json_dict())
        graph = _read_dual(inputs[f"prune/{name}_dual.json"])
        if graph.n_nodes:
            targets.append(graph.targets)
            scores.append(graph.scores)
            outcomes[name] = pruning_outcomes(graph.targets, graph.scores, config.gat.threshold)

    names = [scene_name(i) for i in _test_scenes(config)]
    frame = pd.concat(
        {"baseline": reports_to_frame(baseline, names), "pruned": reports_to_frame(pruned, names)}
    )
    frame.to_csv(os.path.join(stage_dir, "reports.csv"), float_format="%.9g")

    summaries = {"baseline": summarize_reports(baseline), "pruned": summarize_reports(pruned)}
    pd.concat(summaries, axis=1).to_csv(os.path.join(stage_dir, "summary.csv"), float_format="%.9g")
    with open(os.path.join(stage_dir, "summary.txt"), "w") as f:
        for kind, summary in summaries.items():
            f.write(format_summary(summary, title=kind))
    comparison = compare_reports(summaries["baseline"]["mean"], summaries["pruned"]["mean"])
    comparison.to_csv(os.path.join(stage_dir, "comparison.csv"), float_format="%.9g")

    pooled = score_auc(np.concatenate(targets), np.concatenate(scores)) if targets else None
    totals = {
        key: int(sum(counts[key] for counts in outcomes.values()))
        for key in ("kept_true", "kept_false", "discarded_true", "discarded_false")
    }
    evaluation = {
        "baseline": summaries["baseline"]["mean"].to_dict(),
        "pruned": summaries["pruned"]["mean"].to_dict(),
        "change": comparison["change"].to_dict(),
        "auc": pooled,
        "outcomes": {"total": totals, "per_scene": outcomes},
        "threshold": config.gat.threshold,
    }
    write_json_file(os.path.join(stage_dir, "evaluation.json"), _finite(evaluation))
    return _finish(layout, "eval", stage_dir, config, inputs)


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


STAGE_COMMANDS = {
    "synth": cmd_synth,
    "heatmap": cmd_heatmap,
    "trace": cmd_trace,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "prune": cmd_prune,
    "eval": cmd_eval,
}


def run_stage(stage, config: PipelineConfig, out_dir, strict=False):
    misc_utils.verify_in_list(stage=[stage], valid_stages=settings.STAGES)
    return STAGE_COMMANDS[stage](config, out_dir, strict)


def run_pipeline(config: PipelineConfig, out_dir, strict=False, stages=None) -> Dict:
    """Runs the stages in order and returns the evaluation summary.

    Args:
        config (PipelineConfig): the configuration
        out_dir (str): root of all stage directories
        strict (bool): verify upstream manifests before each stage
        stages (list): subset of `settings.STAGES`, defaults to all

    Returns:
        dict:
            contents of `eval/evaluation.json`
    """
    stages = settings.STAGES if stages is None else stages
    misc_utils.verify_in_list(stages=stages, valid_stages=settings.STAGES)
    for stage in settings.STAGES:
        if stage in stages:
            run_stage(stage, config, out_dir, strict)
    return read_json_file(os.path.join(out_dir, "eval", "evaluation.json"))


def _surviving_nodes(layout: Layout, config: PipelineConfig) -> int:
    return sum(
        len(read_swc(layout.input_path("prune", f"{scene_name(i)}.swc")))
        for i in _test_scenes(config)
    )


def _segment_count(layout: Layout, config: PipelineConfig) -> int:
    return sum(
        _read_dual(layout.input_path("featurize", f"{scene_name(i)}_dual.json")).n_nodes
        for i in range(config.benchmark.n_scenes)
    )


def _scene_targets(layout: Layout, config: PipelineConfig) -> List[np.ndarray]:
    graphs = [
        _read_dual(layout.input_path("featurize", f"{scene_name(i)}_dual.json"))
        for i in range(config.benchmark.n_scenes)
    ]
    return [g.targets if g.n_nodes else np.zeros(0) for g in graphs]


def _point_label(axis, value) -> str:
    return f"{axis}_{value:g}"


def _check_monotone(axis, values, series, increasing, what):
    order = np.argsort(values, kind="stable")
    for prev, cur in zip(order[:-1], order[1:]):
        before, after = np.asarray(series[prev]), np.asarray(series[cur])
        ok = np.all(after >= before) if increasing else np.all(after <= before)
        if not ok:
            direction = "non-decreasing" if increasing else "non-increasing"
            raise SweepCheckError(
                f"{what} is not {direction} in {axis} between {values[prev]} and {values[cur]}"
            )


def cmd_sweep(config: PipelineConfig, axis, values: Sequence[float], out_dir, strict=False):
    """Reruns the downstream stages for each value of an ablation axis.

    Synthesis, heatmaps and tracing run once below `out_dir` and are shared by every point. The
    threshold axis also shares featurizing and training. Points run in parallel threads.
    Before training, a node matching distance sweep checks that every segment target is
    non-decreasing in the distance and a sampling length sweep checks that segment counts are
    non-increasing in the length; a threshold sweep checks that the surviving node count is
    non-increasing in the threshold.

    Args:
        config (PipelineConfig): the base configuration
        axis (str): one of `settings.SWEEP_AXES`
        values (list): axis values, one full evaluation each
        out_dir (str): root directory of the sweep
        strict (bool): verify upstream manifests

    Returns:
        pd.DataFrame:
            one row per axis value with the pruned metric means, the baseline F1, the segment
            count and the surviving node count
    """
    misc_utils.verify_in_list(axis=[axis], valid_axes=settings.SWEEP_AXES)
    values = [float(v) for v in values]
    if not values:
        raise ValueError("A sweep needs at least one value")
    configs = [config.replace(SWEEP_FIELDS[axis], v) for v in values]

    base = Layout([out_dir], strict)
    for stage in ("synth", "heatmap", "trace"):
        if not os.path.exists(os.path.join(out_dir, stage, settings.MANIFEST_FILE_NAME)):
            run_stage(stage, config, base)

    sweep_dir = os.path.join(out_dir, f"sweep_{axis}")
    workers = config.benchmark.workers
    if axis == "threshold":
        shared = os.path.join(sweep_dir, "shared")
        os.makedirs(shared, exist_ok=True)
        shared_layout = Layout([shared, out_dir], strict)
        cmd_featurize(config, shared_layout)
        cmd_train(config, shared_layout)
        roots = [shared, out_dir]
    else:
        roots = [out_dir]

    layouts = []
    for v in values:
        point_dir = os.path.join(sweep_dir, _point_label(axis, v))
        os.makedirs(point_dir, exist_ok=True)
        layouts.append(Layout([point_dir] + roots, strict))

    def run(stages, i):
        for stage in stages:
            run_stage(stage, configs[i], layouts[i])

    with ThreadPoolExecutor(max_workers=workers) as pool:
        if axis != "threshold":
            list(pool.map(lambda i: run(["featurize"], i), range(len(values))))
            if axis == "nmd":
                targets = [np.concatenate(_scene_targets(lay, config)) for lay in layouts]
                _check_monotone(axis, values, targets, True, "Segment targets")
            else:
                counts = [_segment_count(lay, config) for lay in layouts]
                _check_monotone(axis, values, counts, False, "Segment count")
            list(pool.map(lambda i: run(["train"], i), range(len(values))))
        list(pool.map(lambda i: run(["prune", "eval"], i), range(len(values))))

    rows = []
    for v, lay, cfg in zip(values, layouts, configs):
        evaluation = read_json_file(os.path.join(lay.input_dir("eval"), "evaluation.json"))
        row = {axis: v}
        row.update({m: evaluation["pruned"][m] for m in settings.METRIC_COLUMNS})
        row["baseline_f1"] = evaluation["baseline"]["f1"]
        row["n_segments"] = _segment_count(lay, cfg)
        row["n_surviving_nodes"] = _surviving_nodes(lay, cfg)
        rows.append(row)
    table = pd.DataFrame(rows)

    if axis == "threshold":
        _check_monotone(
            axis, values, table["n_surviving_nodes"].to_numpy(), False, "Surviving node count"
        )

    table.to_csv(os.path.join(sweep_dir, f"sweep_{axis}.csv"), index=False, float_format="%.9g")
    with open(os.path.join(sweep_dir, f"sweep_{axis}.txt"), "w") as f:
        f.write(format_sweep(table, axis))
    _log(f"Finished sweep over {axis} with values {values}")
    return table


def format_sweep(table: pd.DataFrame, axis) -> str:
    """Fixed-precision text table, one row per axis value."""
    fmt = "{:.%dg}" % settings.TEXT_PRECISION
    columns = [axis] + settings.METRIC_COLUMNS
    lines = ["  ".join(f"{c:>16}" for c in columns)]
    for _, row in table.sort_values(axis, kind="stable").iterrows():
        cells = [fmt.format(row[c]) if row[c] is not None else "nan" for c in columns]
        lines.append("  ".join(f"{c:>16}" for c in cells))
    return "\n".join(lines) + "\n"
