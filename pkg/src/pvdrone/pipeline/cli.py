"""Command line entry point: ``pvdrone <command> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..core import PvdError
from ..detect.evaluation import Detection, evaluate_map, write_detections
from ..flow.estimator import estimate_flow
from ..flow.field import flow_to_rgb, read_flo, write_flo
from ..flow.metrics import flow_metrics
from ..imageio import read_gray, write_rgb
from ..slam.map import WorldMap
from ..slam.relocalization import RelocalizationFailed
from ..synthworld.scene import SceneModel, generate_scene
from .config import PipelineConfig
from .mapview import plot_topdown, write_boxes_csv, write_topdown_ppm
from .run import (
    PvdReport,
    detect_sequence,
    evaluate_pvd,
    run_benchmark,
    run_investigation,
    run_suspicion,
)
from .sequence import Sequence

EXIT_OK, EXIT_STAGE, EXIT_RELOC = 0, 2, 3

log = logging.getLogger("pvdrone")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(Path(args.config).read_text()) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _scene(args, cfg: PipelineConfig) -> SceneModel:
    """The scene of ``--data`` when given, else one simulated from the seed."""
    if getattr(args, "data", None):
        return SceneModel.from_json((Path(args.data) / "scene.json").read_text())
    return generate_scene(cfg.seed, cfg.scene)


def _sequence(args, scene: SceneModel, phase: str) -> Sequence:
    if getattr(args, "data", None):
        return Sequence.read(Path(args.data) / phase)
    return Sequence.from_scene(scene, phase)


def _truth_centers(scene: SceneModel) -> list:
    return [np.asarray(c.footprint(), dtype=float).mean(axis=0) for c in scene.gt_ipcs()]


# ---------------------------------------------------------------- commands

def cmd_simulate(args, cfg: PipelineConfig, out: Path) -> int:
    scene = generate_scene(cfg.seed, cfg.scene)
    _dump(out / "scene.json", scene.to_dict())
    _dump(out / "config.json", cfg.to_dict())
    for phase in ("suspicion", "investigation"):
        seq = Sequence.from_scene(scene, phase, keep_flow=True)
        seq.write(out / phase)
        log.info("wrote %d %s frames to %s", len(seq), phase, out / phase)
    return EXIT_OK


def cmd_flow(args, cfg: PipelineConfig, out: Path) -> int:
    I1, I2 = read_gray(args.image1), read_gray(args.image2)
    F = estimate_flow(I1, I2, cfg.flow)
    write_flo(out / "flow.flo", F)
    write_rgb(out / "flow.ppm", flow_to_rgb(F))
    if args.gt:
        m = flow_metrics(F, read_flo(args.gt))
        _dump(out / "flow_metrics.json", m)
        print(json.dumps(m, sort_keys=True))
    return EXIT_OK


def cmd_detect(args, cfg: PipelineConfig, out: Path) -> int:
    seq = Sequence.read(args.sequence)
    flows = None
    if all(f.flow is not None for f in seq.frames):
        flows = [f.flow for f in seq.frames]
    else:
        log.info("no .flo files for every frame; estimating flow")
    _, dets = detect_sequence(seq, cfg, flows)
    detections, truth = [], []
    for f, d in zip(seq.frames, dets):
        if f.pose is None:
            raise PvdError(f"frame {f.index} has no pose to place its boxes on the ground")
        detections += [Detection(f.index, b) for b in d.labels(f.pose)]
        truth += [Detection(f.index, b) for b in f.truth_boxes if b.category is not None]
    write_detections(out / "detections.jsonl", detections)
    metrics = evaluate_map(detections, truth)
    _dump(out / "detect_metrics.json", metrics)
    print(f"{len(detections)} detections, mAP@0.50:0.95 = {metrics['mAP']:.4f}")
    return EXIT_OK


def cmd_suspect(args, cfg: PipelineConfig, out: Path) -> int:
    scene = _scene(args, cfg)
    wmap = run_suspicion(_sequence(args, scene, "suspicion"), cfg)
    (out / "map.json").write_text(wmap.to_json() + "\n")
    write_topdown_ppm(out / "map_suspicion.ppm", wmap, scene.parking_spots)
    cands = [b.to_dict() for b in wmap.candidates()]
    _dump(out / "candidates.json", cands)
    print(f"{len(wmap.keyframes)} keyframes, {len(wmap.points)} map points, {len(cands)} IPC candidates")
    return EXIT_OK


def _write_report(out: Path, report: PvdReport, wmap: WorldMap, scene: SceneModel | None, truth) -> None:
    (out / "report.json").write_text(report.to_json() + "\n")
    _dump(out / "timing.json", {k: round(v, 3) for k, v in sorted(report.timing_ms.items())})
    (out / "map.json").write_text(wmap.to_json() + "\n")
    spots = scene.parking_spots if scene is not None else []
    write_topdown_ppm(out / "map.ppm", wmap, spots, truth)
    plot_topdown(out / "map.png", wmap, spots, truth,
                 f"P {report.precision:.2f}  R {report.recall:.2f}  F1 {report.f1:.2f}")
    confirmed = wmap.confirmed()
    matched = [confirmed[i].id for i, _, _ in evaluate_pvd(confirmed, truth)["matches"]] if truth else []
    write_boxes_csv(out / "boxes.csv", wmap, matched)


def cmd_investigate(args, cfg: PipelineConfig, out: Path) -> int:
    scene = _scene(args, cfg)
    map_path = Path(args.map) if args.map else out / "map.json"
    wmap = WorldMap.from_json(map_path.read_text())
    seq = _sequence(args, scene, "investigation")
    truth = _truth_centers(scene)
    timing: dict = {}
    code, status = EXIT_OK, "ok"
    try:
        run_investigation(wmap, seq, cfg, timing)
    except RelocalizationFailed as e:
        log.error("relocalization failed: %s", e)
        code, status = EXIT_RELOC, "relocalization_failed"
    report = PvdReport.from_map(wmap, truth, cfg.seed, status, timing)
    _write_report(out, report, wmap, scene, truth)
    print(f"confirmed {len(report.confirmed)} IPCs; precision {report.precision:.3f} "
          f"recall {report.recall:.3f} F1 {report.f1:.3f}")
    return code


def cmd_eval(args, cfg: PipelineConfig, out: Path) -> int:
    if args.report:
        if not args.data:
            raise ValueError("eval --report needs --data with the scene.json of the run")
        report = json.loads(Path(args.report).read_text())
        scene = _scene(args, cfg)
        scores = evaluate_pvd([np.array(b["center"]) for b in report["confirmed_ipcs"]], _truth_centers(scene))
        _dump(out / "eval.json", scores)
        print(f"precision {scores['precision']:.3f} recall {scores['recall']:.3f} F1 {scores['f1']:.3f}")
        return EXIT_OK

    def progress(row):
        print(f"{row['scenario']:>18}  tp {row['tp']} fp {row['fp']} fn {row['fn']}  {row['seconds']:.1f} s")

    res = run_benchmark(args.scenarios, cfg, cfg.seed, progress)
    _dump(out / "benchmark.json", {k: v for k, v in res.items() if k != "seconds"})
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(res["scenarios"][0]))
        w.writeheader()
        w.writerows(res["scenarios"])
    print(f"precision {res['precision']:.3f} recall {res['recall']:.3f} F1 {res['f1']:.3f} "
          f"over {len(res['scenarios'])} scenarios in {res['seconds']:.1f} s")
    return EXIT_OK


def cmd_demo(args, cfg: PipelineConfig, out: Path) -> int:
    scene = generate_scene(cfg.seed, cfg.scene)
    _dump(out / "scene.json", scene.to_dict())
    timing: dict = {}
    wmap = run_suspicion(Sequence.from_scene(scene, "suspicion"), cfg, timing)
    print(f"suspicion: {len(wmap.keyframes)} keyframes, {len(wmap.candidates())} IPC candidates")
    truth = _truth_centers(scene)
    code, status = EXIT_OK, "ok"
    try:
        run_investigation(wmap, Sequence.from_scene(scene, "investigation"), cfg, timing)
    except RelocalizationFailed as e:
        log.error("relocalization failed: %s", e)
        code, status = EXIT_RELOC, "relocalization_failed"
    report = PvdReport.from_map(wmap, truth, cfg.seed, status, timing)
    _write_report(out, report, wmap, scene, truth)
    print(f"investigation: confirmed {len(report.confirmed)} of {len(truth)} IPCs; "
          f"precision {report.precision:.3f} recall {report.recall:.3f} F1 {report.f1:.3f}")
    print(f"outputs in {out}")
    return code


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with PipelineConfig fields")
    common.add_argument("--seed", type=int, help="seed for every stochastic stage")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="pvdrone", description="Suspect-and-investigate parking violation detection "
                                "on synthetic drone passes.")
    p.add_argument("--config", default=None, help="JSON file with PipelineConfig fields")
    p.add_argument("--seed", type=int, default=None, help="seed for every stochastic stage")
    p.add_argument("--out", default="pvdrone_out", help="output directory (default: pvdrone_out)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="render both passes of a seeded scene to a directory")

    s = sub.add_parser("flow", parents=[common], help="estimate flow between two images")
    s.add_argument("image1")
    s.add_argument("image2")
    s.add_argument("--gt", help="ground-truth .flo to score against")

    s = sub.add_parser("detect", parents=[common], help="classify car proposals of a sequence directory")
    s.add_argument("sequence", help="a phase directory written by simulate")

    s = sub.add_parser("suspect", parents=[common], help="map the suspicion pass and mark IPC candidates")
    s.add_argument("--data", help="directory written by simulate (default: simulate from the seed)")

    s = sub.add_parser("investigate", parents=[common], help="relocalize the second pass and confirm IPCs")
    s.add_argument("--data", help="directory written by simulate (default: simulate from the seed)")
    s.add_argument("--map", help="map.json from suspect (default: OUT/map.json)")

    s = sub.add_parser("eval", parents=[common], help="run the scenario benchmark, or score one report")
    s.add_argument("--scenarios", type=int, default=20)
    s.add_argument("--report", help="report.json to score instead of running the benchmark")
    s.add_argument("--data", help="directory with the scene.json the report belongs to")

    sub.add_parser("demo", parents=[common], help="simulate, suspect and investigate in one go")
    return p


COMMANDS = {
    "simulate": cmd_simulate, "flow": cmd_flow, "detect": cmd_detect, "suspect": cmd_suspect,
    "investigate": cmd_investigate, "eval": cmd_eval, "demo": cmd_demo,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except RelocalizationFailed as e:
        print(f"error: relocalization failed: {e}", file=sys.stderr)
        return EXIT_RELOC
    except (PvdError, ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
