"""
eval: score generated videos against their scenes and write an aggregate report.
"""

import argparse
import logging
from pathlib import Path
from typing import List

from app.commands.common import prepare_output
from app.config.settings import settings
from app.models.errors import EXIT_DATA, EXIT_OK
from app.models.report import EvalReport, SceneFailure
from app.services.evaluation import aggregate, evaluate_scene, render_error_plot
from app.services.exceptions import EmptyInputError, PipelineError
from app.services.pipeline import load_dataset
from app.services.scene_io import read_frames, write_json

logger = logging.getLogger(__name__)

REPORT_NAME = "eval_report.json"


def add_parser(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("eval", parents=parents, help="Evaluate generated videos")
    parser.add_argument("--generated", required=True, help="Directory with <scene_id>/frames/ per scene")
    parser.add_argument("--data", help="Dataset directory (default: settings data_dir)")
    parser.add_argument("--threshold", type=float, help="Residual above which a recovered pose is unreliable")
    parser.add_argument("--workers", type=int, help="Threads for pose recovery")
    parser.add_argument("--plot", action="store_true", help="Write per-scene SVG error curves")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    """
    Evaluate every dataset scene. Scenes without generated frames are listed
    as failures; the aggregate report is always written.

    Returns:
        0 when at least one scene was evaluated, 2 when some scenes failed
        and none succeeded

    Raises:
        EmptyInputError: The dataset lists no scenes (after writing an empty report)
    """
    data_dir = Path(args.data or settings.data_dir)
    generated = Path(args.generated)
    out = prepare_output(Path(args.out or Path(settings.runs_dir) / "eval"), REPORT_NAME, args.force)

    reports: List[EvalReport] = []
    failures: List[SceneFailure] = []
    scenes = load_dataset(data_dir)
    for sid, scene in scenes:
        try:
            frames = read_frames(generated / sid / "frames", scene.num_frames)
            report = evaluate_scene(frames, scene, scene_id=sid, threshold=args.threshold, workers=args.workers)
        except PipelineError as exc:
            logger.warning(f"Scene {sid} not evaluated: {exc}", extra={"scene_id": sid})
            failures.append(SceneFailure(scene_id=sid, code=exc.code.value, message=str(exc)))
            continue
        reports.append(report)
        if args.plot:
            render_error_plot(report, out / "plots" / f"{sid}.svg")

    summary = aggregate(reports, failures)
    write_json(out / REPORT_NAME, summary.model_dump(mode="json"))
    logger.info(
        f"Evaluated {summary.num_scenes} scenes ({len(failures)} failed), report at {out / REPORT_NAME}"
    )

    if not scenes:
        raise EmptyInputError(f"No scenes listed in {data_dir}", field="data", value=str(data_dir))
    if not reports:
        return EXIT_DATA
    return EXIT_OK
