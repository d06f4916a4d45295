"""Command line entry point: python -m app.cli {run,sweep,topn-study,heatmap,score,serve}."""
import argparse
import json
import logging
import sys
from typing import List, Optional

from app.core.config import CLI_SPE_METHODS, Picking, PipelineConfig, load_config
from app.core.errors import AugmentError, ConfigError
from app.core.logging import configure_logging
from app.services import pipeline
from app.services.scorers import make_scorer

logger = logging.getLogger("augment")


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON or YAML config file; flags override its values")
    parser.add_argument("--annotations", help="COCO annotation file of the few-shot split")
    parser.add_argument("--shot-list", help="newline-delimited annotation ids selecting the k-shot subset")
    parser.add_argument("--shots", type=int, help="declared k of the k-shot split")
    parser.add_argument("--category", action="append", dest="categories", help="keep only this category (repeatable)")
    parser.add_argument("--spe", choices=sorted(CLI_SPE_METHODS), help="spatial prior extrapolation method")
    parser.add_argument("--alpha", type=int, help="generated layouts per real layout")
    parser.add_argument("--batch", type=int, help="images synthesized per layout")
    parser.add_argument("--top-n", type=int, help="images kept per layout")
    parser.add_argument("--picking", choices=[p.value for p in Picking])
    parser.add_argument("--no-merge-real", action="store_true", default=None, help="emit generated images only")
    parser.add_argument("--llm-endpoint")
    parser.add_argument("--llm-model")
    parser.add_argument("--lis-endpoint")
    parser.add_argument("--lis-command", help="local synthesis command (JSON on stdin and stdout)")
    parser.add_argument("--scorer", help="'mock' or a CLIP model id")
    parser.add_argument("--device", help="torch device of the CLIP scorer")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--mock", action="store_true", default=None, help="use mock LLM, synthesis and scorer")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="augment", description="Few-shot detection data augmentation")
    parser.add_argument("--log-level", default="INFO")
    commands = parser.add_subparsers(dest="command", required=True)

    run_parser = commands.add_parser("run", help="generate, score and pick an augmented dataset")
    _add_pipeline_flags(run_parser)

    sweep_parser = commands.add_parser("sweep", help="one dataset per augmentation ratio")
    _add_pipeline_flags(sweep_parser)
    sweep_parser.add_argument("--ratios", type=int, nargs="+", help="augmentation ratios (default 1 2 4 8 16)")

    study_parser = commands.add_parser("topn-study", help="one dataset per top-n value")
    _add_pipeline_flags(study_parser)
    study_parser.add_argument("--values", type=int, nargs="+", default=[1, 4, 8])
    study_parser.add_argument("--study-batch", type=int, help="batch size of the study (default 8)")

    heatmap_parser = commands.add_parser("heatmap", help="per-category box heatmaps of a COCO file")
    heatmap_parser.add_argument("--annotations", required=True)
    heatmap_parser.add_argument("--out", required=True)
    heatmap_parser.add_argument("--resolution", type=int, nargs=2, default=[64, 64], metavar=("W", "H"))
    heatmap_parser.add_argument("--label", default="dataset")

    score_parser = commands.add_parser("score", help="LACS and CS-Crop of an existing COCO dataset")
    score_parser.add_argument("--annotations", required=True)
    score_parser.add_argument("--images", help="image root (default: the annotation file's directory)")
    score_parser.add_argument("--scorer", default="mock")
    score_parser.add_argument("--device", default="cpu")
    score_parser.add_argument("--out", required=True)

    serve_parser = commands.add_parser("serve", help="run the HTTP API")
    serve_parser.add_argument("--host", default="127.0.0.1")
    serve_parser.add_argument("--port", type=int, default=8080)
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        "annotations_path": args.annotations,
        "shot_list_path": args.shot_list,
        "shots": args.shots,
        "category_filter": args.categories,
        "spe_method": args.spe,
        "alpha": args.alpha,
        "lis_batch": args.batch,
        "top_n": args.top_n,
        "picking": args.picking,
        "merge_real": False if args.no_merge_real else None,
        "seed": args.seed,
        "out_dir": args.out,
        "mock": args.mock,
        "sweep": getattr(args, "ratios", None),
        "topn_study": getattr(args, "values", None) if args.command == "topn-study" else None,
        "topn_batch": getattr(args, "study_batch", None),
        "llm": {"endpoint": args.llm_endpoint, "model": args.llm_model},
        "lis": {"endpoint": args.lis_endpoint, "command": args.lis_command},
        "scorer": {"model_id": args.scorer, "device": args.device},
    }
    return load_config(args.config, overrides)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    try:
        if args.command == "serve":
            import uvicorn

            uvicorn.run("app.main:app", host=args.host, port=args.port)
            return 0
        if args.command == "heatmap":
            written = pipeline.dataset_heatmaps(args.annotations, args.out, tuple(args.resolution), args.label)
            result = {name: [str(p) for p in paths] for name, paths in written.items()}
        elif args.command == "score":
            scorer = make_scorer(args.scorer, args.device)
            result = pipeline.score_dataset(args.annotations, scorer, args.out, args.images)
        else:
            config = config_from_args(args)
            if args.command == "sweep":
                result = pipeline.sweep_ratios(config)
            elif args.command == "topn-study":
                result = pipeline.topn_study(config)
            else:
                result = pipeline.run(config).summary
    except ConfigError as err:
        logger.error("%s", err)
        return 2
    except AugmentError as err:
        logger.error("%s", err)
        return 1

    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
