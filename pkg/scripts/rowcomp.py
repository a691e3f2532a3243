"""
Command-line entry point for the row-completion engine.

    python scripts/rowcomp.py link      TABLE.csv       [options]
    python scripts/rowcomp.py complete  TABLE.csv       [options]
    python scripts/rowcomp.py evaluate  BENCHMARK_DIR   [options]
    python scripts/rowcomp.py ingest    DUMP.nt OUT.tsv

JSON goes to stdout, summaries and logs to stderr.
Exit codes: 0 success, 1 pipeline-stage failure, 2 configuration/IO/format error.
"""

import argparse
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from evalharness.metrics.compute import print_metrics
from evalharness.perf.latency import StageTimer
from src.config import load_config
from src.errors import PipelineStageError, RowCompletionError
from src.pipeline import cmd_complete, cmd_evaluate, cmd_ingest, cmd_link
from src.utils import dumps_json, setup_logging

logger = logging.getLogger("scripts.rowcomp")

EXIT_OK = 0
EXIT_STAGE = 1
EXIT_USAGE = 2


def apply_overrides(config, args):
    """Copy command-line flags onto the loaded config, then re-validate."""
    if getattr(args, "kb", None):
        config.kb_path = args.kb
    if getattr(args, "embeddings", None):
        config.embeddings_path = args.embeddings
    if getattr(args, "clients", None):
        if args.clients == "http":
            config.clients.generator = "http"
            config.clients.search = "http"
        elif args.clients.startswith("mock:"):
            fixtures = Path(args.clients[len("mock:"):])
            config.clients.generator = f"mock:{fixtures / 'generations.json'}"
            config.clients.search = f"mock:{fixtures / 'search.json'}"
        else:
            raise ValueError(f"--clients must be 'http' or 'mock:<dir>', got {args.clients!r}")
    if getattr(args, "detector", None):
        config.suggestion.detector = args.detector
    if getattr(args, "contamination", None) is not None:
        config.suggestion.contamination = args.contamination
    if getattr(args, "k_per_seed", None) is not None:
        config.suggestion.k_per_seed = args.k_per_seed
    if getattr(args, "fill_threshold", None) is not None:
        config.gap_filling.fill_threshold = args.fill_threshold
    if getattr(args, "seed_rows", None) is not None:
        config.evaluation.seed_rows = args.seed_rows
    if getattr(args, "suggestions", None) is not None:
        config.evaluation.suggestions_requested = args.suggestions
    if getattr(args, "seed", None) is not None:
        config.reproducibility.seed = args.seed
    config.validate()
    return config


def add_pipeline_options(parser):
    parser.add_argument("--config", type=str, default=None, help="YAML/JSON config file (default: built-in defaults)")
    parser.add_argument("--kb", type=str, default=None, help="KB TSV file")
    parser.add_argument("--embeddings", type=str, default=None, help="Entity embedding file")
    parser.add_argument("--clients", type=str, default=None,
                        help="'http', or 'mock:<dir>' with generations.json and search.json")
    parser.add_argument("--seed-rows", type=int, default=None, help="Number of top rows used as seeds")
    parser.add_argument("--detector", type=str, default=None, choices=["knn", "lof"], help="Outlier detector")
    parser.add_argument("--contamination", type=float, default=None, help="Detector contamination in [0.01, 0.06]")
    parser.add_argument("--k-per-seed", type=int, default=None, help="Embedding neighbors per seed")
    parser.add_argument("--fill-threshold", type=float, default=None, help="Snippet similarity gate for fills")
    parser.add_argument("--suggestions", type=int, default=None, help="Number of suggested rows to complete")
    parser.add_argument("--seed", type=int, default=None, help="Random seed")
    parser.add_argument("--timings", action="store_true", help="Include stage timings in the JSON output")


def build_parser():
    parser = argparse.ArgumentParser(prog="rowcomp", description="Suggest and complete table rows from a knowledge base")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging (-v info, -vv debug)")
    parser.add_argument("-q", "--quiet", action="store_true", help="No summaries on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    link = sub.add_parser("link", help="Link a table to the KB")
    link.add_argument("table", type=str, help="Header-less CSV table")
    add_pipeline_options(link)

    complete = sub.add_parser("complete", help="Suggest new rows and fill their cells")
    complete.add_argument("table", type=str, help="Header-less CSV table")
    add_pipeline_options(complete)

    evaluate = sub.add_parser("evaluate", help="Evaluate on a benchmark directory")
    evaluate.add_argument("benchmark", type=str, help="Benchmark directory")
    evaluate.add_argument("--stability", action="store_true", help="Average over every seed combination of the top rows")
    add_pipeline_options(evaluate)

    ingest = sub.add_parser("ingest", help="Convert an N-Triples export to the KB TSV format")
    ingest.add_argument("input", type=str, help="N-Triples file")
    ingest.add_argument("output", type=str, help="Output KB TSV file")
    ingest.add_argument("--keep-first", action="store_true",
                        help="Keep the first value of a multi-valued property instead of failing")
    return parser


def run(args) -> dict:
    if args.command == "ingest":
        return cmd_ingest(args.input, args.output, keep_first=args.keep_first)

    config = apply_overrides(load_config(args.config), args)
    if not args.quiet:
        config.print_summary()
    timer = StageTimer()

    if args.command == "link":
        result = cmd_link(args.table, config, timer)
    elif args.command == "complete":
        result = cmd_complete(args.table, config, timer=timer)
    else:
        result = cmd_evaluate(args.benchmark, config, stability=args.stability, timer=timer,
                              progress=not args.quiet)
        if not args.quiet:
            print_metrics(result)

    if not args.quiet:
        timer.print_summary()
    if args.timings:
        result["timings"] = timer.to_dict()
    return result


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)

    try:
        result = run(args)
    except PipelineStageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (RowCompletionError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    sys.stdout.write(dumps_json(result))
    sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
