import argparse
import json
import logging
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from .config import settings
from .exceptions import DivergenceError, ReconLabError
from .logging_config import setup_logging
from .models.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2
EXIT_DIVERGED = 3


def load_config(path: str | Path, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    """
    Read a TOML experiment config and apply command-line overrides.

    Raises:
        FileNotFoundError: the config file does not exist
        tomllib.TOMLDecodeError: the file is not valid TOML
        ValidationError: a field is missing or out of range
    """
    with open(path, "rb") as handle:
        raw = tomllib.load(handle)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    return ExperimentConfig.model_validate(raw)


def _format_validation(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        where = ".".join(str(p) for p in err["loc"]) or "config"
        lines.append(f"  {where}: {err['msg']}")
    return "\n".join(lines)


def _run(args: argparse.Namespace) -> int:
    from .controllers.experiment_controller import experiment_controller

    if args.threads is not None:
        settings.threads = args.threads
    try:
        config = load_config(args.config, args.seed, args.out)
    except FileNotFoundError:
        print(f"Config file not found: {args.config}", file=sys.stderr)
        return EXIT_INVALID
    except tomllib.TOMLDecodeError as e:
        print(f"Cannot parse {args.config}: {str(e)}", file=sys.stderr)
        return EXIT_INVALID
    except ValidationError as e:
        print(f"Invalid config {args.config}:\n{_format_validation(e)}", file=sys.stderr)
        return EXIT_INVALID

    try:
        response = experiment_controller.run(config)
    except DivergenceError as e:
        print(f"Diverged: {str(e)} (diagnostics in {experiment_controller.output_dir_for(config)})",
              file=sys.stderr)
        return EXIT_DIVERGED
    except ReconLabError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        print(f"{type(e).__name__}: {str(e)}", file=sys.stderr)
        return EXIT_INVALID

    if not args.quiet:
        print(json.dumps(response.model_dump(mode="json"), indent=2, default=str))
    return EXIT_OK if response.status == "ok" else EXIT_FAILED


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    host = args.host or settings.host
    port = args.port or settings.port
    print(f"Starting {settings.app_name} on http://{host}:{port}")
    print(f"Documentation: http://{host}:{port}/docs")
    uvicorn.run(
        "app.main:app",
        host=host,
        port=port,
        reload=settings.debug,
        log_level="info",
        access_log=True
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recon-lab", description=settings.app_name)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run one experiment from a TOML config")
    run.add_argument("config", help="Path to the experiment config")
    run.add_argument("--seed", type=int, default=None, help="Override the config seed")
    run.add_argument("--out", default=None, help="Output directory for the artifacts")
    run.add_argument("--threads", type=int, default=None, help="Worker threads for noise sampling")
    run.add_argument("--quiet", action="store_true", help="Only log warnings and print nothing on success")
    run.set_defaults(handler=_run)

    serve = sub.add_parser("serve", help="Serve the experiment API")
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    serve.set_defaults(handler=_serve, quiet=False)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(quiet=args.quiet)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
