"""Command line surface: export a store, lint an existing one.

Exit codes: 0 on success, 1 for usage or job configuration errors, 2
when a store fails export, reading or validation.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ExportError
from .export import DEFAULT_PROMPTS, ExportJob, export_analysis_requests, validate_store

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_BAD_STORE = 2

log = logging.getLogger("rcbexport.cli")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="rcbexport", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ex = sub.add_parser("export", help="probe a backend over images and write a replay store")
    ex.add_argument("images", nargs="+", help="image files (.npy grids or any bytes)")
    ex.add_argument("--out", required=True, help="store directory to create")
    ex.add_argument("--model", default="stub", help="backend identifier, e.g. stub:d=32,seed=1")
    ex.add_argument("--k-top", type=int, default=50, help="logit ids kept per record")
    ex.add_argument("--grid", type=int, default=4, help="grid side for byte-embedded images")
    ex.add_argument("--prompt-single", default=DEFAULT_PROMPTS["single"])
    ex.add_argument("--prompt-region", default=DEFAULT_PROMPTS["region"])
    ex.add_argument("--prompt-image", default=DEFAULT_PROMPTS["image"])
    ex.add_argument(
        "--validate", action="store_true",
        help="re-read and lint the store after committing it",
    )

    va = sub.add_parser("validate", help="re-read a store and lint it")
    va.add_argument("store", help="store directory to check")
    return p


def _cmd_export(args) -> int:
    job = ExportJob(
        model_id=args.model,
        images=args.images,
        out_dir=args.out,
        prompts={
            "single": args.prompt_single,
            "region": args.prompt_region,
            "image": args.prompt_image,
        },
        k_top=args.k_top,
        grid_side=args.grid,
    )
    root = export_analysis_requests(job)
    print(f"committed store at {root}")
    if args.validate:
        return _report(validate_store(root))
    return EXIT_OK


def _cmd_validate(args) -> int:
    return _report(validate_store(args.store))


def _report(problems: list[str]) -> int:
    if problems:
        for p in problems:
            print(f"PROBLEM: {p}", file=sys.stderr)
        print(f"store is invalid ({len(problems)} problems)", file=sys.stderr)
        return EXIT_BAD_STORE
    print("store OK")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RCBEXPORT_LOG", "WARNING").upper())
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command == "export":
            return _cmd_export(args)
        return _cmd_validate(args)
    except ExportError as e:
        print(f"rcbexport: {e}", file=sys.stderr)
        return EXIT_BAD_STORE
    except OSError as e:
        print(f"rcbexport: {e}", file=sys.stderr)
        return EXIT_BAD_STORE


if __name__ == "__main__":
    sys.exit(main())
