"""Sidecar entry point: serve a checkpoint over HTTP or export fixtures."""

from __future__ import annotations

import argparse
import sys

from .service import ModelService, ServerConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cape-server", description=__doc__)
    parser.add_argument("--model", required=True, help="checkpoint name or local path")
    parser.add_argument("--mode", choices=["bidirectional", "causal"], default="bidirectional")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8731)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--workers", type=int, default=1,
                        help="concurrent inference slots (default: one at a time)")
    parser.add_argument("--export", metavar="PROMPTS",
                        help="export fixtures for this prompt file instead of serving")
    parser.add_argument("--out", help="output directory for --export")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = ServerConfig(
        model_name=args.model, mode=args.mode, host=args.host,
        port=args.port, device=args.device, workers=args.workers,
    )
    try:
        service = ModelService(config)
    except (OSError, ValueError) as exc:
        print(f"error: cannot load {args.model}: {exc}", file=sys.stderr)
        return 1
    if args.export:
        if not args.out:
            print("error: --export requires --out", file=sys.stderr)
            return 1
        from .export import export_fixtures

        out = export_fixtures(service, args.export, args.out)
        print(f"exported fixtures -> {out}")
        return 0

    import uvicorn

    from .app import create_app

    uvicorn.run(create_app(service), host=config.host, port=config.port, log_level="info")
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
