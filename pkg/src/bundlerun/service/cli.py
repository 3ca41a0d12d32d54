"""`bundlerun serve`: load config, wire services, hand off to uvicorn."""

from __future__ import annotations

import argparse
import logging
import sys

from bundlerun.errors import InvalidConfig
from bundlerun.service.app import create_app
from bundlerun.service.config import load_config
from bundlerun.service.wiring import Services


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="bundlerun")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the API server")
    serve.add_argument("-c", "--config", default=None, help="path to a config file")
    serve.add_argument(
        "--check", action="store_true", help="validate the config and exit"
    )

    sweep = sub.add_parser("sweep", help="reclaim expired uploads and artifacts")
    sweep.add_argument("-c", "--config", default=None, help="path to a config file")

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )

    try:
        config = load_config(args.config)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.command == "sweep":
        services = Services.from_config(config)
        try:
            removed = services.sweep()
        finally:
            services.stop()
        print(" ".join(f"{k}={v}" for k, v in sorted(removed.items())))
        return 0

    if args.check:
        print("config ok")
        return 0

    import uvicorn

    app = create_app(Services.from_config(config))
    uvicorn.run(app, host=config.listen_host, port=config.listen_port, log_level="info")
    return 0


if __name__ == "__main__":
    sys.exit(main())
