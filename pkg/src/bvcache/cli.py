"""Command-line client: parses a JSON config and runs it in-process or via the service."""
import argparse
import json
import os
import sys

from .config import ConfigError, dump_config, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
COMMANDS = ("solve", "converge", "streamlines", "ablate", "oracle")


def build_parser():
    p = argparse.ArgumentParser(prog="bvc", description="Boundary value caching solver")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="JSON run configuration")
        s.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: $BVC_THREADS or all cores)")
        s.add_argument("--server", default=None,
                       help="base URL of a running service; default runs in-process")
        s.add_argument("--json", dest="json_out", default=None,
                       help="also write the full response as JSON to this path")
    s = sub.add_parser("serve")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    return p


def resolve_threads(flag):
    if flag is not None:
        return flag
    env = os.environ.get("BVC_THREADS")
    if env is None or env == "":
        return None
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"BVC_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("BVC_THREADS must be >= 1")
    return n


def _remote(server, command, cfg):
    import httpx
    try:
        r = httpx.post(f"{server.rstrip('/')}/{command}",
                       content=dump_config(cfg), headers={"content-type": "application/json"},
                       timeout=None)
    except httpx.HTTPError as exc:
        raise RuntimeError(f"cannot reach {server}: {exc}") from None
    if r.status_code == 422:
        raise ConfigError(str(r.json().get("detail")))
    if r.status_code != 200:
        raise RuntimeError(str(r.json().get("detail", r.text)))
    return r.json()


def _local(command, cfg):
    from .service import HANDLERS
    return HANDLERS[command](cfg).model_dump()


def _summary(command, data):
    if command == "solve":
        n = sum(data["valid"])
        line = f"solved {n} points"
        if data.get("rmse") is not None:
            line += f", rmse {data['rmse']:.6g}"
    elif command == "converge":
        line = f"{len(data['rows'])} runs, fitted slope {data['slope']}"
    elif command == "streamlines":
        line = ", ".join(f"{len(p['points'])} pts ({p['reason']})" for p in data["polylines"])
        line = f"{len(data['polylines'])} streamlines: {line}"
    elif command == "ablate":
        line = "\n".join(json.dumps(r) for r in data["rows"])
    else:
        line = f"oracle values at {sum(data['valid'])} points"
    for f in data.get("files", []):
        line += f"\nwrote {f}"
    return line


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn
        uvicorn.run("bvcache.service:app", host=args.host, port=args.port)
        return EXIT_OK
    try:
        cfg = load_config(args.config)
        threads = resolve_threads(args.threads)
        if threads is not None:
            cfg = cfg.model_copy(update={"threads": threads})
        data = _remote(args.server, args.command, cfg) if args.server else _local(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.json_out:
        with open(args.json_out, "w") as fh:
            json.dump(data, fh)
    print(_summary(args.command, data))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
