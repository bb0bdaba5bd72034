"""``cactl``: command-line client and experiment runner."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from .client import ApiError, HttpClient, clone_via_api
from .errors import CacsError

DEFAULT_URL = "http://127.0.0.1:8080"


def _table(rows: list[dict], columns: Sequence[str]) -> str:
    cells = [[str(r.get(c, "")) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(row[i]) for row in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.upper().ljust(w) for c, w in zip(columns, widths)).rstrip()]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in cells]
    return "\n".join(lines)


def _emit(args, doc, text: Optional[str] = None) -> None:
    if args.json or text is None:
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        print(text)


def _kv(doc: dict) -> str:
    width = max(len(k) for k in doc)
    return "\n".join(f"{k.ljust(width)}  {json.dumps(v) if isinstance(v, (dict, list)) else v}"
                     for k, v in doc.items())


def _parse_param(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def cmd_submit(args, api) -> int:
    with open(args.asr_file) as fh:
        asr = json.load(fh)
    doc = api.post("/coordinators", asr)
    _emit(args, doc, f"{doc['id']}  {doc['state']}")
    return 0


def cmd_ls(args, api) -> int:
    doc = api.get("/coordinators")
    rows = [{"id": r["id"], "state": r["state"], "backend": r["backend"], "vms": len(r["vms"]),
             "coordinator": r["coordinator_id"] or "-", "finished": r["finished"]}
            for r in doc["coordinators"]]
    _emit(args, doc, _table(rows, ["id", "state", "backend", "vms", "coordinator", "finished"]))
    return 0


def cmd_show(args, api) -> int:
    doc = api.get(f"/coordinators/{args.id}")
    ckpts = api.get(f"/coordinators/{args.id}/checkpoints")["checkpoints"]
    doc["checkpoints"] = [c["id"] for c in ckpts]
    _emit(args, doc, _kv({k: v for k, v in doc.items() if k != "asr"}))
    return 0


def cmd_ckpt(args, api) -> int:
    doc = api.post(f"/coordinators/{args.id}/checkpoints")
    _emit(args, doc, f"checkpoint {doc['checkpoint_id']} requested for {args.id}")
    return 0


def cmd_restart(args, api) -> int:
    gen = args.ckpt
    if gen is None:
        sets = api.get(f"/coordinators/{args.id}/checkpoints")["checkpoints"]
        if not sets:
            raise ApiError(409, {"error": "NoCheckpoint", "message": f"app {args.id} has no checkpoint"})
        gen = max(s["id"] for s in sets)
    doc = api.post(f"/coordinators/{args.id}/checkpoints/{gen}")
    _emit(args, doc, f"restarting {args.id} from checkpoint {gen}")
    return 0


def cmd_clone(args, api) -> int:
    new_id = clone_via_api(api, args.id, HttpClient(args.to), checkpoint_id=args.ckpt,
                           backend_id=args.backend)
    _emit(args, {"source": args.id, "id": new_id, "target": args.to},
          f"cloned {args.id} -> {new_id} on {args.to}")
    return 0


def cmd_migrate(args, api) -> int:
    new_id = clone_via_api(api, args.id, HttpClient(args.to), checkpoint_id=args.ckpt,
                           backend_id=args.backend)
    try:
        api.delete(f"/coordinators/{args.id}")
    except ApiError as exc:
        # clone-then-terminate is not atomic: the copy survives
        print(f"warning: clone {new_id} created but source {args.id} not terminated: {exc}",
              file=sys.stderr)
        return 1
    _emit(args, {"source": args.id, "id": new_id, "target": args.to},
          f"migrated {args.id} -> {new_id} on {args.to}")
    return 0


def cmd_rm(args, api) -> int:
    doc = api.delete(f"/coordinators/{args.id}")
    _emit(args, doc, f"{args.id}  {doc['state']}")
    return 0


def cmd_experiment(args, api=None) -> int:
    from .experiments import run_experiment
    report = run_experiment(args.name, dict(args.param or []), seed=args.seed)
    if args.out:
        paths = report.write(args.out, plot=not args.no_plot)
        for kind, path in paths.items():
            print(f"wrote {kind}: {path}", file=sys.stderr)
    summary = report.to_json()
    _emit(args, summary, _kv({"scenario": report.scenario, "seed": report.seed, **report.summary}))
    return 0


def cmd_serve(args, api=None) -> int:
    from .httpd import ApiServer
    from .service import Service, ServiceConfig, load_config
    cfg = load_config(args.config) if args.config else ServiceConfig()
    cfg.seed = args.seed
    if args.backend:
        cfg.default_backend = args.backend
    server = ApiServer(Service(cfg, name=args.name), args.host, args.port, speed=args.speed)
    print(f"serving on {server.url} (virtual speed x{args.speed})", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cactl", description="Checkpointing service client.")
    p.add_argument("--url", default=os.environ.get("CACS_URL", DEFAULT_URL),
                   help="service base URL (default: $CACS_URL or %(default)s)")
    p.add_argument("--json", action="store_true", help="print JSON instead of text")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="service config file (INI)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("submit", help="submit an ASR (JSON file)")
    s.add_argument("asr_file")
    s.set_defaults(func=cmd_submit)
    sub.add_parser("ls", help="list applications").set_defaults(func=cmd_ls)
    for name, func, text in (("show", cmd_show, "show one application"),
                             ("ckpt", cmd_ckpt, "trigger a checkpoint"),
                             ("rm", cmd_rm, "terminate an application")):
        s = sub.add_parser(name, help=text)
        s.add_argument("id", type=int)
        s.set_defaults(func=func)
    s = sub.add_parser("restart", help="restart from a checkpoint (latest by default)")
    s.add_argument("id", type=int)
    s.add_argument("--ckpt", type=int)
    s.set_defaults(func=cmd_restart)
    for name, func in (("clone", cmd_clone), ("migrate", cmd_migrate)):
        s = sub.add_parser(name, help=f"{name} an application to another service")
        s.add_argument("id", type=int)
        s.add_argument("--to", required=True, help="target service base URL")
        s.add_argument("--ckpt", type=int)
        s.add_argument("--backend", help="backend on the target (default: its default)")
        s.set_defaults(func=func)
    s = sub.add_parser("experiment", help="run a built-in scenario in virtual time")
    s.add_argument("name", choices=["scaling", "burst100", "heartbeat", "migrate40", "compare"])
    s.add_argument("--out", help="report path stem; writes .csv, .json and .png")
    s.add_argument("--param", action="append", type=_parse_param, metavar="KEY=VALUE")
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_experiment, local=True)
    s = sub.add_parser("serve", help="run a service over HTTP")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--speed", type=float, default=1.0, help="virtual seconds per wall second")
    s.add_argument("--backend", help="default backend")
    s.add_argument("--name", default="cacs", help="storage namespace of this instance")
    s.set_defaults(func=cmd_serve, local=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    api = None if getattr(args, "local", False) else HttpClient(args.url)
    try:
        return args.func(args, api)
    except ApiError as exc:
        message = exc.body.get("message", exc.body) if isinstance(exc.body, dict) else exc.body
        print(f"error: {exc.error or 'ApiError'}: {message}", file=sys.stderr)
        return 1
    except CacsError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
