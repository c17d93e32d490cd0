"""Command-line client.

Every subcommand is a thin wrapper over the HTTP service: by default
the app runs in-process, so no server needs to be up, and `--server
URL` points the same commands at a remote instance.  `serve` starts
that instance.
"""

from __future__ import annotations

import argparse
import json
import sys


def _make_client(server: str | None):
    import httpx
    if server:
        return httpx.Client(base_url=server, timeout=None)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from fastapi.testclient import TestClient
    from .service import create_app
    return TestClient(create_app(), raise_server_exceptions=False)


def _post(client, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        print(f"error {resp.status_code}: {detail}", file=sys.stderr)
        raise SystemExit(1)
    return resp.json()


def _require(args: argparse.Namespace, flag: str, command: str) -> str:
    value = getattr(args, flag)
    if value is None:
        print(f"{command}: --{flag} is required", file=sys.stderr)
        raise SystemExit(2)
    return value


def _cmd_gen_data(args) -> int:
    out = _require(args, "out", "gen-data")
    with _make_client(args.server) as client:
        body = _post(client, "/datasets", {
            "out_dir": out, "seed": args.seed,
            "config_path": args.config, "overrides": {}})
    print(body["manifest_path"])
    counts = " ".join(f"{k}={v}" for k, v in sorted(body["counts"].items()))
    print(f"classes={body['classes']} privacy_attrs={body['privacy_attrs']} {counts}")
    return 0


def _cmd_train(args) -> int:
    data = _require(args, "data", "train")
    with _make_client(args.server) as client:
        body = _post(client, "/train", {
            "phase": args.phase, "data_dir": data, "out_dir": args.out,
            "seed": args.seed, "config_path": args.config, "overrides": {},
            "resume": args.resume, "with_frame": not args.no_frame,
            "with_raw_control": not args.no_raw_control})
    if body.get("checkpoint"):
        print(f"checkpoint: {body['checkpoint']}")
    for key, series in sorted(body.get("history", {}).items()):
        if series:
            print(f"{key}: first {series[0]:.4f} last {series[-1]:.4f}")
    if body.get("retained_counts"):
        print("retained per block:", " ".join(str(c) for c in body["retained_counts"]))
    if body.get("raw_report"):
        raw = body["raw_report"]
        print(f"raw control: top1 {raw['top1']:.2f} cmap {raw['cmap']:.2f} "
              f"f1 {raw['f1']:.4f}")
    if body.get("report_csv"):
        sys.stdout.write(body["report_csv"])
    return 0


def _cmd_transform(args) -> int:
    data = _require(args, "data", "transform")
    out = _require(args, "out", "transform")
    checkpoint = _require(args, "checkpoint", "transform")
    with _make_client(args.server) as client:
        body = _post(client, "/transform", {
            "checkpoint": checkpoint, "data_dir": data, "out_dir": out,
            "split": args.split, "limit": args.limit, "dump_frames": args.frames})
    print(f"wrote {len(body['clips'])} clips to {body['out_dir']}")
    print("retained per block:", " ".join(str(c) for c in body["retained_counts"]))
    if body.get("frames_dir"):
        print(f"frames: {body['frames_dir']}")
    return 0


def _cmd_eval(args) -> int:
    data = _require(args, "data", "eval")
    with _make_client(args.server) as client:
        body = _post(client, "/evaluate", {
            "data_dir": data, "checkpoint": args.checkpoint, "out_dir": args.out,
            "seed": args.seed, "config_path": args.config, "overrides": {},
            "with_frame": args.frame})
    sys.stdout.write(body["csv"])
    if body.get("frame_privacy"):
        fp = body["frame_privacy"]
        print(f"frame_cmap,{fp['cmap']:.4f},,{args.seed}")
        print(f"frame_f1,{fp['f1']:.6f},,{args.seed}")
    return 0


def _cmd_ablate(args) -> int:
    data = _require(args, "data", "ablate")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    with _make_client(args.server) as client:
        body = _post(client, "/ablate", {
            "data_dir": data, "sweep": args.sweep, "seeds": seeds,
            "out_dir": args.out, "seed": args.seed,
            "config_path": args.config, "overrides": {}})
    sys.stdout.write(body["csv"])
    if body.get("csv_path"):
        print(f"wrote {body['csv_path']}", file=sys.stderr)
    return 0


def _cmd_grad_check(args) -> int:
    names = args.names.split(",") if args.names else None
    with _make_client(args.server) as client:
        body = _post(client, "/grad-check", {
            "instances": args.instances, "dtype": args.dtype,
            "names": names, "seed": args.seed})
    for entry in body["entries"]:
        mark = "pass" if entry["passed"] else "FAIL"
        print(f"{mark}  {entry['name']:32s} {entry['max_rel_err']:.2e} "
              f"(tol {entry['tol']:.0e})")
    print(f"{len(body['entries'])} checks in {body['seconds']:.1f}s "
          f"[{body['dtype']}, {body['instances']} instances]")
    return 0 if body["all_passed"] else 1


def _cmd_serve(args) -> int:
    import uvicorn
    from .service import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="JSON config overlaying the defaults")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", metavar="DIR", default=None)
    common.add_argument("--server", metavar="URL", default=None,
                        help="remote service URL (default: in-process)")

    parser = argparse.ArgumentParser(prog="tubeveil",
                                     description="privacy-preserving video transform")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="render the synthetic benchmark")
    p.set_defaults(run=_cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="run training phases")
    p.add_argument("--phase", required=True,
                   choices=["init", "adversarial", "eval", "all"])
    p.add_argument("--data", metavar="DIR", default=None)
    p.add_argument("--resume", metavar="CKPT", default=None,
                   help="checkpoint from the previous phase")
    p.add_argument("--no-frame", action="store_true",
                   help="skip the frame-level privacy recognizer")
    p.add_argument("--no-raw-control", action="store_true",
                   help="phase all: skip the raw-data reference recognizers")
    p.set_defaults(run=_cmd_train)

    p = sub.add_parser("transform", parents=[common],
                       help="transform stored clips with a trained model")
    p.add_argument("--checkpoint", metavar="CKPT", default=None)
    p.add_argument("--data", metavar="DIR", default=None)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--frames", action="store_true",
                   help="also dump the first clip as PPM frames")
    p.set_defaults(run=_cmd_transform)

    p = sub.add_parser("eval", parents=[common],
                       help="train fresh recognizers and report metrics")
    p.add_argument("--data", metavar="DIR", default=None)
    p.add_argument("--checkpoint", metavar="CKPT", default=None,
                   help="transform through this model first (default: raw data)")
    p.add_argument("--frame", action="store_true",
                   help="also train the frame-level privacy recognizer")
    p.set_defaults(run=_cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="hyperparameter sweeps")
    p.add_argument("--sweep", required=True, choices=["alpha", "dt", "lambda"])
    p.add_argument("--data", metavar="DIR", default=None)
    p.add_argument("--seeds", metavar="N,N,...", default=None,
                   help="comma-separated seeds (default: --seed)")
    p.set_defaults(run=_cmd_ablate)

    p = sub.add_parser("grad-check", parents=[common],
                       help="finite-difference verification suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--names", metavar="A,B,...", default=None,
                   help="subset of checks to run")
    p.set_defaults(run=_cmd_grad_check)

    p = sub.add_parser("serve", parents=[common], help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(run=_cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except SystemExit:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
