"""Operator command line: train, evaluate, verify data hygiene, report.

Every subcommand is a thin client of the HTTP service.  By default the
app runs in-process; ``--server URL`` targets a remote instance
instead.  The ``OVG_SEED`` environment variable overrides the config
seed for training.  Commands exit 0 on success and nonzero on any
validation or execution failure.
"""

from __future__ import annotations

import argparse
import asyncio
import sys

import httpx

from ovground import __version__
from ovground.config import seed_from_env
from ovground.errors import ConfigError


class InProcessClient:
    """Synchronous client serving requests straight from the ASGI app.

    No socket, no background thread: each request spins a short-lived
    event loop around the app call.  Interface-compatible with the
    subset of ``httpx.Client`` the commands use.
    """

    def __init__(self, app):
        self._app = app

    def _request(self, method: str, url: str, **kwargs) -> httpx.Response:
        async def go():
            transport = httpx.ASGITransport(app=self._app, raise_app_exceptions=False)
            async with httpx.AsyncClient(
                transport=transport, base_url="http://ovground.local", timeout=None
            ) as client:
                return await client.request(method, url, **kwargs)

        return asyncio.run(go())

    def get(self, url: str, **kwargs) -> httpx.Response:
        return self._request("GET", url, **kwargs)

    def post(self, url: str, **kwargs) -> httpx.Response:
        return self._request("POST", url, **kwargs)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def make_client(server: str | None = None):
    """An HTTP client bound to a remote server or an in-process app."""
    if server:
        return httpx.Client(base_url=server, timeout=600.0)
    from ovground.service.app import create_app

    return InProcessClient(create_app())


def _fail(response) -> int:
    try:
        body = response.json()
    except ValueError:
        body = {"message": response.text or f"HTTP {response.status_code}"}
    print(f"error: {body.get('message', 'request failed')}", file=sys.stderr)
    for problem in body.get("problems", []):
        print(f"  - {problem}", file=sys.stderr)
    return 1


def cmd_train(client, args) -> int:
    payload = {
        "config_path": args.config,
        "data_path": args.data,
        "out_dir": args.out,
        "toy": args.toy,
        "stop_at_acc": args.stop_acc,
    }
    seed = seed_from_env()
    if seed is not None:
        payload["seed"] = seed
    response = client.post("/train", json=payload)
    if response.status_code != 200:
        return _fail(response)
    body = response.json()
    print(f"trained {body['steps_run']} steps "
          f"in {body['wall_clock_seconds']:.1f}s, "
          f"final loss {body['final_loss']:.4f}, "
          f"training Acc50 {body['train_acc50']:.2f}")
    print(f"checkpoint: {body['checkpoint_path']}")
    print(f"run record: {body['run_record_path']}")
    return 0


def cmd_eval(client, args) -> int:
    response = client.post("/evaluate", json={
        "checkpoint_path": args.ckpt,
        "data_path": args.data,
        "out_dir": args.out,
    })
    if response.status_code != 200:
        return _fail(response)
    body = response.json()
    report = body["report"]
    if "overall_acc50" in report and report.get("total_count"):
        print(f"Acc50 {report['overall_acc50']:.2f} "
              f"({report['total_correct']}/{report['total_count']})")
    for prefix in ("base", "full"):
        if f"{prefix}_r1" in report:
            print(f"{prefix}: R@1 {report[f'{prefix}_r1']:.2f}  "
                  f"R@5 {report[f'{prefix}_r5']:.2f}  "
                  f"R@10 {report[f'{prefix}_r10']:.2f}  "
                  f"({report[f'{prefix}_phrases']} phrases)")
    print(f"report: {body['report_path']}")
    if body["predictions_path"]:
        print(f"predictions: {body['predictions_path']}")
    return 0


def cmd_verify(client, args) -> int:
    response = client.post("/verify", json={
        "train_path": args.train,
        "eval_path": args.eval,
        "out_path": args.out,
    })
    if response.status_code != 200:
        return _fail(response)
    body = response.json()
    if body["passed"]:
        print("disjointness check passed")
        return 0
    for image_id in body["shared_image_ids"]:
        print(f"shared image id: {image_id}")
    for category in body["category_overlaps"]:
        print(f"category in both base and novel registries: {category}")
    print("disjointness check FAILED")
    return 1


def cmd_report(client, args) -> int:
    response = client.post("/report", json={
        "in_path": args.in_path,
        "out_dir": args.out,
    })
    if response.status_code != 200:
        return _fail(response)
    for path in response.json()["files"]:
        print(path)
    return 0


def cmd_synth(client, args) -> int:
    response = client.post("/synthesize", json={
        "out_dir": args.out,
        "n": args.n,
        "seed": args.seed,
        "kind": args.kind,
        "image_size": args.image_size,
        "split": args.split,
        "size_min": args.size_min,
        "size_max": args.size_max,
    })
    if response.status_code != 200:
        return _fail(response)
    body = response.json()
    print(f"wrote {body['num_samples']} samples over {body['num_images']} images")
    print(f"manifest: {body['manifest_path']}")
    return 0


def cmd_predict(client, args) -> int:
    response = client.post("/predict", json={
        "checkpoint_path": args.ckpt,
        "image_path": args.image,
        "expression": args.expr,
    })
    if response.status_code != 200:
        return _fail(response)
    body = response.json()
    x1, y1, x2, y2 = body["bbox"]
    print(f"box: ({x1:.1f}, {y1:.1f}, {x2:.1f}, {y2:.1f})  score {body['score']:.4f}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from ovground.service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovground",
        description="Open-vocabulary visual grounding: train, evaluate, audit.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "--server", default=None,
        help="base URL of a running service (default: run in-process)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + run record")
    p.add_argument("--config", required=True, help="flat key = value config file")
    p.add_argument("--data", required=True, help="training manifest path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--toy", action="store_true", help="force the desk-scale profile")
    p.add_argument("--stop-acc", type=float, default=None,
                   help="stop early once training Acc50 reaches this value")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="evaluation manifest path")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("verify", help="audit two manifests for leakage")
    p.add_argument("--train", required=True, help="training manifest path")
    p.add_argument("--eval", required=True, help="evaluation manifest path")
    p.add_argument("--out", default="disjointness.json",
                   help="where to write the report (default: ./disjointness.json)")
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("report", help="render plots and table from an evaluation")
    p.add_argument("--in", dest="in_path", required=True,
                   help="evaluation output directory or report file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=("vg", "pl"), default="vg")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--split", default="train")
    p.add_argument("--size-min", type=int, default=None, help="min object side (px)")
    p.add_argument("--size-max", type=int, default=None, help="max object side (px)")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("predict", help="ground one expression in one image")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--image", required=True, help="image path")
    p.add_argument("--expr", required=True, help="referring expression")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(handler=None)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return cmd_serve(args)
    try:
        with make_client(args.server) as client:
            return args.handler(client, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except httpx.HTTPError as exc:
        print(f"error: request failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
