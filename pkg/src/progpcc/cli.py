"""Command-line interface.

Subcommands: train, encode, decode, eval, bdrate, serve.  Data-path commands
run locally against a checkpoint by default; pass --server (or set
PROGPCC_SERVER) to run them as thin clients of a running service instead.
The default checkpoint path comes from PROGPCC_CHECKPOINT.
"""

from __future__ import annotations

import argparse
import base64
import csv
import os
import sys
import tempfile
from typing import Optional

ENV_CHECKPOINT = "PROGPCC_CHECKPOINT"
ENV_SERVER = "PROGPCC_SERVER"


def _write_atomic(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _checkpoint_path(args) -> str:
    path = getattr(args, "checkpoint", None) or os.environ.get(ENV_CHECKPOINT)
    if not path:
        raise SystemExit2(
            f"no checkpoint: pass --checkpoint or set {ENV_CHECKPOINT}")
    return path


def _load_model(args):
    from .checkpoint import load_checkpoint

    model, _ = load_checkpoint(_checkpoint_path(args))
    return model


def _server_url(args) -> Optional[str]:
    return getattr(args, "server", None) or os.environ.get(ENV_SERVER) or None


def _client(url: str):
    import httpx

    return httpx.Client(base_url=url.rstrip("/"), timeout=600.0)


def _post(url: str, endpoint: str, payload: dict) -> dict:
    with _client(url) as client:
        resp = client.post(endpoint, json=payload)
        if resp.status_code != 200:
            try:
                detail = resp.json().get("detail", resp.text)
            except ValueError:
                detail = resp.text
            raise RuntimeError(f"server error {resp.status_code}: {detail}")
        return resp.json()


class SystemExit2(RuntimeError):
    """Usage-level error (missing configuration), exit code 2."""


def _model_config(groups_text: Optional[str]):
    from .config import ChannelGroupConfig, ModelConfig

    if not groups_text:
        return ModelConfig()
    groups = ChannelGroupConfig.parse(groups_text)
    widths = tuple(groups.layer_channels(i) for i in range(len(groups.groups)))
    return ModelConfig(latent_channels=widths, groups=groups)


# --- subcommands ----------------------------------------------------------------


def cmd_train(args) -> int:
    from .model import CodecModel
    from .training import TrainConfig, train

    model = CodecModel(_model_config(args.groups), seed=args.seed)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        n_clouds=args.n_clouds,
        points_per_cloud=args.points_per_cloud,
        bit_depth=args.bit_depth,
        seed=args.seed,
        lr_start=args.lr_start,
        lr_end=args.lr_end,
        clip_norm=args.clip_norm,
        weight_decay=args.weight_decay,
        log_path=args.log,
        checkpoint_path=args.out,
        checkpoint_every=args.checkpoint_every,
    )
    result = train(config, model)
    last = result.rows[-1] if result.rows else None
    print(f"trained {result.steps} steps "
          f"({model.num_params()} parameters, {model.config.n_levels} levels)")
    if last:
        print(f"final: loss={last['loss']:.4f} rate_bpp={last['rate_bpp']:.4f} "
              f"distortion={last['distortion']:.4f}")
    print(f"checkpoint written to {args.out}")
    if args.log:
        print(f"metrics log written to {args.log}")
    return 0


def cmd_encode(args) -> int:
    with open(args.input, "rb") as fh:
        ply_bytes = fh.read()
    url = _server_url(args)
    if url:
        out = _post(url, "/encode", {
            "ply_b64": base64.b64encode(ply_bytes).decode(),
            "bit_depth": args.bit_depth,
            "normalize": not args.no_normalize,
        })
        blob = base64.b64decode(out["container_b64"])
        _write_atomic(args.out, blob)
        print(f"{out['n_voxels']} voxels -> {len(blob)} bytes "
              f"({out['bpp']:.4f} bpp over {out['n_input']} input points)")
        return 0

    from .codec import encode
    from .container import serialize_container
    from .geometry import parse_ply, voxelize

    cloud = parse_ply(ply_bytes)
    voxels, _ = voxelize(cloud, args.bit_depth, normalize=not args.no_normalize)
    result = encode(voxels, _load_model(args))
    blob = serialize_container(result.container)
    _write_atomic(args.out, blob)
    print(f"{result.n_input} voxels -> {len(blob)} bytes "
          f"({len(blob) * 8 / len(cloud.points):.4f} bpp over "
          f"{len(cloud.points)} input points, "
          f"{len(result.container.segments)} segments)")
    return 0


def cmd_decode(args) -> int:
    with open(args.input, "rb") as fh:
        blob = fh.read()
    url = _server_url(args)
    if url:
        out = _post(url, "/decode", {
            "container_b64": base64.b64encode(blob).decode(),
            "level": args.level,
        })
        _write_atomic(args.out, base64.b64decode(out["ply_b64"]))
        print(f"level {args.level}: {out['n_points']} points -> {args.out}")
        return 0

    from .codec import decode
    from .container import parse_container
    from .geometry import PointCloud, serialize_ply

    container = parse_container(blob)
    voxels = decode(container, _load_model(args), args.level)
    cloud = PointCloud(voxels.coords.astype(float))
    _write_atomic(args.out, serialize_ply(cloud, binary=True))
    print(f"level {args.level}: {len(voxels)} points -> {args.out}")
    return 0


def _parse_levels(text: Optional[str]):
    if not text:
        return None
    return [int(tok) for tok in text.split(",")]


def cmd_eval(args) -> int:
    with open(args.input, "rb") as fh:
        ply_bytes = fh.read()
    url = _server_url(args)
    if url:
        out = _post(url, "/evaluate", {
            "ply_b64": base64.b64encode(ply_bytes).decode(),
            "bit_depth": args.bit_depth,
            "normalize": not args.no_normalize,
            "levels": _parse_levels(args.levels),
            "with_d2": not args.no_d2,
            "peak": args.peak,
        })
        table, errors = out["csv"], out["errors"]
    else:
        from .evaluate import curve_csv, evaluate_levels
        from .geometry import parse_ply, voxelize

        cloud = parse_ply(ply_bytes)
        voxels, _ = voxelize(cloud, args.bit_depth, normalize=not args.no_normalize)
        report = evaluate_levels(
            _load_model(args), voxels,
            levels=_parse_levels(args.levels),
            n_in=len(cloud.points),
            with_d2=not args.no_d2,
            peak=args.peak,
        )
        table = curve_csv(report.curve)
        errors = report.errors

    for level, message in sorted(errors.items(), key=lambda kv: int(kv[0])):
        print(f"level {level} failed: {message}", file=sys.stderr)
    if args.out:
        _write_atomic(args.out, table.encode())
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(table)
    return 0 if table.count("\n") > 1 else 1


def _read_curve_csv(path: str):
    from .evaluate import RdPoint

    def parse_field(text):
        if text is None or text in ("", "--"):
            return None
        return float(text)

    points = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            points.append(RdPoint(
                level=int(row["level"]),
                bpp=float(row["bpp"]),
                d1_psnr=parse_field(row.get("d1_psnr")),
                d2_psnr=parse_field(row.get("d2_psnr")),
            ))
    return points


def cmd_bdrate(args) -> int:
    url = _server_url(args)
    if url:
        def as_dicts(path):
            return [{"level": p.level, "bpp": p.bpp, "d1_psnr": p.d1_psnr,
                     "d2_psnr": p.d2_psnr} for p in _read_curve_csv(path)]

        out = _post(url, "/bdrate", {
            "curve_a": as_dicts(args.curve_a),
            "curve_b": as_dicts(args.curve_b),
            "metric": args.metric,
        })
        rate, psnr = out["bd_rate_percent"], out["bd_psnr_db"]
    else:
        from .bdrate import compute_bd_psnr, compute_bd_rate

        curve_a = _read_curve_csv(args.curve_a)
        curve_b = _read_curve_csv(args.curve_b)
        rate = compute_bd_rate(curve_a, curve_b, args.metric)
        psnr = compute_bd_psnr(curve_a, curve_b, args.metric)

    print(f"bd_rate_percent={'undefined' if rate is None else f'{rate:.6f}'}")
    print(f"bd_psnr_db={'undefined' if psnr is None else f'{psnr:.6f}'}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    path = getattr(args, "checkpoint", None) or os.environ.get(ENV_CHECKPOINT) or None
    app = create_app(path)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="progpcc",
        description="Scalable learned point cloud geometry codec: one encoded "
                    "bitstream, many decode quality levels.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_server(p):
        p.add_argument("--server", default=None,
                       help=f"service URL; overrides local execution (env {ENV_SERVER})")

    def add_checkpoint(p):
        p.add_argument("--checkpoint", default=None,
                       help=f"model checkpoint path (env {ENV_CHECKPOINT})")

    p = sub.add_parser("train", help="train a model on synthetic shapes")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="metrics CSV output path")
    p.add_argument("--groups", default=None,
                   help='channel groups, e.g. "4,4/2,2,4/8"')
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--n-clouds", type=int, default=200)
    p.add_argument("--points-per-cloud", type=int, default=2000)
    p.add_argument("--bit-depth", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr-start", type=float, default=8e-4)
    p.add_argument("--lr-end", type=float, default=2e-5)
    p.add_argument("--clip-norm", type=float, default=5.0)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="encode a PLY file into a container")
    p.add_argument("--input", required=True, help="input .ply")
    p.add_argument("--out", required=True, help="output container file")
    p.add_argument("--bit-depth", type=int, default=7)
    p.add_argument("--no-normalize", action="store_true",
                   help="input is already on the voxel grid")
    add_checkpoint(p)
    add_server(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a container at a quality level")
    p.add_argument("--input", required=True, help="input container file")
    p.add_argument("--out", required=True, help="output .ply")
    p.add_argument("--level", type=int, required=True,
                   help="number of channel groups to decode (1 = coarsest)")
    add_checkpoint(p)
    add_server(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="per-level rate/quality table for one asset")
    p.add_argument("--input", required=True, help="input .ply")
    p.add_argument("--out", default=None, help="output CSV (default: stdout)")
    p.add_argument("--levels", default=None, help="comma list, default all")
    p.add_argument("--bit-depth", type=int, default=7)
    p.add_argument("--peak", type=float, default=None,
                   help="PSNR peak (default 2^bit_depth - 1)")
    p.add_argument("--no-d2", action="store_true", help="skip point-to-plane PSNR")
    p.add_argument("--no-normalize", action="store_true")
    add_checkpoint(p)
    add_server(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="Bjontegaard deltas between two eval CSVs")
    p.add_argument("--curve-a", required=True, help="reference curve CSV")
    p.add_argument("--curve-b", required=True, help="test curve CSV")
    p.add_argument("--metric", default="d1_psnr", choices=["d1_psnr", "d2_psnr"])
    add_server(p)
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    add_checkpoint(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
