"""Command-line entry point: ``lightdepth <subcommand> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import checkpoint, data, gradcheck, metrics, network, ops, preview, trainer
from .losses import LossConfig
from .ops import ShapeError, StateError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

logger = logging.getLogger("lightdepth")

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "network.preset": "toy",
    "network.output_scale": "half",
    "data.manifest": None,
    "data.depth_scale": data.DEFAULT_DEPTH_SCALE,
    "train.epochs": 10,
    "train.batch_size": 4,
    "train.learning_rate": 1e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps_adam": 1e-8,
    "train.checkpoint_every": 0,
    "train.precision": 32,
    "train.augment": True,
    "train.workers": 1,
    "train.max_steps": None,
    "train.record_wall_time": True,
    "loss.lam": 0.1,
    "loss.ssim_window": 7,
    "loss.dynamic_range": 10.0,
    "loss.max_depth": 10.0,
    "loss.min_depth": 1.0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of flat dotted keys")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--preset", choices=sorted(network.PRESETS))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lightdepth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a network on a manifest")
    _common(p)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--no-wall-time", action="store_true",
                   help="log wall_ms as 0 so log files are byte-reproducible")
    p.add_argument("--resume", type=Path, help="training checkpoint to continue from")

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--identity", action="store_true",
                   help="score ground truth against itself instead of running a network")

    p = sub.add_parser("predict", help="predict depth for one image")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    _common(p)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--network-instances", type=int, default=100)
    p.add_argument("--exhaustive", action="store_true",
                   help="also check every parameter element of one network (slow)")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)

    p = sub.add_parser("synth-data", help="write synthetic scenes and a manifest")
    _common(p)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)

    p = sub.add_parser("info", help="parameter and size report")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    return parser


# ------------------------------------------------------------------- config
def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if args.config is not None:
        try:
            loaded = json.loads(args.config.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    flag_map = {
        "seed": "seed", "preset": "network.preset", "manifest": "data.manifest",
        "epochs": "train.epochs", "batch_size": "train.batch_size", "lr": "train.learning_rate",
        "max_steps": "train.max_steps", "checkpoint_every": "train.checkpoint_every",
        "workers": "train.workers",
    }
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg[key] = str(val) if isinstance(val, Path) else val
    if getattr(args, "no_augment", False):
        cfg["train.augment"] = False
    if getattr(args, "no_wall_time", False):
        cfg["train.record_wall_time"] = False
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def _loss_config(cfg: dict) -> LossConfig:
    return LossConfig(**_section(cfg, "loss"))


def _train_config(cfg: dict) -> trainer.TrainConfig:
    return trainer.TrainConfig(seed=int(cfg["seed"]), **_section(cfg, "train"))


def _network_config(cfg: dict) -> network.NetworkConfig:
    return network.preset(cfg["network.preset"], output_scale=cfg["network.output_scale"],
                          seed=int(cfg["seed"]))


def _write_resolved(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(cfg: dict) -> data.Manifest:
    if not cfg["data.manifest"]:
        raise UsageError("no manifest given (--manifest or data.manifest)")
    return data.load_manifest(cfg["data.manifest"], depth_scale=float(cfg["data.depth_scale"]))


def _load_net(path: Path) -> network.Network:
    if not path.is_file():
        raise data.DataError(f"checkpoint not found: {path}")
    net, _, _ = trainer.load_training_checkpoint(path)
    return net


# --------------------------------------------------------------- subcommands
def cmd_train(args, cfg) -> int:
    out: Path = args.out
    _write_resolved(out, cfg)
    dataset = data.ManifestDataset(_manifest(cfg), float(cfg["loss.max_depth"]))
    train_cfg, loss_cfg = _train_config(cfg), _loss_config(cfg)
    state = None
    if args.resume is not None:
        net, state, _ = trainer.load_training_checkpoint(args.resume)
    else:
        net = network.build(_network_config(cfg), dtype=train_cfg.dtype)
    result = trainer.train(net, dataset, train_cfg, loss_cfg, out_dir=out, state=state)
    if result.log:
        print(f"trained {len(result.log)} steps; final loss {result.log[-1].total:.6f}")
    print(f"checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    out: Path = args.out
    if args.manifest is not None:
        cfg["data.manifest"] = str(args.manifest)
    _write_resolved(out, cfg)
    manifest = _manifest(cfg)
    if len(manifest) == 0:
        raise data.DataError(f"manifest {cfg['data.manifest']} has no records")
    m = float(cfg["loss.max_depth"])
    samples = [data.load_sample(manifest, i, m) for i in range(len(manifest))]
    gts = [s.depth for s in samples]
    if args.identity:
        report = metrics.evaluate([g.depth for g in gts], gts, "full", transformed=False)
    else:
        if args.checkpoint is None:
            raise UsageError("eval needs --checkpoint (or --identity)")
        net = _load_net(args.checkpoint)
        preds = [net.predict(s.rgb[None])[0, 0] for s in samples]
        report = metrics.evaluate(preds, gts, net.config.output_scale, m=m)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.table(), encoding="utf-8")
    print(report.table(), end="")
    if report.sq_rel_degenerate:
        print("note: ground truth is constant, Sq Rel is undefined")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    out: Path = args.out
    _write_resolved(out, cfg)
    net = _load_net(args.checkpoint)
    try:
        with Image.open(args.image) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)
    except (OSError, ValueError) as exc:
        raise data.DataError(f"cannot decode image {args.image}: {exc}") from None
    mult = net.config.input_multiple
    h, w = rgb.shape[:2]
    if h % mult or w % mult:
        raise data.DataError(f"image extent {h}x{w} must be a multiple of {mult}")
    pred = net.predict(rgb.transpose(2, 0, 1)[None])[0, 0]
    depth_m = float(cfg["loss.max_depth"]) / pred.astype(np.float64)
    stem = args.image.stem
    preview.write_depth_mm(out / f"{stem}_depth_mm.png", depth_m)
    preview.write_preview(out / f"{stem}_preview.png", depth_m)
    print(f"depth range: {depth_m.min():.4f} m .. {depth_m.max():.4f} m "
          f"({depth_m.shape[0]}x{depth_m.shape[1]})")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    seed = int(cfg["seed"])
    if args.corrupt is not None and args.corrupt not in ops.DIFFERENTIABLE_OPS:
        raise UsageError(f"unknown op {args.corrupt!r}")
    if args.corrupt:
        with gradcheck.corrupted(args.corrupt):
            results = gradcheck.run_suite(args.instances, seed, args.network_instances,
                                          args.exhaustive, report=print)
    else:
        results = gradcheck.run_suite(args.instances, seed, args.network_instances,
                                      args.exhaustive, report=print)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"all {len(results)} checks within rel. error {gradcheck.REL_TOL:g}")
    return EXIT_OK


def cmd_synth(args, cfg) -> int:
    out: Path = args.out
    _write_resolved(out, cfg)
    path = data.write_synthetic_dataset(out, args.count, args.height, args.width,
                                        int(cfg["seed"]))
    print(f"wrote {args.count} scenes; manifest: {path}")
    return EXIT_OK


def cmd_info(args, cfg) -> int:
    if args.checkpoint is not None:
        net = _load_net(args.checkpoint)
        label = str(args.checkpoint)
    else:
        net = network.build(_network_config(cfg))
        label = f"preset {cfg['network.preset']}"
    rows = net.layer_table()
    width = max(len(n) for n, _, _ in rows)
    print(f"{label}")
    print(f"{'name':<{width}}  {'shape':<18} {'params':>10}")
    for name, shape, count in rows:
        print(f"{name:<{width}}  {str(tuple(shape)):<18} {count:>10,}")
    rep = trainer.size_report(net)
    print(f"total parameters: {rep['param_count']:,}")
    print(f"checkpoint bytes: {rep['checkpoint_bytes']:,} ({rep['megabytes']:.2f} MB)")
    print(rep["text"].split("\n", 1)[1])
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck, "synth-data": cmd_synth, "info": cmd_info}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (data.DataError, FileNotFoundError, trainer.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, network.BuildError, checkpoint.CheckpointError, StateError,
            ShapeError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

if __name__ == "__main__":
    sys.exit(main())
