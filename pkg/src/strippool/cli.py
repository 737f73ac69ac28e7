"""strippool command line: train, eval, gradcheck, params, bench, gen-data.

Exit codes: 0 ok, 2 configuration error, 3 I/O or format error,
4 numerical check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import bench as B
from . import gradcheck as G
from .blocks import param_count
from .config import RunConfig, seed_override
from .data import SyntheticSceneSpec, make_corpus
from .evaluate import MULTI_SCALES, evaluate, predict
from .io import FormatError, load_checkpoint, save_checkpoint, write_pgm, write_spt
from .network import PRESETS, NetworkSpec, block_counts, build_from_spec, preset_spec
from .tensor import ConfigError
from .train import train

log = logging.getLogger("strippool")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST = "manifest.jsonl"


class NumericFailure(RuntimeError):
    pass


@dataclass
class RunManifest:
    """Append-only record of one command run; one JSON line per event."""

    directory: Path
    command: str
    config: dict
    seed: int
    outputs: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.time)

    @property
    def path(self) -> Path:
        return self.directory / MANIFEST

    def open(self):
        self.directory.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            raise FileExistsError(f"{self.directory} already holds a run manifest; pick a fresh run directory")
        self._append({"event": "start", "status": "running"})

    def close(self, status: str, error: str | None = None):
        rec = {"event": "end", "status": status, "ended": time.time(), "outputs": self.outputs}
        if error:
            rec["error"] = error
        self._append(rec)

    def _append(self, extra: dict):
        rec = {"command": self.command, "config": self.config, "seed": self.seed,
               "started": self.started, "version": __version__, **extra}
        with self.path.open("a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(directory) -> list[dict]:
    return [json.loads(line) for line in (Path(directory) / MANIFEST).read_text().splitlines() if line]


def _load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise FileNotFoundError(f"cannot read config {path}: {e}") from e
    cfg = RunConfig.from_json(text)
    cfg.train.seed = seed_override(cfg.train.seed)
    return cfg


def _run(manifest: RunManifest, body):
    manifest.open()
    try:
        body()
    except BaseException as e:
        manifest.close("failed", f"{type(e).__name__}: {e}")
        raise
    manifest.close("ok")


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out)
    manifest = RunManifest(out, "train", cfg.to_dict(), cfg.train.seed)

    def body():
        corpus = make_corpus(cfg.scene, cfg.train_size, seed=cfg.scene.seed)
        net = build_from_spec(cfg.network_spec(), seed=cfg.train.seed)
        try:
            history = train(net, cfg.train, corpus)
        except FloatingPointError as e:
            raise NumericFailure(str(e)) from e
        rows = ["iter,lr,main_loss,aux_loss"] + [f"{i},{lr!r},{m!r},{a!r}" for i, lr, m, a in history]
        (out / "loss.csv").write_text("\n".join(rows) + "\n")
        (out / "config.json").write_text(cfg.to_json() + "\n")
        save_checkpoint(out, net.state_dict())
        manifest.outputs += ["loss.csv", "config.json", "checkpoint.spt", "checkpoint.json"]
        print(f"trained {cfg.model if isinstance(cfg.model, str) else 'custom'} for {cfg.train.max_iter} iters: "
              f"main loss {history[0][2]:.4f} -> {history[-1][2]:.4f}")

    _run(manifest, body)
    return EXIT_OK


def _parse_scales(text):
    try:
        scales = tuple(float(s) for s in text.split(","))
    except ValueError as e:
        raise ConfigError(f"--scales must be comma-separated floats, got {text!r}") from e
    if not scales or any(s <= 0 for s in scales):
        raise ConfigError(f"--scales must be positive, got {text!r}")
    return scales


def cmd_eval(args) -> int:
    run_dir = Path(args.checkpoint)
    cfg = _load_config(args.config or run_dir / "config.json")
    scales = _parse_scales(args.scales) if args.scales else MULTI_SCALES
    out = Path(args.out)
    manifest = RunManifest(out, "eval", {**cfg.to_dict(), "multi_scale": args.multi_scale, "flip": args.flip,
                                         "scales": list(scales), "split": args.split}, cfg.train.seed)

    def body():
        net = build_from_spec(cfg.network_spec(), seed=cfg.train.seed)
        net.load_state_dict(load_checkpoint(run_dir))
        if args.split == "train":
            samples = make_corpus(cfg.scene, cfg.train_size, seed=cfg.scene.seed)
        else:
            samples = make_corpus(cfg.scene, cfg.test_size, seed=cfg.scene.seed + 10_000)
        multi = args.multi_scale or bool(args.scales)
        report = evaluate(net, samples, cfg.scene.num_classes, multi_scale=multi, flip=args.flip, scales=scales)
        (out / "metrics.json").write_text(report.to_json(config=cfg.to_dict(), seed=cfg.train.seed) + "\n")
        manifest.outputs.append("metrics.json")
        for i in range(min(args.save_predictions, len(samples))):
            pred = predict(net, samples[i].image[None], multi, args.flip, scales)[0]
            name = f"pred_{i:04d}.pgm"
            write_pgm(out / name, pred.astype(np.uint8))
            manifest.outputs.append(name)
        print(f"miou {report.miou:.4f} pixel_acc {report.pixel_acc:.4f} on {len(samples)} {args.split} samples")

    _run(manifest, body)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = list(G.REGISTRY) if args.all else args.op
    if not names:
        raise ConfigError("gradcheck needs --op NAME or --all")
    unknown = [n for n in names if n not in G.REGISTRY]
    if unknown:
        raise ConfigError(f"unknown op {unknown[0]!r}; registered: {', '.join(G.REGISTRY)}")
    failed = []
    for name in names:
        r = G.check(name, trials=args.trials, seed=args.seed, broken=args.break_adjoint)
        status = "pass" if r.passed else "FAIL"
        print(f"{name:<24} {status}  max_rel_err={r.max_rel_err:.3e}  checked={r.checked} skipped={r.skipped}")
        if not r.passed:
            failed.append(name)
    if failed:
        raise NumericFailure(f"{len(failed)} op(s) failed: {', '.join(failed)}")
    return EXIT_OK


def _spec_for(args) -> tuple[str, NetworkSpec]:
    if args.spec:
        try:
            text = Path(args.spec).read_text()
        except OSError as e:
            raise FileNotFoundError(f"cannot read spec {args.spec}: {e}") from e
        return args.spec, NetworkSpec.from_json(text)
    return args.preset, preset_spec(args.preset, args.scale, args.num_classes)


def cmd_params(args) -> int:
    label, spec = _spec_for(args)
    net = build_from_spec(spec, materialize=False)
    base = build_from_spec(preset_spec("base-fcn", args.scale, spec.head.num_classes, backbone=spec.backbone,
                                       neck_width=spec.head.neck_width), materialize=False)
    counts, base_counts = block_counts(net), block_counts(base)
    print(f"{label} ({args.scale if not args.spec else 'custom'})")
    print(f"{'block':<16} {'params':>12} {'delta':>12}")
    for name, n in counts.items():
        print(f"{name:<16} {n:>12,} {n - base_counts.get(name, 0):>+12,}")
    total, base_total = param_count(net), param_count(base)
    print(f"{'total':<16} {total:>12,} {total - base_total:>+12,}")
    print(f"delta vs base-fcn: {(total - base_total) / 1e6:+.2f}M")
    return EXIT_OK


def _parse_shape(text):
    try:
        shape = tuple(int(s) for s in text.lower().replace("x", ",").split(","))
    except ValueError as e:
        raise ConfigError(f"--shape must look like N,C,H,W, got {text!r}") from e
    return shape


def cmd_bench(args) -> int:
    ops = list(B.OPS) if args.op == "all" else [args.op]
    shapes = [_parse_shape(args.shape)]
    if args.sweep:
        n, c, h, w = shapes[0]
        for k in range(1, args.sweep + 1):
            shapes.append((n, c, h * 2 ** ((k + 1) // 2), w * 2 ** (k // 2)))
    records = [B.bench(op, s, args.reps) for op in ops for s in shapes]
    text = B.to_csv(records)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if args.sweep:
        for op in ops:
            rs = [r for r in records if r.op == op]
            print(f"# {op}: time ~ (HW)^{B.fit_exponent(rs):.2f}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    try:
        scene_d = json.loads(Path(args.scene).read_text()) if args.scene else {}
    except json.JSONDecodeError as e:
        raise ConfigError(f"scene file is not valid JSON: {e}") from e
    if not isinstance(scene_d, dict):
        raise ConfigError("scene file must hold a JSON object")
    for key in ("band_width", "blob_size"):
        if key in scene_d:
            scene_d[key] = tuple(scene_d[key])
    try:
        scene = SyntheticSceneSpec(**scene_d).validate()
    except TypeError as e:
        raise ConfigError(f"scene: {e}") from e
    seed = seed_override(scene.seed if args.seed is None else args.seed)
    out = Path(args.out)
    manifest = RunManifest(out, "gen-data", {"scene": scene_d, "count": args.count}, seed)

    def body():
        for i, s in enumerate(make_corpus(scene, args.count, seed=seed)):
            write_spt(out / f"image_{i:04d}.spt", s.image)
            write_pgm(out / f"labels_{i:04d}.pgm", s.labels)
            manifest.outputs += [f"image_{i:04d}.spt", f"labels_{i:04d}.pgm"]
        print(f"wrote {args.count} samples to {out}")

    _run(manifest, body)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="strippool", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a JSON run config")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="fresh run directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run directory")
    p.add_argument("checkpoint", help="run directory holding checkpoint.spt/json")
    p.add_argument("--config", help="run config (defaults to the run's config.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--multi-scale", action="store_true")
    p.add_argument("--flip", action="store_true")
    p.add_argument("--scales", help="comma-separated scales, e.g. 1.0 or 0.5,1.0,1.5")
    p.add_argument("--save-predictions", type=int, default=4, metavar="N")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", action="append", default=[])
    p.add_argument("--all", action="store_true")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--break-adjoint", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts per block and deltas over base-fcn")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=PRESETS)
    g.add_argument("--spec", help="network spec JSON")
    p.add_argument("--scale", choices=("toy", "full"), default="full")
    p.add_argument("--num-classes", type=int, default=6)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("bench", help="pooling micro-benchmarks (CSV)")
    p.add_argument("--op", default="all", choices=("all",) + tuple(B.OPS))
    p.add_argument("--shape", default="1,16,32,32")
    p.add_argument("--reps", type=int, default=B.MIN_REPS)
    p.add_argument("--sweep", type=int, default=0, help="also run this many HW doublings")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gen-data", help="write synthetic samples as SPT1 images and PGM labels")
    p.add_argument("--scene", help="JSON scene spec overrides")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericFailure, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
