"""Command-line entry point: gen-data, train, eval, profile, visualize.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 non-finite training loss, 5 checkpoint/model shape mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .checkpoint import CheckpointShapeError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, preset_config, serialize_config, with_seed
from .errors import ConfigurationError, FormatError, GeometryError, ShapeError
from .geometry import Rect
from .network import TNetModel
from .profiler import PolicyMetrics, count_params, policy_metrics, profile_traversal
from .synth import Dataset, generate, load, save
from .training import NonFiniteLossError, make_trainer, train
from .traversal import TraversalConfig, predict

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NONFINITE, EXIT_SHAPE = 0, 2, 3, 4, 5


def _out(msg: str) -> None:
    sys.stdout.write(msg + "\n")
    sys.stdout.flush()


def _err(msg: str) -> None:
    sys.stderr.write(f"tnet: {msg}\n")


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = with_seed(load_config(args.config), args.seed)
    cfg.validate(need_data=True)
    count = cfg.data.count if args.count is None else args.count
    ds = generate(cfg.synth_spec(), count)
    crc = save(ds, args.out)
    _out(json.dumps({"count": len(ds), "checksum": f"{crc:08x}", "path": str(args.out),
                     "level1_glyph_extent": ds.spec.level1_glyph_extent}))
    return EXIT_OK


def _check_data(cfg: RunConfig, ds: Dataset, trav: TraversalConfig) -> None:
    if ds.spec.image_extent != trav.full_extent:
        raise ConfigurationError(f"dataset images are {ds.spec.image_extent} px, traversal needs {trav.full_extent} px")
    if ds.spec.num_classes > cfg.model.num_classes:
        raise ConfigurationError(f"dataset has {ds.spec.num_classes} classes, model predicts {cfg.model.num_classes}")


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    if args.resume:
        ck = load_checkpoint(args.resume)
        cfg, state = ck.config, ck.state
    else:
        cfg = with_seed(load_config(args.config), args.seed)
        cfg.validate(need_data=True)
        model = TNetModel(cfg.model, cfg.traversal.grid_n, np.random.default_rng(cfg.seed), spec=cfg.backbone_spec())
        state = make_trainer(model, cfg.train_config())
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
    tcfg = cfg.train_config()
    if args.steps is not None:
        tcfg.steps = args.steps
    trav = cfg.traversal_config()
    ds = load(args.data)
    _check_data(cfg, ds, trav)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.cfg").write_text(serialize_config(cfg))
    images, labels = ds.model_inputs(), ds.labels
    every = cfg.train.checkpoint_every

    def on_step(m: dict) -> None:
        if every and m["step"] % every == 0:
            save_checkpoint(out_dir / f"checkpoint-{m['step']:06d}.tnck", cfg, state)

    mode = "a" if args.resume else "w"
    with open(out_dir / "metrics.jsonl", mode) as mf:
        train(state, images, labels, tcfg, trav, metrics_file=mf, echo=None if args.quiet else sys.stdout, callback=on_step)
    save_checkpoint(out_dir / "checkpoint.tnck", cfg, state)
    _out(json.dumps({"steps": state.step, "checkpoint": str(out_dir / "checkpoint.tnck"), "b": state.b_s.b}))
    return EXIT_OK


def _mean_policy(outs, ds: Dataset, offset: int) -> PolicyMetrics | None:
    prec, rec, cov = [], [], []
    i = offset
    for out in outs:
        tree = out.tree
        att = tree.levels >= 2
        if not att.any():
            return None
        R = tree.rects[0, 0, 2]
        for b in range(out.batch_size):
            rects = [Rect(*r) for r in tree.rects[b, att]]
            m = policy_metrics(rects, ds.bbox(i), int(R))
            prec.append(m.precision)
            rec.append(m.recall)
            cov.append(m.coverage)
            i += 1
    return PolicyMetrics(float(np.mean(prec)), float(np.mean(rec)), float(np.mean(cov)))


def evaluate(cfg: RunConfig, model: TNetModel, ds: Dataset, locations: list[int], batch_size: int) -> list[dict]:
    base = cfg.traversal_config()
    images = ds.model_inputs()
    results = []
    for n in locations:
        trav = base.with_locations(n)
        preds, outs = predict(model, images, trav, batch_size)
        row = {
            "locations": n,
            "accuracy": float(np.mean(preds == ds.labels)) if len(ds) else float("nan"),
            "flops": profile_traversal(base, model.spec, cfg.model, trav.total_locations if n else 0).total,
        }
        pm = _mean_policy(outs, ds, 0) if n and len(ds) else None
        if pm is not None:
            row.update(precision=pm.precision, recall=pm.recall, coverage=pm.coverage)
            cells = np.concatenate([o.tree.cells[:, o.tree.levels == 2] for o in outs])
            row["cell_precision"] = float(np.mean(np.any(cells == ds.cells[:, None], axis=1)))
        results.append(row)
    return results


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config
    ds = load(args.data)
    trav = cfg.traversal_config()
    _check_data(cfg, ds, trav)
    if args.locations is not None:
        locs = sorted(set(args.locations))
    else:
        top = cfg.eval.max_locations if cfg.eval.max_locations is not None else (trav.locations_per_level[0] if trav.levels > 1 else 0)
        locs = list(range(0, top + 1))
    k = cfg.traversal.grid_n ** 2
    for n in locs:
        if not 0 <= n <= k:
            raise ConfigurationError(f"--locations {n} outside [0, {k}]")
    rows = evaluate(cfg, ck.state.model, ds, locs, cfg.eval.batch_size)
    accs = [r["accuracy"] for r in rows]
    trend = "non-decreasing" if all(b >= a for a, b in zip(accs, accs[1:])) else "not monotonic"
    for r in rows:
        _out(json.dumps(r))
    _out(json.dumps({"summary": "accuracy vs locations", "trend": trend, "samples": len(ds)}))
    return EXIT_OK


def cmd_profile(args) -> int:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset_config(args.preset or "paper-imagenet")
    spec = cfg.backbone_spec()
    trav = cfg.traversal_config()
    cfg.validate(need_data=False)
    n = args.locations if args.locations is not None else trav.total_locations
    report = profile_traversal(trav, spec, cfg.model, n)
    if args.format == "records":
        _out(report.to_records())
    else:
        _out(report.to_table())
        _out(f"backbone parameters          {count_params(spec):>16,}")
    return EXIT_OK


# --------------------------------------------------------------------------
# overlays

_COLORS = [(255, 60, 60), (60, 200, 60), (80, 120, 255), (255, 200, 0)]


def _draw_rect(img: np.ndarray, r: Rect, color) -> None:
    h, w, _ = img.shape
    x0, y0, x1, y1 = max(r.x0, 0), max(r.y0, 0), min(r.x1, w) - 1, min(r.y1, h) - 1
    img[y0, x0 : x1 + 1] = color
    img[y1, x0 : x1 + 1] = color
    img[y0 : y1 + 1, x0] = color
    img[y0 : y1 + 1, x1] = color


def write_ppm(path: Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def read_ppm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise FormatError("not a binary PPM", 0)
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def cmd_visualize(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config
    ds = load(args.data)
    trav = cfg.traversal_config()
    _check_data(cfg, ds, trav)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = min(args.count, len(ds))
    _, outs = predict(ck.state.model, ds.model_inputs()[:count], trav, cfg.eval.batch_size)
    i = 0
    for out in outs:
        tree = out.tree
        for b in range(out.batch_size):
            gray = np.clip(ds.images[i] * 255.0, 0, 255).astype(np.uint8)
            rgb = np.repeat(gray[..., None], 3, axis=2)
            nodes = []
            for j in np.flatnonzero(tree.levels >= 2):
                r = Rect(*(int(v) for v in tree.rects[b, j]))
                _draw_rect(rgb, r, _COLORS[(tree.levels[j] - 2) % len(_COLORS)])
                nodes.append({"level": int(tree.levels[j]), "cell": int(tree.cells[b, j]), "rect": list(r)})
            weights = [round(float(v), 2) for v in out.feature_weights.data[b]]
            write_ppm(out_dir / f"sample_{i:05d}.ppm", rgb)
            meta = {
                "index": i,
                "label": int(ds.labels[i]),
                "prediction": int(np.argmax(out.logits.data[b])),
                "attended": nodes,
                "feature_weights": weights,
                "weighted": cfg.model.feature_weighting,
            }
            (out_dir / f"sample_{i:05d}.json").write_text(json.dumps(meta))
            i += 1
    _out(json.dumps({"written": count, "dir": str(out_dir)}))
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tnet", description="Multi-scale hard-attention traversal networks")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} (kernels: {_kernels.BACKEND})")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic glyph dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="total step count (overrides train.steps)")
    t.add_argument("--resume", help="continue from a checkpoint (its config is used)")
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--quiet", action="store_true", help="do not echo metrics to stdout")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--locations", type=int, nargs="+")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("profile", help="FLOPs and parameter report")
    f.add_argument("--config")
    f.add_argument("--preset", help="paper-imagenet, paper-fmow-lite or tiny")
    f.add_argument("--locations", type=int)
    f.add_argument("--format", choices=("table", "records"), default="table")
    f.set_defaults(func=cmd_profile)

    v = sub.add_parser("visualize", help="write attention overlays (PPM + JSON)")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--count", type=int, default=16)
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "train" and not args.config and not args.resume:
        parser.error("train needs --config or --resume")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        _err(str(exc))
        return EXIT_NONFINITE
    except (CheckpointShapeError, ShapeError) as exc:
        _err(f"shape mismatch: {exc}")
        return EXIT_SHAPE
    except FormatError as exc:
        _err(f"bad file: {exc}")
        return EXIT_IO
    except (ConfigurationError, GeometryError) as exc:
        _err(f"configuration error: {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
