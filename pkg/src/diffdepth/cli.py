"""Command line entry point: ``diffdepth {gen,train,eval,infer,ablate}``.

Exit status is 0 on success and 2 on invalid input (bad config, missing or
incompatible files).  Every command writes into a run directory whose name
carries the config hash.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import synthdata
from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, TrainConfig
from .evaluate import EvaluationError, benchmark_checkpoint, export_visuals
from .geometry import GeometryError
from .synthdata import DatasetError

log = logging.getLogger("diffdepth")

VALIDATION_ERRORS = (ConfigError, CheckpointError, DatasetError, EvaluationError, GeometryError, FileNotFoundError)


def _run_dir(out: str | Path, prefix: str, config_hash: str) -> Path:
    d = Path(out) / f"{prefix}-{config_hash}"
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen(args) -> int:
    counts = {"train": args.train, "val": args.val, "test": args.test}
    ds = synthdata.generate_splits(args.seed, (args.height, args.width), counts, d_max=args.d_max)
    path = synthdata.save(ds, args.out)
    print(f"wrote {len(ds)} samples to {path}")
    return 0


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    changes = {}
    if args.stage is not None and args.stage != cfg.stage:
        changes["stage"] = args.stage
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    return cfg.replace(**changes) if changes else cfg


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = synthdata.load(args.data)
    init = Checkpoint.load(args.init) if args.init else None
    if cfg.stage > 0 and init is None:
        raise ConfigError(f"stage {cfg.stage} needs --init pointing at a stage-{cfg.stage - 1} checkpoint")
    resume = Checkpoint.load(args.resume) if args.resume else None
    run = _run_dir(args.out, f"stage{cfg.stage}", cfg.hash())
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    from .trainer import train

    ckpt = train(cfg, ds, init=init, resume=resume, log_path=run / "train_log.csv", checkpoint_dir=run / "epochs")
    path = ckpt.save(run / "final.ckpt")
    print(f"checkpoint {ckpt.id} -> {path}")
    return 0


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    ds = synthdata.load(args.data)
    report = benchmark_checkpoint(ckpt, ds, args.splits, median_scale=args.median_scale, eval_split=args.eval_split)
    run = _run_dir(args.out, "eval", ckpt.config_hash)
    paths = report.write(run)
    print(report.to_table())
    print(f"wrote {paths['csv']}")
    return 0


def cmd_infer(args) -> int:
    from .trainer import load_nets, predict_depth_seeded, schedule_for
    from . import tensor as T
    from .tensor import Tensor

    ckpt = Checkpoint.load(args.ckpt)
    cfg = TrainConfig.from_dict(ckpt.config)
    image = synthdata.read_ppm(Path(args.image))
    if image.shape[0] != 3:
        raise DatasetError(f"{args.image}: expected a colour (P6) image")
    want = tuple(ckpt.meta.get("image_size") or image.shape[1:])
    if tuple(image.shape[1:]) != want:
        raise DatasetError(f"{args.image}: size {image.shape[1:]} does not match checkpoint size {want}")
    d_max = float(ckpt.meta.get("d_max") or 10.0)
    nets = load_nets(ckpt)
    x = image[None].astype(cfg.np_dtype)
    with T.no_grad():
        refined = nets.refine_image(Tensor(x))
        _, feat = nets.build_condition(refined)
    depth = predict_depth_seeded(nets, x, [args.seed], schedule_for(cfg), logit_space=cfg.odr, salt=7)[0] * d_max
    run = _run_dir(args.out, "infer", ckpt.config_hash)
    stem = Path(args.image).stem
    vs = export_visuals(run / stem, depth, depth, image, image, feat.data[0] if cfg.fic else None, refined.data[0])
    np.save(run / f"{stem}_depth.npy", depth)
    print(f"depth range [{depth.min():.3f}, {depth.max():.3f}] -> {vs.files['depth_pred']}")
    return 0


ABLATION_DEFAULT = {
    "base": {},
    "stage1": [{"name": "full"}, {"name": "pde_off", "pde": False}, {"name": "odr_off", "odr": False}, {"name": "fic_off", "fic": False}],
    "stage2": [{"name": "trinity", "trinity_mode": "trinity"}, {"name": "distill", "trinity_mode": "distill"},
               {"name": "contrast", "trinity_mode": "contrast"}],
}


def run_ablation(grid: dict, ds) -> list[dict]:
    """Train every stage-1 row and every stage-2 row and benchmark them.

    Stage-2 rows start from the first stage-1 row.  Rows that change the
    network shape or latent space (FIC, ODR) get their own stage-0 teacher.
    """
    from .trainer import train

    base = TrainConfig.from_dict({**grid.get("base", {}), "stage": 0})
    rows = []
    teachers: dict[tuple[bool, bool], Checkpoint] = {}

    def teacher_for(cfg: TrainConfig) -> Checkpoint:
        key = (cfg.fic, cfg.odr)
        if key not in teachers:
            teachers[key] = train(base.replace(fic=cfg.fic, odr=cfg.odr), ds)
        return teachers[key]

    def record(stage: int, name: str, ckpt: Checkpoint):
        rep = benchmark_checkpoint(ckpt, ds)
        rows.append({"stage": stage, "name": name, "config_hash": ckpt.config_hash,
                     "clear_AbsRel": rep.splits["clear"].AbsRel, "aug_AbsRel": rep.splits["aug"].AbsRel,
                     "gap": rep.gap()})
        log.info("%s", rows[-1])

    record(0, "teacher", teacher_for(base))
    stage1 = {}
    for row in grid.get("stage1", []):
        row = dict(row)
        name = row.pop("name")
        cfg = base.replace(stage=1, **row)
        stage1[name] = train(cfg, ds, init=teacher_for(cfg))
        record(1, name, stage1[name])
    if grid.get("stage2"):
        if not stage1:
            raise ConfigError("ablation grid has stage2 rows but no stage1 row to start from")
        first = next(iter(stage1.values()))
        for row in grid["stage2"]:
            row = dict(row)
            name = row.pop("name")
            cfg = TrainConfig.from_dict({**first.config, "stage": 2, "levels": None, **row})
            record(2, name, train(cfg, ds, init=first))
    return rows


def cmd_ablate(args) -> int:
    grid = json.loads(Path(args.grid).read_text()) if args.grid else ABLATION_DEFAULT
    ds = synthdata.load(args.data)
    base = TrainConfig.from_dict({**grid.get("base", {}), "stage": 0})
    run = _run_dir(args.out, "ablate", base.hash())
    rows = run_ablation(grid, ds)
    keys = ["stage", "name", "config_hash", "clear_AbsRel", "aug_AbsRel", "gap"]
    lines = [",".join(keys)] + [",".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k]) for k in keys) for r in rows]
    (run / "ablation.csv").write_text("\n".join(lines) + "\n")
    print(f"{'stage':>5} {'name':<10} {'clear':>8} {'aug':>8} {'gap':>8}")
    for r in rows:
        print(f"{r['stage']:>5} {r['name']:<10} {r['clear_AbsRel']:>8.4f} {r['aug_AbsRel']:>8.4f} {r['gap']:>+8.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffdepth", description="Toy-scale robust self-supervised depth with a diffusion denoiser.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--train", type=int, default=64)
    g.add_argument("--val", type=int, default=16)
    g.add_argument("--test", type=int, default=16)
    g.add_argument("--d-max", type=float, default=10.0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--stage", type=int, choices=(0, 1, 2))
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--init", help="previous-stage checkpoint (stages 1 and 2)")
    t.add_argument("--resume", help="checkpoint of this stage to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="benchmark a checkpoint on clear and corrupted splits")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="runs")
    e.add_argument("--splits", nargs="+", default=["clear", "aug"], help="clear, aug or <kind>@<level>")
    e.add_argument("--eval-split", default="test")
    e.add_argument("--median-scale", type=_on_off, default=True, metavar="{on,off}")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict depth for one PPM image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", default="runs")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="train and benchmark an ablation grid")
    a.add_argument("--grid", help="JSON grid; defaults to the built-in stage-1/stage-2 matrix")
    a.add_argument("--data", required=True)
    a.add_argument("--out", default="runs")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
