"""Command-line entry point: gen | train | render | eval | ablate.

Every subcommand prints its fully resolved configuration as JSON before
doing anything, so runs are auditable from their logs alone.

Exit codes: 0 success, 2 bad input, 3 numeric failure, 4 checkpoint
problem, 5 missing data.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import deform, evaluation, fields, geometry, losses, optim, render, synth

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4
EXIT_MISSING = 5

THREADS_ENV = "TRILAYER_THREADS"


def _resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(THREADS_ENV)
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as e:
            raise ValueError(f"bad {THREADS_ENV} value {env!r}") from e
    return os.cpu_count() or 1


def _apply_threads(n: int):
    """Limit BLAS pools; falls back to env hints if threadpoolctl is absent."""
    try:
        import threadpoolctl

        return threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)
        return None


def _print_config(command: str, cfg: dict) -> None:
    print(f"[{command}] effective config:")
    print(json.dumps(cfg, indent=1, sort_keys=True, default=str))


def _load_json(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return json.loads(p.read_text())


# subcommands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = synth.SceneSpec()
    if args.spec is not None:
        spec = synth.SceneSpec.from_dict(_load_json(args.spec))
    _print_config("gen", {"spec": spec.to_dict(), "seed": args.seed, "out": args.out})
    summary = synth.generate(spec, args.seed, args.out)
    print(
        f"wrote {summary['frames']} frames to {args.out}; "
        f"mean occluded fraction {summary['mean_occluded_fraction']:.3f}"
    )
    return EXIT_OK


def _train_config_from(args) -> tuple[optim.TrainConfig, fields.FieldConfig]:
    raw = _load_json(args.config) if args.config else {}
    tc = optim.TrainConfig.from_dict(raw.get("train", {}))
    fc = fields.FieldConfig.from_dict(raw.get("field", {}))
    if args.steps is not None:
        tc.steps = args.steps
    if args.seed is not None:
        tc.seed = args.seed
    if args.no_param:
        tc.mode = render.MODE_FLAT
    elif args.no_occ_layer:
        tc.mode = render.MODE_TWO
    if args.no_locc:
        tc.lam_occ = 0.0
    if args.no_lcomp:
        tc.lam_comp = 0.0
    return tc, fc


def cmd_train(args) -> int:
    tc, fc = _train_config_from(args)
    threads = _resolve_threads(args.threads)
    _print_config(
        "train",
        {
            "dataset": args.dataset,
            "out": args.out,
            "resume": args.resume,
            "threads": threads,
            "train": tc.to_dict(),
            "field": fc.to_dict(),
            "loss_weights": tc.weights().__dict__,
        },
    )
    _apply_threads(threads)
    dataset = synth.load_dataset(args.dataset)
    every = max(1, tc.steps // 10)

    def progress(step, loss):
        if step % every == 0 or step == tc.steps - 1:
            print(f"step {step:6d}  loss {loss:.5f}", flush=True)

    result = optim.train(dataset, tc, fc, args.out, resume=args.resume, progress=progress)
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss csv:   {result.csv}")
    return EXIT_OK


def _orbit_camera(base: geometry.Camera, angle_deg: float) -> geometry.Camera:
    """Camera rotated about the world y axis, keeping its distance."""
    a = np.deg2rad(angle_deg)
    ry = np.array(
        [[np.cos(a), 0.0, np.sin(a)], [0.0, 1.0, 0.0], [-np.sin(a), 0.0, np.cos(a)]]
    )
    return geometry.Camera(
        fx=base.fx,
        fy=base.fy,
        cx=base.cx,
        cy=base.cy,
        width=base.width,
        height=base.height,
        rotation=ry @ base.rotation,
        origin=ry @ base.origin,
    )


def cmd_render(args) -> int:
    header, arrays = fields.load_checkpoint(args.checkpoint)
    meta = header.get("meta", {})
    if not meta:
        raise fields.CheckpointError("checkpoint carries no model metadata")
    dataset = synth.load_dataset(args.dataset)
    if meta.get("n_frames") != dataset.n_frames:
        raise fields.CheckpointError(
            f"checkpoint trained on {meta.get('n_frames')} frames, dataset has {dataset.n_frames}"
        )
    fc = fields.FieldConfig.from_dict(meta["field"])
    mode = meta.get("mode", render.MODE_THREE)
    threads = _resolve_threads(args.threads)
    counts = render.SampleCounts(args.n_occ, args.n_fg, args.n_bg)
    _print_config(
        "render",
        {
            "checkpoint": args.checkpoint,
            "dataset": args.dataset,
            "out": args.out,
            "mode": mode,
            "layers": args.layers,
            "novel_view": args.novel_view,
            "samples": counts.__dict__,
            "threads": threads,
            "step": header["step"],
        },
    )
    _apply_threads(threads)
    model = fields.TriLayerModel(dataset.n_frames, fc, seed=0)
    fields.restore_model(model, arrays)
    layout = optim.scene_layout(dataset)

    out = Path(args.out)
    subdirs = ["rgb"]
    if args.layers:
        subdirs += ["rgb_no_occ", "rgb_fg", "alpha_occ", "alpha_fg", "alpha_bg"]
    for sub in subdirs:
        (out / sub).mkdir(parents=True, exist_ok=True)

    for f in range(dataset.n_frames):
        camera = dataset.cameras[f]
        if args.novel_view is not None:
            camera = _orbit_camera(camera, args.novel_view)
        planes = render.render_image(
            model, camera, f, layout, dataset.skeleton, dataset.poses[f], counts, mode=mode
        )
        name = f"{f:04d}.png"
        render.write_png(out / "rgb" / name, planes["rgb"])
        if args.layers:
            for key in ("rgb_no_occ", "rgb_fg", "alpha_occ", "alpha_fg", "alpha_bg"):
                render.write_png(out / key / name, planes[key])
        print(f"rendered frame {f}", flush=True)
    return EXIT_OK


def cmd_eval(args) -> int:
    dataset = synth.load_dataset(args.dataset)
    _print_config("eval", {"runs": args.runs, "dataset": args.dataset, "csv": args.csv})
    table = evaluation.compare_runs(args.runs, dataset, csv_path=args.csv)
    print(table)
    return EXIT_OK


ABLATION_VARIANTS = {
    "full": {},
    "baseline": {"no_param": True, "no_locc": True},
    "no_occ_layer": {"no_occ_layer": True},
    "no_locc": {"no_locc": True},
    "no_lcomp": {"no_lcomp": True},
}


def cmd_ablate(args) -> int:
    variants = args.variants.split(",")
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"unknown ablation variant {v!r}; options: {sorted(ABLATION_VARIANTS)}")
    _print_config(
        "ablate",
        {"dataset": args.dataset, "out": args.out, "variants": variants, "steps": args.steps},
    )
    out = Path(args.out)
    run_dirs = []
    for v in variants:
        flags = ABLATION_VARIANTS[v]
        sub = argparse.Namespace(
            config=args.config,
            dataset=args.dataset,
            out=str(out / v),
            steps=args.steps,
            seed=args.seed,
            resume=None,
            threads=args.threads,
            no_occ_layer=flags.get("no_occ_layer", False),
            no_locc=flags.get("no_locc", False),
            no_lcomp=flags.get("no_lcomp", False),
            no_param=flags.get("no_param", False),
        )
        print(f"=== training variant {v} ===", flush=True)
        cmd_train(sub)
        rsub = argparse.Namespace(
            checkpoint=str(out / v / "model.ckpt"),
            dataset=args.dataset,
            out=str(out / v / "renders"),
            layers=True,
            novel_view=None,
            threads=args.threads,
            n_occ=args.n_occ,
            n_fg=args.n_fg,
            n_bg=args.n_bg,
        )
        print(f"=== rendering variant {v} ===", flush=True)
        cmd_render(rsub)
        run_dirs.append(str(out / v / "renders"))
    dataset = synth.load_dataset(args.dataset)
    table = evaluation.compare_runs(run_dirs, dataset, csv_path=out / "ablation.csv")
    print(table)
    return EXIT_OK


# parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="trilayer",
        description="Occlusion-aware three-layer volumetric reconstruction of articulated bodies.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic occluded dataset")
    g.add_argument("--spec", default=None, help="scene spec JSON (defaults built in)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train on a dataset directory")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="JSON with 'train' and 'field' sections")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--threads", type=int, default=None)
    t.add_argument("--no-occ-layer", action="store_true", help="two-layer composition")
    t.add_argument("--no-locc", action="store_true", help="drop the occlusion-decoupling loss")
    t.add_argument("--no-lcomp", action="store_true", help="drop the completeness loss")
    t.add_argument("--no-param", action="store_true", help="no layered parameterization at all")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--layers", action="store_true", help="also write per-layer renders and opacity maps")
    r.add_argument("--novel-view", type=float, default=None, metavar="DEG", help="orbit azimuth")
    r.add_argument("--threads", type=int, default=None)
    r.add_argument("--n-occ", type=int, default=32)
    r.add_argument("--n-fg", type=int, default=64)
    r.add_argument("--n-bg", type=int, default=32)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="score rendered runs against a dataset")
    e.add_argument("runs", nargs="+", help="render output directories")
    e.add_argument("--dataset", required=True)
    e.add_argument("--csv", default=None, help="per-frame CSV output path")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="train, render, and compare ablation variants")
    a.add_argument("--dataset", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", default=None)
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--threads", type=int, default=None)
    a.add_argument("--variants", default="full,baseline")
    a.add_argument("--n-occ", type=int, default=32)
    a.add_argument("--n-fg", type=int, default=64)
    a.add_argument("--n-bg", type=int, default=32)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (losses.NumericError, optim.OptimError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except fields.CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (synth.DatasetError, evaluation.MissingDataError) as e:
        print(f"missing data: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (
        ValueError,
        KeyError,
        json.JSONDecodeError,
        geometry.GeometryError,
        deform.DeformError,
        synth.SceneSpecError,
    ) as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
