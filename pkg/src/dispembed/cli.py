"""Command-line interface: ``dispembed {register,evaluate,keypoints,synth}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .embedding import Embedding
from .evaluation import aggregate_reports, gen_synthetic_case, make_lung_phantom, tre
from .features import preprocess_ct
from .keypoints import foerstner_scores, select_keypoints
from .pipeline import PipelineConfig, StageError, lung_mask_fallback, register
from .volume_io import (
    LandmarkSet,
    Volume3,
    load_field,
    load_landmarks,
    load_volume,
    save_field,
    save_landmarks,
    save_volume,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _embed_dim(text: str):
    if text == "full":
        return "full"
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a positive integer or 'full'") from None
    if k < 1:
        raise argparse.ArgumentTypeError("expected a positive integer or 'full'")
    return k


def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file; flags override it")
    p.add_argument("--keypoints", type=int, dest="n_keypoints", help="target keypoint count")
    p.add_argument("--embed-dim", type=_embed_dim, help="embedding size or 'full'")
    p.add_argument("--grid-radius", type=int, help="displacement radius L in lattice steps")
    p.add_argument("--grid-step", type=int, help="lattice step q in voxels")
    p.add_argument("--stride", type=int, help="descriptor stride in voxels")
    p.add_argument("--alpha", type=float, help="code diffusion strength in [0, 1)")
    p.add_argument("--iters", type=int, help="code diffusion iterations")
    p.add_argument("--temperature", type=float, help="soft-argmin temperature")
    p.add_argument("--knn", type=int, help="graph neighbours per keypoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--spacing", type=float, nargs=3, metavar=("SX", "SY", "SZ"),
                   help="override voxel spacing (mm) of all input volumes")
    p.add_argument("--intensity-unit", choices=("HU", "normalized", "arbitrary"), default="HU",
                   help="unit of image intensities unless the file records one (default: HU)")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, help="worker cap (fallback: $DISPEMBED_THREADS)")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dispembed", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="register a moving CT to a fixed CT")
    r.add_argument("--fixed", type=Path, required=True)
    r.add_argument("--moving", type=Path, required=True)
    r.add_argument("--mask", type=Path, help="fixed-image mask (nonzero = inside)")
    r.add_argument("--out-field", type=Path, required=True, help="dense field, .raw/.meta")
    r.add_argument("--out-sparse", "--save-sparse", type=Path, dest="out_sparse",
                   help="keypoint displacements, 6-column text")
    r.add_argument("--run-log", type=Path, help="run log path (default: next to --out-field)")
    r.add_argument("--save-embedding", type=Path)
    r.add_argument("--load-embedding", type=Path)
    r.add_argument("--dump-costs", type=Path, help="raw cost maps, D x N float32")
    _config_flags(r)
    _common(r)

    e = sub.add_parser("evaluate", help="landmark TRE, one or more cases")
    e.add_argument("--lms-fixed", type=Path, nargs="+", required=True)
    e.add_argument("--lms-moving", type=Path, nargs="+", required=True)
    e.add_argument("--field", type=Path, nargs="+", help="one dense field per case")
    e.add_argument("--spacing", type=float, nargs=3, metavar=("SX", "SY", "SZ"),
                   help="voxel spacing in mm when no field is given")
    e.add_argument("--case", nargs="+", help="case names for the report")
    e.add_argument("--one-based", action="store_true", help="landmark files use 1-based indices")
    _common(e)

    k = sub.add_parser("keypoints", help="Foerstner keypoints of a fixed image")
    k.add_argument("--fixed", type=Path, required=True)
    k.add_argument("--mask", type=Path)
    k.add_argument("--out", type=Path, required=True, help="landmark-format text file")
    k.add_argument("--one-based", action="store_true")
    _config_flags(k)
    _common(k)

    s = sub.add_parser("synth", help="write a synthetic deformation case")
    s.add_argument("--base", type=Path, help="fixed image (default: generated lung phantom)")
    s.add_argument("--phantom-size", type=int, default=128)
    s.add_argument("--mask", type=Path, help="landmark region (default: phantom lungs)")
    s.add_argument("--max-disp", type=float, default=20.0, help="peak displacement in mm")
    s.add_argument("--smoothness", type=float, default=30.0, help="field smoothness in mm")
    s.add_argument("--landmarks", type=int, default=300)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", type=Path, required=True)
    s.add_argument("--one-based", action="store_true")
    _common(s)
    return parser


def _threads(args) -> int | None:
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.threads
    env = os.environ.get("DISPEMBED_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"DISPEMBED_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("DISPEMBED_THREADS must be >= 1")
        return n
    return None


def _config(args) -> PipelineConfig:
    overrides = {
        name: getattr(args, name)
        for name in ("n_keypoints", "embed_dim", "grid_radius", "grid_step", "stride", "alpha",
                     "iters", "temperature", "knn", "seed")
    }
    try:
        if args.config is not None:
            return PipelineConfig.load(args.config, **overrides)
        return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})
    except ValueError as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _volume(path: Path, args, unit=None):
    vol = load_volume(path, intensity_unit=unit or args.intensity_unit)
    if args.spacing:
        vol = Volume3(vol.voxels, tuple(args.spacing), vol.intensity_unit)
    return vol


def _cmd_register(args) -> int:
    threads = _threads(args)
    cfg = _config(args)
    fixed = _volume(args.fixed, args)
    moving = _volume(args.moving, args)
    mask = _volume(args.mask, args, "arbitrary") if args.mask else None
    emb = Embedding.load(args.load_embedding) if args.load_embedding else None
    res = register(fixed, moving, mask, cfg, threads=threads, embedding=emb)

    save_field(res.field, args.out_field)
    if args.out_sparse:
        res.sparse.save(args.out_sparse)
    if args.save_embedding:
        res.embedding.save(args.save_embedding)
    if args.dump_costs:
        res.costs.save(args.dump_costs)
    run_log = args.run_log or args.out_field.with_name(args.out_field.stem + ".log.txt")
    run_log.write_text(cfg.to_text() + res.log.to_text())
    print(res.log.to_text() if args.verbose else
          f"{len(res.sparse)} keypoints, field written to {args.out_field}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    n = len(args.lms_fixed)
    if len(args.lms_moving) != n:
        raise UsageError("--lms-fixed and --lms-moving need the same number of files")
    if args.field and len(args.field) != n:
        raise UsageError("--field needs one file per case")
    names = args.case or [Path(p).stem for p in args.lms_fixed]
    if len(names) != n:
        raise UsageError("--case needs one name per case")
    reports = []
    for i in range(n):
        f = load_landmarks(args.lms_fixed[i], args.one_based)
        m = load_landmarks(args.lms_moving[i], args.one_based)
        fld = load_field(args.field[i]) if args.field else None
        rep = tre(f, m, fld, spacing=args.spacing)
        reports.append(rep)
        print(rep.to_text(names[i]))
        for line in rep.to_lines(names[i], args.verbose):
            print(line)
    if n > 1:
        agg = aggregate_reports(reports)
        print(f"mean of case means: {agg['mean_of_case_means']:.2f} "
              f"({agg['std_of_case_means']:.2f}) mm over {agg['cases']} cases")
        print(f"pooled landmarks: {agg['pooled_mean']:.2f} ({agg['pooled_std']:.2f}) mm "
              f"over {agg['pooled_count']} landmarks")
    return EXIT_OK


def _cmd_keypoints(args) -> int:
    _threads(args)
    cfg = _config(args)
    fixed = _volume(args.fixed, args)
    vol = preprocess_ct(fixed, cfg.clamp_lo, cfg.clamp_hi) if fixed.intensity_unit == "HU" else fixed
    mask = _volume(args.mask, args, "arbitrary") if args.mask else None
    if mask is None and fixed.intensity_unit == "HU" and cfg.mask_mode != "none":
        mask = lung_mask_fallback(fixed, cfg.mask_threshold_hu)
    scores = foerstner_scores(vol, cfg.foerstner_sigma_mm, cfg.foerstner_grad_sigma_mm)
    kps = select_keypoints(scores, mask, cfg.n_keypoints, cfg.nms_radius)
    save_landmarks(LandmarkSet(kps.coords), args.out, args.one_based)
    print(f"{len(kps)} keypoints written to {args.out}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    _threads(args)
    if args.base:
        base = load_volume(args.base, intensity_unit="HU")
        lung = load_volume(args.mask) if args.mask else None
    else:
        size = args.phantom_size
        base, lung = make_lung_phantom((size,) * 3, seed=0)
        if args.mask:
            lung = load_volume(args.mask)
    moving, truth, (lf, lm) = gen_synthetic_case(
        base, args.max_disp, args.smoothness, args.seed, args.landmarks, landmark_mask=lung)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    save_volume(base, out / "fixed.nii.gz")
    save_volume(moving, out / "moving.nii.gz")
    if lung is not None:
        save_volume(lung, out / "mask.nii.gz")
    save_field(truth, out / "truth.raw")
    save_landmarks(lf, out / "lms_fixed.txt", args.one_based)
    save_landmarks(lm, out / "lms_moving.txt", args.one_based)
    initial = tre(lf, lm, spacing=base.spacing)
    print(initial.to_text("initial"))
    return EXIT_OK


_COMMANDS = {
    "register": _cmd_register,
    "evaluate": _cmd_evaluate,
    "keypoints": _cmd_keypoints,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
