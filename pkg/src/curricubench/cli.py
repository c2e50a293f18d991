"""Command-line entry point: ``curricubench <subcommand> ...``.

Exit codes: 0 success, 2 validation error (bad manifest, labels, masks,
malformed results rows), 3 any other runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import CurricubenchError, EmptyError, EmptyMaskError, ValidationError

log = logging.getLogger("curricubench")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


def _add_profile(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=("desk", "paper"), default=None,
                   help="epoch/batch profile (default: the manifest's, else desk)")
    p.add_argument("--jobs", type=int, default=1, help="parallel LR-search candidates")


def _load(args):
    from .experiment import load_manifest

    manifest = load_manifest(args.manifest, args.profile)
    clamp = getattr(args, "cam_clamp", None)
    if clamp is not None:
        manifest.attention = replace(manifest.attention, cam_clamp=clamp)
    return manifest


def cmd_gen_phantom(args) -> int:
    from .data import ClassMode, PhantomConfig, PhantomMode, gen_phantom, save_dataset

    config = PhantomConfig(args.n, args.side, PhantomMode(args.mode), args.noise, args.seed, ClassMode(args.class_mode))
    dataset, masks = gen_phantom(config)
    save_dataset(dataset, args.out, masks)
    print(f"wrote {len(dataset)} images to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run_experiment

    manifest = _load(args)
    outcome = run_experiment(manifest, args.jobs, args.manifest)
    print(",".join(outcome.row.to_csv()))
    return EXIT_OK


def cmd_confound(args) -> int:
    from .experiment import run_confound

    manifest = _load(args)
    for outcome in run_confound(manifest, args.jobs):
        print(",".join(outcome.row.to_csv()))
    return EXIT_OK


def cmd_ail(args) -> int:
    from .attention import compute_cams, mean_ail, postprocess_mask
    from .backbone import build_network, load_checkpoint
    from .data import ClassMode, DatasetSpec, materialize
    from .errors import MaskError
    from .formats import read_mask, write_f32g, write_grid_csv

    ckpt = load_checkpoint(args.checkpoint)
    spec = DatasetSpec(Path(args.data), args.side, class_mode=ClassMode(args.class_mode))
    dataset, masks = materialize(spec)
    if args.masks:
        mask_dir = Path(args.masks)
        masks = {sid: read_mask(mask_dir / sid) for sid in dataset.ids if (mask_dir / sid).is_file()}
    if not masks:
        raise MaskError(f"no lung masks found for {args.data}")
    if args.postprocess:
        cleaned = {}
        for sid, m in masks.items():
            try:
                cleaned[sid] = postprocess_mask(m, args.min_area_fraction, args.closing_radius)
            except EmptyMaskError:
                log.warning("%s: mask has no usable component, skipped", sid)
        masks = cleaned
    net = build_network(ckpt)
    summary = mean_ail(net, dataset, masks, args.cam_clamp, args.only_correct)
    summary.write_csv(args.out, dataset.ids)
    if args.cam_dir:
        cam_dir = Path(args.cam_dir)
        cam_dir.mkdir(parents=True, exist_ok=True)
        cams = compute_cams(net, dataset.tensor(), args.cam_clamp)
        for sid, cam in zip(dataset.ids, cams):
            stem = Path(sid).stem
            if args.format == "csv":
                write_grid_csv(cam_dir / f"{stem}.csv", cam)
            else:
                write_f32g(cam_dir / f"{stem}.f32g", cam)
    print(f"mean_ail={summary.mean:.6f} scored={len(summary.per_image)} excluded={len(summary.excluded)}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import emit_report

    try:
        parsed = emit_report(args.results, args.single_task, args.out, svg=not args.no_svg)
    except EmptyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    for message in parsed.errors:
        print(f"skipped malformed row {message}", file=sys.stderr)
    print(f"report for {len(parsed.rows)} rows written to {args.out}")
    return EXIT_VALIDATION if parsed.errors else EXIT_OK


def cmd_lr_search(args) -> int:
    from .backbone import HeadSpec, transfer_weights
    from .curriculum import initial_checkpoint, lr_search
    from .data import make_split, materialize

    manifest = _load(args)
    steps = list(manifest.curriculum.steps) + [manifest.curriculum.downstream]
    if args.step.isdigit():
        index = int(args.step)
    else:
        matches = [i for i, s in enumerate(steps) if s.task == args.step]
        if not matches:
            from .errors import ManifestError

            raise ManifestError(f"task {args.step!r} is not part of the manifest")
        index = matches[0]
    step = steps[index]
    dataset, _ = materialize(manifest.dataset)
    train, val = make_split(dataset, manifest.dataset.split_fraction, manifest.dataset.seed)
    params = manifest.task_params
    init = initial_checkpoint(manifest.curriculum, manifest.backbone, manifest.global_seed)
    head = HeadSpec(step.task, num_classes=train.num_classes, proj_dim=params.proj_dim,
                    n_prototypes=params.swav_prototypes)
    start = transfer_weights(init, head, step.seed)
    result = lr_search(step, start, (train, val), params, args.jobs)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(["lr", "score", "chosen"])
    for lr, score in zip(result.candidates, result.scores):
        writer.writerow([lr, f"{score:.9g}", "true" if lr == result.chosen_lr else "false"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curricubench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="write a synthetic chest-phantom dataset with lung masks")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--mode", default="signal_in_lung",
                   choices=("signal_in_lung", "signal_out_lung", "mixed"))
    p.add_argument("--noise", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--class-mode", default="two_class", choices=("two_class", "four_class"))
    p.set_defaults(func=cmd_gen_phantom)

    for name, func, text in (("run", cmd_run, "run one experiment manifest"),
                             ("confound", cmd_confound, "lung-only vs inverse-segmented training")):
        p = sub.add_parser(name, help=text)
        p.add_argument("manifest")
        _add_profile(p)
        p.add_argument("--cam-clamp", action=argparse.BooleanOptionalAction, default=None,
                       help="clamp negative CAM values before scoring (default on)")
        p.set_defaults(func=func)

    p = sub.add_parser("ail", help="score a checkpoint's attention inside the lungs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory with labels.csv")
    p.add_argument("--masks", help="mask directory (default: <data>/masks)")
    p.add_argument("--out", required=True, help="per-image CSV")
    p.add_argument("--cam-dir")
    p.add_argument("--format", choices=("f32g", "csv"), default="f32g")
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--class-mode", default="two_class", choices=("two_class", "four_class"))
    p.add_argument("--cam-clamp", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--postprocess", action=argparse.BooleanOptionalAction, default=True,
                   help="clean masks (component filter + closing) before scoring")
    p.add_argument("--min-area-fraction", type=float, default=0.01)
    p.add_argument("--closing-radius", type=int, default=2)
    p.add_argument("--only-correct", action="store_true")
    p.set_defaults(func=cmd_ail)

    p = sub.add_parser("report", help="markdown table and scatter data from results.csv")
    p.add_argument("results")
    p.add_argument("--single-task", help="CSV task,acc with single-task accuracies")
    p.add_argument("--out", required=True)
    p.add_argument("--no-svg", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("lr-search", help="run the learning-rate search of one curriculum step")
    p.add_argument("manifest")
    p.add_argument("--step", default="0", help="step index or task name")
    _add_profile(p)
    p.set_defaults(func=cmd_lr_search)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CurricubenchError, OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
