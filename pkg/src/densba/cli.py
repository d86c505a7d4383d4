"""Command line entry point.

Subcommands: synth (render a test scene), refine (run the optimizer on a
prior), eval (score a state against ground truth), losses (print the loss
breakdown of a state), gradcheck (finite-difference audit of the analytic
gradients).

Exit codes: 0 success, 1 internal failure or failed gradient audit,
2 usage (bad flags, bad config, occupied output), 3 malformed input file,
4 numerical failure (non-finite prior or loss).

Output directories are staged in a temporary sibling and renamed into place
only on success, so a failed run never leaves a partial result behind.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .formats import (
    load_config,
    read_calibration,
    read_image,
    read_state,
    write_image,
    write_state,
)
from .gradcheck import run_gradient_suite
from .losses import LossWeights, total_loss
from .metrics import (
    DEPTH_CSV_HEADER,
    FLOW_CSV_HEADER,
    POSE_CSV_HEADER,
    accumulate_motions,
    ate,
    depth_metrics,
    flow_epe,
)
from .refine import oft_refine
from .state import OutputState
from .synth import SceneSpec, default_scene, random_scene, render_snippet
from .validation import FormatError, NumericalError


@contextmanager
def _staged_dir(target):
    """Build the output in a temp sibling; rename over target on success."""
    target = Path(target)
    if target.exists() and (not target.is_dir() or any(target.iterdir())):
        raise ValueError(f"output {target} already exists and is not empty")
    tmp = Path(tempfile.mkdtemp(dir=target.parent, prefix=f".{target.name}."))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    os.replace(tmp, target)


def _emit_csv(header: str, row: str, out_path) -> None:
    text = f"{header}\n{row}\n"
    if out_path is None:
        sys.stdout.write(text)
        return
    out_path = Path(out_path)
    fd, tmp = tempfile.mkstemp(dir=out_path.parent, prefix=f".{out_path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, out_path)
    except BaseException:
        os.unlink(tmp)
        raise


# ── subcommands ──────────────────────────────────────────────────────────────


def _load_scene(name: str, seed: int) -> SceneSpec:
    if name == "default":
        return default_scene()
    if name == "random":
        return random_scene(seed)
    return SceneSpec.from_dict(json.loads(Path(name).read_text()))


def _cmd_synth(args) -> int:
    spec = _load_scene(args.scene, args.seed)
    snippet = render_snippet(spec, args.frames)
    with _staged_dir(args.out) as tmp:
        for k, frame in enumerate(snippet.frames):
            write_image(frame, tmp / f"frame_{k}.pgm")
        write_state(snippet.gt_state(), tmp / "gt")
        (tmp / "scene.json").write_text(
            json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_refine(args) -> int:
    cfg = load_config(args.config)
    rcfg = cfg.refine_config()
    if args.threads is not None:
        rcfg = dataclasses.replace(rcfg, threads=args.threads)
    frames = [read_image(p) for p in args.frames]
    prior = read_state(args.prior)
    if args.calib is not None:
        # an external calibration wins over both the prior and the config:
        # install it and freeze the intrinsics block
        prior = OutputState(
            depths=prior.depths, motions=prior.motions,
            intrinsics=read_calibration(args.calib),
            flows_fwd=prior.flows_fwd, flows_bwd=prior.flows_bwd)
        rcfg = dataclasses.replace(
            rcfg,
            variables=dataclasses.replace(rcfg.variables, intrinsics=False))
    refined, trace = oft_refine(frames, prior, rcfg)
    rows = "".join(f"{i},{v:.17g}\n" for i, v in enumerate(trace))
    with _staged_dir(args.out) as tmp:
        write_state(refined, tmp)
        (tmp / "trace.csv").write_text("iteration,total_loss\n" + rows)
    return 0


def _cmd_eval(args) -> int:
    pred = read_state(args.pred)
    gt = read_state(args.gt)
    if args.task == "depth":
        header = DEPTH_CSV_HEADER
        m = depth_metrics(np.stack(pred.depths), np.stack(gt.depths),
                          median_scale=not args.no_median_scale, cap=args.cap)
    elif args.task == "flow":
        header = FLOW_CSV_HEADER
        m = flow_epe(
            np.concatenate(pred.flows_fwd + pred.flows_bwd, axis=0),
            np.concatenate(gt.flows_fwd + gt.flows_bwd, axis=0))
    else:
        header = POSE_CSV_HEADER
        m = ate(accumulate_motions(pred.motions), accumulate_motions(gt.motions))
    _emit_csv(header, m.csv_row(), args.out)
    return 0


def _cmd_losses(args) -> int:
    state = read_state(args.state)
    frames = [read_image(p) for p in args.frames]
    report = total_loss(state, frames, LossWeights(), threads=args.threads,
                        want_gradients=False)
    for name in sorted(report.per_component):
        print(f"{name} {report.per_component[name]:.17g}")
    print(f"total {report.total:.17g}")
    return 0


def _cmd_gradcheck(args) -> int:
    h, w = args.size
    reports = run_gradient_suite(h, w, args.seed)
    for r in reports:
        print(r)
    ok = all(r.ok for r in reports)
    print("gradient check " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


# ── parser and dispatch ──────────────────────────────────────────────────────


def _size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected HxW (e.g. 16x16), got {text!r}") from None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="densba",
        description="Joint refinement of depth, pose, intrinsics, and flow.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic snippet with ground truth")
    p.add_argument("--scene", default="default",
                   help="'default', 'random', or a scene .json file")
    p.add_argument("--seed", type=int, default=0,
                   help="seed for --scene random")
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--out", required=True, help="output directory (must be empty)")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("refine", help="refine a prior state against frames")
    p.add_argument("--frames", nargs="+", required=True, help="frame images, in order")
    p.add_argument("--prior", required=True, help="prior state directory")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--calib", help="calibration file; pins the intrinsics")
    p.add_argument("--threads", type=int, help="overrides the config")
    p.add_argument("--out", required=True, help="output directory (must be empty)")
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("eval", help="score a predicted state against ground truth")
    p.add_argument("--task", choices=("depth", "flow", "pose"), required=True)
    p.add_argument("--pred", required=True, help="predicted state directory")
    p.add_argument("--gt", required=True, help="ground-truth state directory")
    p.add_argument("--out", help="write the CSV here instead of stdout")
    p.add_argument("--no-median-scale", action="store_true",
                   help="depth: skip median alignment")
    p.add_argument("--cap", type=float, default=80.0,
                   help="depth: ignore ground truth beyond this")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("losses", help="print the loss breakdown of a state")
    p.add_argument("--state", required=True, help="state directory")
    p.add_argument("--frames", nargs="+", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=_cmd_losses)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--size", type=_size, default=(16, 16), help="probe size HxW")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    try:
        return args.func(args)
    except FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - safety net
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
