"""Command-line entry point: ``octpipe <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, plotting
from .core import DEFAULT_AXIAL_RES_UM, enface, group_average, load_stack, save_stack
from .errors import ConfigInvalid, OctError
from .layers import compare_reference, compute_thickness, interpolate_gaps, reference_table_flags, trace_boundaries
from .metrics import pearson_correlation, snr_db
from .phantom import PhantomSpec, generate_phantom
from .pipeline import BUILTIN_REFERENCES, PipelineConfig, run_pipeline
from .registration.keypoints import ALGOS
from .registration.stack import (
    METHODS, RegistrationPlan, load_slab_quads, register_stack, select_reference_frames,
)
from .reports import read_reference_csv, write_csv, write_json
from .shadow import MODES, AlphaSearch, detect_stack, flank_matched_alpha, import_coco_regions, optimize_alpha, suppress_stack

log = logging.getLogger("octpipe")


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _global_flags():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global RNG seed (default 0)")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (default 1)")
    g.add_argument("--config", default=argparse.SUPPRESS, help="pipeline config JSON")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser():
    common = _global_flags()
    p = argparse.ArgumentParser(prog="octpipe", parents=[common],
                                description="Post-processing for OCT retinal B-scan stacks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="generate a synthetic stack with ground truth")
    s.add_argument("--spec", help="phantom spec JSON (defaults used when omitted)")
    s.add_argument("--out", required=True)

    s = sub.add_parser("register", parents=[common], help="two-pass stack registration")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--algo", choices=ALGOS)
    refs = s.add_mutually_exclusive_group()
    refs.add_argument("--refs", type=_int_list, help="pass-1 reference frames, e.g. 10,120,300")
    refs.add_argument("--auto-refs", action="store_true", default=None,
                      help="pick pass-1 references from ILM height jumps")
    s.add_argument("--corners", help="JSON of per-frame slab corners overriding detection (hybrid)")
    s.add_argument("--figures", action="store_true")

    s = sub.add_parser("deshadow", parents=[common], help="detect and suppress shadow columns")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--regions", help="auto or coco:<file.json>")
    a = s.add_mutually_exclusive_group()
    a.add_argument("--alpha", type=float)
    a.add_argument("--alpha-opt", action="store_true", default=None)
    s.add_argument("--alpha-rule", choices=("grid", "flank"))
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--figures", action="store_true")

    s = sub.add_parser("enface", parents=[common], help="mean projection image of a stack")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True, help="output PNG")
    s.add_argument("--group", type=int, default=1, help="average adjacent groups of frames first")

    s = sub.add_parser("metrics", parents=[common], help="per-frame correlation and SNR")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True, help="output CSV")
    s.add_argument("--ref", type=int, help="reference frame (default: centre)")

    s = sub.add_parser("thickness", parents=[common], help="layer thickness from boundary masks")
    s.add_argument("--mask", required=True, help="directory of boundary-line masks")
    s.add_argument("--out", required=True, help="report JSON")
    s.add_argument("--axial-res", type=float)
    s.add_argument("--reference", help="layer,um CSV, or 'ai' / 'literature' for the built-in table")
    s.add_argument("--expected-count", type=int)
    s.add_argument("--max-gap", type=int)
    s.add_argument("--figure", help="optional bar-chart PNG")

    s = sub.add_parser("pipeline", parents=[common], help="run the full pipeline from a config")
    s.add_argument("--in", dest="input")
    s.add_argument("--phantom", help="phantom spec JSON used as input")
    s.add_argument("--out")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--algo", choices=ALGOS)
    refs = s.add_mutually_exclusive_group()
    refs.add_argument("--refs", type=_int_list)
    refs.add_argument("--auto-refs", action="store_true", default=None)
    s.add_argument("--corners")
    s.add_argument("--regions")
    a = s.add_mutually_exclusive_group()
    a.add_argument("--alpha", type=float)
    a.add_argument("--alpha-opt", action="store_true", default=None)
    s.add_argument("--alpha-rule", choices=("grid", "flank"))
    s.add_argument("--mode", choices=MODES)
    s.add_argument("--mask", help="boundary masks: directory, 'phantom' or 'segment'")
    s.add_argument("--reference")
    s.add_argument("--axial-res", type=float)
    s.add_argument("--no-shadow", action="store_true", help="skip the shadow stage")
    s.add_argument("--no-register", action="store_true", help="skip registration")
    return p


def _config(args):
    """Config file (if any) with command-line flags applied on top."""
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    if hasattr(args, "seed"):
        cfg.seed = args.seed
    if hasattr(args, "threads"):
        cfg.threads = args.threads
    r, s, t = cfg.registration, cfg.shadow, cfg.thickness

    def take(attr, target, name=None):
        v = getattr(args, attr, None)
        if v is not None:
            setattr(target, name or attr, v)

    take("method", r)
    take("algo", r)
    take("corners", r)
    if getattr(args, "refs", None) is not None:
        r.refs, r.auto_refs = args.refs, False
    if getattr(args, "auto_refs", None):
        r.refs, r.auto_refs = None, True
    take("regions", s)
    if getattr(args, "alpha", None) is not None:
        s.alpha, s.alpha_opt = args.alpha, False
    if getattr(args, "alpha_opt", None):
        s.alpha_opt = True
    take("alpha_rule", s)
    take("mode", s)
    take("axial_res", t, "axial_res_um_per_px")
    take("reference", t)
    take("mask", t, "masks")
    return cfg


# --- subcommands -------------------------------------------------------------

def cmd_phantom(args):
    spec = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if hasattr(args, "seed"):
        spec["seed"] = args.seed
    stack, truth = generate_phantom(PhantomSpec.from_dict(spec))
    save_stack(stack, args.out)
    truth.save(Path(args.out) / "ground_truth.json")
    print(f"wrote {len(stack)} frames to {args.out}")
    return 0


def _plan(cfg, stack):
    r = cfg.registration
    n = len(stack)
    if r.refs is not None:
        refs = sorted(set(r.refs))
    elif r.auto_refs:
        refs = select_reference_frames(stack, r.drop_threshold_px, threads=cfg.threads)
    else:
        refs = [n // 2]
    return RegistrationPlan(pass1_refs=refs, pass2_ref=n // 2, method=r.method, algo=r.algo,
                            seed=cfg.seed, detector_params=dict(r.detector_params),
                            flow_params=dict(r.flow_params), ransac_iterations=r.ransac_iterations,
                            inlier_tol_px=r.inlier_tol_px, ratio=r.ratio,
                            slab_quads=load_slab_quads(r.corners) if r.corners else {})


def cmd_register(args):
    cfg = _config(args)
    stack = load_stack(args.input)
    before = [pearson_correlation(f, stack.frames[len(stack) // 2]) for f in stack.frames]
    out_stack, report = register_stack(stack, _plan(cfg, stack), threads=cfg.threads)
    save_stack(out_stack, args.out)
    out = Path(args.out)
    write_csv(out / "registration_report.csv",
              ["frame_index", "method", "reference_index", "correlation", "status"], report.rows)
    if args.figures:
        plotting.plot_registration(report.rows, out / "registration.png", baseline=before)
    print(f"mean correlation {report.mean:.4f} (unregistered {np.mean(before):.4f})")
    return 0


def cmd_deshadow(args):
    cfg = _config(args)
    s = cfg.shadow
    stack = load_stack(args.input)
    if s.regions == "auto":
        regions = detect_stack(stack, threads=cfg.threads, **s.detector)
    elif s.regions.startswith("coco:"):
        regions = import_coco_regions(s.regions[5:], stack)
    else:
        raise ConfigInvalid("shadow.regions", "expected 'auto' or 'coco:<file>'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "shadow_report.csv", ["frame_index", "col_start", "col_end", "source"],
              [{"frame_index": r.frame_index, "col_start": r.col_start, "col_end": r.col_end,
                "source": r.source} for r in regions])
    alpha = s.alpha
    if regions and s.alpha_opt:
        if s.alpha_rule == "flank":
            alpha = flank_matched_alpha(stack, regions)
        else:
            alpha, trace = optimize_alpha(stack, regions, AlphaSearch(mode=s.mode, **s.search))
            write_csv(out / "alpha_trace.csv", ["alpha", "J", "mean", "std", "zeros"], trace)
            if args.figures:
                plotting.plot_alpha_trace(trace, out / "alpha_trace.png", alpha)
    if regions and alpha is not None and alpha > 0:
        stack = suppress_stack(stack, regions, alpha, s.mode)
    save_stack(stack, out)
    print(f"{len(regions)} shadow regions, alpha {alpha}")
    return 0


def cmd_enface(args):
    stack = load_stack(args.input)
    if args.group > 1:
        stack = group_average(stack, args.group)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(enface(stack), mode="L").save(args.out)
    return 0


def cmd_metrics(args):
    stack = load_stack(args.input)
    c = len(stack) // 2 if args.ref is None else args.ref
    if not 0 <= c < len(stack):
        raise ConfigInvalid("ref", f"reference {c} outside 0..{len(stack) - 1}")
    rows = []
    for i, f in enumerate(stack.frames):
        try:
            corr = pearson_correlation(f, stack.frames[c])
        except OctError:
            corr = float("nan")
        rows.append([i, corr, snr_db(f)])
    write_csv(args.out, ["frame_index", "correlation", "snr_db"], rows)
    return 0


def cmd_thickness(args):
    cfg = _config(args)
    t = cfg.thickness
    if args.expected_count is not None:
        t.expected_count = args.expected_count
    if args.max_gap is not None:
        t.max_gap_cols = args.max_gap
    masks = load_stack(args.mask)
    maps = [interpolate_gaps(trace_boundaries(m > 0, t.expected_count), t.max_gap_cols)
            for m in masks.frames]
    res = t.axial_res_um_per_px or DEFAULT_AXIAL_RES_UM
    report = compute_thickness(maps, res)
    payload = {}
    if t.reference:
        if t.reference in BUILTIN_REFERENCES:
            reference = BUILTIN_REFERENCES[t.reference]
            payload["reference_table_flags"] = reference_table_flags(res)
        else:
            reference = read_reference_csv(t.reference)
        compare_reference(report, reference, flag_tolerance_um=0.005)
    payload.update(report.as_dict())
    payload["frames"] = len(maps)
    write_json(args.out, payload)
    if args.figure:
        plotting.plot_thickness(report, args.figure)
    for layer in report.layers + [report.total]:
        err = "" if layer.percent_error is None else f"  {layer.percent_error:6.2f}%"
        print(f"{layer.name:12s} {layer.mean_px:8.2f} px {layer.mean_um:8.2f} um{err}")
    return 0


def cmd_pipeline(args):
    cfg = _config(args)
    if args.input is not None:
        cfg.input_dir, cfg.phantom = args.input, None
    if args.phantom is not None:
        cfg.phantom, cfg.input_dir = args.phantom, None
    if args.out is not None:
        cfg.output_dir = args.out
    if args.no_shadow:
        cfg.shadow.enabled = False
    if args.no_register:
        cfg.registration.enabled = False
    status = run_pipeline(cfg)
    print(f"pipeline {'finished' if status == 0 else 'finished with failed stages'}: {cfg.output_dir}")
    return status


COMMANDS = {
    "phantom": cmd_phantom, "register": cmd_register, "deshadow": cmd_deshadow,
    "enface": cmd_enface, "metrics": cmd_metrics, "thickness": cmd_thickness,
    "pipeline": cmd_pipeline,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OctError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
