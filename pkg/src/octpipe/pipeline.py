"""Config-driven end-to-end run: ingest, register, deshadow, enface/metrics, thickness."""

from __future__ import annotations

import json
import logging
import platform
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__, plotting
from .core import DEFAULT_AXIAL_RES_UM, enface, histogram_stats, load_stack, save_stack
from .errors import ConfigInvalid, OctError
from .layers import (
    DEFAULT_BOUNDARIES,
    REFERENCE_AI_UM,
    REFERENCE_LITERATURE_UM,
    compare_reference,
    compute_thickness,
    interpolate_gaps,
    reference_table_flags,
    segment_boundaries,
    trace_boundaries,
)
from .metrics import pearson_correlation, snr_db
from .phantom import PhantomSpec, generate_phantom
from .registration.keypoints import ALGOS
from .registration.stack import (
    METHODS, RegistrationPlan, load_slab_quads, register_stack, select_reference_frames,
)
from .reports import read_reference_csv, write_csv, write_json
from .shadow import (
    MODES,
    AlphaSearch,
    detect_stack,
    flank_matched_alpha,
    import_coco_regions,
    optimize_alpha,
    suppress_stack,
)

log = logging.getLogger(__name__)

BUILTIN_REFERENCES = {"ai": REFERENCE_AI_UM, "literature": REFERENCE_LITERATURE_UM}
ALPHA_RULES = ("grid", "flank")


def _section(cls, data, prefix):
    """Build dataclass ``cls`` from a dict, naming the offending key on error."""
    if data is None:
        return cls()
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigInvalid(prefix, "expected an object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigInvalid(f"{prefix}.{key}", "unknown field")
    return cls(**data)


@dataclass
class RegistrationConfig:
    enabled: bool = True
    method: str = "hybrid"
    algo: str = "orb"
    refs: list | None = None
    auto_refs: bool = False
    drop_threshold_px: float = 4.0
    ransac_iterations: int = 2000
    inlier_tol_px: float = 2.0
    ratio: float = 0.75
    detector_params: dict = field(default_factory=dict)
    flow_params: dict = field(default_factory=dict)
    corners: str | None = None  # JSON of per-frame slab corners overriding detection


@dataclass
class ShadowConfig:
    enabled: bool = True
    regions: str = "auto"
    alpha: float | None = None
    alpha_opt: bool = True
    alpha_rule: str = "grid"
    mode: str = "complement_boost"
    search: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)


@dataclass
class ThicknessConfig:
    enabled: bool = True
    masks: str | None = None
    axial_res_um_per_px: float | None = None
    reference: str | None = None
    expected_count: int = len(DEFAULT_BOUNDARIES)
    max_gap_cols: int = 40


@dataclass
class EmitConfig:
    stacks: bool = True
    enface: bool = True
    figures: bool = True


@dataclass
class PipelineConfig:
    output_dir: str | None = None
    input_dir: str | None = None
    phantom: dict | str | None = None
    seed: int = 0
    threads: int = 1
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    shadow: ShadowConfig = field(default_factory=ShadowConfig)
    thickness: ThicknessConfig = field(default_factory=ThicknessConfig)
    emit: EmitConfig = field(default_factory=EmitConfig)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigInvalid("<root>", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigInvalid(key, "unknown field")
        d = dict(d)
        try:
            d["registration"] = _section(RegistrationConfig, d.get("registration"), "registration")
            d["shadow"] = _section(ShadowConfig, d.get("shadow"), "shadow")
            d["thickness"] = _section(ThicknessConfig, d.get("thickness"), "thickness")
            d["emit"] = _section(EmitConfig, d.get("emit"), "emit")
        except TypeError as exc:
            raise ConfigInvalid("<section>", str(exc)) from exc
        cfg = cls(**d)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigInvalid("config", f"cannot read {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigInvalid("config", f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if not self.output_dir:
            raise ConfigInvalid("output_dir", "an output directory is required")
        if (self.input_dir is None) == (self.phantom is None):
            raise ConfigInvalid("input_dir", "give exactly one of input_dir or phantom")
        if self.input_dir is not None and not Path(self.input_dir).exists():
            raise ConfigInvalid("input_dir", f"{self.input_dir} does not exist")
        if isinstance(self.phantom, str) and not Path(self.phantom).is_file():
            raise ConfigInvalid("phantom", f"{self.phantom} is not a file")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigInvalid("seed", "seed must be an integer")
        if not isinstance(self.threads, int) or self.threads < 1:
            raise ConfigInvalid("threads", "threads must be a positive integer")
        r = self.registration
        if r.method not in METHODS:
            raise ConfigInvalid("registration.method", f"must be one of {', '.join(METHODS)}")
        if r.algo not in ALGOS:
            raise ConfigInvalid("registration.algo", f"must be one of {', '.join(ALGOS)}")
        if r.refs is not None and r.auto_refs:
            raise ConfigInvalid("registration.refs", "refs and auto_refs are mutually exclusive")
        if r.corners is not None and not Path(r.corners).is_file():
            raise ConfigInvalid("registration.corners", f"{r.corners} is not a file")
        s = self.shadow
        if s.mode not in MODES:
            raise ConfigInvalid("shadow.mode", f"must be one of {', '.join(MODES)}")
        if s.alpha_rule not in ALPHA_RULES:
            raise ConfigInvalid("shadow.alpha_rule", f"must be one of {', '.join(ALPHA_RULES)}")
        if s.regions != "auto":
            if not s.regions.startswith("coco:"):
                raise ConfigInvalid("shadow.regions", "expected 'auto' or 'coco:<file>'")
            if not Path(s.regions[5:]).is_file():
                raise ConfigInvalid("shadow.regions", f"{s.regions[5:]} is not a file")
        if not s.alpha_opt and s.alpha is None:
            raise ConfigInvalid("shadow.alpha", "give alpha or enable alpha_opt")
        if s.alpha is not None and not s.alpha > 0:
            raise ConfigInvalid("shadow.alpha", "alpha must be positive")
        try:
            AlphaSearch(mode=s.mode, **s.search)
        except (TypeError, OctError) as exc:
            raise ConfigInvalid("shadow.search", str(exc)) from exc
        t = self.thickness
        if t.masks not in (None, "phantom", "segment") and not Path(t.masks).is_dir():
            raise ConfigInvalid("thickness.masks", f"{t.masks} is not a directory")
        if t.masks == "phantom" and self.phantom is None:
            raise ConfigInvalid("thickness.masks", "phantom masks need a phantom input")
        if t.reference not in (None, *BUILTIN_REFERENCES) and not Path(t.reference).is_file():
            raise ConfigInvalid("thickness.reference", f"{t.reference} is not a file")
        if t.axial_res_um_per_px is not None and not t.axial_res_um_per_px > 0:
            raise ConfigInvalid("thickness.axial_res_um_per_px", "must be positive")


def manifest_config(cfg):
    """Config as recorded in the manifest: run-location and thread count left out."""
    d = cfg.to_dict()
    d.pop("output_dir")
    d.pop("threads")
    return d


def _region_rows(regions):
    return [{"frame_index": r.frame_index, "col_start": r.col_start, "col_end": r.col_end,
             "source": r.source} for r in regions]


class _Run:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.stages = {}
        self.failed = False
        self.truth = None

    def stage(self, name, fn):
        try:
            summary = fn()
            self.stages[name] = {"status": "ok", **(summary or {})}
        except OctError as exc:
            log.error("stage %s failed: %s", name, exc)
            self.stages[name] = {"status": "failed", "error": type(exc).__name__, "message": str(exc)}
            self.failed = True

    def skip(self, name, why):
        self.stages[name] = {"status": "skipped", "reason": why}

    # --- stages -----------------------------------------------------------
    def ingest(self):
        cfg = self.cfg
        if cfg.phantom is not None:
            spec = cfg.phantom
            if isinstance(spec, str):
                spec = json.loads(Path(spec).read_text())
            spec = dict(spec)
            spec.setdefault("seed", cfg.seed)
            self.stack, self.truth = generate_phantom(PhantomSpec.from_dict(spec))
            self.truth.save(self.out / "ground_truth.json")
            source = "phantom"
        else:
            self.stack = load_stack(cfg.input_dir)
            source = "directory"
        if cfg.emit.stacks:
            save_stack(self.stack, self.out / "input")
        return {"source": source, "frames": len(self.stack), "height": self.stack.height,
                "width": self.stack.width}

    def register(self):
        cfg, r = self.cfg, self.cfg.registration
        n = len(self.stack)
        c = n // 2
        if r.refs is not None:
            refs = sorted({int(i) for i in r.refs})
        elif r.auto_refs:
            refs = select_reference_frames(self.stack, r.drop_threshold_px, threads=cfg.threads)
        else:
            refs = [c]
        plan = RegistrationPlan(
            pass1_refs=refs, pass2_ref=c, method=r.method, algo=r.algo, seed=cfg.seed,
            detector_params=dict(r.detector_params), flow_params=dict(r.flow_params),
            ransac_iterations=r.ransac_iterations, inlier_tol_px=r.inlier_tol_px, ratio=r.ratio,
            slab_quads=load_slab_quads(r.corners) if r.corners else {},
        )
        before = [pearson_correlation(f, self.stack.frames[c]) for f in self.stack.frames]
        self.stack, report = register_stack(self.stack, plan, threads=cfg.threads)
        write_csv(self.out / "registration_report.csv",
                  ["frame_index", "method", "reference_index", "correlation", "status"], report.rows)
        if cfg.emit.stacks:
            save_stack(self.stack, self.out / "registered")
        if cfg.emit.figures:
            plotting.plot_registration(report.rows, self.out / "registration.png", baseline=before)
        failed = sum(1 for row in report.rows if row["status"].startswith("failed"))
        return {"pass1_refs": refs, "pass2_ref": c, "mean_correlation": report.mean,
                "min_correlation": report.min, "unregistered_mean_correlation": float(np.mean(before)),
                "failed_frames": failed}

    def deshadow(self):
        cfg, s = self.cfg, self.cfg.shadow
        if s.regions == "auto":
            regions = detect_stack(self.stack, threads=cfg.threads, **s.detector)
        else:
            regions = import_coco_regions(s.regions[5:], self.stack)
        write_csv(self.out / "shadow_report.csv", ["frame_index", "col_start", "col_end", "source"],
                  _region_rows(regions))
        summary = {"regions": len(regions), "mode": s.mode}
        if not regions:
            summary["alpha"] = None
            return summary
        if s.alpha_opt and s.alpha_rule == "grid":
            search = AlphaSearch(mode=s.mode, **s.search)
            alpha, trace = optimize_alpha(self.stack, regions, search)
            write_csv(self.out / "alpha_trace.csv", ["alpha", "J", "mean", "std", "zeros"], trace)
            if cfg.emit.figures:
                plotting.plot_alpha_trace(trace, self.out / "alpha_trace.png", alpha)
        elif s.alpha_opt:
            alpha = flank_matched_alpha(self.stack, regions)
        else:
            alpha = s.alpha
        summary["alpha"] = alpha
        before = histogram_stats(self.stack)
        if alpha > 0:
            self.stack = suppress_stack(self.stack, regions, alpha, s.mode)
        after = histogram_stats(self.stack)
        summary["histogram_before"] = before.as_dict()
        summary["histogram_after"] = after.as_dict()
        if cfg.emit.stacks:
            save_stack(self.stack, self.out / "deshadowed")
        if cfg.emit.figures:
            plotting.plot_histograms(before, after, self.out / "histogram.png")
        self.regions = regions
        return summary

    def enface_metrics(self):
        cfg = self.cfg
        c = len(self.stack) // 2
        ref = self.stack.frames[c]
        rows = []
        for i, f in enumerate(self.stack.frames):
            try:
                corr = pearson_correlation(f, ref)
            except OctError:
                corr = float("nan")
            rows.append({"frame_index": i, "correlation": corr, "snr_db": snr_db(f)})
        write_csv(self.out / "metrics.csv", ["frame_index", "correlation", "snr_db"], rows)
        if cfg.emit.enface:
            from PIL import Image
            img = enface(self.stack)
            Image.fromarray(img, mode="L").save(self.out / "enface.png")
            if cfg.emit.figures:
                plotting.plot_enface(img, self.out / "enface_regions.png", getattr(self, "regions", None))
        return {"reference_index": c,
                "mean_correlation": float(np.nanmean([r["correlation"] for r in rows])),
                "mean_snr_db": float(np.mean([r["snr_db"] for r in rows]))}

    def thickness(self, masks_source):
        cfg, t = self.cfg, self.cfg.thickness
        if masks_source == "phantom":
            shape = (self.stack.height, self.stack.width)
            masks = [self.truth.boundary_mask(i, shape) for i in range(len(self.stack))]
        elif masks_source == "segment":
            masks = [segment_boundaries(f) for f in self.stack.frames]
        else:
            masks = list(load_stack(masks_source).frames > 0)
        maps = []
        for m in masks:
            maps.append(interpolate_gaps(trace_boundaries(m, t.expected_count), t.max_gap_cols))
        res = t.axial_res_um_per_px or self.stack.axial_res_um_per_px or DEFAULT_AXIAL_RES_UM
        report = compute_thickness(maps, res)
        payload = {}
        if t.reference is not None:
            if t.reference in BUILTIN_REFERENCES:
                reference = BUILTIN_REFERENCES[t.reference]
                payload["reference_table_flags"] = reference_table_flags(res)
            else:
                reference = read_reference_csv(t.reference)
            compare_reference(report, reference, flag_tolerance_um=0.005)
        payload.update(report.as_dict())
        payload["mask_source"] = masks_source
        payload["frames"] = len(maps)
        write_json(self.out / "thickness_report.json", payload)
        if cfg.emit.figures:
            plotting.plot_thickness(report, self.out / "thickness.png")
        return {"mask_source": masks_source, "total_um": report.total.mean_um,
                "mare_pct": report.mare_pct}


def run_pipeline(cfg):
    """Run every enabled stage in order; returns 0 when all ran cleanly, 1 otherwise.

    A stage that fails is recorded in ``run_manifest.json`` and later stages
    carry on with the last good stack.
    """
    if isinstance(cfg, dict):
        cfg = PipelineConfig.from_dict(cfg)
    cfg.validate()
    run = _Run(cfg)
    try:
        run.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigInvalid("output_dir", f"cannot create {cfg.output_dir}: {exc}") from exc

    run.stage("ingest", run.ingest)
    if "stack" not in vars(run):
        _write_manifest(run)
        return 1
    if cfg.registration.enabled:
        run.stage("registration", run.register)
    else:
        run.skip("registration", "disabled")
    if cfg.shadow.enabled:
        run.stage("shadow", run.deshadow)
    else:
        run.skip("shadow", "disabled")
    run.stage("enface_metrics", run.enface_metrics)

    masks = cfg.thickness.masks
    if masks is None and run.truth is not None:
        masks = "phantom"
    if not cfg.thickness.enabled:
        run.skip("thickness", "disabled")
    elif masks is None:
        run.skip("thickness", "no masks available")
    else:
        run.stage("thickness", lambda: run.thickness(masks))
    _write_manifest(run)
    return 1 if run.failed else 0


def _write_manifest(run):
    manifest = {
        "config": manifest_config(run.cfg),
        "seed": run.cfg.seed,
        "versions": {"octpipe": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "stages": run.stages,
        "status": "failed" if run.failed else "ok",
    }
    write_json(run.out / "run_manifest.json", manifest)
