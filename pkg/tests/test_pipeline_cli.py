import json
import subprocess
import sys

import numpy as np
import pytest

from octpipe.cli import main
from octpipe.core import load_stack
from octpipe.errors import ConfigInvalid
from octpipe.pipeline import PipelineConfig, run_pipeline

SMALL = {"width": 160, "height": 384, "frame_count": 5, "speckle": 0.15, "seed": 11,
         "shadows": [[40, 10, 0.5], [110, 12, 0.45]],
         "warp": {"max_shift_px": 6, "max_rot_deg": 1.0}}

ARTIFACTS = ["registration_report.csv", "shadow_report.csv", "alpha_trace.csv", "metrics.csv",
             "enface.png", "thickness_report.json", "run_manifest.json", "ground_truth.json"]


def config(out, **over):
    d = {"output_dir": str(out), "phantom": dict(SMALL),
         "thickness": {"masks": "phantom", "reference": "literature"}}
    d.update(over)
    return PipelineConfig.from_dict(d)


def text_artifacts(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.suffix in (".csv", ".json")}


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    status = run_pipeline(config(out))
    return out, status


def test_end_to_end_artifacts(pipeline_run):
    out, status = pipeline_run
    assert status == 0
    for name in ARTIFACTS:
        assert (out / name).is_file(), name
    assert len(load_stack(out / "registered")) == 5
    assert len(load_stack(out / "deshadowed")) == 5
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["seed"] == 0
    assert all(s["status"] == "ok" for s in manifest["stages"].values())
    header = (out / "alpha_trace.csv").read_text().splitlines()[0]
    assert header == "alpha,J,mean,std,zeros"
    assert b"\r\n" not in (out / "metrics.csv").read_bytes()


def test_missing_input_names_field(tmp_path):
    cfg = PipelineConfig.from_dict({"output_dir": str(tmp_path / "o"), "input_dir": str(tmp_path / "none")})
    with pytest.raises(ConfigInvalid) as exc:
        cfg.validate()
    assert exc.value.field == "input_dir"
    with pytest.raises(ConfigInvalid) as exc:
        PipelineConfig.from_dict({"output_dir": "x"}).validate()
    assert exc.value.field == "input_dir"
    with pytest.raises(ConfigInvalid) as exc:
        PipelineConfig.from_dict({"shadow": {"alpah": 1}})
    assert exc.value.field == "shadow.alpah"


def test_determinism_across_threads(pipeline_run, tmp_path):
    out, _ = pipeline_run
    other = tmp_path / "t3"
    assert run_pipeline(config(other, threads=3)) == 0
    assert text_artifacts(out) == text_artifacts(other)


def test_stage_isolation(pipeline_run, tmp_path):
    out, _ = pipeline_run
    alone = tmp_path / "noshadow"
    assert main(["pipeline", "--config", _write_cfg(tmp_path, alone), "--no-shadow"]) == 0
    assert (alone / "registration_report.csv").read_bytes() == (out / "registration_report.csv").read_bytes()
    assert not (alone / "shadow_report.csv").exists()


def _write_cfg(tmp_path, out, **over):
    d = {"output_dir": str(out), "phantom": dict(SMALL),
         "thickness": {"masks": "phantom", "reference": "literature"}}
    d.update(over)
    p = tmp_path / f"cfg_{out.name}.json"
    p.write_text(json.dumps(d))
    return str(p)


def test_failed_stage_is_recorded(tmp_path):
    masks = tmp_path / "masks"
    masks.mkdir()
    out = tmp_path / "o"
    status = run_pipeline(config(out, thickness={"masks": str(masks)}))
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert status == 1
    assert manifest["stages"]["thickness"]["status"].startswith("failed")
    assert (out / "metrics.csv").is_file()


# --- subcommands -----------------------------------------------------------

@pytest.fixture(scope="module")
def phantom_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(SMALL))
    assert main(["phantom", "--spec", str(spec), "--out", str(root / "ph")]) == 0
    return root


def test_cli_phantom(phantom_dir):
    stack = load_stack(phantom_dir / "ph")
    assert stack.frames.shape == (5, 384, 160)
    assert (phantom_dir / "ph" / "ground_truth.json").is_file()


def test_cli_register_and_metrics(phantom_dir):
    reg = phantom_dir / "reg"
    assert main(["register", "--in", str(phantom_dir / "ph"), "--out", str(reg), "--method", "height",
                 "--refs", "1,3", "--figures"]) == 0
    rows = (reg / "registration_report.csv").read_text().splitlines()
    assert rows[0] == "frame_index,method,reference_index,correlation,status" and len(rows) == 6
    assert (reg / "registration.png").is_file()
    met = phantom_dir / "metrics.csv"
    assert main(["metrics", "--in", str(reg), "--out", str(met)]) == 0
    lines = met.read_text().splitlines()
    assert lines[0] == "frame_index,correlation,snr_db"
    assert lines[3].split(",")[1] == "1.000000"


def test_cli_deshadow_and_enface(phantom_dir):
    out = phantom_dir / "ds"
    assert main(["--seed", "2", "deshadow", "--in", str(phantom_dir / "ph"), "--out", str(out),
                 "--alpha-opt", "--figures"]) == 0
    assert (out / "alpha_trace.csv").is_file() and (out / "alpha_trace.png").is_file()
    assert len((out / "shadow_report.csv").read_text().splitlines()) > 1
    png = phantom_dir / "enface.png"
    assert main(["enface", "--in", str(out), "--out", str(png), "--group", "5"]) == 0
    assert png.is_file()


def test_cli_thickness(phantom_dir, tmp_path):
    from octpipe.core import Stack, save_stack
    from octpipe.phantom import GroundTruth
    gt = GroundTruth.load(phantom_dir / "ph" / "ground_truth.json")
    masks = np.stack([gt.boundary_mask(i, (384, 160)) for i in range(5)]).astype(np.uint8) * 255
    save_stack(Stack(masks), tmp_path / "m")
    report = tmp_path / "t.json"
    assert main(["thickness", "--mask", str(tmp_path / "m"), "--out", str(report),
                 "--reference", "ai", "--figure", str(tmp_path / "t.png")]) == 0
    data = json.loads(report.read_text())
    assert {f["reason"] for f in data["reference_table_flags"]} == {"pixel_sum", "total_conversion", "group_print"}
    assert (tmp_path / "t.png").is_file()


def test_cli_errors(tmp_path):
    assert main(["pipeline", "--out", str(tmp_path / "o"), "--in", str(tmp_path / "missing")]) == 2
    assert main(["enface", "--in", str(tmp_path / "missing"), "--out", str(tmp_path / "e.png")]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "octpipe", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "pipeline" in res.stdout
