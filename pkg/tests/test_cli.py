import hashlib
import json

import numpy as np
import pytest

from monosf import kitti_io as kio
from monosf.cli import build_parser, main


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    assert main(["gen-scene", str(out)]) == 0
    return out


def test_gen_scene_layout_and_determinism(scene_dir, tmp_path):
    for name in ("calib.txt", "crop.txt", "scene.json", "gt/flow.png", "gt/noc.png", "gt/ego_poses.txt"):
        assert (scene_dir / name).is_file(), name
    assert main(["gen-scene", str(scene_dir / "scene.json"), str(tmp_path / "again")]) == 0
    assert _digest(scene_dir) == _digest(tmp_path / "again")


def test_gen_scene_static_zero_flow(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"ego_translation": [0, 0, 0], "ego_rotation": [0, 0, 0]}))
    assert main(["gen-scene", str(spec), str(tmp_path / "s")]) == 0
    flow, valid = kio.read_flow_png(tmp_path / "s" / "gt" / "flow.png")
    assert valid.any()
    assert np.abs(flow[valid]).max() <= 1 / 64


def test_compute_loss_gt_and_iteration_weights(scene_dir, tmp_path, capsys):
    est = str(scene_dir / "gt" / "estimate")
    noc = str(scene_dir / "gt" / "noc.png")
    assert main(["compute-loss", str(scene_dir), "--estimate", est, "--noc", noc, "--out", str(tmp_path / "one.json")]) == 0
    assert main(["compute-loss", str(scene_dir), "--estimate", est, "--estimate", est, "--noc", noc]) == 0
    one = json.loads((tmp_path / "one.json").read_text())
    two = json.loads(capsys.readouterr().out)
    assert one["total"] < 1e-2
    zeta = 0.9
    np.testing.assert_allclose(two["total"] - two["L_d"], (1 + zeta) * (one["total"] - one["L_d"]), rtol=1e-12)


def test_refine_short(scene_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"optimizer": {"max_steps": 2}}))
    out = tmp_path / "r"
    code = main(["--config", str(cfg), "refine", str(scene_dir), "--outdir", str(out), "--noc", str(scene_dir / "gt" / "noc.png")])
    assert code in (0, 3)
    res = json.loads((out / "result.json").read_text())
    assert res["accepted_steps"] <= 2
    assert (out / "loss.csv").is_file() and (out / "flow.png").is_file()


def test_evaluate_sceneflow_identity(scene_dir, tmp_path):
    gt = str(scene_dir / "gt")
    assert main(["evaluate", "sceneflow", "--pred", gt, "--gt", gt, "--out", str(tmp_path / "m.json")]) == 0
    rep = json.loads((tmp_path / "m.json").read_text())
    vals = [v for v in _leaves(rep) if isinstance(v, float)]
    assert vals and all(v == 0.0 for v in vals)


def _leaves(d):
    if isinstance(d, dict):
        for v in d.values():
            yield from _leaves(v)
    elif isinstance(d, list):
        for v in d:
            yield from _leaves(v)
    else:
        yield d


def test_evaluate_odometry_exit_codes(tmp_path):
    poses = np.tile(np.eye(4), (2, 1, 1))
    kio.write_poses(tmp_path / "p.txt", poses)
    assert main(["evaluate", "odometry", "--pred", str(tmp_path / "p.txt"), "--gt", str(tmp_path / "p.txt")]) == 2


def test_visualize(scene_dir, tmp_path):
    gt = scene_dir / "gt"
    for kind, src in (("flow", "flow.png"), ("depth", "disp_1.png"), ("mask", "noc.png")):
        out = tmp_path / f"{kind}.png"
        assert main(["visualize", str(gt / src), "--kind", kind, "--out", str(out)]) == 0
        assert out.stat().st_size > 0
    out = tmp_path / "err.png"
    assert main(["visualize", str(gt / "flow.png"), "--kind", "error", "--gt", str(gt / "flow.png"), "--out", str(out)]) == 0
    assert main(["visualize", str(gt / "flow.png"), "--kind", "error", "--out", str(out)]) == 1
    assert main(["visualize", str(gt / "noc.png"), "--kind", "flow", "--out", str(out)]) == 2


def test_usage_and_data_errors(tmp_path, monkeypatch):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
    assert main(["compute-loss", str(tmp_path / "missing"), "--estimate", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"bogus": 1}')
    assert main(["--config", str(bad), "gen-scene", str(tmp_path / "x")]) == 2
    monkeypatch.setenv("EMRMSF_THREADS", "zero")
    assert main(["gen-scene", str(tmp_path / "y")]) == 1
    monkeypatch.setenv("EMRMSF_THREADS", "1")
    assert main(["gen-scene", str(tmp_path / "y")]) == 0


def test_non_finite_estimate_is_data_error(scene_dir, tmp_path):
    field, mask = kio.read_estimate_dir(scene_dir / "gt" / "estimate")
    twists = np.array(field.twists, dtype=float)
    twists[0, 0, 3] = np.nan
    kio.write_estimate_dir(tmp_path / "nan", type(field)(twists), mask)
    assert main(["compute-loss", str(scene_dir), "--estimate", str(tmp_path / "nan")]) == 2


def test_numeric_failure_exit_code(scene_dir, tmp_path, monkeypatch):
    import monosf.cli as cli
    from monosf.refine import RefineError

    def boom(*args, **kwargs):
        raise RefineError("objective became non-finite")

    monkeypatch.setattr(cli, "refine", boom)
    assert main(["refine", str(scene_dir), "--outdir", str(tmp_path / "r")]) == 3


@pytest.mark.parametrize("sub", ["gen-scene", "compute-loss", "refine", "evaluate", "visualize"])
def test_help(sub, capsys):
    with pytest.raises(SystemExit) as exc:
        main([sub, "--help"])
    assert exc.value.code == 0
    assert "usage" in capsys.readouterr().out


def test_parser_prog():
    assert build_parser().prog == "monosf"
