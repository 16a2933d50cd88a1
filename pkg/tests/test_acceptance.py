"""The ten acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run (see conftest.py).  Criterion 5 trains the toy model for
the full budget and takes roughly a quarter of an hour on one CPU core.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from mvgeo.backbone import ATTENTION_VARIANTS, ModelConfig
from mvgeo.cli import main
from mvgeo.config import TrainConfig, load_config
from mvgeo.evaluate import ablate, evaluate, evaluate_model, model_predictor
from mvgeo.geometry import CameraParams, camera_from_pointmap, normalize_scene, umeyama_align, unproject_depth
from mvgeo.gradcheck import check_model_gradients
from mvgeo.heads import Model
from mvgeo.losses import total_loss
from mvgeo.metrics import (
    MetricReport,
    PoseErrorSet,
    auc_at,
    chamfer,
    relative_pose_errors,
    rotation_angle,
    tracking_metrics,
)
from mvgeo.synthgen import generate_scene, read_dataset, select_frames, write_dataset
from mvgeo.tensor import Tape
from mvgeo.train import load_model, train
from oracles import auc_oracle, chamfer_oracle, pose_oracle, tracking_oracle

ROOT = Path(__file__).resolve().parents[1]
RESULTS: list[str] = []

MICRO = {"model.depth": 1, "model.dim": 16, "model.heads": 2, "model.track_dim": 8,
         "model.dense_dim": 8, "model.track_hidden": 8, "model.camera_layers": 1,
         "model.track_layers": 1, "data.tracks": 4, "data.frames_min": 1, "data.frames_max": 3}


def record(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)


def _frames_equivariance_outputs(out):
    d = out.dense
    return {"camera": out.camera.params.data, "depth": d.depth.data, "depth_conf": d.depth_conf.data,
            "points": d.points.data, "points_conf": d.points_conf.data, "features": d.features.data,
            "tracks": np.swapaxes(out.tracks.positions.data, 0, 1), "vis": out.tracks.vis_logits.data.T}


# ---------------------------------------------------------------------------
# 1


def test_criterion_01_gradient_soundness():
    res = check_model_gradients(max_entries=20)
    ok = res.max_rel_error < 1e-3 and res.seconds < 300
    record(1, ok, f"max rel err {res.max_rel_error:.2e} over {len(res.per_group)} parameter groups "
                  f"({res.n_params} params), {res.seconds:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2


def test_criterion_02_permutation_equivariance():
    rng = np.random.default_rng(0)
    model = Model(ModelConfig(), seed=11)
    imgs = rng.random((5, 3, 56, 56)).astype(np.float32)
    q = rng.uniform(0, 55, size=(6, 2))
    base = _frames_equivariance_outputs(model(imgs, q))
    worst = 0.0
    for _ in range(3):
        perm = np.concatenate([[0], 1 + rng.permutation(4)])
        out = _frames_equivariance_outputs(model(imgs[perm], q))
        worst = max(worst, max(np.abs(base[k][perm] - out[k]).max() for k in base))
    swap = [1, 0, 2, 3, 4]
    out = _frames_equivariance_outputs(model(imgs[swap], q))
    gap = max(np.abs(base[k][swap] - out[k]).max() for k in base)
    ok = worst < 1e-5 and gap > 1e-3
    record(2, ok, f"frames 2-5 permuted: max dev {worst:.1e} (< 1e-5); frame 1<->2 swap: {gap:.2e} (> 1e-3)")
    assert ok


# ---------------------------------------------------------------------------
# 3


def test_criterion_03_depth_pointmap_identity():
    worst_p, worst_r, n = 0.0, 0.0, 0
    for seed in range(24):
        s = generate_scene(seed, 4, 56, 56)
        H, W = s.size
        for g, D, P, m in zip(s.cameras, s.depth, s.points, s.masks):
            U = unproject_depth(g, np.where(m, D, 1.0), W, H, m)
            worst_p = max(worst_p, np.abs(U - P)[:, m].max())
            fit, _ = camera_from_pointmap(P, W, H, m)
            worst_r = max(worst_r, rotation_angle(fit.R.T @ g.R))
            n += 1
    ok = worst_p < 1e-9 and worst_r < 0.01
    record(3, ok, f"{n} frames: unprojection dev {worst_p:.1e} (< 1e-9), camera fit {worst_r:.1e} deg (< 0.01)")
    assert ok


# ---------------------------------------------------------------------------
# 4


def test_criterion_04_normalization_canonical():
    worst, worst_idem = 0.0, 0.0
    for seed in range(6):
        ref = generate_scene(seed, 3, 28, 28, scale=1.0)
        for s in (0.1, 7.3, 100.0):
            x = generate_scene(seed, 3, 28, 28, scale=s)
            assert np.array_equal(x.masks, ref.masks)
            worst = max(worst, np.abs(x.points - ref.points).max(), np.abs(x.depth - ref.depth).max(),
                        np.abs(x.camera_array() - ref.camera_array()).max())
        cams, P, D, scale = normalize_scene(ref.cameras, ref.points, ref.depth, ref.masks)
        worst_idem = max(worst_idem, abs(scale - 1.0), np.abs(P - ref.points).max(), np.abs(D - ref.depth).max(),
                         max(np.abs(a.as_vector() - b.as_vector()).max() for a, b in zip(cams, ref.cameras)))
    ok = worst < 1e-9 and worst_idem < 1e-9
    record(4, ok, f"scales 0.1/1/7.3/100 dev {worst:.1e}, idempotence dev {worst_idem:.1e} (< 1e-9)")
    assert ok


# ---------------------------------------------------------------------------
# 5 and 6 share one overfit run


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    cfg = load_config(ROOT / "configs" / "overfit.txt")
    H, W = cfg.data.size
    out = tmp_path_factory.mktemp("overfit")
    t0 = time.perf_counter()
    samples = [generate_scene(s, 4, H, W, n_tracks=cfg.data.tracks) for s in range(8)]
    write_dataset(samples, out / "data")
    res = train(cfg, samples, out / "run")
    report = evaluate_model(res.model, samples, cfg, mode="both")
    seconds = time.perf_counter() - t0
    report.save(out / "report.json")
    return cfg, out, res, report, seconds


@pytest.mark.slow
def test_criterion_05_overfit_convergence(overfit_run):
    cfg, _, res, report, seconds = overfit_run
    row = report.rows["pointhead"]
    first = res.history[0]["total"]
    tail = float(np.mean([h["total"] for h in res.history[-100:]]))
    checks = {
        "AUC@30": (row["auc30"], row["auc30"] >= 0.8, ">= 0.8"),
        "depth abs-rel": (row["depth_abs_rel"], row["depth_abs_rel"] <= 0.1, "<= 0.1"),
        "delta_avg_vis": (row["delta_avg_vis"], row["delta_avg_vis"] >= 0.7, ">= 0.7"),
        "minutes": (seconds / 60, seconds <= 1800, "<= 30"),
        "final/initial loss": (tail / first, tail < 0.1 * first, "< 0.1"),
    }
    ok = all(c[1] for c in checks.values())
    detail = ", ".join(f"{k} {v:.3f} ({rule})" for k, (v, _, rule) in checks.items())
    record(5, ok, f"{cfg.optim.steps} steps: {detail}")
    assert ok, detail


@pytest.mark.slow
def test_criterion_06_two_point_cloud_routes(overfit_run, capsys):
    _, out, res, _, _ = overfit_run
    code = main(["eval", "--ckpt", str(res.checkpoint), "--data", str(out / "data"),
                 "--report", str(out / "both.json"), "--mode", "both"])
    capsys.readouterr()
    rep = MetricReport.load(out / "both.json")
    rows = set(rep.rows)
    ok = code == 0 and rows == {"pointhead", "depthcam"}
    p, d = rep.rows["pointhead"]["chamfer_overall"], rep.rows["depthcam"]["chamfer_overall"]
    order = "point head lower" if p < d else "depth+camera lower"
    record(6, ok, f"rows {sorted(rows)} from one checkpoint; Chamfer point head {p:.4f}, "
                  f"depth+camera {d:.4f} ({order}, not asserted)")
    assert ok


# ---------------------------------------------------------------------------
# 7


def test_criterion_07_metric_oracles():
    rng = np.random.default_rng(7)
    fails = []
    for _ in range(20):
        errs = rng.uniform(0, 60, size=rng.integers(1, 500))
        errs[rng.random(len(errs)) < 0.2] = np.round(errs[:1])  # integer ties at thresholds
        e = PoseErrorSet(np.zeros((len(errs), 2), int), errs, errs * rng.uniform(0, 1, len(errs)))
        tau = int(rng.integers(1, 46))
        if auc_at(e, tau) != auc_oracle(e.combined, tau):
            fails.append("auc")
    for _ in range(3):
        a, b = rng.normal(size=(rng.integers(1, 500), 3)), rng.normal(size=(rng.integers(1, 500), 3))
        r = chamfer(a, b)
        if (r.accuracy, r.completeness, r.overall) != chamfer_oracle(a, b):
            fails.append("chamfer")
    pose_dev = 0.0
    for _ in range(10):
        cams = [[CameraParams(q, rng.normal(size=3), (1.0, 1.0)) for q in Rotation.random(6, random_state=int(rng.integers(2**31))).as_quat()]
                for _ in range(2)]
        errs = relative_pose_errors(*cams)
        ref = pose_oracle(*cams)
        pose_dev = max(pose_dev, np.abs(errs.rotation - ref[:, 0]).max(), np.abs(errs.translation - ref[:, 1]).max())
    if pose_dev >= 1e-9:
        fails.append("pose")
    for _ in range(20):
        M, N = rng.integers(1, 30), rng.integers(1, 12)
        gt = rng.uniform(0, 60, size=(M, N, 2))
        pred = gt + rng.normal(0, 5, size=gt.shape)
        vis, logits = rng.random((M, N)) > 0.3, rng.normal(size=(M, N))
        s = tracking_metrics(pred, logits, gt, vis)
        if (s.delta_avg_vis, s.occlusion_acc, s.average_jaccard) != tracking_oracle(pred, logits, gt, vis, (1, 2, 4, 8, 16)):
            fails.append("tracking")
    sim_dev = 0.0
    for _ in range(1000):
        X = rng.normal(size=(50, 3))
        s = np.exp(rng.uniform(np.log(0.1), np.log(10)))
        R = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
        u = rng.normal(size=3) * 5
        sim = umeyama_align(X, s * X @ R.T + u)
        sim_dev = max(sim_dev, abs(sim.scale - s), np.abs(sim.R - R).max(), np.abs(sim.u - u).max())
    ok = not fails and sim_dev < 1e-6
    record(7, ok, f"auc/chamfer/tracking exact, pose vs matrix log {pose_dev:.1e} deg (< 1e-9), "
                  f"Umeyama 1000 draws {sim_dev:.1e} (< 1e-6)" + (f"; mismatches {sorted(set(fails))}" if fails else ""))
    assert ok


# ---------------------------------------------------------------------------
# 8


def test_criterion_08_ablation_harness(tmp_path):
    cfg = load_config(ROOT / "configs" / "overfit.txt").with_updates(**{"optim.steps": 15})
    samples = [generate_scene(s, 3, 28, 28) for s in range(2)]
    rep = ablate(cfg, samples, tmp_path, attention=True)
    rows = [f"attn-{v}" for v in ATTENTION_VARIANTS]
    params = {rep.rows[r]["params"] for r in rows}
    ok = list(rep.rows) == rows and len(params) == 1 and (tmp_path / "ablation.json").exists() \
        and (tmp_path / "ablation.txt").exists()
    record(8, ok, f"{len(rows)} attention variants, parameter counts {sorted(params)} (exactly equal), "
                  f"table written as JSON and text")
    assert ok


# ---------------------------------------------------------------------------
# 9


def test_criterion_09_determinism_and_persistence(tmp_path):
    cfg = TrainConfig().with_updates(**MICRO, **{"optim.steps": 8, "optim.checkpoint_every": 4})
    samples = [generate_scene(s, 3, 28, 28, n_tracks=4) for s in range(3)]
    checks = {}

    write_dataset(samples, tmp_path / "data")
    back = read_dataset(tmp_path / "data")
    checks["dataset round trip"] = all(
        all(x.dtype == y.dtype and np.array_equal(x, y) for x, y in zip(a.to_arrays().values(), b.to_arrays().values()))
        for a, b in zip(samples, back))

    a = train(cfg, back, tmp_path / "a")
    b = train(cfg, back, tmp_path / "b")
    checks["identical checkpoints"] = a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    ra, rb = evaluate_model(a.model, samples, cfg), evaluate_model(b.model, samples, cfg)
    strip = lambda r: (r.rows, {k: v for k, v in r.meta.items() if k != "wall_time"})
    checks["identical reports"] = strip(ra) == strip(rb)

    model, _ = load_model(a.checkpoint, cfg)
    checks["checkpoint round trip"] = all(np.array_equal(model.state_dict()[k], p.data)
                                          for k, p in a.model.named_parameters())
    part = train(cfg, back, tmp_path / "c", until=4)
    resumed = train(cfg, back, tmp_path / "c", resume=part.checkpoint)
    checks["resume"] = resumed.checkpoint.read_bytes() == a.checkpoint.read_bytes()
    ok = all(checks.values())
    record(9, ok, ", ".join(f"{k} {'bit-exact' if v else 'DIFFERS'}" for k, v in checks.items()))
    assert ok


# ---------------------------------------------------------------------------
# 10


def test_criterion_10_single_view(tmp_path):
    cfg = load_config(ROOT / "configs" / "overfit.txt")
    model = Model(cfg.model, seed=0)
    one = select_frames(generate_scene(5, 3, 56, 56), [1], 8, seed=0)
    out = model(one.images, one.queries, one.query_frame)
    g = out.camera.params.data[0]
    shapes_ok = (out.camera.params.shape == (1, 9) and out.dense.depth.shape == (1, 56, 56)
                 and out.dense.points.shape == (1, 3, 56, 56) and out.tracks.positions.shape[1] == 1)
    identity = g[:7].tolist() == [0, 0, 0, 1, 0, 0, 0]
    with Tape() as tape:
        lb = total_loss(out, one, cfg.loss)
        tape.backward(lb.total)
    grads_ok = lb.is_finite() and all(p.grad is None or np.all(np.isfinite(p.grad)) for p in model.parameters())
    rep = evaluate([one], model_predictor(model))
    eval_ok = set(rep.rows) == {"pointhead", "depthcam"} and "auc30" not in rep.rows["pointhead"]
    single = cfg.with_updates(**{"optim.steps": 2, "data.frames_min": 1, "data.frames_max": 1})
    res = train(single, [one], tmp_path)
    ok = shapes_ok and identity and grads_ok and eval_ok and res.checkpoint.exists()
    record(10, ok, f"N=1: outputs {'ok' if shapes_ok else 'bad'}, frame-1 extrinsics "
                   f"{'identity' if identity else g[:7]}, loss+backward finite {grads_ok}, "
                   f"evaluation without pose rows {eval_ok}, training ran")
    assert ok
