import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvgeo import binio
from mvgeo.backbone import ATTENTION_VARIANTS, ModelConfig
from mvgeo.cli import main
from mvgeo.config import ConfigFileError, OptimConfig, TrainConfig, load_config, parse_config
from mvgeo.evaluate import ablate, evaluate, evaluate_model, oracle_predictor, variant_configs
from mvgeo.heads import Model
from mvgeo.losses import total_loss
from mvgeo.metrics import MetricReport
from mvgeo.synthgen import generate_scene, read_dataset, scene_path, select_frames
from mvgeo.train import (
    AdamW,
    CheckpointError,
    NonFiniteLossError,
    clip_gradients,
    draw_batch,
    learning_rate,
    load_model,
    read_checkpoint,
    train,
)

TINY_MODEL = {"model.depth": 1, "model.dim": 16, "model.heads": 2, "model.track_dim": 8,
              "model.dense_dim": 8, "model.track_hidden": 8, "model.camera_layers": 1,
              "model.track_layers": 1}


def _tiny_config(steps=6, **extra):
    upd = {**TINY_MODEL, "optim.steps": steps, "optim.checkpoint_every": 3, "data.size": (28, 28),
           "data.tracks": 4, "data.frames_min": 1, "data.frames_max": 3, **extra}
    return TrainConfig().with_updates(**upd)


@pytest.fixture(scope="module")
def scenes():
    return [generate_scene(s, 3, 28, 28, n_tracks=4) for s in range(2)]


def _strip_wall_time(report: MetricReport):
    meta = {k: v for k, v in report.meta.items() if k != "wall_time"}
    return report.rows, meta


# ---------------------------------------------------------------------------
# config


def test_config_text_round_trip():
    cfg = _tiny_config(**{"loss.alpha": 0.3, "data.shuffle_frames": False, "seed": 7})
    back = parse_config(cfg.to_text())
    assert back == cfg and back.hash() == cfg.hash()


def test_config_parsing_details(tmp_path):
    text = "# comment\nseed = 3\n\noptim.lr = 0.01   # trailing\ndata.size = 42x56\nloss.norm = l2\n"
    (tmp_path / "c.txt").write_text(text)
    cfg = load_config(tmp_path / "c.txt")
    assert cfg.seed == 3 and cfg.optim.lr == 0.01 and cfg.data.size == (42, 56) and cfg.loss.norm == "l2"
    assert cfg.model == ModelConfig()


@pytest.mark.parametrize("text", [
    "model.width = 3",
    "bogus = 1",
    "optim.lr 0.1",
    "optim.steps = many",
    "data.frames_max = 30",
    "optim.steps = 10\noptim.warmup = 20",
    "optim.clip = 0",
    "model.attention = sparse",
])
def test_config_rejects_bad_input(text):
    with pytest.raises((ConfigFileError, ValueError)):
        parse_config(text)


def test_config_hash_tracks_content():
    a = TrainConfig()
    assert a.hash() == TrainConfig().hash()
    assert a.hash() != a.with_updates(**{"optim.lr": 2e-3}).hash()


# ---------------------------------------------------------------------------
# schedule, clipping, optimiser


def test_schedule_endpoints():
    cfg = OptimConfig(lr=1e-3, steps=1000)
    warm = cfg.warmup_steps
    assert warm == 50
    assert learning_rate(0, cfg) == pytest.approx(1e-3 / warm)
    assert learning_rate(warm, cfg) == pytest.approx(1e-3)
    assert learning_rate(cfg.steps, cfg) <= 1e-6


@given(st.integers(1, 5000), st.floats(1e-5, 1e-1))
def test_schedule_shape(steps, peak):
    cfg = OptimConfig(lr=peak, steps=steps)
    lrs = np.array([learning_rate(s, cfg) for s in range(steps + 1)])
    warm = cfg.warmup_steps
    assert np.all(lrs > 0) or lrs[-1] == 0
    assert np.all(lrs <= peak * (1 + 1e-12))
    assert np.all(np.diff(lrs[:warm]) >= 0)
    assert np.all(np.diff(lrs[warm:]) <= 1e-18)
    assert lrs[-1] <= 1e-3 * peak


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 10.0))
def test_clip_bounds_global_norm(seed, max_norm):
    rng = np.random.default_rng(seed)
    grads = [rng.normal(0, rng.uniform(0.01, 10), size=rng.integers(1, 20)) for _ in range(4)]
    orig = [g.copy() for g in grads]
    before, after = clip_gradients(grads, max_norm)
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    assert before == pytest.approx(math.sqrt(sum(float(np.sum(g * g)) for g in orig)))
    assert total <= max_norm + 1e-6 and after == pytest.approx(total)
    if before <= max_norm:
        assert all(np.array_equal(a, b) for a, b in zip(grads, orig))


def test_adamw_matches_reference_update(rng):
    from mvgeo.tensor import Tensor
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    cfg = OptimConfig(lr=0.1, weight_decay=0.1)
    opt = AdamW([("w", w), ("b", b)], cfg)
    w0, b0 = w.data.copy(), b.data.copy()
    gw, gb = rng.normal(size=(3, 2)), rng.normal(size=2)
    mw = vw = 0
    for k in (1, 2):
        opt.update({"w": gw.copy(), "b": gb.copy()}, 0.1)
        mw = 0.9 * mw + 0.1 * gw
        vw = 0.999 * vw + 0.001 * gw * gw
        w0 = w0 - 0.1 * ((mw / (1 - 0.9**k)) / (np.sqrt(vw / (1 - 0.999**k)) + 1e-8) + 0.1 * w0)
    np.testing.assert_allclose(w.data, w0, rtol=1e-12)
    # vectors are not decayed
    b_ref = b0.copy()
    mb = vb = 0
    for k in (1, 2):
        mb = 0.9 * mb + 0.1 * gb
        vb = 0.999 * vb + 0.001 * gb * gb
        b_ref = b_ref - 0.1 * (mb / (1 - 0.9**k)) / (np.sqrt(vb / (1 - 0.999**k)) + 1e-8)
    np.testing.assert_allclose(b.data, b_ref, rtol=1e-12)


# ---------------------------------------------------------------------------
# data sampling


def test_draw_batch_is_deterministic_and_in_range(scenes):
    cfg = _tiny_config()
    for step in range(8):
        a, b = draw_batch(scenes, cfg, step), draw_batch(scenes, cfg, step)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.tracks, b.tracks)
        assert 1 <= a.n_frames <= 3
        assert a.cameras[0].as_vector()[:7].tolist() == [0, 0, 0, 1, 0, 0, 0]


# ---------------------------------------------------------------------------
# training, checkpoints, resume


def test_zero_steps_checkpoint_equals_initialisation(scenes, tmp_path):
    cfg = _tiny_config(steps=0)
    res = train(cfg, scenes, tmp_path)
    ck = read_checkpoint(res.checkpoint)
    init = Model(cfg.model, seed=cfg.seed).state_dict()
    assert ck.step == 0 and set(ck.params) == set(init)
    assert all(np.array_equal(ck.params[k], init[k]) for k in init)


def test_checkpoint_round_trip(scenes, tmp_path):
    cfg = _tiny_config(steps=2)
    res = train(cfg, scenes, tmp_path)
    model, ck = load_model(res.checkpoint, cfg)
    for name, p in res.model.named_parameters():
        assert np.array_equal(model.state_dict()[name], p.data)
        assert np.array_equal(ck.m[name], res.optimizer.m[name])
        assert np.array_equal(ck.v[name], res.optimizer.v[name])
    with pytest.raises(CheckpointError):
        load_model(res.checkpoint, cfg.with_updates(**{"optim.lr": 0.5}))
    data = res.checkpoint.read_bytes()
    (tmp_path / "bad.vgck").write_bytes(data[:-7])
    with pytest.raises(binio.FormatError):
        read_checkpoint(tmp_path / "bad.vgck")


def test_training_logs_and_invariants(scenes, tmp_path):
    cfg = _tiny_config(steps=6)
    res = train(cfg, scenes, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "ckpt_3.vgck", "ckpt_6.vgck", "config.txt", "final.vgck", "loss_log.csv", "schedule.csv"]
    with (tmp_path / "schedule.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == list(range(6))
    assert all(float(r["clipped_norm"]) <= cfg.optim.clip + 1e-6 for r in rows)
    assert [float(r["lr"]) for r in rows] == [learning_rate(s, cfg.optim) for s in range(6)]
    with (tmp_path / "loss_log.csv").open() as fh:
        losses = list(csv.DictReader(fh))
    assert len(losses) == 6 and all(np.isfinite(float(r["total"])) for r in losses)
    assert load_config(tmp_path / "config.txt") == cfg
    assert len(res.history) == 6


def test_identical_runs_are_bit_identical(scenes, tmp_path):
    cfg = _tiny_config(steps=4)
    a = train(cfg, scenes, tmp_path / "a")
    b = train(cfg, scenes, tmp_path / "b")
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert (tmp_path / "a/loss_log.csv").read_bytes() == (tmp_path / "b/loss_log.csv").read_bytes()
    ra = evaluate_model(a.model, scenes, cfg)
    rb = evaluate_model(b.model, scenes, cfg)
    assert _strip_wall_time(ra) == _strip_wall_time(rb)


def test_resume_equals_uninterrupted(scenes, tmp_path):
    cfg = _tiny_config(steps=6)
    full = train(cfg, scenes, tmp_path / "full")
    part = train(cfg, scenes, tmp_path / "part", until=4)
    assert part.checkpoint.name == "ckpt_4.vgck"
    resumed = train(cfg, scenes, tmp_path / "part", resume=part.checkpoint)
    assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()
    for f in ("loss_log.csv", "schedule.csv"):
        assert (tmp_path / "part" / f).read_bytes() == (tmp_path / "full" / f).read_bytes()
    with pytest.raises(CheckpointError):
        train(cfg.with_updates(**{"seed": 1}), scenes, resume=part.checkpoint)


def test_non_finite_loss_aborts_with_breakdown(scenes):
    broken = [s.__class__(**{**s.__dict__, "images": np.full_like(s.images, np.nan)}) for s in scenes]
    with pytest.raises(NonFiniteLossError) as err, np.errstate(invalid="ignore"):
        train(_tiny_config(steps=3), broken)
    assert err.value.step == 0
    assert set(err.value.components) >= {"camera", "depth", "pmap", "track", "visibility", "total"}
    assert "step 0" in str(err.value)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train(_tiny_config(), [])


# ---------------------------------------------------------------------------
# evaluation


def test_oracle_predictions_score_perfectly(scenes):
    rep = evaluate(scenes, oracle_predictor)
    assert set(rep.rows) == {"pointhead", "depthcam"}
    for row in rep.rows.values():
        assert row["auc30"] == 1.0 and row["delta_avg_vis"] == 1.0 and row["average_jaccard"] == 1.0
        assert row["depth_abs_rel"] == 0.0
        assert row["chamfer_overall"] < 1e-9


def test_random_weights_give_finite_report(scenes):
    cfg = _tiny_config()
    rep = evaluate_model(Model(cfg.model, seed=0), scenes, cfg)
    assert set(rep.rows) == {"pointhead", "depthcam"}
    assert all(np.isfinite(v) for row in rep.rows.values() for v in row.values())
    assert rep.meta["config_hash"] == cfg.hash()


@pytest.mark.parametrize("mode,rows", [("pointhead", {"pointhead"}), ("depthcam", {"depthcam"})])
def test_single_route_modes(scenes, mode, rows):
    assert set(evaluate(scenes, oracle_predictor, mode).rows) == rows


# ---------------------------------------------------------------------------
# ablations


def test_attention_variants_share_parameter_count():
    cfg = TrainConfig()
    counts = {name: Model(c.model).num_parameters() for name, c in variant_configs(cfg).items()}
    assert len(counts) == len(ATTENTION_VARIANTS) and len(set(counts.values())) == 1


def test_single_frame_alternating_equals_global(scenes):
    cfg = _tiny_config()
    one = select_frames(scenes[0], [0], 4, seed=0)
    losses = []
    for variant in ("alternating", "global"):
        model = Model(cfg.with_updates(**{"model.attention": variant}).model, seed=0)
        out = model(one.images, one.queries, one.query_frame)
        losses.append(total_loss(out, one, cfg.loss).values())
    assert losses[0] == losses[1]


def test_ablation_table(scenes, tmp_path):
    cfg = _tiny_config(steps=2)
    rep = ablate(cfg, scenes, tmp_path, attention=True, losses=True)
    assert list(rep.rows) == [f"attn-{v}" for v in ATTENTION_VARIANTS] + [
        "loss-no_camera", "loss-no_depth", "loss-no_track", "loss-all"]
    params = {rep.rows[f"attn-{v}"]["params"] for v in ATTENTION_VARIANTS}
    assert len(params) == 1
    assert MetricReport.load(tmp_path / "ablation.json").rows == rep.rows
    assert "attn-cross" in (tmp_path / "ablation.txt").read_text()


# ---------------------------------------------------------------------------
# CLI


def test_cli_end_to_end(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["synth", "--seed", "3", "--scenes", "2", "--frames", "2", "--size", "28x28",
                 "--tracks", "4", "--out", str(data)]) == 0
    assert len(read_dataset(data)) == 2
    cfg = _tiny_config(steps=2)
    cfg.save(tmp_path / "cfg.txt")
    assert main(["train", "--config", str(tmp_path / "cfg.txt"), "--data", str(data), "--out", str(run)]) == 0
    ck = run / "final.vgck"
    assert main(["eval", "--ckpt", str(ck), "--data", str(data), "--report", str(tmp_path / "r.json")]) == 0
    rows = json.loads((tmp_path / "r.json").read_text())["rows"]
    assert set(rows) == {"pointhead", "depthcam"}
    scene = scene_path(data, 3)
    for source in ("pointhead", "depthcam"):
        out = tmp_path / f"{source}.ply"
        assert main(["export-ply", "--ckpt", str(ck), "--scene", str(scene), "--out", str(out),
                     "--source", source]) == 0
        assert out.read_bytes().startswith(b"ply")
    assert main(["ablate", "--config", str(tmp_path / "cfg.txt"), "--data", str(data),
                 "--out", str(tmp_path / "abl")]) == 0
    assert (tmp_path / "abl" / "ablation.json").exists()
    with pytest.raises(SystemExit):
        main(["synth", "--scenes", "1", "--frames", "2", "--size", "bad", "--out", str(data)])
    capsys.readouterr()
