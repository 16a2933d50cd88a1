"""Optimiser, schedule, checkpoints and the training loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import binio
from .config import OptimConfig, TrainConfig
from .heads import Model
from .losses import LossBreakdown, total_loss
from .synthgen import SceneSample, color_jitter, select_frames
from .tensor import Tape, Tensor

CKPT_MAGIC = b"VGCK"
CKPT_VERSION = 1
LOSS_COLUMNS = ("step", "camera", "depth", "pmap", "track", "visibility", "total")
SCHEDULE_COLUMNS = ("step", "lr", "grad_norm", "clipped_norm")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, components: dict[str, float]):
        parts = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {parts}")
        self.step = step
        self.components = components


class CheckpointError(ValueError):
    pass


def learning_rate(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to the peak, then cosine decay to zero at ``cfg.steps``."""
    warm = cfg.warmup_steps
    if step < warm:
        return cfg.lr * (step + 1) / warm
    if not cfg.cosine:
        return cfg.lr
    span = cfg.steps - warm
    frac = 1.0 if span <= 0 else min((step - warm) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> tuple[float, float]:
    """Scale ``grads`` in place to a global norm of at most ``max_norm``.

    Returns the norms before and after clipping.
    """
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
        return total, total * scale
    return total, total


@dataclass
class AdamW:
    """Adaptive moments with decoupled weight decay on matrices and kernels."""

    params: list[tuple[str, Tensor]]
    cfg: OptimConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params:
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def update(self, grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.cfg
        self.step += 1
        bc1 = 1.0 - c.beta1**self.step
        bc2 = 1.0 - c.beta2**self.step
        for name, p in self.params:
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            step = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if p.ndim >= 2 and c.weight_decay:
                step = step + c.weight_decay * p.data
            p.data -= (lr * step).astype(p.dtype)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, opt: AdamW, cfg: TrainConfig) -> None:
    arrays = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
        arrays[f"m/{name}"] = opt.m[name]
        arrays[f"v/{name}"] = opt.v[name]
    meta = {"step": str(opt.step), "config_hash": cfg.hash(), "dtype": np.dtype(model.dtype).name}
    binio.write_file(path, CKPT_MAGIC, CKPT_VERSION, arrays, meta)


@dataclass
class Checkpoint:
    step: int
    config_hash: str
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def read_checkpoint(path) -> Checkpoint:
    arrays, meta = binio.read_file(path, CKPT_MAGIC, CKPT_VERSION)
    split = {"param": {}, "m": {}, "v": {}}
    for key, arr in arrays.items():
        kind, _, name = key.partition("/")
        split[kind][name] = arr
    return Checkpoint(int(meta["step"]), meta["config_hash"], split["param"], split["m"], split["v"])


def load_model(path, cfg: TrainConfig, check_hash: bool = True) -> tuple[Model, Checkpoint]:
    ck = read_checkpoint(path)
    if check_hash and ck.config_hash != cfg.hash():
        raise CheckpointError(f"checkpoint config hash {ck.config_hash[:12]} does not match {cfg.hash()[:12]}")
    model = Model(cfg.model, seed=cfg.seed)
    model.load_state_dict(ck.params)
    return model, ck


# ---------------------------------------------------------------------------
# data


def draw_batch(samples: Sequence[SceneSample], cfg: TrainConfig, step: int) -> SceneSample:
    """The training sample for ``step``; depends only on (seed, step)."""
    rng = np.random.default_rng([cfg.seed, step])
    d = cfg.data
    sample = samples[int(rng.integers(len(samples)))]
    n_avail = sample.n_frames
    lo, hi = min(d.frames_min, n_avail), min(d.frames_max, n_avail)
    n = int(rng.integers(lo, hi + 1))
    frames = list(rng.permutation(n_avail)[:n]) if d.shuffle_frames else list(range(n))
    crop = None
    if d.crop != (0, 0) and rng.random() < 0.5:
        crop = d.crop
    if frames != list(range(n_avail)) or crop is not None:
        sample = select_frames(sample, frames, d.tracks, seed=int(rng.integers(2**31)), tau=d.tau, crop=crop)
    if d.jitter > 0:
        sample = _with_images(sample, color_jitter(sample.images, rng, d.jitter))
    return sample


def _with_images(sample: SceneSample, images: np.ndarray) -> SceneSample:
    return replace(sample, images=images.astype(np.float32))


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    model: Model
    optimizer: AdamW
    checkpoint: Path | None
    history: list[dict[str, float]]
    seconds: float


def train_step(model: Model, sample: SceneSample, cfg: TrainConfig) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    model.zero_grad()
    with Tape() as tape:
        out = model(sample.images, sample.queries, sample.query_frame)
        lb = total_loss(out, sample, cfg.loss)
        if lb.is_finite():
            tape.backward(lb.total)
    grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy()
             for name, p in model.named_parameters()}
    return lb, grads


def _read_csv(path: Path, before: int) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open() as fh:
        rows = list(csv.reader(fh))
    return [r for r in rows[1:] if int(r[0]) < before]


def train(cfg: TrainConfig, samples: Sequence[SceneSample], out_dir=None, resume=None,
          until: int | None = None, log: Callable[[str], None] | None = None,
          log_every: int = 100) -> TrainResult:
    """Train from scratch or from ``resume`` up to ``until`` (default: all steps).

    With ``out_dir`` set, writes ``config.txt``, ``loss_log.csv``,
    ``schedule.csv``, periodic ``ckpt_<step>.vgck`` and ``final.vgck``.
    """
    if not samples:
        raise ValueError("empty training set")
    t0 = time.perf_counter()
    model = Model(cfg.model, seed=cfg.seed)
    opt = AdamW(list(model.named_parameters()), cfg.optim)
    if resume is not None:
        ck = read_checkpoint(resume)
        if ck.config_hash != cfg.hash():
            raise CheckpointError("resume checkpoint was written with a different config")
        model.load_state_dict(ck.params)
        opt.m = {k: v.copy() for k, v in ck.m.items()}
        opt.v = {k: v.copy() for k, v in ck.v.items()}
        opt.step = ck.step
    end = cfg.optim.steps if until is None else min(until, cfg.optim.steps)

    out = Path(out_dir) if out_dir is not None else None
    loss_rows, sched_rows = [], []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.txt")
        loss_rows = _read_csv(out / "loss_log.csv", opt.step)
        sched_rows = _read_csv(out / "schedule.csv", opt.step)

    history = []
    params = list(model.named_parameters())
    for step in range(opt.step, end):
        sample = draw_batch(samples, cfg, step)
        lb, grads = train_step(model, sample, cfg)
        vals = lb.values()
        if not lb.is_finite():
            raise NonFiniteLossError(step, vals)
        gnorm, cnorm = clip_gradients([grads[n] for n, _ in params], cfg.optim.clip)
        lr = learning_rate(step, cfg.optim)
        opt.update(grads, lr)
        history.append({"step": step, **vals, "lr": lr, "grad_norm": gnorm, "clipped_norm": cnorm})
        loss_rows.append([str(step)] + [repr(vals[k]) for k in LOSS_COLUMNS[1:]])
        sched_rows.append([str(step), repr(lr), repr(gnorm), repr(cnorm)])
        if log and (step % log_every == 0 or step == end - 1):
            log(f"step {step:5d}  lr {lr:.2e}  " + "  ".join(f"{k} {vals[k]:.4f}" for k in LOSS_COLUMNS[1:]))
        if out is not None and cfg.optim.checkpoint_every and (step + 1) % cfg.optim.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{step + 1}.vgck", model, opt, cfg)

    ckpt = None
    if out is not None:
        _write_csv(out / "loss_log.csv", LOSS_COLUMNS, loss_rows)
        _write_csv(out / "schedule.csv", SCHEDULE_COLUMNS, sched_rows)
        ckpt = out / ("final.vgck" if opt.step >= cfg.optim.steps else f"ckpt_{opt.step}.vgck")
        save_checkpoint(ckpt, model, opt, cfg)
    return TrainResult(model, opt, ckpt, history, time.perf_counter() - t0)


def _write_csv(path: Path, header: Sequence[str], rows: list[list[str]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
