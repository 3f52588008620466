"""Run configuration, Adam, checkpoints, and the train / evaluate loops."""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import erpt
from .autodiff import checkpoint as ckpt
from .autodiff import nn, no_grad
from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .errors import ConfigError, DataError, NumericError
from .losses import berhu_loss, layout_loss, weighted_cross_entropy
from .metrics import (CSV_HEADER, depth_metrics, format_rows, layout_3diou, metrics_row,
                      seg_metrics)
from .model import TASKS, ModelConfig, PanelNet
from .synthetic import augment

log = logging.getLogger(__name__)

FORMAT_TAG = "panelnet-train-1"
AUGMENTATIONS = ("flip", "rotate", "gamma")


class VersionError(DataError):
    """Checkpoint written by an incompatible version or for another model."""


# -- run configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    task: str = "depth"
    scale: str = "full"
    height: int = 512
    width: int = 1024
    interval: int = 128
    stride: int = 32
    max_depth: float = 10.0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 16
    steps: int = 2000
    seed: int = 0
    merge: str = "confidence"
    augment: str = "rotate,gamma"
    eval_every: int = 100
    scenes: int = 0
    stop_rmse_ratio: float = 0.0
    stop_delta1: float = 0.0
    stop_miou: float = 0.0
    data: str = ""
    out: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def augmentations(self) -> tuple:
        names = tuple(a.strip() for a in self.augment.split(",") if a.strip())
        return () if names == ("none",) else names

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.scale not in ("desk", "full"):
            raise ConfigError(f"scale must be desk or full, got {self.scale!r}")
        if self.merge not in ("confidence", "uniform"):
            raise ConfigError(f"merge must be confidence or uniform, got {self.merge!r}")
        bad = set(self.augmentations) - set(AUGMENTATIONS)
        if bad:
            raise ConfigError(f"unknown augmentations {sorted(bad)}; known: {AUGMENTATIONS} or none")
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("optimizer settings out of range")
        if self.batch < 1 or self.steps < 0 or self.eval_every < 1 or self.scenes < 0:
            raise ConfigError("batch and eval_every must be >= 1; steps and scenes >= 0")
        if self.max_depth <= 0:
            raise ConfigError("max_depth must be positive")
        self.model_config()

    def model_config(self) -> ModelConfig:
        base = ModelConfig.desk if self.scale == "desk" else ModelConfig.full
        return base(task=self.task, height=self.height, width=self.width, interval=self.interval,
                    stride=self.stride, max_depth=self.max_depth, boundary_length=self.width,
                    merge_uniform=self.merge == "uniform", seed=self.seed)


def _convert(key, kind, text):
    try:
        if kind is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from exc


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse flat ``key=value`` lines; ``#`` starts a comment. Unknown keys fail."""
    kinds = {f.name: type(f.default) for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, kinds[key], value)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path, **overrides) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, **overrides)


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters without a gradient entry (or with ``None``) are left alone.
    """
    bad = [k for k, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradients in {len(bad)} parameter(s): {bad[:5]}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise NumericError(f"{k}: gradient shape {g.shape} vs parameter {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# -- training state and checkpoints --------------------------------------------------

@dataclass
class TrainState:
    model: PanelNet
    optim: AdamState
    rng: np.random.Generator
    config: RunConfig

    @property
    def step(self) -> int:
        return self.optim.step

    @classmethod
    def fresh(cls, config: RunConfig) -> "TrainState":
        rng = np.random.default_rng(config.seed)
        model = PanelNet(config.model_config(), np.random.default_rng(config.seed))
        params = {k: p.data for k, p in model.named_parameters()}
        return cls(model, AdamState.zeros(params), rng, config)


def _json_bytes(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def _model_signature(model_cfg: ModelConfig) -> dict:
    sig = {k: v for k, v in model_cfg.to_dict().items() if k not in ("seed", "merge_uniform")}
    # normalize tuples to lists so it compares equal to its JSON form
    return json.loads(json.dumps(sig))


def state_entries(state: TrainState) -> dict:
    entries = dict(state.model.state_dict())
    for k in state.optim.m:
        entries[f"optim.m.{k}"] = state.optim.m[k]
    for k in state.optim.v:
        entries[f"optim.v.{k}"] = state.optim.v[k]
    entries["meta.step"] = np.array([state.optim.step], dtype=np.int64)
    entries["meta.rng"] = _json_bytes(state.rng.bit_generator.state)
    entries["meta.config"] = _json_bytes({
        "format": FORMAT_TAG,
        # paths are left out so identical runs in different directories match
        "run": {k: v for k, v in dataclasses.asdict(state.config).items() if k not in ("data", "out")},
        "model": _model_signature(state.model.cfg),
    })
    return entries


def save_checkpoint(path, state: TrainState):
    ckpt.save(path, state_entries(state))


def _read_meta(entries) -> dict:
    try:
        meta = json.loads(bytes(entries["meta.config"]).decode())
    except (KeyError, ValueError) as exc:
        raise VersionError("checkpoint has no readable meta.config entry") from exc
    if meta.get("format") != FORMAT_TAG:
        raise VersionError(f"checkpoint format {meta.get('format')!r}, expected {FORMAT_TAG!r}")
    return meta


def load_checkpoint(path, config: RunConfig | None = None) -> TrainState:
    """Restore a TrainState. With ``config`` given, its model must match."""
    entries = ckpt.load(path)
    meta = _read_meta(entries)
    stored = RunConfig(**meta["run"])
    if config is None:
        config = stored
    elif _model_signature(config.model_config()) != meta["model"]:
        raise VersionError("checkpoint model configuration does not match the requested model")
    state = TrainState.fresh(config)
    if _model_signature(state.model.cfg) != meta["model"]:
        raise VersionError("checkpoint model configuration does not match this version")
    try:
        state.model.load_state_dict(entries)
    except (KeyError, ValueError) as exc:
        raise VersionError(f"checkpoint does not fit the model: {exc}") from exc
    for k in state.optim.m:
        state.optim.m[k] = entries[f"optim.m.{k}"].copy()
        state.optim.v[k] = entries[f"optim.v.{k}"].copy()
    state.optim.step = int(entries["meta.step"][0])
    state.rng.bit_generator.state = json.loads(bytes(entries["meta.rng"]).decode())
    return state


# -- data --------------------------------------------------------------------------

def load_scenes(config: RunConfig):
    if not config.data:
        raise ConfigError("no dataset directory given")
    dirs = erpt.list_scenes(config.data)
    if config.scenes:
        dirs = dirs[:config.scenes]
    samples = [erpt.load_sample(d) for d in dirs]
    for d, s in zip(dirs, samples):
        if s.rgb.shape[1:] != (config.height, config.width):
            raise DataError(f"{d}: size {s.rgb.shape[1:]} does not match config "
                            f"{config.height}x{config.width}")
    return samples


# -- loss and gradients --------------------------------------------------------------

def scene_loss(model: PanelNet, sample, uniform=None):
    out = model(sample.rgb, uniform=uniform)
    task = model.cfg.task
    if task == "depth":
        gt = sample.depth[0]
        return berhu_loss(T.reshape(out["depth"], gt.shape), gt, gt > 0)
    if task == "segmentation":
        return weighted_cross_entropy(out["logits"], sample.semantics[0], axis=0)
    return layout_loss(out["boundary"], out["room_height"], sample.boundary,
                       sample.room_height, sample.camera_height)


def batch_gradients(model: PanelNet, samples, fused=False):
    """Mean loss over ``samples`` and its parameter gradients.

    ``fused`` builds one graph for the whole batch; otherwise each scene is
    backpropagated on its own, in order, and gradients accumulate.
    """
    model.zero_grad()
    scale = 1.0 / len(samples)
    if fused:
        total = None
        for s in samples:
            loss = T.scale(scene_loss(model, s), scale)
            total = loss if total is None else T.add(total, loss)
        total.backward()
        value = float(total.data)
    else:
        value = 0.0
        for s in samples:
            loss = T.scale(scene_loss(model, s), scale)
            loss.backward()
            value += float(loss.data)
            del loss
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    return value, {k: p.grad for k, p in model.named_parameters()}


# -- evaluation --------------------------------------------------------------------------

def recalibrate_batch_norm(model: PanelNet, samples):
    """Replace BN running statistics with their average over ``samples``.

    With one panorama per step the exponential running averages trail the
    weights badly, so they are recomputed from scratch with the current
    weights before every evaluation. Train-mode forwards never read these
    buffers, so this does not change the optimization trajectory.
    """
    if not T.grad_enabled():
        raise RuntimeError("BN statistics are only collected with gradient recording on")
    bns = [m for m in model.modules() if isinstance(m, nn.BatchNorm2d)]
    saved = [b.momentum for b in bns]
    for b in bns:
        b.running_mean.data[:] = 0
        b.running_var.data[:] = 1
    model.train()
    try:
        for k, s in enumerate(samples):
            for b in bns:
                b.momentum = 1.0 / (k + 1)
            model(s.rgb)  # grad mode on: BN updates its buffers only when recording
    finally:
        for b, m in zip(bns, saved):
            b.momentum = m
    model.eval()


def predict(model: PanelNet, rgb, uniform=None) -> dict:
    model.eval()
    with no_grad():
        out = model(rgb, uniform=uniform)
    task = model.cfg.task
    h, w = rgb.shape[1:]
    if task == "depth":
        return {"depth": out["depth"].data.reshape(h, w)}
    if task == "segmentation":
        return {"labels": np.argmax(out["logits"].data, axis=0).astype(np.uint8)}
    return {"boundary": out["boundary"].data.astype(np.float64),
            "room_height": float(out["room_height"].data[0])}


def score(task: str, samples, preds, num_classes=4) -> dict:
    """Metrics row (without step) pooled over all scenes."""
    if task == "depth":
        p = np.concatenate([x["depth"].ravel() for x in preds])
        g = np.concatenate([s.depth.ravel() for s in samples])
        return metrics_row(0, depth=depth_metrics(p, g))
    if task == "segmentation":
        p = np.concatenate([x["labels"].ravel() for x in preds])
        g = np.concatenate([s.semantics.ravel() for s in samples])
        return metrics_row(0, seg=seg_metrics(p, g, num_classes))
    ious = [layout_3diou(x["boundary"], x["room_height"], s.boundary, s.room_height, s.camera_height)
            for x, s in zip(preds, samples)]
    return metrics_row(0, iou3d=float(np.mean(ious)))


def ground_truth_predictions(task: str, samples) -> list:
    if task == "depth":
        return [{"depth": s.depth[0]} for s in samples]
    if task == "segmentation":
        return [{"labels": s.semantics[0]} for s in samples]
    return [{"boundary": s.boundary, "room_height": s.room_height} for s in samples]


def evaluate(checkpoint, data, task=None, merge="confidence", inject_gt=False) -> dict:
    """Metrics row for ``checkpoint`` on the scenes in ``data``.

    ``inject_gt`` scores the ground truth against itself, bypassing the model.
    """
    if merge not in ("confidence", "uniform"):
        raise ConfigError(f"merge must be confidence or uniform, got {merge!r}")
    state = load_checkpoint(checkpoint)
    if task is not None and task != state.config.task:
        raise VersionError(f"checkpoint was trained for {state.config.task!r}, not {task!r}")
    task = state.config.task
    samples = [erpt.load_sample(d) for d in erpt.list_scenes(data)]
    if inject_gt:
        preds = ground_truth_predictions(task, samples)
    else:
        preds = [predict(state.model, s.rgb, uniform=merge == "uniform") for s in samples]
    row = score(task, samples, preds, state.model.cfg.num_classes)
    row["step"] = state.step
    return row


# -- training loop -----------------------------------------------------------------------

def _targets_met(cfg: RunConfig, row, mean_depth) -> bool:
    if cfg.task == "depth" and (cfg.stop_rmse_ratio > 0 or cfg.stop_delta1 > 0):
        return row["rmse"] < cfg.stop_rmse_ratio * mean_depth and row["d1"] > cfg.stop_delta1
    if cfg.task == "segmentation" and cfg.stop_miou > 0:
        return row["miou"] > cfg.stop_miou
    return False


def _better(task, row, best) -> bool:
    if best is None:
        return True
    if task == "depth":
        return row["rmse"] < best["rmse"]
    if task == "segmentation":
        return row["miou"] > best["miou"]
    return row["iou3d"] > best["iou3d"]


def single_threaded():
    """Context limiting BLAS and OpenMP pools to one thread."""
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def train(config: RunConfig, resume=None, deterministic=False, progress=None) -> dict:
    """Train per ``config``; writes metrics.csv, loss.csv, last.pnck and best.pnck
    into ``config.out``. Returns the last metrics row (with ``stopped_early``)."""
    if not config.out:
        raise ConfigError("no output directory given")
    samples = load_scenes(config)  # data errors surface before step 0
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    guard = single_threaded() if deterministic else contextlib.nullcontext()
    with guard:
        return _train(config, samples, out, resume, progress)


def _train(config, samples, out, resume, progress):
    state = load_checkpoint(resume, config) if resume else TrainState.fresh(config)
    model, cfg = state.model, config
    mean_depth = float(np.mean([s.depth[s.depth > 0].mean() for s in samples]))
    metrics_path, loss_path = out / "metrics.csv", out / "loss.csv"
    if not resume:
        metrics_path.write_text(",".join(CSV_HEADER) + "\n")
        loss_path.write_text("step,loss\n")
    rotate_unit = cfg.stride
    best = None
    row = None
    t0 = time.perf_counter()
    while state.step < cfg.steps:
        idx = state.rng.integers(0, len(samples), size=cfg.batch)
        batch = []
        for i in idx:
            s = samples[int(i)]
            if cfg.augmentations:
                seed = int(state.rng.integers(0, 2 ** 63 - 1))
                s = augment(s, cfg.augmentations, seed=seed, rotate_unit=rotate_unit)
            batch.append(s)
        model.train()
        loss, grads = batch_gradients(model, batch)
        params = {k: p.data for k, p in model.named_parameters()}
        adam_step(params, grads, state.optim, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        model.zero_grad()
        with loss_path.open("a") as fh:
            fh.write(f"{state.step},{loss:.6f}\n")
        if state.step % cfg.eval_every == 0 or state.step == cfg.steps:
            recalibrate_batch_norm(model, samples)
            preds = [predict(model, s.rgb) for s in samples]
            row = score(cfg.task, samples, preds, model.cfg.num_classes)
            row["step"] = state.step
            with metrics_path.open("a") as fh:
                fh.write(format_rows([row], header=False))
            if _better(cfg.task, row, best):
                best = row
                save_checkpoint(out / "best.pnck", state)
            if progress:
                progress(state.step, loss, row, time.perf_counter() - t0)
            if _targets_met(cfg, row, mean_depth):
                row["stopped_early"] = state.step < cfg.steps
                break
    save_checkpoint(out / "last.pnck", state)
    if row is None:
        row = metrics_row(state.step)
    row.setdefault("stopped_early", False)
    row["mean_depth"] = mean_depth
    return row
