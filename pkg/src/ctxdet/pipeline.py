"""Training / inference / evaluation runs shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapt import CameraBank, adapt_infer
from .config import RunConfig, model_config
from .detector import (
    DetectorModel,
    LossBreakdown,
    OptState,
    PresenceReplay,
    infer_frame,
    train_step,
)
from .evalkit import EvalReport, ap50
from .memory import ContextMemory, init_memory


@dataclass
class TrainResult:
    model: DetectorModel
    memory: ContextMemory | None
    metrics: list[LossBreakdown]


def build_model(cfg: RunConfig) -> tuple[DetectorModel, ContextMemory | None]:
    mcfg = model_config(cfg)
    model = DetectorModel(mcfg, seed=cfg.train.seed)
    mem = None
    if mcfg.use_memory:
        mem = init_memory(
            mcfg.num_classes,
            mcfg.num_prototypes,
            mcfg.d_model,
            cfg.memory.alpha,
            seed=cfg.train.seed + 1,
        )
    return model, mem


def training_run(cfg: RunConfig, frames, log_fn=None) -> TrainResult:
    """Cycle the frame stream for cfg.train.steps optimization steps."""
    if not frames:
        raise ValueError("empty training stream")
    model, mem = build_model(cfg)
    opt = OptState(kind=cfg.train.optimizer, lr=cfg.train.lr)
    rng = np.random.default_rng(cfg.train.seed + 2)
    replay = None
    if cfg.model.use_memory and cfg.train.head_replay > 0:
        replay = PresenceReplay(batch=cfg.train.head_replay, lr=max(cfg.train.lr, 1e-3))
    metrics = []
    for step in range(cfg.train.steps):
        frame = frames[step % len(frames)]
        breakdown = train_step(
            frame,
            model,
            mem,
            opt,
            strategy=cfg.train.sampling,
            rng=rng,
            loss_weights=cfg.loss,
            match_weights=cfg.match,
            replay=replay,
        )
        metrics.append(breakdown)
        if log_fn is not None:
            log_fn(step, breakdown)
    return TrainResult(model=model, memory=mem, metrics=metrics)


def frame_predictions(detections, frame_id: int):
    """Top-class record per query: (frame_id, class_id, score, box)."""
    ids, scores = detections.top()
    return [
        (frame_id, int(ids[q]), float(scores[q]), tuple(detections.boxes[q]))
        for q in range(len(ids))
    ]


def inference_run(
    model: DetectorModel,
    mem: ContextMemory | None,
    frames,
    tta_mode: str = "off",
    beta: float = 0.6,
    gate: float = 0.5,
    strategy: str = "score",
    rng: np.random.Generator | None = None,
):
    """Frame-ordered inference. Returns (predictions, camera bank or None).

    tta_mode 'global' shares one adapted bank across cameras, 'percam' keeps
    one per camera id; both need a memory-enabled model.
    """
    preds = []
    bank = None
    if tta_mode not in ("off", "global", "percam"):
        raise ValueError(f"unknown tta mode {tta_mode!r}")
    if tta_mode != "off":
        if mem is None:
            raise ValueError("test-time adaptation needs a prototype bank")
        bank = CameraBank(source=mem, beta=beta)
    for fid, frame in enumerate(frames):
        if bank is None:
            fp = infer_frame(model, mem, frame, strategy=strategy, rng=rng)
        else:
            key = "global" if tta_mode == "global" else None
            fp, bank = adapt_infer(frame, model, bank, gate=gate, camera_key=key)
        preds.extend(frame_predictions(fp.detections, fid))
    return preds, bank


def ground_truths(frames):
    return [
        (fid, class_id, box)
        for fid, frame in enumerate(frames)
        for class_id, box in frame.annotations
    ]


def evaluate(preds, frames, num_classes: int) -> EvalReport:
    return ap50(preds, ground_truths(frames), num_classes)
