"""Test-time memory adaptation.

During inference the frozen source bank stays untouched; a per-domain test
memory accumulates running sums and counts of detected instance features,
routed by correlation against the frozen source prototypes. Retrieval blends
the source bank with the per-slot test means by the source weight beta. No
model parameter changes anywhere in this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import DetectorModel, ForwardPass, forward_frame
from .memory import ContextMemory, InstanceFeature, extract_instance_features


@dataclass
class TestMemory:
    sums: np.ndarray  # (C, K, d)
    counts: np.ndarray  # (C, K) int64
    source: ContextMemory  # frozen
    beta: float  # weight of the source bank in blending

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta {self.beta} outside [0, 1]")


def new_test_memory(source: ContextMemory, beta: float) -> TestMemory:
    c, k, d = source.prototypes.shape
    return TestMemory(
        sums=np.zeros((c, k, d)),
        counts=np.zeros((c, k), dtype=np.int64),
        source=source,
        beta=beta,
    )


def tta_update(tm: TestMemory, instances: list[InstanceFeature]) -> TestMemory:
    """Accumulate instance features into their slots.

    Routing is argmax correlation against the FROZEN source prototypes, never
    the running sums, so the result is independent of stream order. Mutates
    ``tm`` and returns it.
    """
    protos = tm.source.prototypes
    for inst in instances:
        c = inst.class_id
        k = int(np.argmax(protos[c] @ inst.vector))
        tm.sums[c, k] += inst.vector
        tm.counts[c, k] += 1
    return tm


def blended_memory(tm: TestMemory) -> ContextMemory:
    """beta * source + (1 - beta) * per-slot test mean.

    Slots that never received an instance contribute a zero mean, so an empty
    test memory degrades to beta * source.
    """
    counts = tm.counts[:, :, None]
    means = np.where(counts > 0, tm.sums / np.maximum(counts, 1), 0.0)
    blended = tm.beta * tm.source.prototypes + (1.0 - tm.beta) * means
    return ContextMemory(
        prototypes=blended,
        update_count=tm.counts.copy(),
        momentum=tm.source.momentum,
    )


@dataclass
class CameraBank:
    """Independent test memory per camera id; unknown ids start empty."""

    source: ContextMemory
    beta: float
    banks: dict = field(default_factory=dict)

    def get(self, camera_id: str) -> TestMemory:
        if camera_id not in self.banks:
            self.banks[camera_id] = new_test_memory(self.source, self.beta)
        return self.banks[camera_id]


def adapt_infer(
    frame,
    model: DetectorModel,
    bank: CameraBank,
    gate: float = 0.5,
    camera_key: str | None = None,
) -> tuple[ForwardPass, CameraBank]:
    """Detect with the blended bank, then absorb this frame's detections.

    ``camera_key`` overrides the frame's camera id (a fixed key gives one
    shared bank across cameras). Predicted boxes whose top class probability
    exceeds ``gate`` feed the test memory; model parameters are untouched.
    """
    tm = bank.get(camera_key if camera_key is not None else frame.camera_id)
    fp = forward_frame(model, blended_memory(tm), frame.grid)

    cfg = model.cfg
    ids, scores = fp.detections.top()
    boxes = [
        (fp.detections.boxes[q], int(ids[q]))
        for q in range(len(ids))
        if scores[q] > gate
    ]
    if boxes:
        f_grid = fp.f_enc.reshape(cfg.tokens_h, cfg.tokens_w, cfg.d_model)
        instances, _ = extract_instance_features(f_grid, boxes)
        tta_update(tm, instances)
    return fp, bank
