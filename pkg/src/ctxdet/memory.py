"""Class-wise prototype memory.

A fixed-size bank of K prototype vectors per class, updated online by
instance features: each feature is routed to the most correlated prototype of
its class and pulls that slot toward itself by an exponential moving average.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class InstanceFeature:
    """One pooled feature vector with its class and originating box."""

    vector: np.ndarray  # (d,)
    class_id: int
    source_box: tuple  # (cx, cy, w, h), normalized


@dataclass
class ContextMemory:
    prototypes: np.ndarray  # (C, K, d)
    update_count: np.ndarray  # (C, K) int64
    momentum: float

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[1]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[2]


def init_memory(num_classes: int, num_prototypes: int, dim: int, momentum: float, seed: int) -> ContextMemory:
    """Seeded standard-normal prototypes scaled to unit L2 norm, zero counts."""
    if num_classes < 1 or num_prototypes < 1 or dim < 1:
        raise ValueError(
            f"memory dims must be >= 1, got C={num_classes} K={num_prototypes} d={dim}"
        )
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum {momentum} outside [0, 1]")
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((num_classes, num_prototypes, dim))
    protos /= np.linalg.norm(protos, axis=-1, keepdims=True)
    counts = np.zeros((num_classes, num_prototypes), dtype=np.int64)
    return ContextMemory(prototypes=protos, update_count=counts, momentum=momentum)


def assign_prototype(feature: InstanceFeature, mem: ContextMemory) -> int:
    """Index of the prototype of the feature's class with the largest inner
    product; ties break toward the smallest index."""
    if not 0 <= feature.class_id < mem.num_classes:
        raise ValueError(f"class id {feature.class_id} outside [0, {mem.num_classes})")
    dots = mem.prototypes[feature.class_id] @ feature.vector
    return int(np.argmax(dots))


def momentum_update(mem: ContextMemory, instances: list[InstanceFeature]) -> ContextMemory:
    """Apply instances sequentially; each is routed against the current bank
    state and moves only its assigned slot. Mutates ``mem`` and returns it."""
    a = mem.momentum
    for inst in instances:
        k = assign_prototype(inst, mem)
        c = inst.class_id
        mem.prototypes[c, k] = a * mem.prototypes[c, k] + (1.0 - a) * inst.vector
        mem.update_count[c, k] += 1
    return mem


def bilinear_sample(grid: np.ndarray, x: float, y: float) -> np.ndarray:
    """Bilinear lookup on an (H, W, d) grid at normalized (x, y).

    Cell centers sit at (j + 0.5) / W; coordinates beyond the border clamp to
    the edge cells.
    """
    h, w = grid.shape[:2]
    gx = x * w - 0.5
    gy = y * h - 0.5
    x0 = int(np.floor(gx))
    y0 = int(np.floor(gy))
    fx = gx - x0
    fy = gy - y0
    x0c = min(max(x0, 0), w - 1)
    x1c = min(max(x0 + 1, 0), w - 1)
    y0c = min(max(y0, 0), h - 1)
    y1c = min(max(y0 + 1, 0), h - 1)
    top = (1.0 - fx) * grid[y0c, x0c] + fx * grid[y0c, x1c]
    bot = (1.0 - fx) * grid[y1c, x0c] + fx * grid[y1c, x1c]
    return (1.0 - fy) * top + fy * bot


def extract_instance_features(grid: np.ndarray, boxes) -> tuple[list[InstanceFeature], int]:
    """Pool one feature vector per box from an (H, W, d) feature grid.

    Samples a 2x2 grid of points at the box's interior quarter-points and
    averages them. Boxes are ((cx, cy, w, h), class_id) with normalized
    coordinates. Degenerate boxes (w or h <= 0) are skipped; the second
    return value counts them.
    """
    feats: list[InstanceFeature] = []
    skipped = 0
    for box, class_id in boxes:
        cx, cy, w, h = box
        if w <= 0.0 or h <= 0.0:
            skipped += 1
            continue
        acc = np.zeros(grid.shape[-1])
        for dx in (-0.25, 0.25):
            for dy in (-0.25, 0.25):
                acc += bilinear_sample(grid, cx + dx * w, cy + dy * h)
        feats.append(InstanceFeature(vector=acc / 4.0, class_id=class_id, source_box=tuple(box)))
    return feats, skipped


def memory_tokens(mem: ContextMemory, slot_embed: np.ndarray) -> np.ndarray:
    """Flatten the bank to (C*K, d) tokens (class-major, prototype-minor) and
    add the learned per-slot embedding."""
    c, k, d = mem.prototypes.shape
    if slot_embed.shape != (c * k, d):
        raise ValueError(
            f"slot embedding shape {slot_embed.shape} does not match ({c * k}, {d})"
        )
    return mem.prototypes.reshape(c * k, d) + slot_embed


def slot_index(class_id: int, proto_id: int, num_prototypes: int) -> int:
    """Token index of slot (class, prototype) in the flattened bank."""
    return class_id * num_prototypes + proto_id


def slot_coords(token_index: int, num_prototypes: int) -> tuple[int, int]:
    """Inverse of ``slot_index``."""
    return token_index // num_prototypes, token_index % num_prototypes
