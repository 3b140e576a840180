"""Deterministic synthetic video streams of moving colored rectangles.

Each class has a fixed color signature; instances add a small seeded jitter
so prototypes have intra-class variation, and every camera applies its own
constant tint. Objects persist across a clip with linear motion and border
reflection. Corruption makes temporal context informative: an occlusion band
repaints part of an object with another class's signature, blur averages the
object's pixels locally. Ground-truth boxes and classes are unaffected by
corruption.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

_PALETTE = np.array(
    [
        [0.92, 0.10, 0.12],
        [0.10, 0.88, 0.15],
        [0.12, 0.15, 0.95],
        [0.90, 0.82, 0.10],
        [0.85, 0.12, 0.85],
        [0.10, 0.82, 0.85],
        [0.95, 0.55, 0.12],
        [0.55, 0.35, 0.18],
    ]
)


@dataclass
class StreamConfig:
    num_classes: int = 4
    grid_px: int = 64
    channels: int = 3
    patch: int = 8
    frames_per_clip: int = 40
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 12
    max_size: int = 22
    motion_step: float = 2.0
    occlusion_prob: float = 0.3
    blur_prob: float = 0.1
    occlusion_severity: float = 0.6
    appearance_jitter: float = 0.05
    camera_tint: float = 0.06
    position_grid: int = 0  # > 0 snaps spawn centers to a g x g lattice
    cameras: int = 4
    clips_per_camera: int = 1
    camera_start: int = 0
    seed: int = 0

    def validate(self):
        for name in ("occlusion_prob", "blur_prob", "occlusion_severity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"stream.{name} = {v} outside [0, 1]")
        if self.max_size > self.grid_px:
            raise ConfigError(
                f"objects of size {self.max_size} cannot fit a {self.grid_px}px grid"
            )
        if self.min_size < 1 or self.min_size > self.max_size:
            raise ConfigError(f"bad object size range [{self.min_size}, {self.max_size}]")
        if self.min_objects < 0 or self.min_objects > self.max_objects:
            raise ConfigError(f"bad object count range [{self.min_objects}, {self.max_objects}]")
        if self.grid_px % self.patch != 0:
            raise ConfigError(f"patch {self.patch} does not divide grid {self.grid_px}")
        if self.frames_per_clip < 1:
            raise ConfigError("stream.frames must be >= 1")
        if self.num_classes < 2 or self.num_classes > len(_PALETTE):
            raise ConfigError(f"stream.classes must be in [2, {len(_PALETTE)}]")
        return self


@dataclass
class FrameRecord:
    grid: np.ndarray  # (H_px, W_px, channels)
    annotations: list  # [(class_id, (cx, cy, w, h))]
    camera_id: str
    frame_idx: int
    corruption: list = field(default_factory=list)  # per object: tuple of flags


def class_signature(class_id: int, channels: int = 3) -> np.ndarray:
    base = _PALETTE[class_id]
    if channels == base.size:
        return base.copy()
    reps = int(np.ceil(channels / base.size))
    return np.tile(base, reps)[:channels].copy()


def camera_tint_vector(camera_index: int, magnitude: float, channels: int) -> np.ndarray:
    """Constant per-camera color cast; a fixed function of the camera index
    so the same camera id means the same camera across datasets."""
    rng = np.random.default_rng([977, camera_index])
    return rng.uniform(-magnitude, magnitude, size=channels)


@dataclass
class _SceneObject:
    class_id: int
    cx: float
    cy: float
    w: int
    h: int
    vx: float
    vy: float
    color: np.ndarray


def _box_blur3(block: np.ndarray) -> np.ndarray:
    padded = np.pad(block, ((1, 1), (1, 1), (0, 0)), mode="edge")
    out = np.zeros_like(block)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += padded[dy : dy + block.shape[0], dx : dx + block.shape[1]]
    return out / 9.0


def gen_clip(cfg: StreamConfig, camera_index: int, clip_index: int) -> list[FrameRecord]:
    """One clip for one camera; fully determined by (cfg.seed, indices)."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 101, camera_index, clip_index])
    size = cfg.grid_px
    camera_id = f"cam{camera_index:02d}"
    tint = camera_tint_vector(camera_index, cfg.camera_tint, cfg.channels)

    objects = []
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    for _ in range(n_obj):
        class_id = int(rng.integers(cfg.num_classes))
        w = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        h = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        if cfg.position_grid > 0:
            g = cfg.position_grid
            cx = w / 2.0 + (size - w) * (int(rng.integers(g)) + 0.5) / g
            cy = h / 2.0 + (size - h) * (int(rng.integers(g)) + 0.5) / g
        else:
            cx = float(rng.uniform(w / 2.0, size - w / 2.0))
            cy = float(rng.uniform(h / 2.0, size - h / 2.0))
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        color = class_signature(class_id, cfg.channels) + cfg.appearance_jitter * rng.standard_normal(
            cfg.channels
        )
        objects.append(
            _SceneObject(
                class_id=class_id,
                cx=cx,
                cy=cy,
                w=w,
                h=h,
                vx=cfg.motion_step * np.cos(angle),
                vy=cfg.motion_step * np.sin(angle),
                color=np.clip(color, 0.0, 1.0),
            )
        )

    frames = []
    for frame_idx in range(cfg.frames_per_clip):
        grid = np.zeros((size, size, cfg.channels))
        annotations = []
        corruption = []
        for obj in objects:
            x0 = int(round(obj.cx - obj.w / 2.0))
            y0 = int(round(obj.cy - obj.h / 2.0))
            x0 = min(max(x0, 0), size - obj.w)
            y0 = min(max(y0, 0), size - obj.h)
            block = np.tile(obj.color, (obj.h, obj.w, 1))

            flags = []
            if rng.random() < cfg.occlusion_prob:
                flags.append("occluded")
                others = [c for c in range(cfg.num_classes) if c != obj.class_id]
                occluder = others[int(rng.integers(len(others)))]
                band = max(1, int(round(cfg.occlusion_severity * obj.h)))
                # the covering band lands on either side so the visible part
                # does not betray which color is the occluder
                if rng.random() < 0.5:
                    block[:band] = class_signature(occluder, cfg.channels)
                else:
                    block[obj.h - band :] = class_signature(occluder, cfg.channels)
            if rng.random() < cfg.blur_prob:
                flags.append("blurred")
                block = _box_blur3(block)

            grid[y0 : y0 + obj.h, x0 : x0 + obj.w] = block
            annotations.append(
                (obj.class_id, (obj.cx / size, obj.cy / size, obj.w / size, obj.h / size))
            )
            corruption.append(tuple(flags))

            obj.cx += obj.vx
            obj.cy += obj.vy
            if obj.cx - obj.w / 2.0 < 0.0 or obj.cx + obj.w / 2.0 > size:
                obj.vx = -obj.vx
                obj.cx += 2.0 * obj.vx
            if obj.cy - obj.h / 2.0 < 0.0 or obj.cy + obj.h / 2.0 > size:
                obj.vy = -obj.vy
                obj.cy += 2.0 * obj.vy

        grid = np.clip(grid + tint, 0.0, 1.0)
        frames.append(
            FrameRecord(
                grid=grid,
                annotations=annotations,
                camera_id=camera_id,
                frame_idx=frame_idx,
                corruption=corruption,
            )
        )
    return frames


def gen_clips(cfg: StreamConfig) -> list[list[FrameRecord]]:
    """All clips, camera-major then clip order."""
    out = []
    for cam in range(cfg.cameras):
        for clip in range(cfg.clips_per_camera):
            out.append(gen_clip(cfg, cfg.camera_start + cam, clip))
    return out


def gen_stream(cfg: StreamConfig) -> list[FrameRecord]:
    """Flat frame sequence over all clips."""
    return [frame for clip in gen_clips(cfg) for frame in clip]


# ---------------------------------------------------------------------------
# patch feature extractor (stands in for the CNN backbone)
# ---------------------------------------------------------------------------


def patch_tokens(grid: np.ndarray, patch: int) -> np.ndarray:
    """(H_px, W_px, ch) -> (n_tokens, patch*patch*ch), row-major patches."""
    h, w, ch = grid.shape
    if h % patch != 0 or w % patch != 0:
        raise ValueError(f"patch {patch} does not divide grid {h}x{w}")
    nh, nw = h // patch, w // patch
    x = grid.reshape(nh, patch, nw, patch, ch).transpose(0, 2, 1, 3, 4)
    return x.reshape(nh * nw, patch * patch * ch)


def render_features_fwd(grid: np.ndarray, weight: np.ndarray, bias: np.ndarray, patch: int):
    """Flattened patches through one learned affine map -> (n_tokens, d)."""
    x = patch_tokens(grid, patch)
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"patch vector length {x.shape[1]} does not match extractor input {weight.shape[0]}"
        )
    return x @ weight + bias, x


def render_features_bwd(grad_out: np.ndarray, cache):
    x = cache
    return {"w": x.T @ grad_out, "b": grad_out.sum(axis=0)}


@dataclass
class PatchExtractor:
    weight: np.ndarray  # (patch*patch*ch, d)
    bias: np.ndarray  # (d,)
    patch: int


def render_features(frame, extractor: PatchExtractor) -> np.ndarray:
    grid = frame.grid if isinstance(frame, FrameRecord) else frame
    return render_features_fwd(grid, extractor.weight, extractor.bias, extractor.patch)[0]
