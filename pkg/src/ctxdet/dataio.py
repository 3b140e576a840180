"""Dataset and prediction files.

Layout written by the data generator::

    outdir/manifest.txt          clip index (key=value lines)
    outdir/clip_000/frame_0000.grid   packed frame pixels
    outdir/clip_000/frame_0000.ann    annotation sidecar (text)

A .grid file is a 16-byte header (magic ``CETRGRID``, u32 height, u32 width,
little-endian) followed by row-major float64 pixels; the channel count is
implied by the payload size. Predictions are line-delimited
``frame_id class_id score cx cy w h`` decimal text, with frame ids the
running index over the manifest order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DataError
from .stream import FrameRecord

GRID_MAGIC = b"CETRGRID"


def write_grid(path, grid: np.ndarray):
    h, w, _ch = grid.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(grid, dtype="<f8").tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:8] != GRID_MAGIC:
        raise DataError(f"{path}: not a frame grid file")
    h, w = struct.unpack("<II", blob[8:16])
    payload = blob[16:]
    if h * w == 0 or len(payload) % (h * w * 8) != 0:
        raise DataError(f"{path}: payload does not match {h}x{w} header")
    ch = len(payload) // (h * w * 8)
    return np.frombuffer(payload, dtype="<f8").reshape(h, w, ch).copy()


def write_annotation(path, frame: FrameRecord):
    lines = [f"frame={frame.frame_idx}", f"camera={frame.camera_id}"]
    for class_id, box in frame.annotations:
        coords = " ".join(format(v, ".17g") for v in box)
        lines.append(f"obj {class_id} {coords}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_annotation(path):
    frame_idx, camera_id = None, None
    annotations = []
    try:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("frame="):
                    frame_idx = int(line.split("=", 1)[1])
                elif line.startswith("camera="):
                    camera_id = line.split("=", 1)[1]
                elif line.startswith("obj "):
                    parts = line.split()
                    annotations.append((int(parts[1]), tuple(float(v) for v in parts[2:6])))
                else:
                    raise DataError(f"{path}: unrecognized line {line!r}")
    except (OSError, ValueError, IndexError) as e:
        raise DataError(f"{path}: bad annotation file: {e}") from e
    if frame_idx is None or camera_id is None:
        raise DataError(f"{path}: missing frame/camera header")
    return frame_idx, camera_id, annotations


def save_dataset(clips: list[list[FrameRecord]], outdir) -> str:
    """Write clips to ``outdir`` and return the manifest path."""
    os.makedirs(outdir, exist_ok=True)
    lines = ["version=1", f"clips={len(clips)}"]
    for ci, clip in enumerate(clips):
        rel = f"clip_{ci:03d}"
        cdir = os.path.join(outdir, rel)
        os.makedirs(cdir, exist_ok=True)
        lines.append(f"clip.{ci}.dir={rel}")
        lines.append(f"clip.{ci}.camera={clip[0].camera_id}")
        lines.append(f"clip.{ci}.frames={len(clip)}")
        for frame in clip:
            stem = os.path.join(cdir, f"frame_{frame.frame_idx:04d}")
            write_grid(stem + ".grid", frame.grid)
            write_annotation(stem + ".ann", frame)
    manifest = os.path.join(outdir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write("\n".join(lines) + "\n")
    return manifest


def load_dataset(datadir) -> list[FrameRecord]:
    """Frames in manifest order; corruption flags are not persisted."""
    manifest = os.path.join(datadir, "manifest.txt")
    try:
        with open(manifest) as f:
            entries = dict(
                line.strip().split("=", 1) for line in f if "=" in line and line.strip()
            )
    except OSError as e:
        raise DataError(f"cannot read manifest {manifest}: {e}") from e
    try:
        n_clips = int(entries["clips"])
    except (KeyError, ValueError) as e:
        raise DataError(f"{manifest}: missing or bad clips count") from e

    frames = []
    for ci in range(n_clips):
        try:
            rel = entries[f"clip.{ci}.dir"]
            count = int(entries[f"clip.{ci}.frames"])
        except (KeyError, ValueError) as e:
            raise DataError(f"{manifest}: incomplete entry for clip {ci}") from e
        cdir = os.path.join(datadir, rel)
        for fi in range(count):
            stem = os.path.join(cdir, f"frame_{fi:04d}")
            grid = read_grid(stem + ".grid")
            frame_idx, camera_id, annotations = read_annotation(stem + ".ann")
            frames.append(
                FrameRecord(
                    grid=grid,
                    annotations=annotations,
                    camera_id=camera_id,
                    frame_idx=frame_idx,
                    corruption=[],
                )
            )
    return frames


def write_predictions(path, preds):
    """preds: iterable of (frame_id, class_id, score, (cx, cy, w, h))."""
    with open(path, "w") as f:
        for fid, cid, score, box in preds:
            coords = " ".join(format(v, ".17g") for v in box)
            f.write(f"{fid} {cid} {score:.17g} {coords}\n")


def read_predictions(path):
    preds = []
    try:
        with open(path) as f:
            for line in f:
                parts = line.split()
                if not parts:
                    continue
                preds.append(
                    (
                        int(parts[0]),
                        int(parts[1]),
                        float(parts[2]),
                        tuple(float(v) for v in parts[3:7]),
                    )
                )
    except (OSError, ValueError, IndexError) as e:
        raise DataError(f"{path}: bad predictions file: {e}") from e
    return preds
