"""Memory, camera-bank and checkpoint persistence.

Memory snapshots are decimal text at 17 significant digits, which
round-trips float64 exactly: a header, then per slot (class-major) one
``slot c k v1..vd`` line followed by its ``count c k n`` line. A camera bank
snapshot holds one such section per camera id with running sums instead of
prototypes. Checkpoints are a directory: model.npz + memory.txt +
config.txt.
"""

from __future__ import annotations

import os

import numpy as np

from .adapt import CameraBank, TestMemory, new_test_memory
from .config import RunConfig, dump_config, load_config, model_config
from .detector import DetectorModel
from .errors import DataError
from .memory import ContextMemory


def _fmt(values) -> str:
    return " ".join(format(v, ".17g") for v in values)


def memory_to_text(mem: ContextMemory) -> str:
    c, k, d = mem.prototypes.shape
    lines = [
        "version=1",
        f"classes={c}",
        f"prototypes={k}",
        f"dim={d}",
        f"alpha={mem.momentum:.17g}",
    ]
    for ci in range(c):
        for ki in range(k):
            lines.append(f"slot {ci} {ki} {_fmt(mem.prototypes[ci, ki])}")
            lines.append(f"count {ci} {ki} {mem.update_count[ci, ki]}")
    return "\n".join(lines) + "\n"


def memory_from_text(text: str) -> ContextMemory:
    header = {}
    slots = {}
    counts = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line and not line.startswith(("slot ", "count ")):
            key, _, val = line.partition("=")
            header[key] = val
            continue
        parts = line.split()
        try:
            ci, ki = int(parts[1]), int(parts[2])
            if parts[0] == "slot":
                slots[(ci, ki)] = [float(v) for v in parts[3:]]
            elif parts[0] == "count":
                counts[(ci, ki)] = int(parts[3])
            else:
                raise DataError(f"unrecognized snapshot line {line!r}")
        except (ValueError, IndexError) as e:
            raise DataError(f"bad snapshot line {line!r}: {e}") from e
    try:
        c, k, d = int(header["classes"]), int(header["prototypes"]), int(header["dim"])
        alpha = float(header["alpha"])
    except (KeyError, ValueError) as e:
        raise DataError(f"bad snapshot header: {e}") from e
    protos = np.zeros((c, k, d))
    cnt = np.zeros((c, k), dtype=np.int64)
    for ci in range(c):
        for ki in range(k):
            if (ci, ki) not in slots or len(slots[(ci, ki)]) != d:
                raise DataError(f"snapshot missing slot {ci},{ki}")
            protos[ci, ki] = slots[(ci, ki)]
            cnt[ci, ki] = counts.get((ci, ki), 0)
    return ContextMemory(prototypes=protos, update_count=cnt, momentum=alpha)


def save_memory(mem: ContextMemory, path):
    with open(path, "w") as f:
        f.write(memory_to_text(mem))


def load_memory(path) -> ContextMemory:
    try:
        with open(path) as f:
            return memory_from_text(f.read())
    except OSError as e:
        raise DataError(f"cannot read memory snapshot {path}: {e}") from e


def save_camera_bank(bank: CameraBank, path):
    chunks = [f"version=1\nbeta={bank.beta:.17g}\ncameras={len(bank.banks)}\n"]
    for cam in sorted(bank.banks):
        tm = bank.banks[cam]
        c, k, _d = tm.sums.shape
        lines = [f"camera={cam}"]
        for ci in range(c):
            for ki in range(k):
                lines.append(f"slot {ci} {ki} {_fmt(tm.sums[ci, ki])}")
                lines.append(f"count {ci} {ki} {tm.counts[ci, ki]}")
        chunks.append("\n".join(lines) + "\n")
    with open(path, "w") as f:
        f.write("\n".join(chunks))


def load_camera_bank(path, source: ContextMemory) -> CameraBank:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise DataError(f"cannot read camera bank {path}: {e}") from e
    beta = None
    bank = None
    current: TestMemory | None = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("beta="):
            beta = float(line.split("=", 1)[1])
            bank = CameraBank(source=source, beta=beta)
        elif line.startswith("camera="):
            if bank is None:
                raise DataError(f"{path}: camera section before beta header")
            current = new_test_memory(source, beta)
            bank.banks[line.split("=", 1)[1]] = current
        elif line.startswith("slot "):
            parts = line.split()
            current.sums[int(parts[1]), int(parts[2])] = [float(v) for v in parts[3:]]
        elif line.startswith("count "):
            parts = line.split()
            current.counts[int(parts[1]), int(parts[2])] = int(parts[3])
    if bank is None:
        raise DataError(f"{path}: missing beta header")
    return bank


def save_checkpoint(outdir, model: DetectorModel, mem: ContextMemory | None, cfg: RunConfig):
    os.makedirs(outdir, exist_ok=True)
    np.savez(os.path.join(outdir, "model.npz"), **model.params)
    with open(os.path.join(outdir, "config.txt"), "w") as f:
        f.write(dump_config(cfg))
    if mem is not None:
        save_memory(mem, os.path.join(outdir, "memory.txt"))


def load_checkpoint(ckptdir):
    """Returns (model, memory-or-None, run config)."""
    cfg_path = os.path.join(ckptdir, "config.txt")
    npz_path = os.path.join(ckptdir, "model.npz")
    if not os.path.exists(cfg_path) or not os.path.exists(npz_path):
        raise DataError(f"{ckptdir}: not a checkpoint directory")
    cfg = load_config(cfg_path)
    model = DetectorModel(model_config(cfg), seed=cfg.train.seed)
    with np.load(npz_path) as loaded:
        stored = {k: loaded[k] for k in loaded.files}
    if set(stored) != set(model.params):
        raise DataError(f"{ckptdir}: checkpoint parameters do not match config")
    for k, v in stored.items():
        if model.params[k].shape != v.shape:
            raise DataError(f"{ckptdir}: shape mismatch for {k}")
        model.params[k][...] = v
    mem = None
    mem_path = os.path.join(ckptdir, "memory.txt")
    if os.path.exists(mem_path):
        mem = load_memory(mem_path)
    return model, mem, cfg
