"""Run-directory persistence.

A run directory holds:

* ``config.json``  - the validated training configuration,
* ``losses.csv``   - header ``iteration,mean_outer_loss``; one row per 100
  training iterations with the windowed mean outer loss,
* ``state.bin``    - little-endian binary dump: magic ``GAPM``, version u32,
  then per tensor: rank u32, dims u32..., float64 payload.  Tensors appear in
  a fixed order: per layer weight then bias, followed by the preconditioner
  tensors for masked layers in ascending layer order.

``eval.csv`` (written by the eval command) has one row per task:
``task_index,amplitude,frequency,phase,mse``.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .errors import StateIOError

Array = np.ndarray

MAGIC = b"GAPM"
VERSION = 1


def write_tensors(path, tensors: list[Array]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for t in tensors:
            t = np.asarray(t, dtype="<f8", order="C")
            fh.write(struct.pack("<I", t.ndim))
            for d in t.shape:
                fh.write(struct.pack("<I", d))
            fh.write(t.tobytes())


def read_tensors(path) -> list[Array]:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise StateIOError(f"cannot read state file {path}: {e}") from None
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise StateIOError(f"{path}: bad magic bytes (not a state file)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise StateIOError(f"{path}: unsupported version {version}")
    off = 8
    tensors: list[Array] = []
    while off < len(raw):
        if off + 4 > len(raw):
            raise StateIOError(f"{path}: truncated tensor header")
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        if rank > 32:
            raise StateIOError(f"{path}: implausible tensor rank {rank}")
        if off + 4 * rank > len(raw):
            raise StateIOError(f"{path}: truncated dims")
        dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 8 * count
        if off + nbytes > len(raw):
            raise StateIOError(f"{path}: truncated payload")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(dims)
        tensors.append(arr.astype(np.float64).reshape(dims))
        off += nbytes
    return tensors


def config_to_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    d["hidden_sizes"] = list(cfg.hidden_sizes)
    d["mask"] = None if cfg.mask is None else list(cfg.mask)
    return d


def save_run(out_dir, record) -> Path:
    """Persist a RunRecord as config.json + losses.csv + state.bin."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(config_to_dict(record.config), indent=2) + "\n"
    )
    write_losses_csv(out / "losses.csv", record.losses)

    state = record.state
    tensors = list(state.theta.flat())
    for li in sorted(state.phi):
        tensors.append(state.phi[li])
    write_tensors(out / "state.bin", tensors)
    return out


def write_losses_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("iteration,mean_outer_loss\n")
        for it, loss in rows:
            fh.write(f"{it},{loss!r}\n")


def read_losses_csv(path) -> list[tuple[int, float]]:
    lines = Path(path).read_text().strip().splitlines()
    out = []
    for line in lines[1:]:
        it, loss = line.split(",")
        out.append((int(it), float(loss)))
    return out


def write_eval_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("task_index,amplitude,frequency,phase,mse\n")
        for idx, a, w, b, mse in rows:
            fh.write(f"{idx},{a!r},{w!r},{b!r},{mse!r}\n")


def read_eval_csv(path) -> list[tuple[int, float, float, float, float]]:
    lines = Path(path).read_text().strip().splitlines()
    out = []
    for line in lines[1:]:
        idx, a, w, b, mse = line.split(",")
        out.append((int(idx), float(a), float(w), float(b), float(mse)))
    return out


def load_run(run_dir):
    """Rebuild (TrainConfig, MetaState, losses) from a run directory."""
    from .metaloop import MetaState, parse_config
    from .nn import MlpParams
    from .precond import PrecondKind

    run = Path(run_dir)
    cfg_path = run / "config.json"
    state_path = run / "state.bin"
    if not cfg_path.is_file():
        raise StateIOError(f"{run}: missing config.json")
    if not state_path.is_file():
        raise StateIOError(f"{run}: missing state.bin")
    cfg = parse_config(json.loads(cfg_path.read_text()))
    tensors = read_tensors(state_path)

    n_layers = len(cfg.sizes) - 1
    if len(tensors) < 2 * n_layers:
        raise StateIOError(f"{run}: state.bin holds too few tensors")
    layers = tuple(
        (tensors[2 * i], tensors[2 * i + 1]) for i in range(n_layers)
    )
    theta = MlpParams(layers)
    mask = cfg.layer_mask()
    kind = PrecondKind(cfg.kind, mask)
    phi: dict[int, Array] = {}
    rest = tensors[2 * n_layers:]
    if cfg.kind != "identity":
        masked = [li for li in range(n_layers) if mask[li]]
        if len(rest) != len(masked):
            raise StateIOError(
                f"{run}: expected {len(masked)} preconditioner tensors, got {len(rest)}"
            )
        phi = {li: arr for li, arr in zip(masked, rest)}
    elif rest:
        raise StateIOError(f"{run}: unexpected trailing tensors for identity run")

    losses = []
    losses_path = run / "losses.csv"
    if losses_path.is_file():
        losses = read_losses_csv(losses_path)
    return cfg, MetaState(theta=theta, phi=phi, kind=kind), losses
