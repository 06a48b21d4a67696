"""Deterministic training loop, evaluation harness, and bit-exact checkpoints.

The loss is smooth-L1 between predicted offsets and target offsets (ground
truth minus the CV-CS reference); since the reference is constant per sample
this is equivalent to a box-space loss, but keeps magnitudes small. With the
zero-initialized output head, the loss at step 0 equals
smooth_l1(0, target offsets), computable from the data alone.

Checkpoints are a binary format: an 8-byte magic, a little-endian uint32
header length, a canonical JSON header (version, config, parameter manifest,
best validation ADE, step), then the raw little-endian float64 parameter
payload in manifest order. save -> load -> save is byte-identical.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (adam_step, clip_grad_norm, init_adam, smooth_l1,
                       zero_grads)
from .data import TrackSample
from .metrics import MetricsReport, compute_report
from .model import (ModelConfig, ModelParams, forward_offsets, init_params,
                    named_tensors, predict)
from .representation import cvcs_reference, cvcs_statistics

CKPT_MAGIC = b"EGOTRAJ1"
CKPT_VERSION = 1

LOG_HEADER = "step,train_loss,val_ade,val_fde"


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-4
    beta: float = 1.0          # smooth-L1 transition point
    batch_size: int = 64
    max_steps: int = 2000
    eval_every: int = 100
    patience: int = 10         # evaluations without val-ADE improvement
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if min(self.lr, self.beta, self.batch_size, self.max_steps,
               self.eval_every, self.patience) <= 0:
            raise ValueError("all training hyperparameters must be positive")


@dataclass
class Checkpoint:
    config: TrainConfig
    arrays: dict[str, np.ndarray]  # parameter name -> float64 values
    best_val_ade: float
    step: int

    def build_params(self) -> ModelParams:
        params = init_params(self.config.model)
        for name, t in named_tensors(params).items():
            t.data[...] = self.arrays[name]
        return params


def stack_samples(samples: list[TrackSample]):
    """(N, m, 4) observed boxes, (N, m) ego, (N, n, 4) future boxes."""
    obs = np.stack([s.obs_boxes for s in samples])
    ego = np.stack([s.obs_ego for s in samples])
    fut = np.stack([s.future_boxes for s in samples])
    return obs, ego, fut


def target_offsets(obs: np.ndarray, fut: np.ndarray) -> np.ndarray:
    ref = cvcs_reference(obs[..., -1, :], cvcs_statistics(obs), fut.shape[-2])
    return fut - ref


def batch_loss(params: ModelParams, cfg: TrainConfig, obs, ego, fut):
    offsets = forward_offsets(obs, ego, params, cfg.model)
    return smooth_l1(offsets, target_offsets(obs, fut), beta=cfg.beta)


def evaluate(samples: list[TrackSample], params: ModelParams | None,
             cfg: ModelConfig, ablate_ego_zero: bool = False,
             baseline: str | None = None) -> MetricsReport:
    """Predict every sample and aggregate metrics.

    baseline="cvcs" scores the raw CV-CS reference instead of the model.
    ablate_ego_zero replaces the ego signal with zeros (speed mode) or the
    'stopped' label (behavior mode) before prediction.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty sample list")
    obs, ego, fut = stack_samples(samples)
    if baseline == "cvcs":
        pred = cvcs_reference(obs[..., -1, :], cvcs_statistics(obs), fut.shape[-2])
    elif baseline is not None:
        raise ValueError(f"unknown baseline '{baseline}'")
    else:
        if ablate_ego_zero:
            ego = np.zeros_like(ego)
        pred = predict(obs, ego, params, cfg)
    return compute_report(pred, fut)


def train_loop(train_samples: list[TrackSample], val_samples: list[TrackSample],
               cfg: TrainConfig, log_path=None) -> Checkpoint:
    """Seeded mini-batch Adam on smooth-L1 offset loss with early stopping.

    Tracks the best validation ADE (train ADE when no validation set is
    given) and returns the checkpoint of the best evaluated step.
    """
    if not train_samples:
        raise ValueError("training set is empty")
    params = init_params(cfg.model)
    tensors = named_tensors(params)
    state = init_adam(tensors, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    eval_samples = val_samples if val_samples else train_samples

    best_ade = np.inf
    best_arrays = {n: t.data.copy() for n, t in tensors.items()}
    best_step = 0
    bad_evals = 0
    log_rows = [LOG_HEADER]

    order = rng.permutation(len(train_samples))
    cursor = 0
    for step in range(1, cfg.max_steps + 1):
        if cursor >= len(order):
            order = rng.permutation(len(train_samples))
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        batch = [train_samples[i] for i in idx]

        zero_grads(tensors)
        obs, ego, fut = stack_samples(batch)
        loss = batch_loss(params, cfg, obs, ego, fut)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"non-finite training loss at step {step}")
        loss.backward()
        grads = {n: t.grad for n, t in tensors.items()}
        clip_grad_norm(grads, cfg.grad_clip)
        adam_step(tensors, grads, state)

        val_ade = val_fde = ""
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            report = evaluate(eval_samples, params, cfg.model)
            val_ade, val_fde = f"{report.ade:.6g}", f"{report.fde:.6g}"
            if report.ade < best_ade:
                best_ade = report.ade
                best_arrays = {n: t.data.copy() for n, t in tensors.items()}
                best_step = step
                bad_evals = 0
            else:
                bad_evals += 1
        log_rows.append(f"{step},{loss.item():.6g},{val_ade},{val_fde}")
        if bad_evals >= cfg.patience:
            break

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(log_rows) + "\n")
    if not np.isfinite(best_ade):  # never evaluated (max_steps < eval_every)
        best_ade = evaluate(eval_samples, params, cfg.model).ade
        best_arrays = {n: t.data.copy() for n, t in tensors.items()}
        best_step = cfg.max_steps
    return Checkpoint(config=copy.deepcopy(cfg), arrays=best_arrays,
                      best_val_ade=float(best_ade), step=best_step)


# -- persistence ---------------------------------------------------------------

def save_checkpoint(path, ckpt: Checkpoint) -> None:
    manifest = [[name, list(arr.shape)] for name, arr in ckpt.arrays.items()]
    header = json.dumps(
        {"version": CKPT_VERSION, "config": asdict(ckpt.config),
         "manifest": manifest, "best_val_ade": ckpt.best_val_ade,
         "step": ckpt.step},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes()
                       for arr in ckpt.arrays.values())
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header") from e
    if header.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
    cfg = TrainConfig(**header["config"])

    expected = [[name, list(t.shape)]
                for name, t in named_tensors(init_params(cfg.model)).items()]
    if header["manifest"] != expected:
        raise CheckpointError(f"{path}: parameter manifest does not match the "
                              "configured model (names/shapes/order)")

    arrays: dict[str, np.ndarray] = {}
    offset = 12 + hlen
    for name, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: payload truncated at parameter '{name}'")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes in payload")
    return Checkpoint(config=cfg, arrays=arrays,
                      best_val_ade=float(header["best_val_ade"]),
                      step=int(header["step"]))
