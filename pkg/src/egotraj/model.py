"""The full prediction network.

Pipeline per sample: observed boxes -> 8-d motion states -> MLP embedder ->
pedestrian motion encoder; ego signal -> MLP embedder -> ego-motion encoder;
both feature sequences -> decoder -> per-future-step features -> MLP head
producing residual offsets, which are added to the CV-CS reference.

Two decoder wirings are supported. The ego-guided decoder (default) feeds the
pedestrian features as history followed by n_pred copies of the *last*
ego-motion feature as guidance slots, so the decoded future depends on the
ego stream only through its final timestep. The post-fusion variant (ablation
baseline) concatenates both streams per observed timestep, projects back to
D, appends n_pred zero slots, and decodes.

Backbones: a stack of Mamba blocks (default) or a single-layer GRU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ssm
from .autodiff import (Tensor, add, concat, matmul, mul, sigmoid, silu,
                       slice_axis, sub, tanh, tile_axis)
from .data import N_BEHAVIOR_LABELS
from .representation import (boxes_from_offsets, cvcs_reference,
                             cvcs_statistics, to_motion_states)

MOTION_STATE_DIM = 8

EGO_KINDS = ("speed", "behavior")
BACKBONES = ("mamba", "gru")
DECODINGS = ("emgd", "pfd")


@dataclass
class ModelConfig:
    d_model: int = 64
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    n_blocks: int = 1
    m_obs: int = 15
    n_pred: int = 45
    ego_kind: str = "speed"
    backbone: str = "mamba"
    decoding: str = "emgd"
    seed: int = 0
    # optional input normalization (0 = off): divide box coordinates by the
    # image size before embedding; offsets and metrics stay in raw pixels
    img_w: float = 0.0
    img_h: float = 0.0
    ego_zscore: int = 0  # z-score the ego speed within each window

    def __post_init__(self):
        if self.d_model < 8:
            raise ValueError(f"d_model must be >= 8, got {self.d_model}")
        if self.m_obs < 2 or self.n_pred < 1:
            raise ValueError(f"invalid horizons: m_obs={self.m_obs}, n_pred={self.n_pred}")
        if self.ego_kind not in EGO_KINDS:
            raise ValueError(f"ego_kind must be one of {EGO_KINDS}, got '{self.ego_kind}'")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got '{self.backbone}'")
        if self.decoding not in DECODINGS:
            raise ValueError(f"decoding must be one of {DECODINGS}, got '{self.decoding}'")

    @property
    def ego_dim(self) -> int:
        return 1 if self.ego_kind == "speed" else N_BEHAVIOR_LABELS


@dataclass
class MlpParams:
    w0: Tensor
    b0: Tensor
    w1: Tensor
    b1: Tensor

    def tensors(self):
        for name in ("w0", "b0", "w1", "b1"):
            yield name, getattr(self, name)


@dataclass
class GruParams:
    """Single-layer GRU: gates ordered (reset, update, candidate)."""

    w_x: Tensor  # (d_in, 3*d)
    w_h: Tensor  # (d, 3*d)
    b: Tensor    # (3*d,)

    def tensors(self):
        for name in ("w_x", "w_h", "b"):
            yield name, getattr(self, name)


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor

    def tensors(self):
        yield "w", self.w
        yield "b", self.b


@dataclass
class ModelParams:
    ped_embed: MlpParams
    ego_embed: MlpParams
    pme: list                      # Mamba blocks or [GruParams]
    eme: list
    dec: list
    head: MlpParams                # offset generator, final layer zero-init
    fuse: LinearParams | None = field(default=None)  # pfd only


def _uniform(rng, fan_in, *shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _init_mlp(rng, d_in, d_hidden, d_out, zero_final=False) -> MlpParams:
    if zero_final:
        w1 = Tensor(np.zeros((d_hidden, d_out)), requires_grad=True)
        b1 = Tensor(np.zeros(d_out), requires_grad=True)
    else:
        w1 = _uniform(rng, d_hidden, d_hidden, d_out)
        b1 = _uniform(rng, d_hidden, d_out)
    return MlpParams(w0=_uniform(rng, d_in, d_in, d_hidden),
                     b0=_uniform(rng, d_in, d_hidden), w1=w1, b1=b1)


def _init_gru(rng, d_in, d) -> GruParams:
    return GruParams(w_x=_uniform(rng, d_in, d_in, 3 * d),
                     w_h=_uniform(rng, d, d, 3 * d),
                     b=_uniform(rng, d, 3 * d))


def _init_stack(rng, cfg: ModelConfig, d_in: int) -> list:
    if cfg.backbone == "gru":
        return [_init_gru(rng, d_in, cfg.d_model)]
    return [ssm.init_mamba_block(rng, cfg.d_model, cfg.d_state, cfg.expand,
                                 cfg.conv_width) for _ in range(cfg.n_blocks)]


def init_params(cfg: ModelConfig, zero_init_head: bool = True) -> ModelParams:
    """Deterministic init from cfg.seed. zero_init_head makes the untrained
    model emit zero offsets, i.e. exactly the CV-CS baseline."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_model
    params = ModelParams(
        ped_embed=_init_mlp(rng, MOTION_STATE_DIM, d, d),
        ego_embed=_init_mlp(rng, cfg.ego_dim, d, d),
        pme=_init_stack(rng, cfg, d),
        eme=_init_stack(rng, cfg, d),
        dec=_init_stack(rng, cfg, d),
        head=_init_mlp(rng, d, d, 4, zero_final=zero_init_head),
    )
    if cfg.decoding == "pfd":
        params.fuse = LinearParams(w=_uniform(rng, 2 * d, 2 * d, d),
                                   b=_uniform(rng, 2 * d, d))
    return params


def named_tensors(params: ModelParams) -> dict[str, Tensor]:
    """Flat, deterministically ordered view of every learnable tensor."""
    out: dict[str, Tensor] = {}
    for group, value in (("ped_embed", params.ped_embed),
                         ("ego_embed", params.ego_embed),
                         ("pme", params.pme), ("eme", params.eme),
                         ("dec", params.dec), ("head", params.head),
                         ("fuse", params.fuse)):
        if value is None:
            continue
        blocks = value if isinstance(value, list) else [value]
        for i, blk in enumerate(blocks):
            prefix = f"{group}.{i}" if isinstance(value, list) else group
            for name, t in blk.tensors():
                out[f"{prefix}.{name}"] = t
    return out


def count_params(params: ModelParams) -> int:
    return sum(t.size for t in named_tensors(params).values())


# -- forward pieces -----------------------------------------------------------

def _mlp_forward(x, p: MlpParams) -> Tensor:
    return add(matmul(silu(add(matmul(x, p.w0), p.b0)), p.w1), p.b1)


def gru_forward(x, p: GruParams) -> Tensor:
    """Run the GRU over time (axis -2); returns the hidden state sequence."""
    d = p.w_h.shape[0]
    length = x.shape[-2]
    h = Tensor(np.zeros(x.shape[:-2] + (1, d)))
    gx = add(matmul(x, p.w_x), p.b)
    outs = []
    for t in range(length):
        gxt = slice_axis(gx, -2, t, t + 1)
        gh = matmul(h, p.w_h)
        r = sigmoid(add(slice_axis(gxt, -1, 0, d), slice_axis(gh, -1, 0, d)))
        z = sigmoid(add(slice_axis(gxt, -1, d, 2 * d), slice_axis(gh, -1, d, 2 * d)))
        cand = tanh(add(slice_axis(gxt, -1, 2 * d, 3 * d),
                        mul(r, slice_axis(gh, -1, 2 * d, 3 * d))))
        h = add(mul(sub(1.0, z), cand), mul(z, h))
        outs.append(h)
    return concat(outs, axis=-2)


def _stack_forward(x, stack: list) -> Tensor:
    if stack and isinstance(stack[0], GruParams):
        return gru_forward(x, stack[0])
    return ssm.mamba_stack_forward(x, stack)


def pme_forward(motion_states: np.ndarray, params: ModelParams) -> Tensor:
    """(..., m_obs, 8) motion states -> (..., m_obs, D) features; causal."""
    return _stack_forward(_mlp_forward(Tensor(motion_states), params.ped_embed),
                          params.pme)


def encode_ego(ego: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Raw ego signal -> network input: (..., m, 1) speeds or (..., m, 5) one-hot."""
    ego = np.asarray(ego)
    if cfg.ego_kind == "speed":
        return ego.astype(np.float64)[..., None]
    if np.any(ego != np.round(ego)) or np.any(ego < 0) or np.any(ego >= N_BEHAVIOR_LABELS):
        raise ValueError(f"behavior labels must be integers in 0..{N_BEHAVIOR_LABELS - 1}")
    onehot = np.zeros(ego.shape + (N_BEHAVIOR_LABELS,), dtype=np.float64)
    np.put_along_axis(onehot, ego.astype(np.int64)[..., None], 1.0, axis=-1)
    return onehot


def eme_forward(ego: np.ndarray, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """(..., m_obs) ego signal -> (..., m_obs, D) features; causal."""
    return _stack_forward(_mlp_forward(Tensor(encode_ego(ego, cfg)), params.ego_embed),
                          params.eme)


def emgd_forward(f_pm: Tensor, f_em: Tensor, n_pred: int,
                 params: ModelParams) -> Tensor:
    """Ego-guided decoding: history = pedestrian features, guidance = n_pred
    copies of the final ego feature. Returns the last n_pred decoded steps."""
    if n_pred < 1:
        raise ValueError(f"n_pred must be >= 1, got {n_pred}")
    m_obs = f_pm.shape[-2]
    guide = tile_axis(slice_axis(f_em, -2, m_obs - 1, m_obs), -2, n_pred)
    decoded = _stack_forward(concat([f_pm, guide], axis=-2), params.dec)
    return slice_axis(decoded, -2, m_obs, m_obs + n_pred)


def pfd_forward(f_pm: Tensor, f_em: Tensor, n_pred: int,
                params: ModelParams) -> Tensor:
    """Post-fusion decoding (ablation): fuse streams per observed step, append
    zero future slots, decode, return the last n_pred steps."""
    if params.fuse is None:
        raise ValueError("post-fusion decoding requires fusion parameters "
                         "(config decoding='pfd')")
    m_obs = f_pm.shape[-2]
    d = params.fuse.w.shape[1]
    fused = add(matmul(concat([f_pm, f_em], axis=-1), params.fuse.w), params.fuse.b)
    future = Tensor(np.zeros(f_pm.shape[:-2] + (n_pred, d)))
    decoded = _stack_forward(concat([fused, future], axis=-2), params.dec)
    return slice_axis(decoded, -2, m_obs, m_obs + n_pred)


def ftg_forward(f_de: Tensor, params: ModelParams) -> Tensor:
    """Decoded future features (..., n_pred, D) -> offsets (..., n_pred, 4)."""
    return _mlp_forward(f_de, params.head)


def _normalize_inputs(states: np.ndarray, ego: np.ndarray, cfg: ModelConfig):
    if cfg.img_w > 0:
        sx = cfg.img_w
        sy = cfg.img_h if cfg.img_h > 0 else cfg.img_w
        states = states / np.array([sx, sy, sx, sy] * 2)
    if cfg.ego_zscore and cfg.ego_kind == "speed":
        mu = ego.mean(axis=-1, keepdims=True)
        sd = ego.std(axis=-1, keepdims=True)
        ego = (ego - mu) / np.maximum(sd, 1e-8)
    return states, ego


def forward_offsets(obs_boxes: np.ndarray, ego: np.ndarray,
                    params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Full differentiable path from raw observations to predicted offsets."""
    states, ego = _normalize_inputs(to_motion_states(obs_boxes),
                                    np.asarray(ego, dtype=np.float64)
                                    if cfg.ego_kind == "speed" else np.asarray(ego),
                                    cfg)
    f_pm = pme_forward(states, params)
    f_em = eme_forward(ego, params, cfg)
    if cfg.decoding == "pfd":
        f_de = pfd_forward(f_pm, f_em, cfg.n_pred, params)
    else:
        f_de = emgd_forward(f_pm, f_em, cfg.n_pred, params)
    return ftg_forward(f_de, params)


def predict(obs_boxes: np.ndarray, ego: np.ndarray, params: ModelParams,
            cfg: ModelConfig) -> np.ndarray:
    """Predicted future boxes: CV-CS reference plus regressed offsets."""
    obs_boxes = np.asarray(obs_boxes, dtype=np.float64)
    offsets = forward_offsets(obs_boxes, ego, params, cfg)
    ref = cvcs_reference(obs_boxes[..., -1, :], cvcs_statistics(obs_boxes),
                         cfg.n_pred)
    return boxes_from_offsets(ref, offsets.data)
