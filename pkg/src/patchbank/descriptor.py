"""The learnable patch descriptor and its optimizer.

The descriptor is a single linear map applied independently to every patch
vector, with two normalized coordinate channels appended to the input so the
embedding can condition on patch position (the 1x1-convolution-with-
coordinates trick). Training updates it with decoupled-weight-decay Adam
including the max-tracked second moment.

All forward/backward math is expressed as one matmul over the whole grid;
with the BLAS builds this package targets that is bitwise reproducible
across thread counts, which the CLI determinism guarantee relies on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    FeatureFormatError,
    NonFiniteGradientError,
    TruncatedPayloadError,
    ValidationError,
)
from .patches import PatchGrid

DESCRIPTOR_MAGIC = b"PBDESC0\x00"
DESCRIPTOR_VERSION = 1

COORD_CHANNELS = 2


@dataclass
class PatchDescriptor:
    """Linear map from (in_dim + 2) augmented patch vectors to out_dim."""

    weight: np.ndarray  # (out_dim, in_dim + 2)
    bias: np.ndarray  # (out_dim,)
    use_bias: bool = True

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValidationError("descriptor weight must be 2-d and bias 1-d")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValidationError(
                f"weight rows {self.weight.shape[0]} != bias size {self.bias.shape[0]}"
            )
        if self.weight.shape[1] <= COORD_CHANNELS:
            raise ValidationError("weight must have at least one feature column")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1] - COORD_CHANNELS

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DescriptorGrads:
    weight: np.ndarray
    bias: np.ndarray


def init_descriptor(
    in_dim: int,
    out_dim: int,
    seed: int,
    use_bias: bool = True,
    dtype=np.float32,
) -> PatchDescriptor:
    """He-initialized weights (std sqrt(2 / fan_in), fan_in = in_dim + 2), zero bias."""
    if in_dim < 1 or out_dim < 1:
        raise ValidationError(f"invalid descriptor dims ({in_dim}, {out_dim})")
    rng = np.random.default_rng(seed)
    fan_in = in_dim + COORD_CHANNELS
    weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_dim, fan_in))
    return PatchDescriptor(
        weight=weight.astype(dtype),
        bias=np.zeros(out_dim, dtype=dtype),
        use_bias=use_bias,
    )


def coordinate_channels(grid_h: int, grid_w: int) -> np.ndarray:
    """(2, h, w) of x then y positions, cell centers mapped into [-1, 1]."""
    xs = (np.arange(grid_w, dtype=np.float64) + 0.5) / grid_w * 2.0 - 1.0
    ys = (np.arange(grid_h, dtype=np.float64) + 0.5) / grid_h * 2.0 - 1.0
    return np.stack(
        [np.broadcast_to(xs, (grid_h, grid_w)), np.broadcast_to(ys[:, None], (grid_h, grid_w))]
    ).copy()


def augmented_points(grid: PatchGrid) -> np.ndarray:
    """(patch_count, depth + 2): patch vectors with coordinates appended."""
    h, w = grid.grid_shape
    coords = coordinate_channels(h, w).reshape(2, -1).T
    return np.concatenate([grid.as_points().astype(np.float64), coords], axis=1)


def embed_grid(descriptor: PatchDescriptor, grid: PatchGrid) -> np.ndarray:
    """Apply the descriptor to every patch; returns (out_dim, h, w) float64."""
    if grid.depth != descriptor.in_dim:
        raise ValidationError(
            f"grid depth {grid.depth} does not match descriptor input {descriptor.in_dim}"
        )
    h, w = grid.grid_shape
    aug = augmented_points(grid)  # (T, in+2)
    out = np.matmul(descriptor.weight.astype(np.float64), aug.T)
    if descriptor.use_bias:
        out = out + descriptor.bias.astype(np.float64)[:, None]
    return out.reshape(descriptor.out_dim, h, w)


def embed_backward(
    descriptor: PatchDescriptor, grid: PatchGrid, upstream: np.ndarray
) -> DescriptorGrads:
    """Parameter gradients given d(loss)/d(embedding) of shape (out_dim, h, w)."""
    if upstream.shape != (descriptor.out_dim, *grid.grid_shape):
        raise ValidationError(
            f"upstream shape {upstream.shape} does not match embedding "
            f"({descriptor.out_dim}, {grid.grid_shape[0]}, {grid.grid_shape[1]})"
        )
    g = np.asarray(upstream, dtype=np.float64).reshape(descriptor.out_dim, -1)
    aug = augmented_points(grid)  # (T, in+2)
    gw = np.matmul(g, aug)
    if descriptor.use_bias:
        gb = g.sum(axis=1)
    else:
        gb = np.zeros(descriptor.out_dim)
    return DescriptorGrads(weight=gw, bias=gb)


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    amsgrad: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ValidationError("weight_decay must be >= 0 and eps > 0")


@dataclass
class OptimizerState:
    """Adam moments per parameter tensor plus the shared step counter."""

    config: OptimizerConfig
    step: int = 0
    m_weight: np.ndarray = None
    v_weight: np.ndarray = None
    vmax_weight: np.ndarray = None
    m_bias: np.ndarray = None
    v_bias: np.ndarray = None
    vmax_bias: np.ndarray = None


def init_optimizer_state(
    descriptor: PatchDescriptor, config: OptimizerConfig | None = None
) -> OptimizerState:
    config = config or OptimizerConfig()
    zw = lambda: np.zeros_like(descriptor.weight)
    zb = lambda: np.zeros_like(descriptor.bias)
    return OptimizerState(
        config=config,
        step=0,
        m_weight=zw(),
        v_weight=zw(),
        vmax_weight=zw(),
        m_bias=zb(),
        v_bias=zb(),
        vmax_bias=zb(),
    )


def _adam_update(param, grad, m, v, vmax, cfg: OptimizerConfig, step: int):
    g = grad.astype(param.dtype, copy=False)
    if cfg.weight_decay:
        param *= 1.0 - cfg.learning_rate * cfg.weight_decay
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * g
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * np.square(g)
    if cfg.amsgrad:
        np.maximum(vmax, v, out=vmax)
        second = vmax
    else:
        second = v
    m_hat = m / (1.0 - cfg.beta1**step)
    denom = np.sqrt(second / (1.0 - cfg.beta2**step)) + cfg.eps
    param -= cfg.learning_rate * m_hat / denom


def optimizer_step(
    descriptor: PatchDescriptor, state: OptimizerState, grads: DescriptorGrads
) -> tuple[PatchDescriptor, OptimizerState]:
    """One in-place update. Rejects non-finite gradients before touching state."""
    if not (np.isfinite(grads.weight).all() and np.isfinite(grads.bias).all()):
        raise NonFiniteGradientError("gradient contains NaN or infinity; step refused")
    if grads.weight.shape != descriptor.weight.shape or grads.bias.shape != descriptor.bias.shape:
        raise ValidationError("gradient shapes do not match descriptor parameters")
    state.step += 1
    cfg = state.config
    _adam_update(
        descriptor.weight, grads.weight, state.m_weight, state.v_weight,
        state.vmax_weight, cfg, state.step,
    )
    if descriptor.use_bias:
        _adam_update(
            descriptor.bias, grads.bias, state.m_bias, state.v_bias,
            state.vmax_bias, cfg, state.step,
        )
    return descriptor, state


_FLAG_BIAS = 1
_FLAG_STATE = 2
_FLAG_AMSGRAD = 4


def save_descriptor(
    path: str | Path, descriptor: PatchDescriptor, state: OptimizerState | None = None
) -> None:
    """Binary checkpoint: float32 parameters, optionally the optimizer state."""
    flags = (_FLAG_BIAS if descriptor.use_bias else 0) | (_FLAG_STATE if state else 0)
    if state and state.config.amsgrad:
        flags |= _FLAG_AMSGRAD
    parts = [
        DESCRIPTOR_MAGIC,
        struct.pack("<III", DESCRIPTOR_VERSION, flags, 0),
        struct.pack("<QQ", descriptor.in_dim, descriptor.out_dim),
        np.ascontiguousarray(descriptor.weight, dtype="<f4").tobytes(),
        np.ascontiguousarray(descriptor.bias, dtype="<f4").tobytes(),
    ]
    if state:
        cfg = state.config
        parts.append(
            struct.pack(
                "<Qddddd",
                state.step,
                cfg.learning_rate,
                cfg.weight_decay,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
            )
        )
        for arr in (
            state.m_weight, state.v_weight, state.vmax_weight,
            state.m_bias, state.v_bias, state.vmax_bias,
        ):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _take(raw: bytes, offset: int, nbytes: int, path, what: str) -> tuple[bytes, int]:
    if len(raw) < offset + nbytes:
        raise TruncatedPayloadError(f"{path}: {what} cut off at byte {len(raw)}")
    return raw[offset : offset + nbytes], offset + nbytes


def load_descriptor(path: str | Path) -> tuple[PatchDescriptor, OptimizerState | None]:
    p = Path(path)
    raw = p.read_bytes()
    if raw[:8] != DESCRIPTOR_MAGIC:
        raise BadMagicError(f"{p}: not a descriptor checkpoint")
    head, offset = _take(raw, 8, 12 + 16, p, "header")
    version, flags, _ = struct.unpack_from("<III", head, 0)
    if version != DESCRIPTOR_VERSION:
        raise FeatureFormatError(f"{p}: unsupported version {version}")
    in_dim, out_dim = struct.unpack_from("<QQ", head, 12)
    if in_dim < 1 or out_dim < 1 or max(in_dim, out_dim) > 2**31 - 1:
        raise FeatureFormatError(f"{p}: invalid dims ({in_dim}, {out_dim})")

    def read_f4(count, what):
        nonlocal offset
        chunk, offset = _take(raw, offset, count * 4, p, what)
        return np.frombuffer(chunk, dtype="<f4").copy()

    n_w = int(out_dim) * (int(in_dim) + COORD_CHANNELS)
    weight = read_f4(n_w, "weight").reshape(int(out_dim), int(in_dim) + COORD_CHANNELS)
    bias = read_f4(int(out_dim), "bias")
    descriptor = PatchDescriptor(weight=weight, bias=bias, use_bias=bool(flags & _FLAG_BIAS))
    state = None
    if flags & _FLAG_STATE:
        chunk, offset = _take(raw, offset, 8 + 5 * 8, p, "optimizer header")
        step, lr, wd, b1, b2, eps = struct.unpack("<Qddddd", chunk)
        cfg = OptimizerConfig(
            learning_rate=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps,
            amsgrad=bool(flags & _FLAG_AMSGRAD),
        )
        moments = [read_f4(n_w, "weight moments").reshape(weight.shape) for _ in range(3)]
        bmoments = [read_f4(int(out_dim), "bias moments") for _ in range(3)]
        state = OptimizerState(
            config=cfg, step=int(step),
            m_weight=moments[0], v_weight=moments[1], vmax_weight=moments[2],
            m_bias=bmoments[0], v_bias=bmoments[1], vmax_bias=bmoments[2],
        )
    if offset != len(raw):
        raise FeatureFormatError(f"{p}: {len(raw) - offset} trailing bytes")
    return descriptor, state
