"""The learnable ISTA iteration block.

One application maps the current estimate x and the measurement y to
the next estimate: a gradient-like correction through the sampling
operator (the immediate reconstruction r), multi-scale dilated feature
extraction from r, denoising and high-pass stages built from grouped
residual branches with channel gating, and a learnable sparse transform
pair wrapped around a learnable soft threshold.

Every convolution on the residual path is bias-free, so disconnecting
all dilation branches collapses the block exactly to the immediate
reconstruction, and a large threshold does the same.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from eqsense.autodiff import (
    ShapeError,
    Tensor,
    add,
    conv2d,
    global_avg_pool,
    mul,
    relu,
    scale,
    sigmoid,
    soft_threshold,
    softplus,
    sub,
)
from eqsense.sampling import StpOperator

__all__ = [
    "ConfigError",
    "BlockConfig",
    "ResNextSeParams",
    "IstaBlockParams",
    "MSDC_DILATIONS",
    "irb_forward",
    "msdc_forward",
    "resnext_se_forward",
    "ista_block_forward",
    "validate_mask",
]

MSDC_DILATIONS = (1, 2, 3, 4, 5, 6, 7)


class ConfigError(ValueError):
    """Raised when a structural configuration constraint is violated."""


@dataclass
class BlockConfig:
    """Width and structure knobs; channels must be divisible by both
    the branch count and the gate reduction.

    The final projection starts at proj_gain times its He scale; the
    default of zero makes a fresh block coincide exactly with the
    immediate reconstruction, so the iteration map starts out solvable
    and the refinement path grows in during training.
    """

    channels: int = 32
    cardinality: int = 4
    se_reduction: int = 4
    residual_gain: float = 0.1
    proj_gain: float = 0.0

    def __post_init__(self):
        if self.channels % self.cardinality:
            raise ConfigError(
                f"cardinality {self.cardinality} does not divide channels {self.channels}"
            )
        if self.channels % self.se_reduction:
            raise ConfigError(
                f"se_reduction {self.se_reduction} does not divide channels {self.channels}"
            )


def _he(rng: np.random.Generator, shape, gain: float = 1.0) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class ResNextSeParams:
    """Grouped residual transform with a squeeze-excite channel gate.

    g parallel branches (1x1 down, 3x3, 1x1 up, all bias-free) are
    summed, gated per channel by a pooled sigmoid bottleneck, and added
    back to the input.
    """

    def __init__(self, branches, se_w1: Tensor, se_w2: Tensor):
        self.branches = branches  # list of (w1, w2, w3) tensor triples
        self.se_w1 = se_w1
        self.se_w2 = se_w2

    @classmethod
    def initialize(cls, c: int, g: int, s: int, rng: np.random.Generator) -> "ResNextSeParams":
        if c % g or c % s:
            raise ConfigError(f"channels {c} not divisible by cardinality {g} / reduction {s}")
        cg = c // g
        branches = [
            (
                _param(_he(rng, (cg, c, 1, 1))),
                _param(_he(rng, (cg, cg, 3, 3))),
                _param(_he(rng, (c, cg, 1, 1))),
            )
            for _ in range(g)
        ]
        se_w1 = _param(_he(rng, (c // s, c, 1, 1)))
        se_w2 = _param(_he(rng, (c, c // s, 1, 1)))
        return cls(branches, se_w1, se_w2)

    def parameters(self, prefix: str) -> dict:
        out = {}
        for i, (w1, w2, w3) in enumerate(self.branches):
            out[f"{prefix}.b{i}.w1"] = w1
            out[f"{prefix}.b{i}.w2"] = w2
            out[f"{prefix}.b{i}.w3"] = w3
        out[f"{prefix}.se.w1"] = self.se_w1
        out[f"{prefix}.se.w2"] = self.se_w2
        return out

    def detached(self) -> "ResNextSeParams":
        return ResNextSeParams(
            [(w1.detach(), w2.detach(), w3.detach()) for w1, w2, w3 in self.branches],
            self.se_w1.detach(),
            self.se_w2.detach(),
        )


def resnext_se_forward(x: Tensor, p: ResNextSeParams) -> Tensor:
    total = None
    for w1, w2, w3 in p.branches:
        h = relu(conv2d(x, w1))
        h = relu(conv2d(h, w2))
        h = conv2d(h, w3)
        total = h if total is None else add(total, h)
    gate = sigmoid(conv2d(relu(conv2d(global_avg_pool(total), p.se_w1)), p.se_w2))
    return add(x, mul(gate, total))


def validate_mask(mask) -> tuple:
    mask = tuple(int(b) for b in mask)
    if len(mask) != len(MSDC_DILATIONS):
        raise ValueError(f"branch mask must have {len(MSDC_DILATIONS)} entries, got {len(mask)}")
    if any(b not in (0, 1) for b in mask):
        raise ValueError("branch mask entries must be 0 or 1")
    return mask


class IstaBlockParams:
    """All learnable state of one iteration: the step size, the
    per-channel threshold (stored as its softplus pre-activation), the
    seven dilated feature kernels, the denoise and high-pass stages,
    the final channel projection, and the transform pair."""

    def __init__(self, rho, lambda_raw, msdc, denoise, highpass, hp_proj, f_fwd, f_inv):
        self.rho = rho
        self.lambda_raw = lambda_raw
        self.msdc = msdc
        self.denoise = denoise
        self.highpass = highpass
        self.hp_proj = hp_proj
        self.f_fwd = f_fwd
        self.f_inv = f_inv

    @classmethod
    def initialize(
        cls,
        cfg: BlockConfig,
        rho0: float,
        seed: int,
        lambda0: float = 0.01,
    ) -> "IstaBlockParams":
        rng = np.random.default_rng(seed)
        c = cfg.channels
        msdc = [
            _param(_he(rng, (c, 1, 3, 3), gain=cfg.residual_gain)) for _ in MSDC_DILATIONS
        ]
        denoise = ResNextSeParams.initialize(c, cfg.cardinality, cfg.se_reduction, rng)
        highpass = ResNextSeParams.initialize(c, cfg.cardinality, cfg.se_reduction, rng)
        hp_proj = _param(_he(rng, (1, c, 3, 3), gain=cfg.proj_gain))
        f_fwd = (_param(_he(rng, (c, c, 3, 3))), _param(_he(rng, (c, c, 3, 3))))
        f_inv = (_param(_he(rng, (c, c, 3, 3))), _param(_he(rng, (c, c, 3, 3))))
        rho = _param(np.full((1, 1, 1, 1), float(rho0)))
        lam_raw = np.full((1, c, 1, 1), float(np.log(np.expm1(lambda0))))
        return cls(rho, _param(lam_raw), msdc, denoise, highpass, hp_proj, f_fwd, f_inv)

    @property
    def channels(self) -> int:
        return self.msdc[0].shape[0]

    def parameters(self) -> dict:
        out = {"block.rho": self.rho, "block.lambda_raw": self.lambda_raw}
        for d, k in zip(MSDC_DILATIONS, self.msdc):
            out[f"block.msdc.{d}"] = k
        out.update(self.denoise.parameters("block.denoise"))
        out.update(self.highpass.parameters("block.highpass"))
        out["block.hp_proj"] = self.hp_proj
        out["block.f_fwd.w1"] = self.f_fwd[0]
        out["block.f_fwd.w2"] = self.f_fwd[1]
        out["block.f_inv.w1"] = self.f_inv[0]
        out["block.f_inv.w2"] = self.f_inv[1]
        return out

    def detached(self) -> "IstaBlockParams":
        return IstaBlockParams(
            self.rho.detach(),
            self.lambda_raw.detach(),
            [k.detach() for k in self.msdc],
            self.denoise.detached(),
            self.highpass.detached(),
            self.hp_proj.detach(),
            (self.f_fwd[0].detach(), self.f_fwd[1].detach()),
            (self.f_inv[0].detach(), self.f_inv[1].detach()),
        )


def irb_forward(x: Tensor, y: Tensor, stp: StpOperator, rho: Union[Tensor, float]) -> Tensor:
    """Immediate reconstruction: x minus the step-size-scaled measurement
    residual pulled back through the reconstruction matrices."""
    resid = sub(stp.measure(x), y)
    back = stp.initial_reconstruct(resid)
    corr = mul(rho, back) if isinstance(rho, Tensor) else scale(back, float(rho))
    return sub(x, corr)


def msdc_forward(r: Tensor, kernels: Sequence[Tensor], mask) -> Tensor:
    """Masked sum of dilated feature branches; an empty mask is an exact
    zero feature map."""
    mask = validate_mask(mask)
    out = None
    for d, k, on in zip(MSDC_DILATIONS, kernels, mask):
        if not on:
            continue
        branch = conv2d(r, k, dilation=d)
        out = branch if out is None else add(out, branch)
    if out is None:
        b, _, h, w = r.shape
        return Tensor(np.zeros((b, kernels[0].shape[0], h, w)))
    return out


def _two_conv(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return conv2d(relu(conv2d(x, w1)), w2)


def ista_block_forward(
    x: Tensor,
    y: Tensor,
    stp: StpOperator,
    params: IstaBlockParams,
    mask=(1, 1, 1, 1, 1, 1, 1),
):
    """One iteration of the learned map.

    Returns the next estimate and the transform-consistency residual
    (the forward-then-inverse transform of the denoised features minus
    the features themselves, which training drives toward zero).
    """
    if x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"expected a square image, got {x.shape}")
    r = irb_forward(x, y, stp, params.rho)
    u = msdc_forward(r, params.msdc, mask)
    d = resnext_se_forward(u, params.denoise)
    s = _two_conv(d, *params.f_fwd)
    lam = softplus(params.lambda_raw)
    t = soft_threshold(s, lam)
    v = _two_conv(t, *params.f_inv)
    h = resnext_se_forward(v, params.highpass)
    x_next = add(r, conv2d(h, params.hp_proj))
    sym = sub(_two_conv(s, *params.f_inv), d)
    return x_next, sym
