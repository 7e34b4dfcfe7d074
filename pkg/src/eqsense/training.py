"""Joint training of the sampling operator and the iteration block.

Each step measures a batch, solves the forward fixed point without
recording, then assembles the full gradient from three backward routes:
a direct pass through one recorded block application at the
equilibrium (reconstruction and transform-consistency terms), the
implicit correction from the adjoint fixed-point solve, and the plain
path through the sampling graph (initial-reconstruction term plus the
measurement's role as solver injection).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from eqsense.autodiff import (
    AdamState,
    ShapeError,
    Tensor,
    adam_step,
    backward_from,
    collect_grads,
    mul,
    scale,
    sub,
    tensor_sum,
    zero_grads,
)
from eqsense.data import Dataset
from eqsense.equilibrium import (
    BlockTape,
    DivergenceError,
    SolverConfig,
    anderson_solve,
    deq_backward,
)
from eqsense.metrics import hmse, psnr, ssim
from eqsense.model import FULL_MASK, Model

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "MetricsRecord",
    "hmse_t",
    "total_loss_t",
    "train",
    "train_step",
    "evaluate",
    "evaluate_many",
    "ablate",
    "mask_to_string",
]


class TrainingDiverged(RuntimeError):
    """The forward solve diverged on a batch; carries the diagnostic."""


@dataclass
class TrainConfig:
    lr: float = 1e-5
    batch: int = 16
    epochs: int = 1
    max_steps: Optional[int] = None
    gamma_sym: float = 0.01
    gamma_init: float = 0.1
    seed: int = 0
    cs_ratio: float = 0.25
    n: int = 64
    mask: tuple = FULL_MASK
    forward_solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(max_iter=30, tol=1e-4)
    )
    backward_solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(max_iter=30, tol=1e-4)
    )

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if not 0.0 < self.cs_ratio <= 1.0:
            raise ValueError("cs_ratio must be in (0, 1]")


@dataclass
class MetricsRecord:
    image_id: str
    cs_ratio: float
    mask: str
    psnr_db: float
    ssim: float
    iterations: int
    seconds: float


def mask_to_string(mask) -> str:
    return "".join(str(int(b)) for b in mask)


def hmse_t(a: Tensor, b) -> Tensor:
    """Half mean square error as a differentiable scalar tensor."""
    b_t = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64))
    if a.shape != b_t.shape:
        raise ShapeError(f"hmse: {a.shape} vs {b_t.shape}")
    diff = sub(a, b_t)
    return scale(tensor_sum(mul(diff, diff)), 1.0 / (2.0 * a.data.size))


def total_loss_t(
    out1: Tensor,
    out2: Tensor,
    out3: Tensor,
    x_true,
    gamma_sym: float,
    gamma_init: float,
) -> Tensor:
    """Reconstruction + weighted consistency + weighted initial-estimate loss."""
    zero = Tensor(np.zeros(out2.shape))
    loss = hmse_t(out1, x_true)
    loss = loss + scale(hmse_t(out2, zero), gamma_sym)
    return loss + scale(hmse_t(out3, x_true), gamma_init)


def train_step(
    model: Model,
    x_batch: np.ndarray,
    cfg: TrainConfig,
    state: AdamState,
) -> Dict[str, float]:
    """One optimization step on a (B, 1, n, n) batch. Returns the log row."""
    t0 = time.perf_counter()
    params = model.parameters()
    stp_params = model.stp.parameters()
    x_true_t = Tensor(x_batch)

    # sampling graph: measurement and initial estimate with live parameters
    y_t = model.stp.measure(x_true_t)
    z0_t = model.stp.initial_reconstruct(y_t)

    # forward equilibrium, unrecorded
    f = model.iteration_map(y_t.data, cfg.mask)
    try:
        fwd = anderson_solve(f, z0_t.data, cfg.forward_solver)
    except DivergenceError as e:
        raise TrainingDiverged(
            f"forward solve diverged on the whole batch: {e}"
        ) from e

    # one recorded application at the equilibrium
    def fn(x_leaf, y_leaf):
        return model.tensor_step(x_leaf, y_leaf, cfg.mask)

    tape = BlockTape(fn, model.detached_step_fn(cfg.mask), fwd.x_star, y_t.data, params)
    out1, sym = tape.out, tape.aux

    main_loss = hmse_t(out1, x_true_t) + scale(hmse_t(sym, Tensor(np.zeros(sym.shape))), cfg.gamma_sym)
    leaves = dict(params)
    leaves["__x__"] = tape.x_leaf
    leaves["__y__"] = tape.y_leaf
    direct = collect_grads(main_loss, leaves)
    b = direct.pop("__x__")
    gy = direct.pop("__y__")

    # implicit correction through the fixed point; when the forward pass
    # is not at a fixed point the adjoint cannot converge either, so go
    # straight to the truncated (unrolled-equivalent) sum
    corr = deq_backward(tape, b, cfg.backward_solver, neumann_only=not fwd.converged)
    gy = gy + corr.y

    # initial-estimate loss through the sampling graph
    init_loss = scale(hmse_t(z0_t, x_true_t), cfg.gamma_init)
    init_grads = collect_grads(init_loss, stp_params)

    # the measurement's role as injection, pushed back into the sampling graph
    zero_grads(stp_params.values())
    backward_from(y_t, gy)
    inject_grads = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in stp_params.items()
    }
    zero_grads(stp_params.values())

    grads = {}
    for name in params:
        g = direct[name] + corr.theta[name]
        if name in stp_params:
            g = g + init_grads[name] + inject_grads[name]
        grads[name] = g
    adam_step(params, grads, state)

    b_sz = x_batch.shape[0]
    psnr_deq = float(np.mean([psnr(out1.data[i, 0], x_batch[i, 0]) for i in range(b_sz)]))
    psnr_init = float(np.mean([psnr(z0_t.data[i, 0], x_batch[i, 0]) for i in range(b_sz)]))
    return {
        "loss": main_loss.item() + init_loss.item(),
        "hmse_recon": hmse(out1.data, x_batch),
        "hmse_sym": hmse(sym.data, np.zeros_like(sym.data)),
        "hmse_init": hmse(z0_t.data, x_batch),
        "psnr_deq": psnr_deq,
        "psnr_init": psnr_init,
        "fwd_iterations": fwd.iterations,
        "fwd_residual": fwd.residual_norm,
        "adjoint_converged": float(corr.converged),
        "seconds": time.perf_counter() - t0,
    }


def train(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
) -> Tuple[Model, List[Dict[str, float]]]:
    """Run the optimization loop; returns the model and per-step log rows.

    Deterministic in cfg.seed: batch order and every numeric output
    repeat bit-for-bit across runs.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    images = dataset.images().reshape(len(dataset), 1, cfg.n, cfg.n)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    rows: List[Dict[str, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(dataset), cfg.batch):
            batch = images[order[lo : lo + cfg.batch]]
            row = train_step(model, batch, cfg, state)
            row["step"] = step
            row["epoch"] = epoch
            rows.append(row)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return model, rows
    return model, rows


def evaluate(
    model: Model,
    dataset: Dataset,
    solver: Optional[SolverConfig] = None,
    mask=FULL_MASK,
    cs_ratio: Optional[float] = None,
) -> Tuple[List[MetricsRecord], Dict[str, float]]:
    """Reconstruct every image and report per-image and mean metrics.

    Read-only on the model; images are processed independently.
    """
    solver = solver or SolverConfig()
    ratio = model.stp.ratio if cs_ratio is None else cs_ratio
    mask_s = mask_to_string(mask)
    records = []
    for rec in dataset.records:
        t0 = time.perf_counter()
        Y = model.stp.measure_array(rec.image)
        result = model.reconstruct(Y, solver, mask)
        dt = time.perf_counter() - t0
        records.append(
            MetricsRecord(
                image_id=rec.image_id,
                cs_ratio=ratio,
                mask=mask_s,
                psnr_db=psnr(result.x_star, rec.image),
                ssim=ssim(result.x_star, rec.image),
                iterations=result.iterations,
                seconds=dt,
            )
        )
    summary = {
        "cs_ratio": ratio,
        "mask": mask_s,
        "mean_psnr": float(np.mean([r.psnr_db for r in records])),
        "mean_ssim": float(np.mean([r.ssim for r in records])),
        "mean_iterations": float(np.mean([r.iterations for r in records])),
        "count": len(records),
    }
    return records, summary


def evaluate_many(
    models: Dict[float, Model],
    dataset: Dataset,
    solver: Optional[SolverConfig] = None,
    mask=FULL_MASK,
) -> Tuple[List[MetricsRecord], List[Dict[str, float]]]:
    """One trained model per sampling ratio, evaluated on a shared set."""
    records: List[MetricsRecord] = []
    summaries = []
    for ratio in sorted(models):
        model = models[ratio]
        recs, summary = evaluate(model, dataset, solver, mask, cs_ratio=ratio)
        records.extend(recs)
        summaries.append(summary)
    return records, summaries


def ablate(
    model: Model,
    dataset: Dataset,
    masks,
    solver: Optional[SolverConfig] = None,
) -> Tuple[List[MetricsRecord], List[Dict[str, float]]]:
    """Evaluate the same model under a list of branch masks."""
    records: List[MetricsRecord] = []
    summaries = []
    for mask in masks:
        recs, summary = evaluate(model, dataset, solver, mask)
        records.extend(recs)
        summaries.append(summary)
    return records, summaries
