import numpy as np
import pytest

from eqsense.autodiff import Tensor, no_grad
from eqsense.block import BlockConfig, IstaBlockParams, ista_block_forward
from eqsense.data import Dataset, ImageRecord
from eqsense.equilibrium import SolverConfig, anderson_solve
from eqsense.metrics import hmse
from eqsense.model import Model
from eqsense.sampling import StpOperator
from eqsense.training import (
    TrainConfig,
    ablate,
    evaluate,
    hmse_t,
    total_loss_t,
    train,
    train_step,
)

TINY = BlockConfig(channels=4, cardinality=4, se_reduction=4, proj_gain=0.1)


def tiny_model(seed=0, n=8, ratio=1.0, orthogonal=True):
    """Small model with a well-conditioned, contractive iteration map."""
    rng = np.random.default_rng(seed)
    if orthogonal:
        q1 = np.linalg.qr(rng.normal(size=(n, n)))[0] * 0.9
        q2 = np.linalg.qr(rng.normal(size=(n, n)))[0] * 0.9
        stp = StpOperator(q1, q2, q1.T.copy(), q2.T.copy())
    else:
        stp = StpOperator.initialize(n, ratio, seed)
    block = IstaBlockParams.initialize(TINY, rho0=1.0 / stp.lipschitz(), seed=seed + 1)
    return Model(stp, block, TINY)


def tiny_dataset(count=4, n=8, seed=0):
    rng = np.random.default_rng(seed)
    recs = [
        ImageRecord(f"im{i}", np.clip(rng.normal(0.5, 0.2, size=(n, n)), 0, 1))
        for i in range(count)
    ]
    return Dataset("train", recs)


class TestLosses:
    def test_total_loss_perfect_model_is_zero(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 1, 4, 4))
        out2 = Tensor(np.zeros((1, 2, 4, 4)))
        assert total_loss_t(Tensor(x), out2, Tensor(x), x, 0.3, 0.4).item() == 0.0

    def test_zero_weights_reduce_to_reconstruction(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(1, 1, 4, 4))
        b = rng.normal(size=(1, 1, 4, 4))
        c = rng.normal(size=(1, 2, 4, 4))
        got = total_loss_t(Tensor(a), Tensor(c), Tensor(b), b, 0.0, 0.0).item()
        assert got == pytest.approx(hmse(a, b), abs=1e-15)

    def test_matches_three_independent_hmse_calls(self):
        rng = np.random.default_rng(3)
        o1 = rng.normal(size=(2, 1, 4, 4))
        o2 = rng.normal(size=(2, 3, 4, 4))
        o3 = rng.normal(size=(2, 1, 4, 4))
        x = rng.normal(size=(2, 1, 4, 4))
        got = total_loss_t(Tensor(o1), Tensor(o2), Tensor(o3), x, 0.7, 0.2).item()
        expected = hmse(o1, x) + 0.7 * hmse(o2, np.zeros_like(o2)) + 0.2 * hmse(o3, x)
        assert got == pytest.approx(expected, rel=1e-12)

    def test_hmse_t_matches_metric(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(1, 1, 5, 5))
        b = rng.normal(size=(1, 1, 5, 5))
        assert hmse_t(Tensor(a), Tensor(b)).item() == pytest.approx(hmse(a, b), abs=1e-15)


def full_objective(model, x_batch, cfg):
    """The exact training objective as a plain function of the parameters,
    with the fixed point solved tightly. Used as the finite-difference
    oracle for the composite gradient."""
    with no_grad():
        x_t = Tensor(x_batch)
        y_t = model.stp.measure(x_t)
        z0 = model.stp.initial_reconstruct(y_t)
    f = model.iteration_map(y_t.data, cfg.mask)
    fwd = anderson_solve(f, z0.data, SolverConfig(max_iter=500, tol=1e-12))
    with no_grad():
        out1, sym = ista_block_forward(
            Tensor(fwd.x_star), Tensor(y_t.data), model.stp, model.block, cfg.mask
        )
    return (
        hmse(out1.data, x_batch)
        + cfg.gamma_sym * hmse(sym.data, np.zeros_like(sym.data))
        + cfg.gamma_init * hmse(z0.data, x_batch)
    )


class TestTrainStepGradient:
    def test_composite_gradient_matches_finite_differences(self):
        model = tiny_model(seed=11)
        rng = np.random.default_rng(12)
        x_batch = np.clip(rng.normal(0.5, 0.2, size=(1, 1, 8, 8)), 0, 1)
        cfg = TrainConfig(
            lr=1e-6,
            batch=1,
            n=8,
            cs_ratio=1.0,
            gamma_sym=0.05,
            gamma_init=0.1,
            forward_solver=SolverConfig(max_iter=500, tol=1e-12),
            backward_solver=SolverConfig(max_iter=500, tol=1e-12),
        )

        # capture the gradient adam would consume by replaying the step's
        # gradient assembly with a zero learning-rate-equivalent trick:
        # run train_step on a throwaway copy and compare against FD on the
        # pristine parameters
        import copy

        probe = {
            "stp.phi1": (0, 3),
            "stp.rec2": (2, 5),
            "block.rho": (0, 0),
            "block.lambda_raw": (0, 1),
            "block.msdc.3": (4, 7),
            "block.f_fwd.w1": (10, 20),
            "block.hp_proj": (3, 30),
            "block.denoise.b1.w2": (0, 5),
        }

        # recompute the analytic gradient exactly as train_step assembles it
        from eqsense.autodiff import backward_from, collect_grads, scale, zero_grads
        from eqsense.equilibrium import BlockTape, deq_backward

        params = model.parameters()
        stp_params = model.stp.parameters()
        x_true_t = Tensor(x_batch)
        y_t = model.stp.measure(x_true_t)
        z0_t = model.stp.initial_reconstruct(y_t)
        fwd = anderson_solve(model.iteration_map(y_t.data, cfg.mask), z0_t.data, cfg.forward_solver)
        assert fwd.converged
        tape = BlockTape(
            lambda xl, yl: model.tensor_step(xl, yl, cfg.mask),
            model.detached_step_fn(cfg.mask),
            fwd.x_star,
            y_t.data,
            params,
        )
        main = hmse_t(tape.out, x_true_t) + scale(
            hmse_t(tape.aux, Tensor(np.zeros(tape.aux.shape))), cfg.gamma_sym
        )
        leaves = dict(params)
        leaves["__x__"] = tape.x_leaf
        leaves["__y__"] = tape.y_leaf
        direct = collect_grads(main, leaves)
        b = direct.pop("__x__")
        gy = direct.pop("__y__")
        corr = deq_backward(tape, b, cfg.backward_solver)
        gy = gy + corr.y
        init_grads = collect_grads(scale(hmse_t(z0_t, x_true_t), cfg.gamma_init), stp_params)
        zero_grads(stp_params.values())
        backward_from(y_t, gy)
        inject = {k: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for k, t in stp_params.items()}
        zero_grads(stp_params.values())

        h = 1e-5
        for name, (i_flat_a, i_flat_b) in probe.items():
            t = params[name]
            analytic = direct[name] + corr.theta[name]
            if name in stp_params:
                analytic = analytic + init_grads[name] + inject[name]
            for idx in {i_flat_a % t.data.size, i_flat_b % t.data.size}:
                flat = t.data.reshape(-1)
                orig = flat[idx]
                flat[idx] = orig + h
                fp = full_objective(model, x_batch, cfg)
                flat[idx] = orig - h
                fm = full_objective(model, x_batch, cfg)
                flat[idx] = orig
                num = (fp - fm) / (2 * h)
                ref = analytic.reshape(-1)[idx]
                denom = max(abs(num), abs(ref), 1e-9)
                assert abs(num - ref) / denom <= 2e-4, f"{name}[{idx}]: {ref} vs {num}"


class TestTrainLoop:
    def test_deterministic_given_seed(self):
        cfg = TrainConfig(
            lr=1e-4, batch=2, epochs=2, n=8, cs_ratio=1.0, seed=7,
            forward_solver=SolverConfig(max_iter=30, tol=1e-6),
            backward_solver=SolverConfig(max_iter=30, tol=1e-6),
        )
        runs = []
        for _ in range(2):
            model = tiny_model(seed=21)
            _, rows = train(model, tiny_dataset(4), cfg)
            runs.append((rows, model.parameters()))
        rows_a, params_a = runs[0]
        rows_b, params_b = runs[1]
        assert [r["loss"] for r in rows_a] == [r["loss"] for r in rows_b]
        for name in params_a:
            assert np.array_equal(params_a[name].data, params_b[name].data), name

    def test_loss_trend_negative_on_overfit(self):
        cfg = TrainConfig(
            lr=3e-4, batch=2, epochs=30, max_steps=50, n=8, cs_ratio=1.0, seed=3,
            forward_solver=SolverConfig(max_iter=30, tol=1e-6),
            backward_solver=SolverConfig(max_iter=30, tol=1e-6),
        )
        model = tiny_model(seed=31)
        _, rows = train(model, tiny_dataset(2), cfg)
        losses = np.array([r["loss"] for r in rows])
        steps = np.arange(len(losses))
        slope = np.polyfit(steps, losses, 1)[0]
        assert slope < 0

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(tiny_model(), Dataset("train", []), TrainConfig(n=8, cs_ratio=1.0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig(batch=0)
        with pytest.raises(ValueError):
            TrainConfig(cs_ratio=1.5)


class TestEvaluate:
    def test_lossless_identity_model_hits_sentinel(self):
        # ratio 1.0, identity-initialized operator, all branches off: the
        # initial estimate is exact and the masked map is solved at it
        n = 16
        stp = StpOperator.identity(n)
        block = IstaBlockParams.initialize(TINY, rho0=1.0, seed=1)
        model = Model(stp, block, TINY)
        rng = np.random.default_rng(5)
        img = np.clip(rng.normal(0.5, 0.2, size=(n, n)), 0, 1)
        ds = Dataset("test", [ImageRecord("one", img)])
        records, summary = evaluate(model, ds, SolverConfig(max_iter=50, tol=1e-8), mask=(0,) * 7)
        assert len(records) == 1
        assert records[0].psnr_db == 99.0
        assert summary["mean_ssim"] == 1.0

    def test_summary_mean_matches_records(self):
        model = tiny_model(seed=41, n=16)
        ds = tiny_dataset(3, n=16, seed=9)
        records, summary = evaluate(model, ds, SolverConfig(max_iter=20, tol=1e-6))
        assert summary["mean_psnr"] == pytest.approx(np.mean([r.psnr_db for r in records]))
        assert summary["mean_ssim"] == pytest.approx(np.mean([r.ssim for r in records]))
        assert summary["count"] == 3

    def test_evaluation_does_not_mutate_model(self):
        model = tiny_model(seed=51, n=16)
        before = {k: t.data.copy() for k, t in model.parameters().items()}
        evaluate(model, tiny_dataset(2, n=16, seed=10), SolverConfig(max_iter=10, tol=1e-6))
        after = model.parameters()
        for name in before:
            assert np.array_equal(before[name], after[name].data)


class TestAblate:
    def test_mask_rows_and_zero_mask_matches_irb_fixed_point(self):
        from eqsense.block import irb_forward

        model = tiny_model(seed=61, n=16)
        ds = tiny_dataset(2, n=16, seed=11)
        masks = [(1,) * 7, (0,) * 7]
        records, summaries = ablate(model, ds, masks, SolverConfig(max_iter=60, tol=1e-9))
        assert [s["mask"] for s in summaries] == ["1111111", "0000000"]
        assert len(records) == 4

        # the all-zero mask reconstruction solves the bare immediate
        # reconstruction fixed point
        img = ds.records[0].image
        Y = model.stp.measure_array(img)
        res = model.reconstruct(Y, SolverConfig(max_iter=60, tol=1e-9), mask=(0,) * 7)
        with no_grad():
            nxt = irb_forward(
                Tensor(res.x_star.reshape(1, 1, 16, 16)),
                Tensor(Y.reshape(1, 1, model.m, model.m)),
                model.stp.detached(),
                model.block.rho.detach(),
            )
        drift = np.linalg.norm(nxt.data.reshape(-1) - res.x_star.reshape(-1))
        assert drift <= 1e-7 * max(1.0, np.linalg.norm(res.x_star))

    def test_bad_mask_rejected(self):
        model = tiny_model(seed=71)
        with pytest.raises(ValueError):
            ablate(model, tiny_dataset(1), ["10101"])


class TestDivergenceAbort:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_forward_divergence_aborts_with_diagnostic(self):
        from eqsense.training import TrainingDiverged, train_step
        from eqsense.autodiff import AdamState

        model = tiny_model(seed=81)
        # blow up the refinement path so the very first iterate overflows
        # the solver's norm guard
        model.block.hp_proj.data[:] = 1e200
        model.block.msdc[0].data[:] = 1e200
        rng = np.random.default_rng(8)
        batch = rng.normal(0.5, 0.2, size=(2, 1, 8, 8))
        cfg = TrainConfig(lr=1e-4, batch=2, n=8, cs_ratio=1.0,
                          forward_solver=SolverConfig(max_iter=40, tol=1e-6))
        with pytest.raises(TrainingDiverged):
            train_step(model, batch, cfg, AdamState())
