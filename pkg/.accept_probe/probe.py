"""Mirror of the acceptance desk-scale run; results transfer 1:1."""
import numpy as np, time, sys, json
from eqsense.model import Model, FULL_MASK
from eqsense.block import BlockConfig, ista_block_forward
from eqsense.autodiff import Tensor, no_grad
from eqsense.equilibrium import SolverConfig
from eqsense.data import Dataset, ImageRecord, synthesize
from eqsense.training import TrainConfig, train_step, evaluate
from eqsense.autodiff import AdamState
from eqsense.metrics import psnr, hmse
from eqsense.io import save_checkpoint

def make_data(count=200, n=64, seed=2024):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(count):
        kind = "gaussian-blobs" if i % 2 == 0 else "piecewise"
        recs.append(ImageRecord(f"img{i:03d}", synthesize(kind, n, rng)))
    order = np.random.default_rng(seed + 1).permutation(count)
    recs = [recs[i] for i in order]
    return Dataset("train", recs[:160]), Dataset("test", recs[160:])

def heldout_sym_hmse(model, ds, solver, mask=FULL_MASK):
    vals = []
    stp_d, blk_d = model.stp.detached(), model.block.detached()
    for rec in ds.records:
        Y = model.stp.measure_array(rec.image)
        res = model.reconstruct(Y, solver, mask)
        with no_grad():
            _, sym = ista_block_forward(
                Tensor(res.x_star.reshape(1,1,model.n,model.n)),
                Tensor(Y.reshape(1,1,model.m,model.m)), stp_d, blk_d, mask)
        vals.append(hmse(sym.data, np.zeros_like(sym.data)))
    return float(np.mean(vals))

def heldout_init_psnr(model, ds):
    return float(np.mean([psnr(model.initial_estimate(model.stp.measure_array(r.image)), r.image) for r in ds.records]))

n = 64
ds_train, ds_test = make_data()
model = Model.create(n, 0.25, BlockConfig(channels=8), seed=7)
eval_solver = SolverConfig(max_iter=50, tol=1e-5)
sym0 = heldout_sym_hmse(model, ds_test, eval_solver)
print(f"init sym hmse: {sym0:.6e}", flush=True)
cfg = TrainConfig(lr=1e-4, batch=8, epochs=100, max_steps=2000, seed=13, cs_ratio=0.25, n=n,
                  gamma_sym=0.1,
                  forward_solver=SolverConfig(max_iter=12, tol=1e-3),
                  backward_solver=SolverConfig(max_iter=8, tol=1e-3))
images = ds_train.images().reshape(len(ds_train), 1, n, n)
state = AdamState(lr=cfg.lr)
rng = np.random.default_rng(cfg.seed)
step = 0
t_start = time.time()
rows = []
for epoch in range(cfg.epochs):
    order = rng.permutation(len(ds_train))
    for lo in range(0, len(ds_train), cfg.batch):
        row = train_step(model, images[order[lo:lo+cfg.batch]], cfg, state)
        rows.append(row)
        step += 1
        if step % 500 == 0:
            print(f"  heldout sym at step {step}: {heldout_sym_hmse(model, ds_test, eval_solver):.6e}", flush=True)
        if step % 100 == 0:
            el = time.time() - t_start
            print(f"step {step} loss {row['loss']:.5f} psnr_deq {row['psnr_deq']:.2f} "
                  f"psnr_init {row['psnr_init']:.2f} sym {row['hmse_sym']:.2e} "
                  f"({el/step:.2f} s/step, eta {(2000-step)*el/step/60:.0f} min)", flush=True)
        if step >= cfg.max_steps: break
    if step >= cfg.max_steps: break
print(f"training done in {(time.time()-t_start)/60:.1f} min", flush=True)
save_checkpoint("/root/pkg/.accept_probe/model.msdc", model)

_, s50 = evaluate(model, ds_test, eval_solver)
_, s10 = evaluate(model, ds_test, SolverConfig(max_iter=10, tol=1e-5))
init_psnr = heldout_init_psnr(model, ds_test)
sym1 = heldout_sym_hmse(model, ds_test, eval_solver)
_, s_none = evaluate(model, ds_test, eval_solver, mask=(0,)*7)
out = {
  "psnr_deq50": s50["mean_psnr"], "ssim_deq50": s50["mean_ssim"],
  "psnr_deq10": s10["mean_psnr"], "psnr_init": init_psnr,
  "psnr_none": s_none["mean_psnr"],
  "sym0": sym0, "sym1": sym1,
  "crit8_gap": s50["mean_psnr"] - init_psnr,
  "crit8_sym_drop": 1 - sym1/sym0,
  "crit9_margin": s50["mean_psnr"] - (s10["mean_psnr"] - 0.05),
  "crit10_gap": s50["mean_psnr"] - s_none["mean_psnr"],
}
print(json.dumps(out, indent=2), flush=True)
json.dump(out, open("/root/pkg/.accept_probe/results.json","w"), indent=2)
