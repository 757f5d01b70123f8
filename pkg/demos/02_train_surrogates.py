"""Generate scenarios, fit ICNN and plain-MLP surrogates, compare held-out MSE."""

import time

import numpy as np

from icnnopf.apps import fit_surrogate, run_mse_comparison
from icnnopf.dataset import build_dataset, sample_scenarios
from icnnopf.icnn import TrainConfig
from icnnopf.network import bundled_case

case = bundled_case("ieee33")

t0 = time.perf_counter()
ds = build_dataset(case, sample_scenarios(case, 5000, seed=0))
print(f"{len(ds)} labeled scenarios in {time.perf_counter() - t0:.1f}s; input width {ds.inputs.shape[1]}")

cfg = TrainConfig(learning_rate=1e-3, epochs=30, seed=0)
models = {}
for name, convex in (("A4", True), ("A3", False)):
    mv, hv = fit_surrogate(ds, "v", (64, 64), convex_mode=convex, cfg=cfg)
    mp, hp = fit_surrogate(ds, "p", (64, 64), convex_mode=convex, cfg=cfg)
    models[name] = (mv, mp)
    print(f"{name}: final val loss v {hv['val_loss'][-1]:.3e}, p {hp['val_loss'][-1]:.3e}, "
          f"convex: {mv.is_convex() and mp.is_convex()}")

# A1 is the label itself, A2 the LinDistFlow prediction
for row in run_mse_comparison(case, ds, models):
    print(f"{row.model}: v_dev MSE {row.v_mse:.3e}   p_dev MSE {row.p_mse:.3e}")

# a convex surrogate stays convex far from the data
mv = models["A4"][0]
rng = np.random.default_rng(0)
x1, x2 = rng.normal(scale=3, size=(2, 500, ds.inputs.shape[1]))
gap = mv.predict(0.5 * (x1 + x2)) - 0.5 * (mv.predict(x1) + mv.predict(x2))
print(f"midpoint convexity gap (should be <= 0): max {gap.max():.2e}")
