"""SoC-dependent degradation: a learned convex disutility against the quadratic model.

The agent's true cost depends on its state of charge, which the quadratic
model cannot express.  The generic model learns an input-convex network on
per-step features (charge, discharge and their running sums) and solves the
agent's problem by sequential convex programming.

Run: python3 demos/soc_generic.py  (about 7 minutes)
"""

from invstore import data, storage, train
from invstore.scp import scp_solve

tr, te, truth = data.generate_synthetic("soc", seed=0, n_train=20, n_test=10)

quad = train.train_quadratic(tr, train.TrainConfig(seed=0))
cfg = train.TrainConfig(seed=0, icnn_mode="soc", smoothing=0.03)
gen = train.train_generic(tr, cfg)

q_mse = train.evaluate(train.predict(quad.model, te.prices), te.responses)["mse"]
g_mse = train.evaluate(train.predict(gen.model, te.prices, config=cfg), te.responses)["mse"]
print(f"test MSE quadratic {q_mse:.2e}, generic {g_mse:.2e}")

G, h = storage.constraints(gen.model.storage)
res = scp_solve(gen.model.network, G, h, storage.signed_prices(te.prices))
print("normalized SCP objective, first test day:")
print(" ".join(f"{v:.4f}" for v in res.traces[0].normalized))
