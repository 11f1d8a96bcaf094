"""Recover a quadratic-degradation storage agent from 20 days of dispatch.

Run: python3 demos/quadratic_identification.py
"""

import numpy as np

from invstore import data, train

tr, te, truth = data.generate_synthetic("quadratic", seed=7, n_train=20, n_test=10)
print("true      c1={:.3f} c2={:.3f} eta={:.4f} e_min={:.4f} e_max={:.4f}".format(
    truth.c1, truth.c2, truth.eta, truth.e_min_shift, truth.e_max_shift))

report = train.train_quadratic(tr, train.TrainConfig(seed=7), te)
m = report.model
print("recovered c1={:.3f} c2={:.3f} eta={:.4f} e_min={:.4f} e_max={:.4f}".format(
    m.c1, m.c2, m.eta, m.e_min_shift, m.e_max_shift))
print(f"restart losses {np.round(report.restart_losses, 8).tolist()}, best {report.best_restart}")
print(f"test MSE {report.test_mse[-1][1]:.2e} after {report.epochs_run} epochs, {report.wall_clock:.0f}s")

# the identified agent forecasts a held-out day
day = train.predict(m, te.prices[:1])
net = train.net_dispatch(day)[0]
print("hour  price  true_net  predicted_net")
for t in range(24):
    print(f"{t:4d} {te.prices[0, t]:6.1f} {te.net[0, t]:9.3f} {net[t]:13.3f}")
