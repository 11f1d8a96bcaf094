"""Equality-only agents: plain gradient descent recovers (alpha, b) at a linear rate.

Run: python3 demos/equality_regime.py
"""

import numpy as np

from invstore import data, train

eq = data.generate_equality(seed=11, n_samples=20, n=8, m=2)
rep = train.train_equality(eq, train.TrainConfig(optimizer="gd", restarts=1, seed=0), alpha0=4.0,
                           b0=np.zeros(2))
print(f"alpha true {eq.alpha:.6f} found {rep.model.alpha:.6f}")
print(f"b     true {np.round(eq.b, 6)} found {np.round(rep.model.b, 6)}")
for k in range(0, len(rep.train_loss), 5):
    print(f"epoch {k:3d}  loss {rep.train_loss[k]:.3e}")
