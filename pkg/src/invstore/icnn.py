"""Input-convex network for an unknown disutility ``u(y)``.

Architecture (``k`` inputs, softplus activations)::

    a1 = W0 x + b0,          z1 = softplus(a1)
    a2 = U1 z1 + W1 x + b1,  z2 = softplus(a2)
    f  = u2 . z2 + w2 . x + b2

with ``U1 >= 0`` and ``u2 >= 0`` elementwise, which makes ``f`` convex in
``x``.  Inputs are divided by ``input_scale`` and the output multiplied by
``output_scale`` so the raw weights stay of order one.

Three modes map a dispatch ``y = [p, d]`` onto network inputs:

* ``scalar``: ``u(y) = sum_t f(d_t)`` with a 1-input network shared over time.
* ``soc``: ``u(y) = sum_t f(p_t, d_t, P_t, D_t)`` with ``P_t = dt sum_{s<=t} p_s``
  and ``D_t`` likewise, so a shared 4-input network can price the state of
  charge.  The features are linear in ``y``, which keeps ``u`` convex.
* ``vector``: ``u(y) = f(y)`` with a ``2T``-input network.

Value, gradient and Hessian are exact (hand-written forward-over-reverse
rules), and :meth:`IcnnModel.backward_params` contracts upstream gradients on
``(grad, hess)`` back onto the weights.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, ModelLoadError

FORMAT_VERSION = 1
PARAM_NAMES = ("W0", "b0", "U1", "W1", "b1", "u2", "w2", "b2")
NONNEG = ("U1", "u2")


MODES = ("scalar", "soc", "vector")


def n_inputs(mode: str, T: int) -> int:
    return {"scalar": 1, "soc": 4, "vector": 2 * T}[mode]


def step_features(mode: str, T: int, dt: float = 1.0) -> np.ndarray:
    """Per-step linear feature maps ``F`` of shape ``(T, k, 2T)``: ``x_t = F[t] @ y``."""
    n = 2 * T
    t = np.arange(T)
    if mode == "scalar":
        F = np.zeros((T, 1, n))
        F[t, 0, T + t] = 1.0
        return F
    F = np.zeros((T, 4, n))
    F[t, 0, t] = 1.0
    F[t, 1, T + t] = 1.0
    cum = np.tril(np.ones((T, T))) * dt
    F[:, 2, :T] = cum
    F[:, 3, T:] = cum
    return F


def softplus(a):
    return np.logaddexp(0.0, a)


def sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


class IcnnModel:
    """Two-hidden-layer input-convex network.

    ``params`` holds the arrays named in ``PARAM_NAMES``; ``T`` is the
    horizon the model is applied to.
    """

    def __init__(self, params: dict, T: int, mode: str = "scalar",
                 input_scale: float = 1.0, output_scale: float = 1.0, dt: float = 1.0):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.params = {k: np.array(params[k], dtype=float) for k in PARAM_NAMES}
        self.T = int(T)
        self.mode = mode
        self.input_scale = float(input_scale)
        self.output_scale = float(output_scale)
        self.dt = float(dt)
        k = self.params["W0"].shape[1]
        if k != self.n_inputs:
            raise DimensionMismatch(f"{mode} mode with T={T} needs {self.n_inputs} inputs, weights have {k}")
        self._F = None if mode == "vector" else step_features(mode, self.T, self.dt)

    @property
    def n_inputs(self) -> int:
        return n_inputs(self.mode, self.T)

    @property
    def hidden(self):
        return self.params["W0"].shape[0], self.params["U1"].shape[0]

    @classmethod
    def random(cls, rng, T, mode="scalar", hidden=(24, 24), init_range=0.1,
               input_scale=1.0, output_scale=1.0, dt=1.0) -> "IcnnModel":
        """Small uniform weights with the nonnegative paths clamped."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        k = n_inputs(mode, T)
        h1, h2 = hidden
        shapes = {"W0": (h1, k), "b0": (h1,), "U1": (h2, h1), "W1": (h2, k),
                  "b1": (h2,), "u2": (h2,), "w2": (k,), "b2": ()}
        params = {name: rng.uniform(-init_range, init_range, size=shape) for name, shape in shapes.items()}
        model = cls(params, T, mode, input_scale, output_scale, dt)
        model.project()
        return model

    def copy(self) -> "IcnnModel":
        return IcnnModel(self.params, self.T, self.mode, self.input_scale, self.output_scale, self.dt)

    def project(self):
        """Clamp the z-path weights to be nonnegative (in place)."""
        for name in NONNEG:
            np.maximum(self.params[name], 0.0, out=self.params[name])
        return self

    # ------------------------------------------------------------ point-level

    def _forward(self, x):
        P = self.params
        xs = x / self.input_scale
        a1 = xs @ P["W0"].T + P["b0"]
        z1 = softplus(a1)
        a2 = z1 @ P["U1"].T + xs @ P["W1"].T + P["b1"]
        return xs, a1, z1, a2

    def point_value(self, x) -> np.ndarray:
        """``f`` at each row of ``x`` (shape ``(B, k)``)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        P = self.params
        xs, _, _, a2 = self._forward(x)
        return self.output_scale * (softplus(a2) @ P["u2"] + xs @ P["w2"] + P["b2"])

    def _derivs(self, x):
        P = self.params
        xs, a1, z1, a2 = self._forward(x)
        s1, s2 = sigmoid(a1), sigmoid(a2)
        t1, t2 = s1 * (1.0 - s1), s2 * (1.0 - s2)
        J2 = (P["U1"] * s1[:, None, :]) @ P["W0"] + P["W1"]
        v = P["u2"] * s2
        r = v @ P["U1"]
        om2 = P["u2"] * t2
        om1 = r * t1
        return dict(xs=xs, a1=a1, z1=z1, a2=a2, s1=s1, s2=s2, t1=t1, t2=t2, J2=J2, v=v, r=r, om2=om2, om1=om1)

    def point_grad_hess(self, x):
        """Gradient ``(B, k)`` and Hessian ``(B, k, k)`` of ``f`` at each row of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        P = self.params
        c = self._derivs(x)
        J2 = c["J2"]
        g = (c["v"][:, None, :] @ J2)[:, 0] + P["w2"]
        H = (np.swapaxes(J2, 1, 2) @ (c["om2"][:, :, None] * J2)
             + (P["W0"].T * c["om1"][:, None, :]) @ P["W0"])
        sg = self.output_scale / self.input_scale
        return sg * g, sg / self.input_scale * H

    def point_backward(self, x, Gg, GH) -> dict:
        """Weight gradients of ``sum_b <Gg_b, grad_b> + <GH_b, hess_b>``.

        ``Gg`` is ``(B, k)`` and ``GH`` is ``(B, k, k)``; both refer to the
        scaled derivatives returned by :meth:`point_grad_hess`.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        P = self.params
        U1, W0 = P["U1"], P["W0"]
        c = self._derivs(x)
        sg = self.output_scale / self.input_scale
        gam = np.asarray(Gg, dtype=float) * sg
        Gam = np.asarray(GH, dtype=float) * (sg / self.input_scale)
        Gam = 0.5 * (Gam + np.swapaxes(Gam, -1, -2))
        J2, v, s1, s2, t1, t2 = c["J2"], c["v"], c["s1"], c["s2"], c["t1"], c["t2"]

        grads = {}
        grads["w2"] = gam.sum(axis=0)
        grads["b2"] = np.zeros(())
        # partials with respect to the intermediates J2, v, om2, om1 and W0 (direct)
        JG = J2 @ Gam
        WG = W0 @ Gam
        PJ = v[:, :, None] * gam[:, None, :] + 2.0 * c["om2"][:, :, None] * JG
        Pv = (J2 @ gam[:, :, None])[:, :, 0]
        Pom2 = (JG * J2).sum(axis=2)
        Pom1 = (WG * W0).sum(axis=2)
        dW0 = 2.0 * (c["om1"][:, :, None] * WG).sum(axis=0)

        # J2 = U1 D(s1) W0 + W1
        dW1 = PJ.sum(axis=0)
        dU1 = ((PJ @ W0.T) * s1[:, None, :]).sum(axis=0)
        UPJ = U1.T @ PJ
        dW0 += (s1[:, :, None] * UPJ).sum(axis=0)
        Ps1 = (UPJ * W0).sum(axis=2)
        # om1 = r * t1 with r = U1' v
        Pr = Pom1 * t1
        Pt1 = Pom1 * c["r"]
        dU1 += v.T @ Pr
        Pv = Pv + Pr @ U1.T
        # v = u2 * s2, om2 = u2 * t2
        du2 = (Pv * s2).sum(axis=0) + (Pom2 * t2).sum(axis=0)
        Ps2 = Pv * P["u2"]
        Pt2 = Pom2 * P["u2"]
        # through the activations: ds/da = t, dt/da = t (1 - 2 s)
        Pa2 = Ps2 * t2 + Pt2 * t2 * (1.0 - 2.0 * s2)
        Pa1 = Ps1 * t1 + Pt1 * t1 * (1.0 - 2.0 * s1)
        # a2 = U1 z1 + W1 xs + b1, z1 = softplus(a1), a1 = W0 xs + b0
        xs = c["xs"]
        dU1 += Pa2.T @ c["z1"]
        dW1 += Pa2.T @ xs
        grads["b1"] = Pa2.sum(axis=0)
        Pa1 = Pa1 + (Pa2 @ U1) * s1
        dW0 += Pa1.T @ xs
        grads["b0"] = Pa1.sum(axis=0)
        grads.update(W0=dW0, U1=dU1, W1=dW1, u2=du2)
        return grads

    # ------------------------------------------------------------- y-level

    def _check_y(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[1] != 2 * self.T:
            raise DimensionMismatch(f"expected dispatch of length {2 * self.T}, got {y.shape[1]}")
        return y

    def _step_inputs(self, y):
        """Per-step network inputs, flattened to ``(B * T, k)``."""
        return np.einsum("skn,bn->bsk", self._F, y).reshape(-1, self.n_inputs)

    def value(self, y) -> np.ndarray:
        """Disutility ``u(y)`` for each row of ``y``."""
        y = self._check_y(y)
        if self.mode == "vector":
            return self.point_value(y)
        return self.point_value(self._step_inputs(y)).reshape(y.shape[0], self.T).sum(axis=1)

    def grad_hess(self, y):
        """``(q_hat, Q_hat)``: gradient ``(B, n)`` and Hessian ``(B, n, n)`` of ``u``."""
        y = self._check_y(y)
        if self.mode == "vector":
            return self.point_grad_hess(y)
        B, n = y.shape
        T, k = self.T, self.n_inputs
        g1, h1 = self.point_grad_hess(self._step_inputs(y))
        g1, h1 = g1.reshape(B, T, k), h1.reshape(B, T, k, k)
        if self.mode == "scalar":
            g = np.zeros((B, n))
            g[:, T:] = g1[:, :, 0]
            H = np.zeros((B, n, n))
            idx = np.arange(T, n)
            H[:, idx, idx] = h1[:, :, 0, 0]
            return g, H
        M = self._F.reshape(T * k, n)
        g = g1.reshape(B, T * k) @ M
        D = np.zeros((B, T, k, T, k))
        s = np.arange(T)
        D[:, s, :, s, :] = h1.transpose(1, 0, 2, 3)
        H = np.swapaxes(D.reshape(B, T * k, T * k) @ M, 1, 2) @ M
        return g, H

    def backward_params(self, y, Gq, GQ) -> dict:
        """Weight gradients of ``sum_i <Gq_i, q_hat_i> + <GQ_i, Q_hat_i>``."""
        y = self._check_y(y)
        Gq = np.atleast_2d(Gq)
        GQ = np.asarray(GQ).reshape(y.shape[0], y.shape[1], y.shape[1])
        if self.mode == "vector":
            return self.point_backward(y, Gq, GQ)
        T, k = self.T, self.n_inputs
        if self.mode == "scalar":
            idx = np.arange(T, 2 * T)
            return self.point_backward(y[:, T:].reshape(-1, 1), Gq[:, T:].reshape(-1, 1),
                                       GQ[:, idx, idx].reshape(-1, 1, 1))
        B = y.shape[0]
        M = self._F.reshape(T * k, 2 * T)
        Gx = (Gq @ M.T).reshape(-1, k)
        full = (M @ GQ @ M.T).reshape(B, T, k, T, k)
        s = np.arange(T)
        GX = full[:, s, :, s, :].transpose(1, 0, 2, 3).reshape(-1, k, k)
        return self.point_backward(self._step_inputs(y), Gx, GX)

    # ------------------------------------------------------ persistence

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "mode": self.mode,
            "T": self.T,
            "input_scale": self.input_scale,
            "output_scale": self.output_scale,
            "dt": self.dt,
            "params": {k: np.asarray(v).tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IcnnModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ModelLoadError(f"unsupported network format version {d.get('format_version')!r}")
        try:
            return cls(d["params"], d["T"], d["mode"], d["input_scale"], d["output_scale"], d.get("dt", 1.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelLoadError(f"malformed network weights: {exc}") from exc
