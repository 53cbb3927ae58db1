"""
Complex-valued MLP ansatz for the reduced density tensor.

The network maps the occupation bits of a basis state plus a few time
features to a complex amplitude ``rho_pre(s; t)``.  The physical RDT is the
symmetrized combination ``rho(s) = rho_pre(s) + phase(s) * conj(rho_pre(s^T))``
evaluated only on the kept (filtered) states.

Gradients are exact and hand-derived.  For a real loss ``L`` and a complex
quantity ``z`` we propagate ``g_z = dL/dRe z + i dL/dIm z``; through a
holomorphic map ``w = f(z)`` this becomes ``g_z = conj(f'(z)) g_w``, and
for an affine layer ``y = W h + b`` it gives ``g_W = g_y conj(h)^T``,
``g_b = g_y`` and ``g_h = W^H g_y``.  The real gradient with respect to
``(Re W, Im W)`` is then ``(Re g_W, Im g_W)``.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import sparse

from .dqme import Liouvillian, RdtBasis

__all__ = [
    "PinnError",
    "Feature",
    "FeatureMap",
    "PinnModel",
    "LossWeights",
    "LossReport",
    "activation",
    "init_model",
    "forward_amplitude",
    "rdt_eval",
    "rdt_time_derivative",
    "loss_eval",
    "loss_gradient",
    "LossProblem",
    "save_checkpoint",
    "load_checkpoint",
    "DEFAULT_DELTA_T",
]

DEFAULT_DELTA_T = 1.5e-9
TRACE_GUARD = 1e-6


class PinnError(ValueError):
    """Bad model shape, feature map, loss input or checkpoint."""


def activation(x):
    """``a(x) = 1 / (exp(x) + 1)`` on complex arguments."""
    return 1.0 / (np.exp(x) + 1.0)


# ---------------------------------------------------------------------------
# time features


_KINDS = ("t", "t^2", "t^3", "t^1.5", "sqrt_ratio", "zero")


@dataclass(frozen=True)
class Feature:
    """One time feature of subdomain-local time.

    ``kind`` is one of ``t``, ``t^2``, ``t^3``, ``t^1.5``,
    ``sqrt_ratio`` (``t^0.5 / (t + c)``) or ``zero``.
    """

    kind: str
    c: float = 0.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise PinnError(f"unknown feature kind {self.kind!r}")
        if self.kind == "sqrt_ratio" and not self.c > 0:
            raise PinnError("sqrt_ratio feature needs c > 0")

    @property
    def singular(self) -> bool:
        return self.kind == "sqrt_ratio"

    def __call__(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind in ("t^1.5", "sqrt_ratio") and np.any(t < 0):
            raise PinnError(f"feature {self.describe()} needs non-negative local time")
        if self.kind == "t":
            return t.copy()
        if self.kind == "t^2":
            return t * t
        if self.kind == "t^3":
            return t ** 3
        if self.kind == "t^1.5":
            return t ** 1.5
        if self.kind == "sqrt_ratio":
            return np.sqrt(t) / (t + self.c)
        return np.zeros_like(t)

    def describe(self) -> str:
        return f"sqrt_ratio({self.c!r})" if self.kind == "sqrt_ratio" else self.kind

    @classmethod
    def parse(cls, text: str) -> "Feature":
        text = text.strip().replace(" ", "")
        m = re.fullmatch(r"sqrt_ratio\(([^)]+)\)", text)
        if m:
            return cls("sqrt_ratio", float(m.group(1)))
        aliases = {"0": "zero", "t2": "t^2", "t3": "t^3", "t1.5": "t^1.5"}
        return cls(aliases.get(text, text))


@dataclass(frozen=True)
class FeatureMap:
    """Ordered time features ``f_1 .. f_NT``."""

    features: tuple[Feature, ...]

    def __post_init__(self):
        feats = tuple(f if isinstance(f, Feature) else Feature.parse(f) for f in self.features)
        if not feats:
            raise PinnError("a feature map needs at least one feature")
        if sum(f.singular for f in feats) > 1:
            raise PinnError("at most one singular-derivative feature per map")
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return len(self.features)

    def __call__(self, t_local) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t_local, dtype=float))
        return np.stack([f(t) for f in self.features], axis=-1)

    def describe(self) -> list[str]:
        return [f.describe() for f in self.features]

    @classmethod
    def parse(cls, items: Sequence[str]) -> "FeatureMap":
        return cls(tuple(Feature.parse(s) for s in items))


# ---------------------------------------------------------------------------
# model


@dataclass
class PinnModel:
    """Layer maps ``(W_i, b_i)``, attached features and subdomain interval."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    features: FeatureMap
    interval: tuple[float, float]
    n_bits: int

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise PinnError("need matching non-empty weight and bias lists")
        prev = self.n_bits + len(self.features)
        for W, b in zip(self.weights, self.biases):
            if W.ndim != 2 or W.shape[1] != prev or b.shape != (W.shape[0],):
                raise PinnError(f"layer shapes do not chain: {W.shape}, {b.shape}, input {prev}")
            prev = W.shape[0]
        if prev != 1:
            raise PinnError("output width must be 1")
        a, b = self.interval
        if not b > a:
            raise PinnError("subdomain interval must have positive length")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(W.shape[0] for W in self.weights)

    @property
    def n_complex(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def n_real(self) -> int:
        return 2 * self.n_complex

    def get_params(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.real.ravel(), W.imag.ravel(), b.real, b.imag]
        return np.concatenate(parts)

    def with_params(self, theta: np.ndarray) -> "PinnModel":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_real,):
            raise PinnError(f"parameter vector has length {theta.size}, expected {self.n_real}")
        Ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            n = W.size
            Ws.append((theta[k:k + n] + 1j * theta[k + n:k + 2 * n]).reshape(W.shape))
            k += 2 * n
            m = b.size
            bs.append(theta[k:k + m] + 1j * theta[k + m:k + 2 * m])
            k += 2 * m
        return replace(self, weights=Ws, biases=bs)

    def copy(self) -> "PinnModel":
        return replace(self, weights=[W.copy() for W in self.weights],
                       biases=[b.copy() for b in self.biases])


def init_model(n_bits: int, features: FeatureMap, interval: tuple[float, float], *,
               hidden: int = 35, n_layers: int = 4, seed: int = 0, scale: float = 1.0) -> PinnModel:
    """Random model: Re/Im of weights ~ N(0, scale^2/(N_in + N_out)), zero biases."""
    if n_layers < 1 or hidden < 1 or n_bits < 0:
        raise PinnError("invalid network shape")
    rng = np.random.default_rng(seed)
    dims = [n_bits + len(features)] + [hidden] * (n_layers - 1) + [1]
    Ws, bs = [], []
    for nin, nout in zip(dims[:-1], dims[1:]):
        sd = scale / math.sqrt(nin + nout)
        Ws.append(rng.normal(0.0, sd, (nout, nin)) + 1j * rng.normal(0.0, sd, (nout, nin)))
        bs.append(np.zeros(nout, complex))
    return PinnModel(Ws, bs, features, tuple(map(float, interval)), n_bits)


def _basis_bits(basis: RdtBasis) -> np.ndarray:
    return basis.bits().astype(float)


def _forward(model: PinnModel, bits: np.ndarray, times: np.ndarray, keep: bool = False):
    """Amplitudes on the (state, time) grid, shape ``(S, T)``.

    With ``keep=True`` the pre-activations and hidden outputs needed for
    backpropagation are returned as well.
    """
    t_local = np.asarray(times, dtype=float) - model.interval[0]
    F = model.features(t_local)
    W1, b1 = model.weights[0], model.biases[0]
    nb = model.n_bits
    A = bits @ W1[:, :nb].T
    B = F @ W1[:, nb:].T + b1
    S, T = bits.shape[0], F.shape[0]
    hs = []
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if len(model.weights) > 1:
            # exp(A + B) = exp(A) exp(B) saves the complex exp on the (S*T) grid
            h = 1.0 / ((np.exp(A)[:, None, :] * np.exp(B)[None, :, :]).reshape(S * T, -1) + 1.0)
            z = None
        else:
            z = (A[:, None, :] + B[None, :, :]).reshape(S * T, -1)
        for k, (W, b) in enumerate(zip(model.weights[1:], model.biases[1:])):
            if k > 0:
                h = activation(z)
            hs.append(h)
            z = h @ W.T + b
    y = z.reshape(S, T)
    if keep:
        return y, (F, hs)
    return y


def forward_amplitude(model: PinnModel, bits: Sequence[int], t: float) -> complex:
    """``rho_pre`` for one basis state at one time."""
    b = np.asarray(bits, dtype=float).reshape(1, -1)
    if b.shape[1] != model.n_bits:
        raise PinnError(f"state has {b.shape[1]} bits, model expects {model.n_bits}")
    return complex(_forward(model, b, np.array([t]))[0, 0])


def _symmetrize(pre: np.ndarray, basis: RdtBasis) -> np.ndarray:
    ph = basis.phase.astype(float)
    return pre + ph[:, None] * pre[basis.partner].conj()


def rdt_eval(model: PinnModel, basis: RdtBasis, t) -> np.ndarray:
    """Symmetrized RDT on ``basis``; shape ``(S,)`` for scalar ``t``, else ``(S, T)``."""
    if not basis.swap_closed():
        raise PinnError("basis must be closed under the block swap")
    scalar = np.ndim(t) == 0
    times = np.atleast_1d(np.asarray(t, dtype=float))
    rho = _symmetrize(_forward(model, _basis_bits(basis), times), basis)
    return rho[:, 0] if scalar else rho


def _stencil(tau: float, interval: tuple[float, float], dt: float):
    """Second-order difference stencil (times, weights) for d/dt at ``tau``."""
    a, b = interval
    if tau - dt < a - 1e-15 * max(1.0, abs(a)):
        return (tau, tau + dt, tau + 2 * dt), (-1.5 / dt, 2.0 / dt, -0.5 / dt)
    if tau + dt > b + 1e-15 * max(1.0, abs(b)):
        return (tau, tau - dt, tau - 2 * dt), (1.5 / dt, -2.0 / dt, 0.5 / dt)
    return (tau - dt, tau + dt), (-0.5 / dt, 0.5 / dt)


def rdt_time_derivative(model: PinnModel, basis: RdtBasis, t: float,
                        delta_t: float = DEFAULT_DELTA_T) -> np.ndarray:
    """Finite-difference ``d rho/dt`` (central inside, one-sided at the ends)."""
    ts, ws = _stencil(float(t), model.interval, delta_t)
    R = rdt_eval(model, basis, np.array(ts))
    return R @ np.array(ws)


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    omega_r: float = 0.2
    omega_i: float = 0.8
    omega_tr: float = 20.0
    lam: float = -3.0
    delta_t: float = DEFAULT_DELTA_T


@dataclass
class LossReport:
    l_r: float
    l_i: float
    l_tr: float
    total: float
    residual_norms: np.ndarray
    finite: bool = True

    def as_dict(self) -> dict:
        return {"L_R": self.l_r, "L_I": self.l_i, "L_tr": self.l_tr, "total": self.total}


@dataclass(eq=False)
class LossProblem:
    """Precomputed pieces of one subdomain loss.

    ``points`` are the residual times, ``target`` the RDT that the model
    must match at the start of ``interval``.
    """

    basis: RdtBasis
    L: sparse.csr_matrix
    points: np.ndarray
    target: np.ndarray
    interval: tuple[float, float]
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.L, Liouvillian):
            self.L = self.L.matrix
        self.L = sparse.csr_matrix(self.L)
        self.points = np.asarray(self.points, dtype=float)
        self.target = np.asarray(self.target, dtype=complex)
        a, b = self.interval
        if self.points.ndim != 1 or self.points.size == 0:
            raise PinnError("need at least one residual point")
        tol = 1e-12 * max(1.0, abs(b))
        if np.any(self.points < a - tol) or np.any(self.points > b + tol):
            raise PinnError("residual points must lie inside the subdomain")
        if self.target.shape != (self.basis.size,):
            raise PinnError("initial target has the wrong length")
        if self.L.shape != (self.basis.size, self.basis.size):
            raise PinnError("generator does not match the basis")
        dt = self.weights.delta_t
        times: dict[float, int] = {a: 0}
        rows = []
        for tau in self.points:
            ts, ws = _stencil(float(tau), self.interval, dt)
            for x in (float(tau),) + ts:
                times.setdefault(x, len(times))
            rows.append((times[float(tau)], [times[x] for x in ts], ws))
        self.times = np.array(sorted(times, key=times.get))
        n_t, n_p = len(times), len(rows)
        # value selector E (T x P); the derivative is Delta (T x Q) forming
        # differences rho(t_k) - rho(tau), then S (Q x P) applying the stencil
        # weights, so a constant rho gives exactly zero
        E = np.zeros((n_t, n_p))
        cols = [(i, k0, k, w) for i, (k0, ks, ws) in enumerate(rows) for k, w in zip(ks, ws) if k != k0]
        Delta = np.zeros((n_t, len(cols)))
        S = np.zeros((len(cols), n_p))
        for i, (k0, _, _) in enumerate(rows):
            E[k0, i] = 1.0
        for q, (i, k0, k, w) in enumerate(cols):
            Delta[k, q] = 1.0
            Delta[k0, q] = -1.0
            S[q, i] = w
        self.E, self.Delta, self.S = E, Delta, S
        self.w_trace = self.basis.trace_weights()
        self.w_ic = np.exp(self.weights.lam * self.basis.tier())
        self.bits = _basis_bits(self.basis)
        self.LH = self.L.conj().T.tocsr()

    def with_weights(self, weights: LossWeights) -> "LossProblem":
        return LossProblem(self.basis, self.L, self.points, self.target, self.interval, weights)


def _components(prob: LossProblem, rho: np.ndarray):
    """Loss parts and the pieces the gradient needs; ``rho`` is (S, T)."""
    R = rho @ prob.E
    Rdot = (rho @ prob.Delta) @ prob.S
    res = Rdot - prob.L @ R
    tr = prob.w_trace @ R
    if np.any(np.abs(tr) < TRACE_GUARD) and np.all(np.isfinite(tr)):
        raise PinnError("trace of the vacuum block vanished at a residual point")
    nrm2 = np.sum(np.abs(res) ** 2, axis=0)
    abs_tr2 = np.abs(tr) ** 2
    l_r = float(np.sum(nrm2 / abs_tr2))
    d0 = rho[:, 0] - prob.target
    l_i = float(np.sum(prob.w_ic * np.abs(d0) ** 2))
    l_tr = float(np.sum(np.abs(tr - 1.0) ** 2))
    return l_r, l_i, l_tr, res, tr, nrm2, abs_tr2, d0


def _report(prob: LossProblem, l_r, l_i, l_tr, nrm2, abs_tr2) -> LossReport:
    w = prob.weights
    total = w.omega_r * l_r + w.omega_i * l_i + w.omega_tr * l_tr
    finite = bool(np.isfinite(total))
    return LossReport(l_r, l_i, l_tr, float(total) if finite else float("inf"),
                      np.sqrt(nrm2 / abs_tr2), finite)


def _check_model(model: PinnModel, prob: LossProblem):
    if model.n_bits != prob.basis.width:
        raise PinnError(f"model expects {model.n_bits} bits but the basis has width {prob.basis.width}")


def loss_eval(model: PinnModel, prob: LossProblem) -> LossReport:
    """Subdomain loss ``omega_R L_R + omega_I L_I + omega_tr L_tr``."""
    _check_model(model, prob)
    with np.errstate(over="ignore", invalid="ignore"):
        rho = _symmetrize(_forward(model, prob.bits, prob.times), prob.basis)
    if not np.all(np.isfinite(rho)):
        nan = float("nan")
        return LossReport(nan, nan, nan, float("inf"), np.full(prob.points.size, nan), False)
    l_r, l_i, l_tr, _, _, nrm2, abs_tr2, _ = _components(prob, rho)
    return _report(prob, l_r, l_i, l_tr, nrm2, abs_tr2)


def loss_gradient(model: PinnModel, prob: LossProblem) -> tuple[LossReport, np.ndarray]:
    """Loss report and gradient with respect to :meth:`PinnModel.get_params`."""
    _check_model(model, prob)
    with np.errstate(over="ignore", invalid="ignore"):
        pre, (F, hs) = _forward(model, prob.bits, prob.times, keep=True)
        rho = _symmetrize(pre, prob.basis)
    if not np.all(np.isfinite(rho)):
        nan = float("nan")
        rep = LossReport(nan, nan, nan, float("inf"), np.full(prob.points.size, nan), False)
        return rep, np.full(model.n_real, np.nan)
    l_r, l_i, l_tr, res, tr, nrm2, abs_tr2, d0 = _components(prob, rho)
    rep = _report(prob, l_r, l_i, l_tr, nrm2, abs_tr2)
    w = prob.weights

    # g with respect to rho at residual points (value) and at stencil times
    g_res = w.omega_r * 2.0 * res / abs_tr2[None, :]
    g_tr = w.omega_r * (-2.0 * nrm2 * tr / abs_tr2 ** 2) + w.omega_tr * 2.0 * (tr - 1.0)
    g_R = -(prob.LH @ g_res) + prob.w_trace[:, None] * g_tr[None, :]
    g_rho = g_R @ prob.E.T + (g_res @ prob.S.T) @ prob.Delta.T
    g_rho[:, 0] += w.omega_i * 2.0 * prob.w_ic * d0

    # through the symmetrization
    ph = prob.basis.phase.astype(float)
    g_pre = g_rho + ph[:, None] * g_rho[prob.basis.partner].conj()

    return rep, _backprop(model, prob.bits, F, hs, g_pre)


def _backprop(model: PinnModel, bits: np.ndarray, F: np.ndarray, hs: list,
              g_pre: np.ndarray) -> np.ndarray:
    """Real-parameter gradient from ``g_pre = dLoss/d conj(pre)`` on the (S, T) grid."""
    S, T = g_pre.shape
    g = g_pre.reshape(S * T, 1)
    grads_W, grads_b = [], []
    for k in range(len(model.weights) - 1, 0, -1):
        hc = hs[k - 1].conj()
        grads_W.append(g.T @ hc)
        grads_b.append(g.sum(axis=0))
        g = g @ model.weights[k].conj()
        # a'(z) = -a (1 - a), with a = h cached from the forward pass
        g *= hc
        hc -= 1.0
        g *= hc
    g1 = g.reshape(S, T, -1)
    gA = g1.sum(axis=1)
    gB = g1.sum(axis=0)
    gW1 = np.concatenate([gA.T @ bits, gB.T @ F], axis=1)
    grads_W.append(gW1)
    grads_b.append(gB.sum(axis=0))
    grads_W.reverse()
    grads_b.reverse()
    parts = []
    for gW, gb in zip(grads_W, grads_b):
        parts += [gW.real.ravel(), gW.imag.ravel(), gb.real, gb.imag]
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# checkpoints


def _pairs(a: np.ndarray) -> list:
    return [[float(x.real), float(x.imag)] for x in np.asarray(a).ravel()]


def save_checkpoint(model: PinnModel, path, basis: RdtBasis | None = None, extra: dict | None = None) -> dict:
    """Write the model as JSON (re/im pairs per layer) and return the payload."""
    from .io import atomic_write_text

    payload = {
        "format": "dissipaton-pinn-model/1",
        "shape": list(model.shape),
        "n_bits": model.n_bits,
        "features": model.features.describe(),
        "interval": list(model.interval),
        "basis_hash": None if basis is None else basis.hash,
        "layers": [{"shape": list(W.shape), "W": _pairs(W), "b": _pairs(b)}
                   for W, b in zip(model.weights, model.biases)],
    }
    if extra:
        payload["extra"] = extra
    atomic_write_text(path, json.dumps(payload))
    return payload


def load_checkpoint(path, basis: RdtBasis | None = None) -> PinnModel:
    """Read a JSON checkpoint; refuses a mismatched basis hash."""
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format") != "dissipaton-pinn-model/1":
        raise PinnError("not a model checkpoint")
    if basis is not None and d.get("basis_hash") not in (None, basis.hash):
        raise PinnError(f"checkpoint basis hash {d['basis_hash']} != {basis.hash}")
    Ws, bs = [], []
    for layer in d["layers"]:
        w = np.array(layer["W"], dtype=float)
        Ws.append((w[:, 0] + 1j * w[:, 1]).reshape(layer["shape"]))
        b = np.array(layer["b"], dtype=float)
        bs.append(b[:, 0] + 1j * b[:, 1])
    return PinnModel(Ws, bs, FeatureMap.parse(d["features"]), tuple(d["interval"]), int(d["n_bits"]))

