"""Test-time refinement of snippet outputs by proximal first-order descent.

Given the three frames of a snippet and an initial prediction of depth, pose,
intrinsics and flow, `oft_refine` treats those outputs as free variables and
runs Adam on

    total_loss(state) + sum_v w_v * ||theta_v - theta_v^prior||_2^2

starting from the prior. Depth and focal lengths are optimized as logarithms
(depth maps as log-depth, focal lengths as a log-scale delta against the
prior), which keeps them positive without projection steps; pose and flow are
optimized in their natural units. The proximal deviation is measured in that
same parameterization, so the depth and focal penalties are relative while
the pose and flow penalties are absolute.

Variable blocks can be frozen via `VariableMask`; a frozen block passes
through bit-identically, as does any block whose parameters never move
(the unpacker reuses the anchor arrays rather than recomputing exp(log x)).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .geometry import Intrinsics, RigidMotion
from .losses import LossWeights, total_loss
from .state import OutputState, ProximalPrior, ProxWeights
from .validation import InvalidPriorError, NumericalError


@dataclass(frozen=True)
class VariableMask:
    """Which output blocks the optimizer is allowed to move."""

    depth: bool = True
    rotation: bool = True
    translation: bool = True
    intrinsics: bool = True
    flow: bool = True

    def any_active(self) -> bool:
        return self.depth or self.rotation or self.translation or self.intrinsics or self.flow


@dataclass(frozen=True)
class RefineConfig:
    """Optimizer settings; the defaults match the reference schedule."""

    iterations: int = 50
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    prox_weights: ProxWeights = field(default_factory=ProxWeights)
    variables: VariableMask = field(default_factory=VariableMask)
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if not (self.learning_rate > 0.0):
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not (0.0 <= b < 1.0):
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if not (self.adam_eps > 0.0):
            raise ValueError(f"adam_eps must be > 0, got {self.adam_eps}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if not isinstance(self.variables, VariableMask):
            raise TypeError("variables must be a VariableMask")


def select_variables(config: RefineConfig) -> VariableMask:
    """Active-variable mask for a run; warns when everything is frozen."""
    mask = config.variables
    if not mask.any_active():
        warnings.warn("all variable blocks are frozen; refinement is a no-op",
                      RuntimeWarning, stacklevel=2)
    return mask


# ── Adam ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class AdamState:
    """First and second moment vectors plus the completed step count."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(m=np.zeros(n), v=np.zeros(n), step=0)


def adam_step(params, grad, state: AdamState, config: RefineConfig):
    """One bias-corrected Adam update on a flat parameter vector.

    Returns (new_params, new_state). A non-finite gradient aborts with a
    NumericalError naming the first offending entry, since continuing would
    silently poison the moment estimates.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.ndim != 1:
        raise ValueError(f"params must be a flat vector, got shape {params.shape}")
    if grad.shape != params.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise ValueError(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, "
            f"moments {state.m.shape}/{state.v.shape}")
    bad = ~np.isfinite(grad)
    if np.any(bad):
        idx = int(np.argmax(bad))
        raise NumericalError(
            f"non-finite gradient at Adam step {state.step + 1}: "
            f"{int(bad.sum())} entries, first at index {idx} ({grad[idx]!r})")

    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_params = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return new_params, AdamState(m=m, v=v, step=t)


# ── flat parameterization of an OutputState ──────────────────────────────────


class _Layout:
    """Slice bookkeeping for the flat parameter vector.

    Order: log-depth per frame, then per pair (euler, translation), the
    two focal log-deltas, then forward and backward flows per pair.
    """

    def __init__(self, anchor: OutputState):
        self.anchor = anchor
        h, w = anchor.intrinsics.height, anchor.intrinsics.width
        self.hw = (h, w)
        n, p = anchor.n_frames, anchor.n_pairs
        sizes = ([h * w] * n + [3] * p + [3] * p + [2]
                 + [h * w * 2] * p + [h * w * 2] * p)
        edges = np.concatenate([[0], np.cumsum(sizes)])
        blocks = [slice(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
        self.depth_sl = blocks[:n]
        self.euler_sl = blocks[n:n + p]
        self.trans_sl = blocks[n + p:n + 2 * p]
        self.focal_sl = blocks[n + 2 * p]
        self.ffwd_sl = blocks[n + 2 * p + 1:n + 3 * p + 1]
        self.fbwd_sl = blocks[n + 3 * p + 1:]
        self.size = int(edges[-1])

    def pack_anchor(self) -> np.ndarray:
        a = self.anchor
        parts = [np.log(d).ravel() for d in a.depths]
        parts += [np.asarray(m.euler, dtype=np.float64) for m in a.motions]
        parts += [np.asarray(m.translation, dtype=np.float64) for m in a.motions]
        parts.append(np.zeros(2))
        parts += [f.ravel() for f in a.flows_fwd]
        parts += [f.ravel() for f in a.flows_bwd]
        return np.concatenate(parts)

    def unpack(self, theta: np.ndarray, theta0: np.ndarray) -> OutputState:
        """Materialize a state; blocks that never moved reuse anchor arrays.

        The round trip exp(log(x)) is not bitwise exact, so bit-identity of
        frozen blocks requires the pass-through."""
        a = self.anchor

        def moved(sl) -> bool:
            return not np.array_equal(theta[sl], theta0[sl])

        depths = tuple(
            np.exp(theta[sl]).reshape(self.hw) if moved(sl) else a.depths[f]
            for f, sl in enumerate(self.depth_sl))
        motions = tuple(
            RigidMotion(euler=theta[esl].copy(), translation=theta[tsl].copy())
            if (moved(esl) or moved(tsl)) else a.motions[k]
            for k, (esl, tsl) in enumerate(zip(self.euler_sl, self.trans_sl)))
        if moved(self.focal_sl):
            d = theta[self.focal_sl]
            K = Intrinsics(fx=a.intrinsics.fx * float(np.exp(d[0])),
                           fy=a.intrinsics.fy * float(np.exp(d[1])),
                           width=a.intrinsics.width, height=a.intrinsics.height)
        else:
            K = a.intrinsics
        flows_fwd = tuple(
            theta[sl].reshape(self.hw + (2,)) if moved(sl) else a.flows_fwd[k]
            for k, sl in enumerate(self.ffwd_sl))
        flows_bwd = tuple(
            theta[sl].reshape(self.hw + (2,)) if moved(sl) else a.flows_bwd[k]
            for k, sl in enumerate(self.fbwd_sl))
        return OutputState(depths=depths, motions=motions, intrinsics=K,
                           flows_fwd=flows_fwd, flows_bwd=flows_bwd)

    def pack_gradient(self, grads: dict, state: OutputState) -> np.ndarray:
        """Chain natural-domain loss gradients into the flat theta vector."""
        g = np.empty(self.size)
        for f, sl in enumerate(self.depth_sl):
            # d(loss)/d(log d) = d(loss)/dd * d
            g[sl] = (grads["depths"][f] * state.depths[f]).ravel()
        for k, (esl, tsl) in enumerate(zip(self.euler_sl, self.trans_sl)):
            g[esl] = grads["euler"][k]
            g[tsl] = grads["translation"][k]
        g[self.focal_sl] = grads["focal"] * np.array(
            [state.intrinsics.fx, state.intrinsics.fy])
        for k, sl in enumerate(self.ffwd_sl):
            g[sl] = grads["flows_fwd"][k].ravel()
        for k, sl in enumerate(self.fbwd_sl):
            g[sl] = grads["flows_bwd"][k].ravel()
        return g

    def weight_vector(self, pw: ProxWeights) -> np.ndarray:
        w = np.empty(self.size)
        for sl in self.depth_sl:
            w[sl] = pw.depth
        for sl in self.euler_sl:
            w[sl] = pw.rotation
        for sl in self.trans_sl:
            w[sl] = pw.translation
        w[self.focal_sl] = pw.intrinsics
        for sl in self.ffwd_sl + self.fbwd_sl:
            w[sl] = pw.flow
        return w

    def active_vector(self, mask: VariableMask) -> np.ndarray:
        a = np.empty(self.size)
        for sl in self.depth_sl:
            a[sl] = float(mask.depth)
        for sl in self.euler_sl:
            a[sl] = float(mask.rotation)
        for sl in self.trans_sl:
            a[sl] = float(mask.translation)
        a[self.focal_sl] = float(mask.intrinsics)
        for sl in self.ffwd_sl + self.fbwd_sl:
            a[sl] = float(mask.flow)
        return a


# ── the refinement loop ──────────────────────────────────────────────────────


def oft_refine(frames, prior, config: RefineConfig | None = None):
    """Jointly refine depth, pose, intrinsics, and flow on one snippet.

    frames: sequence of images matching the prior's frame count.
    prior: ProximalPrior, or a bare OutputState which is wrapped with the
        config's proximal weights. An explicit prior's own weights win.
    Returns (refined OutputState, loss trace). The trace has iterations + 1
    entries: the data loss before each step and once more at the final
    state, so trace[0] is the loss of the prior and trace[-1] belongs to
    the returned state. The proximal penalty steers the updates but is not
    part of the trace; it is identically zero at the prior anyway.
    """
    if config is None:
        config = RefineConfig()
    if isinstance(prior, OutputState):
        prior = ProximalPrior(anchor=prior, weights=config.prox_weights)
    if not isinstance(prior, ProximalPrior):
        raise TypeError(f"prior must be a ProximalPrior or OutputState, got {type(prior).__name__}")

    anchor = prior.anchor
    anchor.check_frames(frames)
    mask = select_variables(config)
    lay = _Layout(anchor)
    theta0 = lay.pack_anchor()
    wvec = lay.weight_vector(prior.weights)
    active = lay.active_vector(mask)

    def evaluate(theta, state, want_gradients):
        """Data loss and, if asked, the objective gradient in theta."""
        report = total_loss(state, frames, config.loss_weights,
                            threads=config.threads, want_gradients=want_gradients)
        grad = None
        if want_gradients:
            grad = (lay.pack_gradient(report.gradients, state)
                    + 2.0 * wvec * (theta - theta0))
        return report.total, grad

    theta = theta0
    opt = AdamState.zeros(lay.size)
    trace = np.empty(config.iterations + 1)
    for it in range(config.iterations):
        state = lay.unpack(theta, theta0)
        value, grad = evaluate(theta, state, True)
        if it == 0 and not np.isfinite(value):
            raise InvalidPriorError(f"loss is non-finite at the prior: {value!r}")
        trace[it] = value
        theta, opt = adam_step(theta, grad * active, opt, config)

    final = lay.unpack(theta, theta0)
    value, _ = evaluate(theta, final, False)
    if config.iterations == 0 and not np.isfinite(value):
        raise InvalidPriorError(f"loss is non-finite at the prior: {value!r}")
    trace[config.iterations] = value
    return final, trace


class OutputRefiner(BaseEstimator):
    """Estimator-style wrapper around oft_refine.

    fit(X, y) takes the snippet frames as X and the prior as y (either a
    ProximalPrior or a bare OutputState). After fitting, `state_` holds the
    refined outputs, `trace_` the objective trace, and `n_iter_` the number
    of optimizer steps taken.
    """

    def __init__(self, iterations=50, learning_rate=2e-4, adam_beta1=0.9,
                 adam_beta2=0.999, adam_eps=1e-8, loss_weights=None,
                 prox_weights=None, variables=None, threads=1):
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.adam_beta1 = adam_beta1
        self.adam_beta2 = adam_beta2
        self.adam_eps = adam_eps
        self.loss_weights = loss_weights
        self.prox_weights = prox_weights
        self.variables = variables
        self.threads = threads

    def _config(self) -> RefineConfig:
        return RefineConfig(
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            loss_weights=self.loss_weights if self.loss_weights is not None else LossWeights(),
            prox_weights=self.prox_weights if self.prox_weights is not None else ProxWeights(),
            variables=self.variables if self.variables is not None else VariableMask(),
            threads=self.threads,
        )

    def fit(self, X, y):
        """Refine the prior y against the frames X; returns self."""
        state, trace = oft_refine(X, y, self._config())
        self.state_ = state
        self.trace_ = trace
        self.n_iter_ = len(trace) - 1
        return self

    def fit_transform(self, X, y) -> OutputState:
        return self.fit(X, y).state_
