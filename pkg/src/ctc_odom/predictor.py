"""Trainable estimate models and the two-phase curriculum trainer.

Two stand-ins with very different capacity share one training loop:

    FreePoseTable   one free 6-vector per estimated pair (direct pairs are
                    independent parameters from consecutive ones), which
                    isolates the consistency-loss mechanics;
    TinyDenoiser    a one-hidden-layer ReLU map from a teacher estimate to
                    a corrected estimate, whose hidden-unit dropout gives
                    the uncertainty sampler a real stochastic substrate.

Training minimizes beta*reg during the pretraining phase and the full
weighted objective during the sequential phase, where sliding windows grow
from window_start to window_end linearly over the epochs and the learning
rate halves every decay_every epochs. Runs are bit-reproducible for a
fixed seed on a single thread.

Dropout uses the inverted convention: surviving units are scaled by
1/(1-gamma) at sampling time, so a full-mask forward pass needs no
rescaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constraints import LossWeights, PairKey, Window, _evaluate, enumerate_constraints
from .errors import ConfigurationError, InvalidArgumentError
from .liegroup import as_xi
from .teacher import TeacherSet, missing_pairs


@dataclass
class FreePoseTable:
    """Directly optimized pair estimates, one row per pair key."""

    keys: Tuple[PairKey, ...]
    table: np.ndarray
    steps_trained: int = 0
    stochastic = False

    def __post_init__(self):
        self.keys = tuple(self.keys)
        self.table = np.asarray(self.table, dtype=float)
        if self.table.shape != (len(self.keys), 6):
            raise InvalidArgumentError(
                f"table shape {self.table.shape} does not match {len(self.keys)} keys")
        self._index = {k: n for n, k in enumerate(self.keys)}

    @classmethod
    def zeros(cls, keys: Sequence[PairKey]) -> "FreePoseTable":
        keys = tuple(sorted(keys))
        return cls(keys=keys, table=np.zeros((len(keys), 6)))

    def rows(self, keys: Sequence[PairKey]) -> np.ndarray:
        return np.array([self._index[k] for k in keys])

    def estimates(self) -> Dict[PairKey, np.ndarray]:
        return {k: self.table[n].copy() for n, k in enumerate(self.keys)}

    def params(self) -> Dict[str, np.ndarray]:
        return {"table": self.table}

    def load_params(self, params: Dict[str, np.ndarray]) -> None:
        self.table = params["table"]

    def to_state(self) -> dict:
        return {"keys": [list(k) for k in self.keys],
                "table": self.table.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "FreePoseTable":
        return cls(keys=tuple(tuple(k) for k in state["keys"]),
                   table=np.array(state["table"]))


@dataclass
class TinyDenoiser:
    """One-hidden-layer ReLU corrector with hidden-unit dropout."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    gamma: float = 0.7
    steps_trained: int = 0
    stochastic = True

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=float)
        self.b1 = np.asarray(self.b1, dtype=float)
        self.W2 = np.asarray(self.W2, dtype=float)
        self.b2 = np.asarray(self.b2, dtype=float)
        H = self.W1.shape[0]
        if (self.W1.shape != (H, 6) or self.b1.shape != (H,)
                or self.W2.shape != (6, H) or self.b2.shape != (6,)):
            raise InvalidArgumentError("inconsistent layer shapes")
        if H < 1:
            raise InvalidArgumentError("hidden width must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidArgumentError("dropout fraction must be in [0, 1)")

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def create(cls, hidden: int = 64, gamma: float = 0.7,
               seed: int = 0, input_scale: float = 0.3) -> "TinyDenoiser":
        """Pass-through init spread over all units, plus silent gate units.

        Most hidden units come in +/- pairs along random directions u, so
        relu(u.x) - relu(-u.x) = u.x, and the output layer is the left
        inverse of the direction matrix: the net starts as an exact
        identity. Spreading the identity over every unit keeps per-unit
        contributions (and hence dropout noise) small even at high drop
        fractions.

        The remaining pairs are saturation gates: units relu(+/-u.x - tau)
        with thresholds tau spread over [1, 2.5] * input_scale that only
        fire for unusually large inputs. Their output columns start at
        zero, so the init is still an exact identity, but training can
        recruit them to clamp implausible estimates without disturbing the
        pass-through of normal ones.
        """
        if hidden < 12 or hidden % 2 != 0:
            raise InvalidArgumentError("hidden width must be even and >= 12")
        if input_scale <= 0:
            raise InvalidArgumentError("input_scale must be positive")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
        n_pairs = hidden // 2
        n_gate = max(0, min(n_pairs - 6, int(round(0.4 * n_pairs))))
        n_id = n_pairs - n_gate

        U = rng.standard_normal((n_id, 6))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        P = np.linalg.pinv(U)  # P @ U = I6

        G = rng.standard_normal((n_gate, 6))
        G /= np.linalg.norm(G, axis=1, keepdims=True)
        tau = input_scale * rng.uniform(1.0, 2.5, size=n_gate)

        W1 = np.vstack([U, G, -U, -G])
        b1 = np.concatenate([np.zeros(n_id), -tau, np.zeros(n_id), -tau])
        W2 = np.hstack([P, np.zeros((6, n_gate)), -P, np.zeros((6, n_gate))])
        return cls(W1=W1, b1=b1, W2=W2, b2=np.zeros(6), gamma=gamma)

    def forward(self, X: np.ndarray, masks: Optional[np.ndarray] = None,
                gamma: Optional[float] = None):
        """Batched forward pass; returns (Y, cache) for backprop."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        H1 = X @ self.W1.T + self.b1
        A = np.maximum(H1, 0.0)
        if masks is not None:
            g = self.gamma if gamma is None else gamma
            Z = A * masks / (1.0 - g)
        else:
            Z = A
        Y = Z @ self.W2.T + self.b2
        return Y, (X, H1, Z, masks, gamma)

    def backward(self, G: np.ndarray, cache) -> Dict[str, np.ndarray]:
        """Parameter gradients given dLoss/dY for the cached forward pass."""
        X, H1, Z, masks, gamma = cache
        dW2 = G.T @ Z
        db2 = G.sum(axis=0)
        dZ = G @ self.W2
        if masks is not None:
            g = self.gamma if gamma is None else gamma
            dA = dZ * masks / (1.0 - g)
        else:
            dA = dZ
        dH1 = dA * (H1 > 0)
        return {"W1": dH1.T @ X, "b1": dH1.sum(axis=0),
                "W2": dW2, "b2": db2}

    def params(self) -> Dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def load_params(self, params: Dict[str, np.ndarray]) -> None:
        self.W1 = params["W1"]
        self.b1 = params["b1"]
        self.W2 = params["W2"]
        self.b2 = params["b2"]

    def to_state(self) -> dict:
        return {"W1": self.W1.tolist(), "b1": self.b1.tolist(),
                "W2": self.W2.tolist(), "b2": self.b2.tolist(),
                "gamma": self.gamma}

    @classmethod
    def from_state(cls, state: dict) -> "TinyDenoiser":
        return cls(W1=np.array(state["W1"]), b1=np.array(state["b1"]),
                   W2=np.array(state["W2"]), b2=np.array(state["b2"]),
                   gamma=float(state["gamma"]))


def predict(model: TinyDenoiser, xi_in, dropout_mask=None,
            gamma: Optional[float] = None) -> np.ndarray:
    """Single forward pass; a mask zeroes hidden units and the survivors
    are scaled by 1/(1-gamma) to keep the expectation unchanged."""
    xi = as_xi(xi_in)
    if dropout_mask is not None:
        dropout_mask = np.asarray(dropout_mask)
        if dropout_mask.shape != (model.hidden,):
            raise InvalidArgumentError(
                f"mask shape {dropout_mask.shape} does not match hidden width")
        dropout_mask = dropout_mask[None]
    Y, _ = model.forward(xi[None], masks=dropout_mask, gamma=gamma)
    return Y[0]


def sample_predictions(model: TinyDenoiser, xi_in, K: int, gamma: float,
                       seed: int = 0) -> np.ndarray:
    """K stochastic forward passes with independent Bernoulli(1-gamma)
    unit-retention masks; deterministic for a fixed seed."""
    if K < 2:
        raise InvalidArgumentError("need K >= 2 samples")
    if not 0.0 < gamma < 1.0:
        raise InvalidArgumentError("gamma must be in (0, 1)")
    xi = as_xi(xi_in)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    masks = rng.random((K, model.hidden)) < (1.0 - gamma)
    Y, _ = model.forward(np.tile(xi, (K, 1)), masks=masks, gamma=gamma)
    return Y


@dataclass
class AdamState:
    """First/second moment accumulators for a named parameter set."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Dict[str, np.ndarray], lr: float,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: AdamState, params: Dict[str, np.ndarray],
              grads: Dict[str, np.ndarray]):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise InvalidArgumentError("parameter, gradient and state keys differ")
    t = state.t + 1
    new_params: Dict[str, np.ndarray] = {}
    m: Dict[str, np.ndarray] = {}
    v: Dict[str, np.ndarray] = {}
    for k in params:
        g = np.asarray(grads[k], dtype=float)
        if g.shape != params[k].shape:
            raise InvalidArgumentError(
                f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k!r}")
        m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = m[k] / (1.0 - state.beta1 ** t)
        v_hat = v[k] / (1.0 - state.beta2 ** t)
        new_params[k] = params[k] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, t=t, m=m, v=v)


@dataclass(frozen=True)
class TrainSchedule:
    pretrain_epochs: int = 500
    seq_epochs: int = 40
    window_start: int = 3
    window_end: int = 18
    lr: float = 1e-4
    lr_decay: float = 0.5
    decay_every: int = 5
    alpha: float = 1.0
    beta: float = 3.0
    max_span: int = 5
    window_stride: Optional[int] = None

    def __post_init__(self):
        if self.window_start < 2 or self.window_start > self.window_end:
            raise InvalidArgumentError("need 2 <= window_start <= window_end")
        if not 0.0 < self.lr_decay <= 1.0:
            raise InvalidArgumentError("lr_decay must be in (0, 1]")
        if self.decay_every < 1 or self.pretrain_epochs < 0 or self.seq_epochs < 0:
            raise InvalidArgumentError("epoch counts must be sensible")
        if self.lr <= 0:
            raise InvalidArgumentError("learning rate must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.decay_every)

    def window_length_at(self, epoch: int, n_frames: Optional[int] = None) -> int:
        if self.seq_epochs <= 1:
            win = self.window_end
        else:
            frac = epoch / (self.seq_epochs - 1)
            win = self.window_start + int(
                round((self.window_end - self.window_start) * frac))
        if n_frames is not None:
            win = min(win, n_frames)
        return win


@dataclass
class EpochStats:
    """Per-epoch monitoring row; losses are means per constraint/per pair
    so values stay comparable as the window curriculum grows."""

    epoch: int
    phase: str
    window_len: int
    lr: float
    loss_total: float
    loss_ctc: float
    loss_reg: float


_ONES6 = np.ones(6)


def _teacher_arrays(teacher: TeacherSet):
    keys = sorted(teacher.estimates)
    XHAT = np.stack([teacher.estimates[k].xi for k in keys])
    return keys, XHAT


def pretrain(model, teacher: TeacherSet, schedule: TrainSchedule,
             seed: int = 0) -> List[EpochStats]:
    """Phase one: fit every estimate to its teacher prior (reg term only)."""
    if schedule.beta == 0:
        raise InvalidArgumentError(
            "pretraining minimizes beta * reg; beta = 0 is degenerate")
    keys, XHAT = _teacher_arrays(teacher)
    if isinstance(model, FreePoseTable) and set(model.keys) != set(keys):
        raise ConfigurationError("table keys do not match the teacher pairs")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    params = model.params()
    state = AdamState.create(params, schedule.lr)
    history: List[EpochStats] = []
    for epoch in range(schedule.pretrain_epochs):
        state.lr = schedule.lr_at(epoch)
        if isinstance(model, TinyDenoiser):
            masks = None
            if model.gamma > 0:
                masks = rng.random((len(keys), model.hidden)) < (1.0 - model.gamma)
            Y, cache = model.forward(XHAT, masks=masks)
            G = 2.0 * schedule.beta * (Y - XHAT)
            grads = model.backward(G, cache)
            reg = float(np.sum((Y - XHAT) ** 2))
        else:
            T = params["table"]
            grads = {"table": 2.0 * schedule.beta * (T - XHAT)}
            reg = float(np.sum((T - XHAT) ** 2))
        params, state = adam_step(state, params, grads)
        model.load_params(params)
        reg_norm = reg / len(keys)
        history.append(EpochStats(epoch, "pretrain", 0, state.lr,
                                  schedule.beta * reg_norm, 0.0, reg_norm))
    model.steps_trained += max(1, schedule.pretrain_epochs)
    return history


def _window_keys(start: int, length: int, max_span: int) -> List[PairKey]:
    last = start + length - 1
    out = []
    for s in range(1, min(max_span, length - 1) + 1):
        out.extend((i, i + s) for i in range(start, last - s + 1))
    return sorted(out)


def demanded_pairs(n_frames: int, window_end: int, max_span: int) -> List[PairKey]:
    """Every pair key the sequential phase will reference."""
    span_cap = min(max_span, window_end - 1)
    return [(i, i + s) for s in range(1, span_cap + 1)
            for i in range(n_frames - s)]


def train_sequential(model, teacher: TeacherSet, schedule: TrainSchedule,
                     seed: int = 0, allow_cold_start: bool = False):
    """Phase two: slide growing windows, step Adam on the full objective.

    Returns (history, final_estimates); the model is updated in place.
    """
    if model.steps_trained == 0 and not allow_cold_start:
        raise ConfigurationError(
            "model has not been pretrained (pass allow_cold_start=True to override)")
    keys, XHAT = _teacher_arrays(teacher)
    if isinstance(model, FreePoseTable) and set(model.keys) != set(keys):
        raise ConfigurationError("table keys do not match the teacher pairs")
    n = teacher.n_frames()
    win_cap = min(schedule.window_end, n)
    missing = missing_pairs(teacher, demanded_pairs(n, win_cap, schedule.max_span))
    if missing:
        raise ConfigurationError(
            f"teacher set lacks {len(missing)} demanded pairs, e.g. {missing[:5]}")

    weights = LossWeights(schedule.alpha, schedule.beta)
    key_row = {k: i for i, k in enumerate(keys)}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    params = model.params()
    state = AdamState.create(params, schedule.lr)
    history: List[EpochStats] = []

    for epoch in range(schedule.seq_epochs):
        win = max(2, schedule.window_length_at(epoch, win_cap))
        state.lr = schedule.lr_at(epoch)
        stride = schedule.window_stride or max(1, win // 2)
        starts = list(range(0, n - win + 1, stride))
        if starts[-1] != n - win:
            starts.append(n - win)
        starts = [starts[i] for i in rng.permutation(len(starts))]

        e_tot = e_ctc = e_reg = 0.0
        for p in starts:
            wkeys = _window_keys(p, win, schedule.max_span)
            rows = np.array([key_row[k] for k in wkeys])
            constraints = enumerate_constraints(Window(p, win), schedule.max_span)
            prior_win = {k: XHAT[key_row[k]] for k in wkeys}

            if isinstance(model, TinyDenoiser):
                masks = None
                if model.gamma > 0:
                    # one mask per window step, shared by all of its pairs:
                    # consistency residuals then compare estimates produced by
                    # the same thinned network, so dropout noise largely
                    # cancels inside the constraint instead of acting as a
                    # weight penalty
                    mask_row = rng.random(model.hidden) < (1.0 - model.gamma)
                    masks = np.tile(mask_row, (len(wkeys), 1))
                Y, cache = model.forward(XHAT[rows], masks=masks)
                xi_win = {k: Y[a] for a, k in enumerate(wkeys)}
            else:
                xi_win = {k: params["table"][key_row[k]] for k in wkeys}

            breakdown, grad = _evaluate(xi_win, prior_win, constraints, weights,
                                        _ONES6, want_grad=True)
            G = np.stack([grad[k] for k in wkeys])
            if isinstance(model, TinyDenoiser):
                grads = model.backward(G, cache)
            else:
                gt_full = np.zeros_like(params["table"])
                gt_full[rows] = G
                grads = {"table": gt_full}
            params, state = adam_step(state, params, grads)
            model.load_params(params)

            n_c = max(1, len(constraints))
            e_ctc += breakdown.ctc / n_c
            e_reg += breakdown.reg / len(wkeys)
            e_tot += (weights.alpha * breakdown.ctc / n_c
                      + weights.beta * breakdown.reg / len(wkeys))
        n_w = len(starts)
        history.append(EpochStats(epoch, "sequential", win, state.lr,
                                  e_tot / n_w, e_ctc / n_w, e_reg / n_w))

    model.steps_trained += max(1, schedule.seq_epochs)
    return history, final_estimates(model, teacher)


def final_estimates(model, teacher: TeacherSet) -> Dict[PairKey, np.ndarray]:
    """Deterministic (dropout-free) refined estimate for every teacher pair."""
    keys, XHAT = _teacher_arrays(teacher)
    if isinstance(model, TinyDenoiser):
        Y, _ = model.forward(XHAT)
        return {k: Y[n].copy() for n, k in enumerate(keys)}
    est = model.estimates()
    return {k: est[k] for k in keys}
