"""Composite-transformation-constraint graphs and the consistency loss.

A window of N frames yields one constraint per non-consecutive pair
(i, j): the chained consecutive transforms i -> i+1 -> ... -> j must equal
the independently estimated direct transform i -> j. Residuals are squared
L2 distances in exponential coordinates; the total objective is

    total = alpha * sum(constraint residuals) + beta * sum(prior residuals)

Residuals are summed (not averaged) over constraints, so alpha absorbs any
window-size scaling. Gradients with respect to every pair estimate follow
the finite-difference chain-log Jacobian contract from the liegroup module;
an internal batched evaluator keeps the inner training loop fast without
changing the defining arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError
from .liegroup import FD_STEP, as_xi, chain_log, exp_many, log_many

PairKey = Tuple[int, int]


class Source(Enum):
    TEACHER = "teacher"
    MODEL = "model"
    GROUND_TRUTH = "ground_truth"


@dataclass(frozen=True)
class FramePairEstimate:
    """Relative transform estimate between frames i and j, with provenance."""

    i: int
    j: int
    xi: np.ndarray
    source: Source = Source.TEACHER

    def __post_init__(self):
        if self.j <= self.i:
            raise InvalidArgumentError(f"pair ({self.i},{self.j}) needs j > i")
        object.__setattr__(self, "xi", as_xi(self.xi))

    @property
    def key(self) -> PairKey:
        return (self.i, self.j)


@dataclass(frozen=True)
class Window:
    """A run of consecutive frames: start, start+1, ..., start+length-1."""

    start: int
    length: int

    def __post_init__(self):
        if self.length < 2:
            raise InvalidArgumentError("window length must be >= 2")


@dataclass(frozen=True)
class CompositeConstraint:
    """chain of consecutive pairs (i,i+1)..(j-1,j) vs the direct pair (i,j)."""

    chain: Tuple[PairKey, ...]
    direct: PairKey

    def __post_init__(self):
        if len(self.chain) < 2:
            raise InvalidArgumentError("constraint chain needs >= 2 links")
        i, j = self.direct
        expect = tuple((k, k + 1) for k in range(i, j))
        if tuple(self.chain) != expect:
            raise InvalidArgumentError(
                f"chain {self.chain} does not span direct pair {self.direct}")
        object.__setattr__(self, "chain", tuple(self.chain))


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 3.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidArgumentError("loss weights must be non-negative")
        if self.alpha == 0 and self.beta == 0:
            raise InvalidArgumentError("loss weights cannot both be zero")


@dataclass
class LossBreakdown:
    ctc: float
    reg: float
    total: float
    per_constraint: List[float] = field(default_factory=list)


def enumerate_constraints(window: Window,
                          max_span: Optional[int] = None) -> List[CompositeConstraint]:
    """All composite constraints inside a window, ordered by (i, j).

    One constraint per pair with span j - i >= 2; a window of N frames has
    (N-1)(N-2)/2 of them. `max_span` caps j - i to bound cost on long
    windows. Windows shorter than 3 frames admit no constraint.
    """
    last = window.start + window.length - 1
    out: List[CompositeConstraint] = []
    for i in range(window.start, last - 1):
        top = last if max_span is None else min(last, i + max_span)
        for j in range(i + 2, top + 1):
            chain = tuple((k, k + 1) for k in range(i, j))
            out.append(CompositeConstraint(chain=chain, direct=(i, j)))
    return out


def _weight6(weight) -> np.ndarray:
    if weight is None:
        return np.ones(6)
    w = np.asarray(weight, dtype=float)
    if w.shape != (6,) or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidArgumentError("diagonal weight must be a non-negative 6-vector")
    return w


def ctc_residual(chain_xis: Sequence, direct_xi, weight=None) -> float:
    """Squared L2 gap between the direct estimate and the chained one."""
    d = as_xi(direct_xi) - chain_log(chain_xis)
    return float(np.dot(_weight6(weight), d * d))


def reg_residual(xi, xi_hat, weight=None) -> float:
    """Squared L2 distance of an estimate from its prior."""
    d = as_xi(xi) - as_xi(xi_hat)
    return float(np.dot(_weight6(weight), d * d))


def _as_xi_map(estimates: Mapping) -> Dict[PairKey, np.ndarray]:
    out = {}
    for k, v in estimates.items():
        out[k] = as_xi(getattr(v, "xi", v))
    return out


def _check_keys(xi_map, priors, constraints) -> None:
    for c in constraints:
        for key in (*c.chain, c.direct):
            if key not in xi_map:
                raise ConfigurationError(f"no estimate for pair {key}")
    for key in xi_map:
        if key not in priors:
            raise ConfigurationError(f"no prior for pair {key}")


def _evaluate(xi_map: Mapping[PairKey, np.ndarray],
              priors: Mapping[PairKey, np.ndarray],
              constraints: Sequence[CompositeConstraint],
              weights: LossWeights,
              weight6: np.ndarray,
              want_grad: bool):
    """Shared batched evaluator for total_loss and loss_gradient.

    Every constraint chain is a consecutive run, so run products over any
    frame range can be tabulated per span with one batched matmul per span
    length. Composites, prefixes and suffixes are gathers from that table,
    and all finite-difference perturbations go through a single batched
    exp/log pipeline.
    """
    keys = sorted(xi_map)
    idx = {k: n for n, k in enumerate(keys)}
    X = np.stack([xi_map[k] for k in keys]) if keys else np.zeros((0, 6))
    P = np.stack([np.asarray(priors[k], dtype=float) for k in keys]) if keys else X

    diff = X - P
    reg = float(np.sum((diff * diff) @ weight6))

    grad = 2.0 * weights.beta * diff * weight6 if want_grad else None

    per_constraint: List[float] = []
    ctc = 0.0
    if constraints:
        E = exp_many(X)  # (K, 4, 4)

        fmin = min(c.direct[0] for c in constraints)
        fmax = max(c.direct[1] for c in constraints)
        span_max = max(c.direct[1] - c.direct[0] for c in constraints)
        n_slots = fmax - fmin  # slot p holds the transform for pair (fmin+p, fmin+p+1)
        slot_rows = np.array(
            [idx.get((fmin + p, fmin + p + 1), -1) for p in range(n_slots)])
        C = np.broadcast_to(np.eye(4), (n_slots, 4, 4)).copy()
        present = slot_rows >= 0
        C[present] = E[slot_rows[present]]

        # run[s][p] = product of slots p .. p+s-1 (left-associated)
        run = {1: C}
        for s in range(2, span_max + 1):
            run[s] = run[s - 1][: n_slots - s + 1] @ C[s - 1:]

        by_span: Dict[int, List[int]] = {}
        for n, c in enumerate(constraints):
            by_span.setdefault(c.direct[1] - c.direct[0], []).append(n)

        composites = np.empty((len(constraints), 4, 4))
        starts_by_span = {}
        for s, members in by_span.items():
            starts = np.array([constraints[n].direct[0] - fmin for n in members])
            starts_by_span[s] = (np.array(members), starts)
            composites[members] = run[s][starts]

        xi_c = log_many(composites)
        xi_d = X[[idx[c.direct] for c in constraints]]
        err = xi_d - xi_c
        werr = err * weight6
        per = np.einsum("ni,ni->n", err, werr)
        per_constraint = [float(r) for r in per]
        ctc = float(np.sum(per))

        if want_grad and weights.alpha != 0.0:
            direct_rows = np.array([idx[c.direct] for c in constraints])
            np.add.at(grad, direct_rows, 2.0 * weights.alpha * werr)

            # one flat batch of central-difference chain evaluations;
            # entry m perturbs the chain link at (constraint n, position pos)
            M = sum(s * len(members) for s, (members, _) in starts_by_span.items())
            A = np.empty((M, 4, 4))
            B = np.empty((M, 4, 4))
            m_rows = np.empty(M, dtype=int)
            m_werr = np.empty((M, 6))
            m0 = 0
            for s in sorted(starts_by_span):
                members, starts = starts_by_span[s]
                g = len(members)
                for pos in range(s):
                    sl = slice(m0, m0 + g)
                    A[sl] = np.eye(4) if pos == 0 else run[pos][starts]
                    blen = s - pos - 1
                    B[sl] = np.eye(4) if blen == 0 else run[blen][starts + pos + 1]
                    m_rows[sl] = slot_rows[starts + pos]
                    m_werr[sl] = werr[members]
                    m0 += g

            base = X[m_rows]                     # (M, 6)
            steps = FD_STEP * np.eye(6)
            XP = base[:, None, :] + steps[None]
            XM = base[:, None, :] - steps[None]
            A4 = A[:, None]
            B4 = B[:, None]
            LP = log_many(A4 @ exp_many(XP) @ B4)  # (M, 6, 6)
            LM = log_many(A4 @ exp_many(XM) @ B4)
            JT = (LP - LM) / (2.0 * FD_STEP)       # JT[m, j, i] = d xi_c[i] / d xi_k[j]
            contrib = -2.0 * weights.alpha * np.einsum("mji,mi->mj", JT, m_werr)
            np.add.at(grad, m_rows, contrib)

    total = weights.alpha * ctc + weights.beta * reg
    breakdown = LossBreakdown(ctc=ctc, reg=reg, total=total,
                              per_constraint=per_constraint)
    if not want_grad:
        return breakdown, None
    return breakdown, {k: grad[idx[k]] for k in keys}


def total_loss(estimates: Mapping[PairKey, FramePairEstimate],
               priors: Mapping[PairKey, np.ndarray],
               constraints: Sequence[CompositeConstraint],
               weights: LossWeights,
               weight=None) -> LossBreakdown:
    """Weighted sum of constraint and prior residuals over the estimate map."""
    xi_map = _as_xi_map(estimates)
    _check_keys(xi_map, priors, constraints)
    breakdown, _ = _evaluate(xi_map, priors, constraints, weights,
                             _weight6(weight), want_grad=False)
    return breakdown


def loss_gradient(estimates: Mapping[PairKey, FramePairEstimate],
                  priors: Mapping[PairKey, np.ndarray],
                  constraints: Sequence[CompositeConstraint],
                  weights: LossWeights,
                  weight=None) -> Dict[PairKey, np.ndarray]:
    """Gradient of total_loss with respect to every estimate's xi."""
    xi_map = _as_xi_map(estimates)
    _check_keys(xi_map, priors, constraints)
    _, grad = _evaluate(xi_map, priors, constraints, weights,
                        _weight6(weight), want_grad=True)
    return grad
