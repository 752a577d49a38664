"""Centralised sensing over a jointly Gaussian field.

The base station knows the covariance, so it can pick the next device from
second-order statistics alone: either the node with the largest conditional
entropy (for a Gaussian, the largest conditional variance) or the node whose
upload minimises the expected reconstruction error. Reconstruction is the
conditional mean.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._utils import InvalidArgument, argmax_lowest, check_count
from .scenario import COV_JITTER, CollectionState, GaussianField

PIVOT_FLOOR = 1e-12
VAR_FLOOR = 1e-300
NEG_VAR_TOL = 1e-10
_LOG_2PIE = math.log(2 * math.pi * math.e)


def _covariance(field_or_cov):
    cov = getattr(field_or_cov, "cov", field_or_cov)
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise InvalidArgument(f"covariance must be square, got shape {cov.shape}")
    return cov


def _index_list(collected, K):
    idx = [int(i) for i in collected]
    if len(set(idx)) != len(idx):
        raise InvalidArgument("collected indices must be unique")
    for i in idx:
        if not 0 <= i < K:
            raise InvalidArgument(f"index {i} outside 0..{K - 1}")
    return idx


class Conditioner:
    """Cholesky factor of the collected block, grown one index at a time.

    Keeps ``A = L^{-1} cov[C, :]`` so that the conditional covariance of every
    node is ``cov - A.T @ A``. Adding an index costs O(|C| K). If the new pivot
    falls below ``1e-12`` the factor is rebuilt from scratch with a diagonal
    jitter, which keeps coincident nodes from breaking the factorisation.
    """

    def __init__(self, cov, collected=()):
        self.cov = _covariance(cov)
        self.K = self.cov.shape[0]
        self.index = []
        self.chol = np.zeros((0, 0))
        self.A = np.zeros((0, self.K))
        self.jitter = 0.0
        for j in collected:
            self.add(j)

    def add(self, j):
        j = int(j)
        if j in self.index:
            raise InvalidArgument(f"index {j} already conditioned on")
        ell = self.A[:, j]
        pivot = self.cov[j, j] + self.jitter - ell @ ell
        if pivot < PIVOT_FLOOR:
            self.index.append(j)
            self._refactor()
            return
        d = math.sqrt(pivot)
        row = (self.cov[j] - ell @ self.A) / d
        t = len(self.index)
        chol = np.zeros((t + 1, t + 1))
        chol[:t, :t] = self.chol
        chol[t, :t] = ell
        chol[t, t] = d
        self.chol = chol
        self.A = np.vstack([self.A, row])
        self.index.append(j)

    def _refactor(self):
        self.jitter = COV_JITTER
        C = self.index
        block = self.cov[np.ix_(C, C)] + self.jitter * np.eye(len(C))
        self.chol = np.linalg.cholesky(block)
        self.A = solve_triangular(self.chol, self.cov[C], lower=True)

    def variances(self):
        """Conditional variance of every node (collected nodes come out ~0)."""
        var = np.diag(self.cov) - np.einsum("ij,ij->j", self.A, self.A)
        return np.where(var < 0, 0.0, var)

    def covariance(self):
        P = self.cov - self.A.T @ self.A
        return 0.5 * (P + P.T)

    def mean(self, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (len(self.index),):
            raise InvalidArgument(
                f"expected {len(self.index)} values for the collected set, got shape {values.shape}"
            )
        if not self.index:
            return np.zeros(self.K)
        z = solve_triangular(self.chol, values, lower=True)
        xhat = self.A.T @ z
        xhat[self.index] = values
        return xhat


@dataclass
class ConditionalStats:
    """Conditional mean and covariance of the uncollected nodes given the collected ones."""

    base: list
    uncollected: np.ndarray
    cond_mean: np.ndarray
    cond_cov: np.ndarray


def conditional_stats(field, collected, values=None):
    cov = _covariance(field)
    K = cov.shape[0]
    C = _index_list(collected, K)
    cond = Conditioner(cov, C)
    rest = np.setdiff1d(np.arange(K), C)
    P = cond.covariance()[np.ix_(rest, rest)]
    d = np.diag(P).copy()
    if np.any(d < -NEG_VAR_TOL):
        raise FloatingPointError("conditional covariance lost positive semidefiniteness")
    P[np.diag_indices_from(P)] = np.maximum(d, 0.0)
    mean = np.zeros(rest.size) if values is None else cond.mean(values)[rest]
    return ConditionalStats(C, rest, mean, P)


def _check_candidate(cov, collected, k):
    K = cov.shape[0]
    C = _index_list(collected, K)
    k = int(k)
    if not 0 <= k < K:
        raise InvalidArgument(f"index {k} outside 0..{K - 1}")
    if k in C:
        raise InvalidArgument(f"node {k} is already collected")
    return C, k


def conditional_variance(field, collected, k):
    """Variance of node ``k`` given the measurements of ``collected``."""
    cov = _covariance(field)
    C, k = _check_candidate(cov, collected, k)
    return float(Conditioner(cov, C).variances()[k])


def entropy_from_variance(var):
    """Differential entropy (nats) of a Gaussian; the variance is floored at 1e-300."""
    return 0.5 * (_LOG_2PIE + np.log(np.maximum(var, VAR_FLOOR)))


def conditional_entropy(field, collected, k):
    return float(entropy_from_variance(conditional_variance(field, collected, k)))


def _remaining(K, collected):
    mask = np.ones(K, dtype=bool)
    mask[list(collected)] = False
    rest = np.flatnonzero(mask)
    if rest.size == 0:
        raise InvalidArgument("every node is already collected")
    return rest


def _entropy_scores(cond):
    return entropy_from_variance(cond.variances())


def _mse_after(cond):
    """Expected squared reconstruction error after additionally observing each node."""
    P = cond.covariance()
    var = np.diag(P)
    total = float(np.trace(P))
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = np.einsum("ij,ij->j", P, P) / var
    gain = np.where(var > VAR_FLOOR, gain, 0.0)
    return total - gain


def select_next_entropy(field, collected):
    """Uncollected node with the largest conditional entropy (lowest index on ties)."""
    cov = _covariance(field)
    C = _index_list(collected, cov.shape[0])
    rest = _remaining(cov.shape[0], C)
    return argmax_lowest(_entropy_scores(Conditioner(cov, C)), rest)


def select_next_mse(field, collected):
    """Uncollected node minimising the expected squared error of the conditional mean."""
    cov = _covariance(field)
    C = _index_list(collected, cov.shape[0])
    rest = _remaining(cov.shape[0], C)
    return argmax_lowest(-_mse_after(Conditioner(cov, C)), rest)


def mmse_estimate(field, collected, values):
    """Conditional-mean reconstruction of all K measurements.

    Collected entries reproduce ``values`` exactly; with nothing collected the
    prior mean (zero) is returned.
    """
    cov = _covariance(field)
    C = _index_list(collected, cov.shape[0])
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size != len(C):
        raise InvalidArgument(f"{len(C)} collected indices but {values.size} values")
    return Conditioner(cov, C).mean(values)


def entropy_gap(cond, k):
    """``H(remaining | collected) - H(x_k | collected)`` for diagnostics."""
    rest = np.setdiff1d(np.arange(cond.K), cond.index)
    P = cond.covariance()[np.ix_(rest, rest)]
    sign, logdet = np.linalg.slogdet(P + VAR_FLOOR * np.eye(rest.size))
    joint = 0.5 * (rest.size * _LOG_2PIE + (logdet if sign > 0 else math.log(VAR_FLOOR)))
    return joint - float(entropy_from_variance(cond.variances()[k]))


@dataclass
class SelectionTrace:
    """Outcome of a centralised run.

    ``rounds[t]`` lists the nodes polled in round t+1; ``criterion[t]`` is the
    selection criterion at that round's last pick (entropy gap, or expected
    squared error after the pick); ``mse[t]`` is ``||x - x_hat||^2`` after
    the round.
    """

    selector: str
    rounds: list = field(default_factory=list)
    criterion: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    initial_mse: float = 0.0

    @property
    def order(self):
        return [k for r in self.rounds for k in r]

    @property
    def final_mse(self):
        return self.mse[-1] if self.mse else self.initial_mse


SELECTORS = ("entropy", "mse")


def run_centralized_das(field, selector="entropy", rounds=None, L=1):
    """Poll ``L`` devices per round for ``rounds`` rounds, greedily.

    Within a round each pick is conditioned on the earlier picks. For a
    Gaussian field the conditional covariance does not depend on the observed
    values, so conditioning on indices alone is exact.
    """
    if selector not in SELECTORS:
        raise InvalidArgument(f"selector must be one of {SELECTORS}, got {selector!r}")
    K = field.K
    L = check_count("L", L, minimum=1)
    rounds = math.ceil(K / L) if rounds is None else check_count("rounds", rounds)
    if rounds * L > K:
        raise InvalidArgument(f"budget of {rounds} rounds x {L} picks exceeds K={K}")
    x = field.x
    cond = Conditioner(field.cov)
    state = CollectionState(K)
    trace = SelectionTrace(selector, initial_mse=float(x @ x))
    for _ in range(rounds):
        picks = []
        for _ in range(L):
            rest = np.setdiff1d(np.arange(K), cond.index)
            if selector == "entropy":
                k = argmax_lowest(_entropy_scores(cond), rest)
                value = entropy_gap(cond, k)
            else:
                after = _mse_after(cond)
                k = argmax_lowest(-after, rest)
                value = float(after[k])
            cond.add(k)
            picks.append(k)
        state.add_round(picks, x[picks])
        xhat = cond.mean(x[cond.index])
        err = x - xhat
        trace.rounds.append(picks)
        trace.criterion.append(value)
        trace.mse.append(float(err @ err))
    return trace


def hop_distances(trace, field):
    """Euclidean distance between consecutively polled devices."""
    u = field.positions[trace.order]
    return np.linalg.norm(np.diff(u, axis=0), axis=1)


def write_trace_csv(trace, fh, trial=None):
    w = csv.writer(fh, lineterminator="\n")
    head = ["round", "selected_indices", "criterion_value", "mse"]
    w.writerow(head if trial is None else ["trial"] + head)
    for t, (picks, crit, mse) in enumerate(zip(trace.rounds, trace.criterion, trace.mse), start=1):
        row = [t, ";".join(map(str, picks)), repr(float(crit)), repr(float(mse))]
        w.writerow(row if trial is None else [trial] + row)


def write_path_csv(trace, field, fh):
    """Polling path for plotting: round, node, and the node's coordinates."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "k", "x", "y"])
    for t, k in enumerate(trace.order, start=1):
        ux, uy = field.positions[k]
        w.writerow([t, k, repr(float(ux)), repr(float(uy))])


class GaussianDASSelector(BaseEstimator):
    """Estimator wrapper for centralised Gaussian sensing.

    ``fit`` takes the K x K covariance; ``select`` returns the next devices to
    poll; ``predict`` returns the conditional-mean reconstruction.

    Examples
    --------
    >>> from das.scenario import gen_gaussian_field
    >>> f = gen_gaussian_field(20, seed=1)
    >>> sel = GaussianDASSelector(criterion="entropy").fit(f.cov)
    >>> sel.select([])
    [0]
    """

    def __init__(self, criterion="entropy", n_channels=1):
        self.criterion = criterion
        self.n_channels = n_channels

    def fit(self, X, y=None):
        if self.criterion not in SELECTORS:
            raise InvalidArgument(f"criterion must be one of {SELECTORS}, got {self.criterion!r}")
        cov = _covariance(X)
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise InvalidArgument("covariance must be symmetric")
        self.cov_ = cov
        self.n_features_in_ = cov.shape[0]
        return self

    def select(self, collected, n=None):
        check_is_fitted(self)
        n = self.n_channels if n is None else n
        cond = Conditioner(self.cov_, _index_list(collected, self.n_features_in_))
        picks = []
        for _ in range(n):
            rest = np.setdiff1d(np.arange(self.n_features_in_), cond.index)
            if rest.size == 0:
                break
            if self.criterion == "entropy":
                k = argmax_lowest(_entropy_scores(cond), rest)
            else:
                k = argmax_lowest(-_mse_after(cond), rest)
            cond.add(k)
            picks.append(k)
        return picks

    def predict(self, collected, values):
        check_is_fitted(self)
        return mmse_estimate(self.cov_, collected, values)

    def run(self, x, rounds=None):
        """Full polling loop on the realisation ``x``; returns a SelectionTrace."""
        check_is_fitted(self)
        f = GaussianField(np.zeros((self.n_features_in_, 2)), self.cov_, x)
        return run_centralized_das(f, self.criterion, rounds, self.n_channels)
