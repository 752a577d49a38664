"""Sensing for sparse sources: greedy recovery and correlation-aware polling.

Measurements follow ``x = B s`` with an S-sparse ``s``. After every round the
base station recovers ``s`` from the collected rows and polls next the nodes
whose predicted measurement is large relative to their correlation with
nodes already collected.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._utils import (
    STREAM_DOWNLINK,
    STREAM_POLICY,
    InvalidArgument,
    argmax_lowest,
    check_count,
    check_probability,
    rng_stream,
)
from .scenario import CollectionState

DEN_FLOOR = 1e-12
REL_TOL = 1e-9
MAX_SOLVES = 256
POLICIES = ("DAS", "RRS")


@dataclass
class RecoveryState:
    """Sparse estimate after one recovery.

    ``residual_path`` holds ``||w - Psi s||`` after each greedy step of the
    returned support (nested supports, so it never increases). ``v`` is the
    predicted measurement vector ``B @ s_hat`` when a dictionary was supplied.
    """

    s_hat: np.ndarray
    support: list
    residual_norm: float
    residual_path: list = field(default_factory=list)
    n_solves: int = 0
    v: np.ndarray | None = None

    def predict(self, B):
        self.v = np.asarray(B, dtype=float) @ self.s_hat
        return self.v


class _SupportSolver:
    """Least-squares fits on column subsets, memoised and counted."""

    def __init__(self, Psi, w):
        self.Psi = Psi
        self.w = w
        self.cache = {}

    def __call__(self, support):
        key = frozenset(support)
        hit = self.cache.get(key)
        if hit is None:
            cols = sorted(key)
            coef, *_ = np.linalg.lstsq(self.Psi[:, cols], self.w, rcond=None)
            r = self.w - self.Psi[:, cols] @ coef
            hit = (dict(zip(cols, coef)), r, float(np.linalg.norm(r)))
            self.cache[key] = hit
        return hit

    @property
    def n_solves(self):
        return len(self.cache)


def _ranked_columns(Psi, norms, r, support):
    """Columns outside ``support`` ordered by normalised correlation with ``r``.

    Zero columns (norm stored as inf) and columns orthogonal to ``r`` are left out.
    """
    c = np.abs(Psi.T @ r) / norms
    c[list(support)] = 0.0
    order = np.argsort(-c, kind="stable")
    return [int(j) for j in order if c[j] > 0]


def _path_residuals(solve, support):
    return [solve(support[: i + 1])[2] for i in range(len(support))]


class _Stop(Exception):
    pass


def _greedy_search(solve, Psi, norms, depth, tol, budget):
    """Limited-discrepancy search over greedy support paths.

    Level 0 is plain orthogonal matching pursuit; level d allows up to d picks
    that are not the best-ranked column. Levels run in order until a support
    meets ``tol`` or ``budget`` distinct least-squares fits are spent. Returns
    the lowest-residual support seen.
    """
    best = [[], float(np.linalg.norm(solve.w))]

    def visit(support, r, res, disc):
        if res <= tol:
            best[:] = [support, res]
            raise _Stop
        ranked = _ranked_columns(Psi, norms, r, support) if len(support) < depth else []
        if not ranked:
            if res < best[1]:
                best[:] = [support, res]
            return
        for rank, j in enumerate(ranked):
            if rank > 0 and disc == 0:
                break
            cand = support + [j]
            if solve.n_solves >= budget and frozenset(cand) not in solve.cache:
                raise _Stop
            _, r2, res2 = solve(cand)
            visit(cand, r2, res2, disc - (rank > 0))

    wnorm = best[1]
    try:
        for level in range(depth + 1):
            visit([], solve.w, wnorm, level)
    except _Stop:
        pass
    return best[0]


def sparse_recover(Psi, w, S_max, tol=None, max_solves=MAX_SOLVES):
    """Recover a sparse ``s`` with ``w = Psi s`` by greedy orthogonal matching.

    Each step adds the column most correlated with the residual and re-solves
    least squares on the support, stopping once the residual is within ``tol``
    (default ``1e-9 * ||w||``) or the support holds ``S_max`` columns. If that
    single greedy path misses the tolerance, two fallbacks run:

    * with ``N >= M`` and a full-column-rank ``Psi``, the ``S_max`` largest
      entries of the unique least-squares solution are tried as the support;
    * otherwise near-greedy paths that swap a few picks for lower-ranked
      columns are searched, within ``max_solves`` least-squares fits.

    The support never exceeds ``min(S_max, N)``. Rank-deficient supports use the
    minimum-norm least-squares solution.
    """
    Psi = np.asarray(Psi, dtype=float)
    w = np.asarray(w, dtype=float).reshape(-1)
    if Psi.ndim != 2:
        raise InvalidArgument(f"Psi must be 2-D, got shape {Psi.shape}")
    N, M = Psi.shape
    if w.size != N:
        raise InvalidArgument(f"w has {w.size} entries but Psi has {N} rows")
    S_max = check_count("S_max", S_max, minimum=0)
    if S_max > M:
        raise InvalidArgument(f"S_max={S_max} exceeds the number of columns M={M}")
    wnorm = float(np.linalg.norm(w))
    if tol is None:
        tol = REL_TOL * wnorm
    if N == 0 or wnorm <= tol or S_max == 0:
        return RecoveryState(np.zeros(M), [], wnorm, [], 0)

    depth = min(S_max, N)
    norms = np.linalg.norm(Psi, axis=0)
    norms = np.where(norms > 0, norms, np.inf)
    solve = _SupportSolver(Psi, w)

    # plain greedy path
    support, r, res = [], w, wnorm
    while len(support) < depth and res > tol:
        ranked = _ranked_columns(Psi, norms, r, support)
        if not ranked:
            break
        support.append(ranked[0])
        _, r, res = solve(support)

    if res > tol and N >= M and np.linalg.matrix_rank(Psi) == M:
        z, *_ = np.linalg.lstsq(Psi, w, rcond=None)
        top = [int(j) for j in np.argsort(-np.abs(z), kind="stable")[:depth]]
        if solve(top)[2] < res:
            support, res = top, solve(top)[2]

    if res > tol and max_solves > solve.n_solves:
        alt = _greedy_search(solve, Psi, norms, depth, tol, max_solves)
        if alt and solve(alt)[2] < res:
            support, res = alt, solve(alt)[2]

    s_hat = np.zeros(M)
    if support:
        coef, _, res = solve(support)
        for j, c in coef.items():
            s_hat[j] = c
    return RecoveryState(s_hat, list(support), res, _path_residuals(solve, support), solve.n_solves)


class SparseRecovery(BaseEstimator, RegressorMixin):
    """Estimator wrapper around :func:`sparse_recover`.

    ``fit(Psi, w)`` recovers the coefficients; ``predict(B)`` maps them through
    a dictionary, e.g. the full K x M matrix to predict every node.
    """

    def __init__(self, n_nonzero_coefs=None, rel_tol=REL_TOL, max_solves=MAX_SOLVES):
        self.n_nonzero_coefs = n_nonzero_coefs
        self.rel_tol = rel_tol
        self.max_solves = max_solves

    def fit(self, X, y):
        X = check_array(X, ensure_min_samples=1)
        y = np.asarray(y, dtype=float).reshape(-1)
        S = X.shape[1] if self.n_nonzero_coefs is None else self.n_nonzero_coefs
        state = sparse_recover(X, y, S, self.rel_tol * np.linalg.norm(y), self.max_solves)
        self.coef_ = state.s_hat
        self.support_ = np.array(sorted(state.support), dtype=int)
        self.residual_norm_ = state.residual_norm
        self.residual_path_ = state.residual_path
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X)
        return X @ self.coef_


def _uncollected(K, collected):
    mask = np.ones(K, dtype=bool)
    mask[list(collected)] = False
    return np.flatnonzero(mask)


def select_next_sparse_naive(scene, state, collected):
    """Uncollected node with the largest predicted amplitude ``|b_k^T s_hat|^2``."""
    rest = _uncollected(scene.K, collected)
    if rest.size == 0:
        raise InvalidArgument("every node is already collected")
    num = (scene.B @ state.s_hat) ** 2
    return argmax_lowest(num, rest)


def select_next_sparse(scene, state, collected, L=1):
    """Pick ``L`` nodes by the max-min correlation-normalised criterion.

    ``score(k) = min_i |b_k^T s_hat|^2 / max(|b_k^T b_i|^2, 1e-12)`` over the
    collected ``i``; each pick joins the inner set before the next one. With
    nothing collected yet the criterion is undefined and the naive amplitude
    rule is used instead.
    """
    L = check_count("L", L, minimum=1)
    collected = [int(i) for i in collected]
    B = scene.B
    rest = _uncollected(scene.K, collected)
    if rest.size < L:
        raise InvalidArgument(f"only {rest.size} uncollected nodes for {L} picks")
    num = (B @ state.s_hat) ** 2
    avail = np.zeros(scene.K, dtype=bool)
    avail[rest] = True
    picks = []
    if not collected:
        for _ in range(L):
            k = argmax_lowest(num, np.flatnonzero(avail))
            picks.append(k)
            avail[k] = False
        return picks
    corr = np.max((B @ B[collected].T) ** 2, axis=1)
    for _ in range(L):
        score = num / np.maximum(corr, DEN_FLOOR)
        k = argmax_lowest(score, np.flatnonzero(avail))
        picks.append(k)
        avail[k] = False
        corr = np.maximum(corr, (B @ B[k]) ** 2)
    return picks


def apply_downlink_errors(selected, collected, error_prob, rng, K):
    """Model misdelivered polling requests.

    Each selected slot survives with probability ``1 - error_prob``; an
    errored slot is served by a node drawn uniformly, without replacement,
    from nodes neither selected nor collected. When no such node is left the
    slot is dropped.
    """
    error_prob = check_probability("error_prob", error_prob)
    selected = [int(k) for k in selected]
    u = rng.random(len(selected))
    blocked = set(selected) | {int(i) for i in collected}
    pool = [k for k in range(K) if k not in blocked]
    pool = list(rng.permutation(pool)) if pool else []
    out = []
    for k, ui in zip(selected, u):
        if ui >= error_prob:
            out.append(k)
        elif pool:
            out.append(int(pool.pop()))
    return out


@dataclass
class SparseTrajectory:
    """Per-round squared error ``||x - v(t)||^2`` of one sparse run."""

    policy: str
    error_prob: float
    mse: list = field(default_factory=list)
    uploads: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    signal_energy: float = 0.0
    state: RecoveryState | None = None

    def rounds_to(self, rel_threshold):
        """First round whose error is within ``rel_threshold * ||x||^2`` (inf if never)."""
        for t, e in enumerate(self.mse, start=1):
            if e <= rel_threshold * self.signal_energy:
                return t
        return math.inf


def recover_scene(scene, collected, S_max=None, max_solves=MAX_SOLVES):
    """Recover ``s`` from the rows of ``scene`` indexed by ``collected``."""
    idx = list(collected)
    S_max = scene.S if S_max is None else S_max
    w = scene.x[idx]
    state = sparse_recover(scene.B[idx], w, S_max, max_solves=max_solves)
    state.predict(scene.B)
    return state


def run_sparse_das(scene, L, rounds, policy="DAS", error_prob=0.0, seed=0, key=(),
                   S_max=None, max_solves=MAX_SOLVES):
    """Multi-round sparse collection with DAS or repeated random sensing.

    Round 1 polls ``L`` nodes uniformly at random under either policy, since no
    estimate exists yet. Later rounds use the max-min criterion (``DAS``) or
    uniform sampling of uncollected nodes (``RRS``). If ``L`` does not divide
    K, the final round polls whatever is left.
    """
    if policy not in POLICIES:
        raise InvalidArgument(f"policy must be one of {POLICIES}, got {policy!r}")
    K = scene.K
    L = check_count("L", L, minimum=1)
    rounds = check_count("rounds", rounds)
    error_prob = check_probability("error_prob", error_prob)
    if rounds > math.ceil(K / L):
        raise InvalidArgument(f"{rounds} rounds of {L} uploads exceed K={K}")
    coll = CollectionState(K)
    x = scene.x
    traj = SparseTrajectory(policy, error_prob, signal_energy=float(x @ x))
    state = None
    for t in range(rounds):
        rest = coll.uncollected()
        n = min(L, rest.size)
        if n == 0:
            break
        rng = rng_stream(seed, *key, STREAM_POLICY, t)
        if t == 0 or policy == "RRS":
            picks = [int(k) for k in rng.choice(rest, size=n, replace=False)]
        else:
            picks = select_next_sparse(scene, state, coll.collected, n)
        if error_prob > 0:
            picks = apply_downlink_errors(
                picks, coll.collected, error_prob, rng_stream(seed, *key, STREAM_DOWNLINK, t), K
            )
        coll.add_round(picks, x[picks])
        state = recover_scene(scene, coll.collected, S_max, max_solves)
        err = x - state.v
        traj.mse.append(float(err @ err))
        traj.uploads.append(len(coll))
        traj.rounds.append(picks)
    traj.state = state
    return traj


def write_trajectories_csv(rows, fh):
    """Rows of ``(trial, SparseTrajectory)``; one CSV line per round."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["trial", "round", "policy", "error_prob", "mse", "cumulative_uploads"])
    for trial, traj in rows:
        for t, (mse, up) in enumerate(zip(traj.mse, traj.uploads), start=1):
            w.writerow([trial, t, traj.policy, repr(traj.error_prob), repr(mse), up])
