"""Distributed sensing over multichannel slotted ALOHA.

Each undelivered node transmits with its own access probability on one of L
channels chosen uniformly; a transmission succeeds only when it is alone on
its channel. Under the measurement-dependent policy (``RA2``) a node's
probability grows with ``||g_k x_k||`` and a Lagrange multiplier, broadcast by
the base station and steered by dual ascent, keeps the expected number of
transmitters near L. ``RA1`` spreads ``L`` transmissions uniformly over the
undelivered nodes.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from sklearn.base import BaseEstimator

from ._utils import STREAM_ACCESS, InvalidArgument, check_count, rng_stream

POLICIES = ("RA1", "RA2")


def _probabilities(p):
    p = np.asarray(p, dtype=float).reshape(-1)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise InvalidArgument("access probabilities must lie in [0, 1]")
    return p


def success_probs(p, L):
    """``q_k = p_k prod_{l != k} (1 - p_l / L)`` for every node."""
    p = _probabilities(p)
    L = check_count("L", L, minimum=1)
    f = 1.0 - p / L
    # products excluding each index, without dividing by a possibly-zero factor
    before = np.concatenate(([1.0], np.cumprod(f[:-1])))
    after = np.concatenate((np.cumprod(f[::-1][:-1])[::-1], [1.0]))
    return p * before * after


def success_prob(p, L, k):
    """Probability that node ``k`` transmits and is alone on its channel."""
    p = _probabilities(p)
    k = int(k)
    if not 0 <= k < p.size:
        raise InvalidArgument(f"index {k} outside 0..{p.size - 1}")
    return float(success_probs(p, L)[k])


def access_probs_ra2(w_norms, psi):
    """Measurement-dependent access probability ``[e ln ||w_k|| - psi]`` clipped to [0, 1].

    A zero norm maps to probability 0, so silent nodes never contend.
    """
    w = np.asarray(w_norms, dtype=float).reshape(-1)
    if np.any(w < 0) or np.any(np.isnan(w)):
        raise InvalidArgument("norms must be non-negative")
    with np.errstate(divide="ignore"):
        raw = math.e * np.log(w) - float(psi)
    return np.clip(np.where(w > 0, raw, 0.0), 0.0, 1.0)


def access_probs_ra1(uncollected_count, L):
    """Measurement-independent probability ``min(L / |K^c|, 1)``."""
    n = check_count("uncollected_count", uncollected_count, minimum=1)
    L = check_count("L", L, minimum=1)
    return min(L / n, 1.0)


def dual_ascent_update(psi, P_hat, L, mu):
    """One multiplier step ``psi + mu (P_hat - L)``."""
    if not mu > 0:
        raise InvalidArgument(f"step size mu must be positive, got {mu}")
    return float(psi) + float(mu) * (float(P_hat) - float(L))


def psi_for_budget(w_norms, L):
    """Multiplier at which the RA2 probabilities sum to exactly ``L``.

    When fewer than L nodes have a non-zero norm every such node gets
    probability 1 and the smallest multiplier achieving that is returned.
    """
    w = np.asarray(w_norms, dtype=float)
    logs = math.e * np.log(w[w > 0])
    if logs.size == 0:
        raise InvalidArgument("no node has a non-zero norm")
    lo, hi = logs.min() - 1.0, logs.max()
    if logs.size <= L:
        return float(lo)
    return brentq(lambda psi: access_probs_ra2(w, psi).sum() - L, lo, hi, xtol=1e-14)


@dataclass
class RoundOutcome:
    """One slot of multichannel ALOHA.

    ``channel_assignment`` maps each transmitter to a channel in 1..L.
    ``collisions`` lists channels with two or more transmitters.
    """

    transmitters: list
    channel_assignment: dict
    successes: list
    collisions: list

    @property
    def P_hat(self):
        return len(self.transmitters)


def simulate_round(active, p, L, rng):
    """Simulate one slot for the ``active`` nodes.

    ``p`` holds one probability per active node, in the same order. Every
    active node consumes one uniform (transmit decision) and one channel draw,
    so the random stream does not depend on who transmits.
    """
    active = np.asarray(active, dtype=int).reshape(-1)
    p = _probabilities(p)
    L = check_count("L", L, minimum=1)
    if p.size != active.size:
        raise InvalidArgument(f"{active.size} active nodes but {p.size} probabilities")
    tx = rng.random(active.size) < p
    chan = rng.integers(L, size=active.size)
    occupancy = np.bincount(chan[tx], minlength=L)
    ok = tx & (occupancy[chan] == 1)
    return RoundOutcome(
        transmitters=[int(k) for k in active[tx]],
        channel_assignment={int(k): int(c) + 1 for k, c in zip(active[tx], chan[tx])},
        successes=[int(k) for k in active[ok]],
        collisions=[int(c) + 1 for c in np.flatnonzero(occupancy >= 2)],
    )


def simulate_rounds(p, L, n_rounds, rng, chunk=100_000):
    """Vectorised repeats of :func:`simulate_round` with fixed probabilities.

    Returns per-node success counts and the per-round number of successes.
    """
    p = _probabilities(p)
    L = check_count("L", L, minimum=1)
    n_rounds = check_count("n_rounds", n_rounds)
    K = p.size
    wins = np.zeros(K, dtype=np.int64)
    per_round = np.empty(n_rounds, dtype=np.int64)
    done = 0
    while done < n_rounds:
        c = min(chunk, n_rounds - done)
        tx = rng.random((c, K)) < p
        chan = rng.integers(L, size=(c, K))
        slot = np.arange(c)[:, None] * L + chan
        occ = np.bincount(slot[tx], minlength=c * L)
        ok = tx & (occ[slot] == 1)
        wins += ok.sum(axis=0)
        per_round[done:done + c] = ok.sum(axis=1)
        done += c
    return wins, per_round


@dataclass
class DistributedTrajectory:
    """Per-iteration record of a distributed run; index 0 is the state before any slot."""

    policy: str
    error_norm: list = field(default_factory=list)
    psi: list = field(default_factory=list)
    P_hat: list = field(default_factory=list)
    num_success: list = field(default_factory=list)
    delivered: list = field(default_factory=list)
    sum_p: list = field(default_factory=list)

    @property
    def T(self):
        return len(self.error_norm) - 1


def node_norms(scene):
    """``||g_k x_k||`` per node, zero for negligible measurements."""
    w = np.linalg.norm(scene.G, axis=0) * np.abs(scene.x)
    return np.where(scene.significant(), w, 0.0)


def run_distributed_das(scene, L, T, policy="RA2", mu=0.1, psi0=0.0, seed=0, key=()):
    """Run T slots of measurement-driven random access and track ``||y - y(t)||``.

    Delivered nodes fall silent. Under RA2 the base station observes the
    number of transmitters in each slot (collided or not) and broadcasts the
    updated multiplier before the next slot.
    """
    if policy not in POLICIES:
        raise InvalidArgument(f"policy must be one of {POLICIES}, got {policy!r}")
    L = check_count("L", L, minimum=1)
    T = check_count("T", T, minimum=1)
    if not mu > 0:
        raise InvalidArgument(f"step size mu must be positive, got {mu}")
    K = scene.K
    norms = node_norms(scene)
    contrib = scene.contributions()
    delivered = np.zeros(K, dtype=bool)
    y_t = np.zeros(scene.m)
    psi = float(psi0)
    traj = DistributedTrajectory(policy)
    traj.error_norm.append(float(np.linalg.norm(scene.y)))
    traj.psi.append(psi)
    traj.P_hat.append(0)
    traj.num_success.append(0)
    traj.delivered.append(0)
    traj.sum_p.append(0.0)
    for t in range(1, T + 1):
        rest = np.flatnonzero(~delivered)
        if policy == "RA1":
            p = np.full(rest.size, access_probs_ra1(rest.size, L) if rest.size else 0.0)
        else:
            p = access_probs_ra2(norms[rest], psi)
        out = simulate_round(rest, p, L, rng_stream(seed, *key, STREAM_ACCESS, t))
        if out.successes:
            delivered[out.successes] = True
            y_t = y_t + contrib[:, out.successes].sum(axis=1)
        traj.psi.append(psi)
        traj.P_hat.append(out.P_hat)
        traj.num_success.append(len(out.successes))
        traj.delivered.append(int(delivered.sum()))
        traj.sum_p.append(float(p.sum()))
        traj.error_norm.append(float(np.linalg.norm(scene.y - y_t)))
        if policy == "RA2":
            psi = dual_ascent_update(psi, out.P_hat, L, mu)
    return traj


def write_trajectories_csv(rows, fh):
    """Rows of ``(trial, DistributedTrajectory)``; ``psi`` is the value broadcast for slot t."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["trial", "t", "policy", "psi", "P_hat", "num_success", "error_norm"])
    for trial, traj in rows:
        for t in range(traj.T + 1):
            w.writerow([trial, t, traj.policy, repr(traj.psi[t]), traj.P_hat[t],
                        traj.num_success[t], repr(traj.error_norm[t])])


def write_psi_trace_csv(traj, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t", "psi", "P_hat", "sum_p"])
    for t in range(traj.T + 1):
        w.writerow([t, repr(traj.psi[t]), traj.P_hat[t], repr(traj.sum_p[t])])


class RandomAccessPolicy(BaseEstimator):
    """Node-side access rule with the base station's multiplier as state.

    ``fit`` resets the multiplier to ``psi0``; ``predict_proba`` maps node norms
    to access probabilities; ``update`` applies one dual-ascent step from the
    observed transmitter count (RA2 only).
    """

    def __init__(self, policy="RA2", n_channels=10, mu=0.1, psi0=0.0):
        self.policy = policy
        self.n_channels = n_channels
        self.mu = mu
        self.psi0 = psi0

    def fit(self, X=None, y=None):
        if self.policy not in POLICIES:
            raise InvalidArgument(f"policy must be one of {POLICIES}, got {self.policy!r}")
        self.psi_ = float(self.psi0)
        return self

    def predict_proba(self, w_norms):
        w = np.asarray(w_norms, dtype=float).reshape(-1)
        if self.policy == "RA1":
            return np.full(w.size, access_probs_ra1(w.size, self.n_channels))
        return access_probs_ra2(w, self.psi_)

    def update(self, P_hat):
        if self.policy == "RA2":
            self.psi_ = dual_ascent_update(self.psi_, P_hat, self.n_channels, self.mu)
        return self
