"""Problem instances for the three sensing regimes, plus collection bookkeeping.

Every generator is a pure function of its arguments and seed. Instances are
frozen dataclasses holding read-only arrays, so they can be shared between
trial workers.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._utils import (
    STREAM_INSTANCE,
    InvalidArgument,
    check_count,
    check_probability,
    rng_stream,
)

COV_JITTER = 1e-10
DICT_LENGTH_SCALE = 0.25  # in units of the atom-grid spacing


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def exp_distance_kernel(positions):
    """Covariance ``exp(-||u_i - u_k||)`` for the given node positions."""
    u = np.asarray(positions, dtype=float)
    d = np.linalg.norm(u[:, None, :] - u[None, :, :], axis=-1)
    return np.exp(-d)


@dataclass(frozen=True)
class GaussianField:
    """Zero-mean Gaussian field over K nodes in the unit square.

    Attributes
    ----------
    positions : (K, 2) array
    cov : (K, K) array, unit diagonal, ``exp(-distance)`` off the diagonal
    x : (K,) array, one draw from N(0, cov)
    """

    positions: np.ndarray
    cov: np.ndarray
    x: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        for name in ("positions", "cov", "x"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def K(self):
        return self.x.shape[0]

    def to_dict(self):
        return {
            "type": "GaussianField",
            "seed": self.seed,
            "K": self.K,
            "positions": self.positions.tolist(),
            "cov": self.cov.tolist(),
            "x": self.x.tolist(),
        }


@dataclass(frozen=True)
class SparseScene:
    """Measurements ``x = B s`` with an S-sparse coefficient vector ``s``.

    ``B`` is K x M; row k is the measurement vector of node k.
    """

    B: np.ndarray
    s: np.ndarray
    x: np.ndarray
    positions: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        for name in ("B", "s", "x"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.positions is not None:
            object.__setattr__(self, "positions", _frozen(self.positions))

    @property
    def K(self):
        return self.B.shape[0]

    @property
    def M(self):
        return self.B.shape[1]

    @property
    def S(self):
        return int(np.count_nonzero(self.s))

    def to_dict(self):
        return {
            "type": "SparseScene",
            "seed": self.seed,
            "K": self.K,
            "M": self.M,
            "S": self.S,
            "B": self.B.tolist(),
            "s": self.s.tolist(),
            "x": self.x.tolist(),
            "positions": None if self.positions is None else self.positions.tolist(),
        }


@dataclass(frozen=True)
class QueryScene:
    """Bernoulli-Gaussian measurements and the linear query ``y = G x``.

    ``G`` is m x K with i.i.d. standard-normal entries; column k is ``g_k``.
    Measurements with ``|x_k| <= threshold`` are treated as negligible.
    """

    G: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p_s: float
    threshold: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        for name in ("G", "x", "y"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def K(self):
        return self.x.shape[0]

    @property
    def m(self):
        return self.G.shape[0]

    def significant(self):
        """Boolean mask of nodes whose measurement exceeds the threshold."""
        return np.abs(self.x) > self.threshold

    def contributions(self):
        """Per-node vectors ``w_k = g_k x_k`` as an m x K array."""
        return self.G * self.x[None, :]

    def to_dict(self):
        return {
            "type": "QueryScene",
            "seed": self.seed,
            "K": self.K,
            "m": self.m,
            "p_s": self.p_s,
            "threshold": self.threshold,
            "G": self.G.tolist(),
            "x": self.x.tolist(),
            "y": self.y.tolist(),
        }


def gen_gaussian_field(K, seed, key=()):
    """Place K nodes uniformly in the unit square and draw one field sample.

    The covariance is stored exactly; only the Cholesky factor used for
    sampling sees a ``1e-10`` diagonal jitter.
    """
    K = check_count("K", K, minimum=1)
    rng = rng_stream(seed, *key, STREAM_INSTANCE)
    positions = rng.random((K, 2))
    cov = exp_distance_kernel(positions)
    chol = np.linalg.cholesky(cov + COV_JITTER * np.eye(K))
    x = chol @ rng.standard_normal(K)
    return GaussianField(positions, cov, x, seed=int(seed))


def atom_centers(M):
    """M atom centres on the cells of a ceil(sqrt(M)) x ceil(sqrt(M)) grid."""
    g = math.isqrt(M - 1) + 1 if M > 1 else 1
    c = (np.arange(g) + 0.5) / g
    grid = np.array([(a, b) for b in c for a in c])
    return grid[:M], g


def sparse_dictionary(positions, M, length_scale=DICT_LENGTH_SCALE):
    """Row-normalised dictionary ``B[k, m] = exp(-||u_k - c_m|| / l)``.

    ``l`` is ``length_scale`` times the atom-grid spacing, so nearby nodes see
    nearly the same atoms and have strongly correlated measurements.
    """
    centers, g = atom_centers(M)
    ell = length_scale / g
    d = np.linalg.norm(positions[:, None, :] - centers[None, :, :], axis=-1)
    B = np.exp(-d / ell)
    return B / np.linalg.norm(B, axis=1, keepdims=True)


def gen_sparse_scene(K, M, S, seed, key=(), length_scale=DICT_LENGTH_SCALE):
    K = check_count("K", K, minimum=1)
    M = check_count("M", M, minimum=1)
    S = check_count("S", S, minimum=1)
    if S > M:
        raise InvalidArgument(f"sparsity S={S} exceeds dictionary size M={M}")
    if M > K:
        raise InvalidArgument(f"dictionary size M={M} exceeds node count K={K}")
    rng = rng_stream(seed, *key, STREAM_INSTANCE)
    positions = rng.random((K, 2))
    B = sparse_dictionary(positions, M, length_scale)
    s = np.zeros(M)
    support = rng.choice(M, size=S, replace=False)
    values = rng.standard_normal(S)
    # a standard-normal draw is never exactly zero in practice, but S is a contract
    values[values == 0.0] = 1.0
    s[support] = values
    return SparseScene(B, s, B @ s, positions=positions, seed=int(seed))


def gen_query_scene(K, m, p_s, seed, key=(), threshold=0.0):
    K = check_count("K", K, minimum=1)
    m = check_count("m", m, minimum=1)
    p_s = check_probability("p_s", p_s)
    if threshold < 0:
        raise InvalidArgument(f"threshold must be >= 0, got {threshold}")
    rng = rng_stream(seed, *key, STREAM_INSTANCE)
    G = rng.standard_normal((m, K))
    active = rng.random(K) < p_s
    x = np.where(active, rng.standard_normal(K), 0.0)
    return QueryScene(G, x, G @ x, p_s=p_s, threshold=float(threshold), seed=int(seed))


_SCENE_TYPES = {
    "GaussianField": lambda d: GaussianField(d["positions"], d["cov"], d["x"], seed=d.get("seed")),
    "SparseScene": lambda d: SparseScene(
        d["B"], d["s"], d["x"], positions=d.get("positions"), seed=d.get("seed")
    ),
    "QueryScene": lambda d: QueryScene(
        d["G"], d["x"], d["y"], p_s=d["p_s"], threshold=d.get("threshold", 0.0), seed=d.get("seed")
    ),
}


def scene_to_json(scene):
    return json.dumps(scene.to_dict())


def scene_from_json(text):
    d = json.loads(text)
    try:
        build = _SCENE_TYPES[d["type"]]
    except KeyError:
        raise InvalidArgument(f"unknown scene type {d.get('type')!r}") from None
    return build(d)


@dataclass
class CollectionState:
    """Delivered node indices and values, in upload order, with per-round history."""

    K: int
    collected: list = field(default_factory=list)
    values: list = field(default_factory=list)
    round: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        self._seen = set(self.collected)
        if len(self._seen) != len(self.collected):
            raise InvalidArgument("collected indices must be unique")
        if len(self.collected) != len(self.values):
            raise InvalidArgument("collected and values must have equal length")

    def add_round(self, indices, values, **record):
        """Append one round of deliveries; duplicates and out-of-range indices are rejected."""
        indices = [int(k) for k in indices]
        for k in indices:
            if not 0 <= k < self.K:
                raise InvalidArgument(f"node index {k} outside 0..{self.K - 1}")
            if k in self._seen:
                raise InvalidArgument(f"node {k} already collected")
        if len(set(indices)) != len(indices):
            raise InvalidArgument("duplicate index within a round")
        self.round += 1
        self.collected.extend(indices)
        self.values.extend(float(v) for v in values)
        self._seen.update(indices)
        self.history.append({"round": self.round, "delivered": indices, **record})

    def mask(self):
        m = np.zeros(self.K, dtype=bool)
        m[self.collected] = True
        return m

    def uncollected(self):
        return np.flatnonzero(~self.mask())

    def __contains__(self, k):
        return int(k) in self._seen

    def __len__(self):
        return len(self.collected)
