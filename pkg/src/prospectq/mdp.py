"""Finite controlled Markov chains with bounded rewards.

Transition kernels are stored as arrays of shape (s, r, s): p[i, v, j] is the
probability of moving to state j when action v is taken in state i.  Rewards
k[i, v] are nonnegative and not all equal, and the discount alpha lies in
(0, 1).  The derived constant K = k_max / (1 - alpha) bounds every Q-value.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

ROW_SUM_TOL = 1e-12
MIN_KERNEL_ENTRY = 1e-6
MAX_TABLE_SIZE = 2**31 - 1


@dataclass
class MdpInstance:
    """Immutable finite MDP: shared freely across workers, rng always passed in."""

    s: int
    r: int
    p: np.ndarray          # (s, r, s) transition kernel
    k: np.ndarray          # (s, r) rewards
    alpha: float
    seed: int | None = None
    k_min: float = field(init=False)
    k_max: float = field(init=False)
    K: float = field(init=False)

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float)
        self.k = np.asarray(self.k, dtype=float)
        if self.p.shape != (self.s, self.r, self.s):
            raise ValueError(f"kernel shape {self.p.shape} != {(self.s, self.r, self.s)}")
        if self.k.shape != (self.s, self.r):
            raise ValueError(f"reward shape {self.k.shape} != {(self.s, self.r)}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not np.all(np.isfinite(self.k)) or np.any(self.k < 0.0):
            raise ValueError("rewards must be finite and nonnegative")
        self.k_min = float(self.k.min())
        self.k_max = float(self.k.max())
        if self.s * self.r >= 2 and not self.k_min < self.k_max:
            raise ValueError("rewards must not be constant (k_min < k_max required)")
        self.K = self.k_max / (1.0 - self.alpha)
        self._cum_p = np.cumsum(self.p, axis=-1)

    @property
    def n_pairs(self) -> int:
        return self.s * self.r

    def flat_index(self, i: int, v: int) -> int:
        """Canonical flattening of the pair (state, action)."""
        return i * self.r + v


def _check_rows_stochastic(p: np.ndarray, tol: float) -> None:
    if np.any(p < 0.0) or not np.all(np.isfinite(p)):
        bad = int(np.argwhere((p < 0.0) | ~np.isfinite(p))[0][0])
        raise ValueError(f"kernel has a negative or non-finite entry (first bad row index {bad})")
    sums = p.sum(axis=-1)
    err = np.abs(sums - 1.0)
    if err.max() > tol:
        i, v = np.unravel_index(int(np.argmax(err)), sums.shape)
        raise ValueError(
            f"kernel row (state={i}, action={v}) sums to {sums[i, v]:.12g}, not 1 within {tol:g}"
        )


def _union_graph_strongly_connected(p: np.ndarray) -> bool:
    """Strong connectivity of the directed graph with an edge i->j whenever
    some action reaches j from i with positive probability."""
    adj = p.sum(axis=1) > 0.0
    s = adj.shape[0]

    def reachable(a: np.ndarray) -> bool:
        seen = np.zeros(s, dtype=bool)
        seen[0] = True
        stack = [0]
        while stack:
            i = stack.pop()
            for j in np.flatnonzero(a[i]):
                if not seen[j]:
                    seen[j] = True
                    stack.append(int(j))
        return bool(seen.all())

    return reachable(adj) and reachable(adj.T)


def generate_random_mdp(s: int, r: int, k_min: float, k_max: float,
                        alpha: float, seed: int) -> MdpInstance:
    """Random instance: uniform-on-simplex kernel rows floored away from zero,
    rewards uniform on [k_min, k_max] with both extremes pinned exactly.

    Flooring every kernel entry at 1e-6 (and renormalizing) makes the chain
    irreducible under every choice of actions.  Pinning one reward to k_min
    and one to k_max keeps the cached extremes equal to the requested values.
    Deterministic for a fixed seed.
    """
    if s < 1 or r < 1:
        raise ValueError("need s >= 1 and r >= 1")
    if s * r > MAX_TABLE_SIZE:
        raise ValueError(f"s*r = {s * r} exceeds the supported table size")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not 0.0 <= k_min < k_max:
        raise ValueError(f"need 0 <= k_min < k_max, got [{k_min}, {k_max}]")
    rng = np.random.default_rng(seed)

    # Dirichlet(1) rows via normalized exponentials, floored then renormalized
    # until the floor survives the renormalization.
    raw = -np.log(rng.random((s, r, s)))
    p = raw / raw.sum(axis=-1, keepdims=True)
    for _ in range(100):
        p = np.maximum(p, MIN_KERNEL_ENTRY)
        p /= p.sum(axis=-1, keepdims=True)
        if p.min() >= MIN_KERNEL_ENTRY:
            break

    k = rng.uniform(k_min, k_max, size=(s, r))
    if s * r >= 2:
        lo_slot, hi_slot = rng.choice(s * r, size=2, replace=False)
        k.flat[lo_slot] = k_min
        k.flat[hi_slot] = k_max
    else:
        k.flat[0] = k_max
    return MdpInstance(s=s, r=r, p=p, k=k, alpha=alpha, seed=int(seed))


def build_explicit_mdp(p, k, alpha: float) -> MdpInstance:
    """Instance from user-specified kernel and rewards.

    Rows must be stochastic within 1e-9 (they are then renormalized to 1e-16
    accuracy) and the union graph over all actions strongly connected.
    """
    p = np.asarray(p, dtype=float)
    k = np.asarray(k, dtype=float)
    if p.ndim != 3 or k.ndim != 2 or p.shape[:2] != k.shape or p.shape[2] != p.shape[0]:
        raise ValueError(f"inconsistent shapes: kernel {p.shape}, rewards {k.shape}")
    _check_rows_stochastic(p, tol=1e-9)
    p = p / p.sum(axis=-1, keepdims=True)
    if not _union_graph_strongly_connected(p):
        raise ValueError("chain is reducible: the graph over all actions is not strongly connected")
    s, r = k.shape
    return MdpInstance(s=s, r=r, p=p, k=k, alpha=alpha, seed=None)


def step_chain(m: MdpInstance, i: int, v: int, rng: np.random.Generator) -> int:
    """Sample the successor state for the pair (i, v)."""
    if not (0 <= i < m.s and 0 <= v < m.r):
        raise ValueError(f"state/action ({i}, {v}) out of range")
    return int(np.searchsorted(m._cum_p[i, v], rng.random(), side="right"))


def fixed_policy_strongly_connected(m: MdpInstance, actions: np.ndarray) -> bool:
    """Strong connectivity of the chain induced by one action per state."""
    sub = m.p[np.arange(m.s), np.asarray(actions, dtype=int)]
    return _union_graph_strongly_connected(sub[:, None, :])


def _rt(x: float) -> float:
    """Round-trip a float through 17 significant digits (identity on IEEE doubles)."""
    return float(f"{x:.17g}")


def save_instance(m: MdpInstance, path: str) -> None:
    """Write the instance as JSON; numbers carry 17 significant digits so the
    round trip through `load_instance` is bit-exact."""
    doc = {
        "s": m.s,
        "r": m.r,
        "alpha": _rt(m.alpha),
        "k": [[_rt(x) for x in row] for row in m.k],
        "p": [[[_rt(x) for x in dist] for dist in per_state] for per_state in m.p],
        "seed": m.seed,
    }
    tmp = tempfile.NamedTemporaryFile("w", dir=os.path.dirname(os.path.abspath(path)),
                                      suffix=".tmp", delete=False)
    with tmp as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    os.replace(tmp.name, path)


def load_instance(path: str) -> MdpInstance:
    with open(path) as f:
        doc = json.load(f)
    m = MdpInstance(s=int(doc["s"]), r=int(doc["r"]), p=np.array(doc["p"], dtype=float),
                    k=np.array(doc["k"], dtype=float), alpha=float(doc["alpha"]),
                    seed=doc.get("seed"))
    _check_rows_stochastic(m.p, tol=1e-9)
    return m
