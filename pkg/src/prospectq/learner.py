"""Asynchronous Q-learning iterations with local clocks and tapering steps.

Each step updates the single Q-table entry of the current (state, action)
pair with stepsize a(mu) = 1 / ceil(mu / block), where mu is that pair's
visit count including the current visit (the "local clock").  The update is
the convex combination (1 - a) Q + a * target, so iterates can never leave
the box spanned by their initialization and the target range: the future and
classical modes live in [k_min, K]^(s r), the total mode in [0, K]^(s r).

The control applied at step n+1 is, by default, the epsilon-greedy draw made
at step n when the next state was revealed -- the same draw that enters the
update target -- and the same realized noise row perturbs both the action
ranking and the value passed through the curve.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from prospectq.mdp import MdpInstance
from prospectq.valuation import NoiseModel, SCurve

_NOISE_CHUNK = 1 << 16

LEARNER_MODES = ("classical", "future_distorted", "total_distorted")


def epsilon_greedy_select(q_row: np.ndarray, noise_row: np.ndarray, epsilon: float,
                          rng: np.random.Generator) -> int:
    """Perturbed greedy action w.p. 1 - epsilon, each other action w.p.
    epsilon / (r - 1).  Ties in the perturbed ranking break to the lowest
    index.  A single-action row is degenerate and always returned."""
    r = len(q_row)
    if r == 1:
        if epsilon > 0.0:
            warnings.warn("epsilon-greedy with a single action is degenerate",
                          RuntimeWarning, stacklevel=2)
        return 0
    w_star = int(np.argmax(q_row - noise_row))
    if epsilon > 0.0 and rng.random() < epsilon:
        other = int(rng.integers(r - 1))
        return other + (other >= w_star)
    return w_star


def stepsize(mu: int, block: int) -> float:
    """Tapering stepsize 1 / ceil(mu / block): summable squares, divergent sum."""
    if mu <= 0:
        raise ValueError(f"local clock must be >= 1, got {mu}")
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    return 1.0 / -(-mu // block)


def convex_update(q: float, a: float, target: float) -> float:
    """(1 - a) q + a * target, pinned to [min(q, target), max(q, target)].

    The pin guards the one-ulp rounding excursions of the combination so the
    exact-arithmetic box invariance of the iteration also holds in floats.
    """
    if a >= 1.0:
        return target
    v = (1.0 - a) * q + a * target
    lo, hi = (q, target) if q <= target else (target, q)
    return lo if v < lo else hi if v > hi else v


@dataclass
class LearnerConfig:
    mode: str = "future_distorted"
    epsilon: float = 0.05
    stepsize_block: int = 100
    max_iters: int = 100_000
    seed: int = 0
    init: object = None          # None | (lo, hi) box | explicit table
    record_every: int = 0        # snapshot period; 0 disables snapshots
    error_window: int = 1000
    resample_control: bool = False
    record_updates: bool = False

    def __post_init__(self):
        if self.mode not in LEARNER_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.stepsize_block < 1 or self.max_iters < 1:
            raise ValueError("stepsize_block and max_iters must be positive")


@dataclass
class RunRecord:
    """Everything a single run produced.

    error_series[n] is the update magnitude |Q_{n+1} - Q_n| at the visited
    pair (the per-step Bellman error); moving_avg is its windowed mean.
    visit_counts is the table of local clocks and min_visit_ratio the
    smallest visit frequency, the empirical exploration level.
    """

    final_q: np.ndarray
    error_series: np.ndarray
    moving_avg: np.ndarray
    visit_counts: np.ndarray
    min_visit_ratio: float
    box: tuple[float, float]
    box_violations: int
    n_iters: int
    config: LearnerConfig
    snapshots: list = field(default_factory=list)
    updates: list | None = None      # (step, i, v, a, target) when recorded

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["iteration", "error", "moving_avg"])
            for n in range(self.n_iters):
                wr.writerow([n, repr(float(self.error_series[n])),
                             repr(float(self.moving_avg[n]))])

    def summary(self) -> dict:
        cfg = self.config
        return {
            "final_q": [[float(x) for x in row] for row in self.final_q],
            "min_visit_ratio": self.min_visit_ratio,
            "box": list(self.box),
            "box_violations": self.box_violations,
            "n_iters": self.n_iters,
            "config": {
                "mode": cfg.mode, "epsilon": cfg.epsilon,
                "stepsize_block": cfg.stepsize_block, "max_iters": cfg.max_iters,
                "seed": cfg.seed, "record_every": cfg.record_every,
                "error_window": cfg.error_window,
                "resample_control": cfg.resample_control,
            },
        }

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=1)
            f.write("\n")


def mode_box_bounds(mode: str, m: MdpInstance) -> tuple[float, float]:
    """Invariant box of the iteration: [k_min, K] except [0, K] when the
    whole return is distorted."""
    if mode == "total_distorted":
        return 0.0, m.K
    return m.k_min, m.K


def _initial_q(cfg: LearnerConfig, m: MdpInstance, box, rng) -> np.ndarray:
    if cfg.init is None:
        lo, hi = box
    elif isinstance(cfg.init, tuple) and len(cfg.init) == 2:
        lo, hi = cfg.init
    else:
        q = np.array(cfg.init, dtype=float)
        if q.shape != (m.s, m.r):
            q = q.reshape(m.s, m.r)
        return q
    return rng.uniform(lo, hi, size=(m.s, m.r))


class _NoiseBuffer:
    """Chunked draws from the noise sampler; keeps per-step cost flat."""

    def __init__(self, noise: NoiseModel | None, rng: np.random.Generator, r: int):
        self.zero = noise is None or noise.c == 0.0
        self.noise, self.rng, self.r = noise, rng, r
        self.zeros = np.zeros(r)
        self.buf = np.empty(0)
        self.pos = 0

    def row(self) -> np.ndarray:
        if self.zero:
            return self.zeros
        if self.pos + self.r > self.buf.size:
            self.buf = self.noise.sample(self.rng, _NOISE_CHUNK)
            self.pos = 0
        out = self.buf[self.pos:self.pos + self.r]
        self.pos += self.r
        return out


def run(m: MdpInstance, curve: SCurve | None, noise: NoiseModel | None,
        cfg: LearnerConfig) -> RunRecord:
    """Run the asynchronous iteration for cfg.max_iters steps.

    Per step, with current pair (i, v): the chain moves to X' ~ p(.|i, v), a
    fresh noise row perturbs the Q-row of X', the epsilon-greedy control U'
    is drawn from the perturbed ranking, and Q(i, v) moves toward

      classical   k(i,v) + alpha max_w Q(X', w)
      future      k(i,v) + alpha u(Q(X', U') - noise(U'))
      total       u(k(i,v) + alpha (Q(X', U') - noise(U')))

    with stepsize 1 / ceil(mu(i,v) / block).  U' is reused as the next acting
    control unless resample_control is set, in which case only the
    exploration coin is redrawn against the same perturbed ranking.
    A non-finite entry aborts immediately (unreachable for curves and rewards
    within their contracts, since every update is a convex combination).
    """
    if cfg.mode != "classical" and (curve is None or noise is None):
        raise ValueError(f"{cfg.mode} mode needs a curve and a noise model")
    rng = np.random.default_rng(cfg.seed)
    box = mode_box_bounds(cfg.mode, m)
    q = _initial_q(cfg, m, box, rng)
    if np.any(q < box[0] - 1e-9) or np.any(q > box[1] + 1e-9):
        raise ValueError(f"initial table leaves the invariant box {box}")

    n_steps = cfg.max_iters
    alpha = m.alpha
    k = m.k
    cum_p = m._cum_p
    classical = cfg.mode == "classical"
    total = cfg.mode == "total_distorted"
    u = None if classical else curve.u_scalar
    nbuf = _NoiseBuffer(None if classical else noise, rng, m.r)

    mu = np.zeros((m.s, m.r), dtype=np.int64)
    err = np.empty(n_steps)
    block = cfg.stepsize_block
    lo, hi = box
    violations = 0
    snapshots = []
    updates = [] if cfg.record_updates else None

    x = int(rng.integers(m.s))
    noise_row = nbuf.row()
    v = epsilon_greedy_select(q[x], noise_row, cfg.epsilon, rng)

    for n in range(n_steps):
        x2 = int(np.searchsorted(cum_p[x, v], rng.random(), side="right"))
        noise_row = nbuf.row()
        v2 = epsilon_greedy_select(q[x2], noise_row, cfg.epsilon, rng)

        if classical:
            target = k[x, v] + alpha * q[x2].max()
        else:
            perturbed = q[x2, v2] - noise_row[v2]
            if total:
                target = u(k[x, v] + alpha * perturbed)
            else:
                target = k[x, v] + alpha * u(perturbed)

        mu[x, v] += 1
        a = 1.0 / -(-int(mu[x, v]) // block)
        q_old = q[x, v]
        q_new = convex_update(q_old, a, target)
        if not math.isfinite(q_new):
            raise FloatingPointError(
                f"non-finite update at step {n}, pair ({x}, {v}): target={target}")
        q[x, v] = q_new
        err[n] = abs(q_new - q_old)
        if q_new < lo or q_new > hi:
            violations += 1
        if updates is not None:
            updates.append((n, x, v, a, target))
        if cfg.record_every and (n + 1) % cfg.record_every == 0:
            snapshots.append((n + 1, q.copy()))

        x = x2
        if cfg.resample_control:
            v = epsilon_greedy_select(q[x2], noise_row, cfg.epsilon, rng)
        else:
            v = v2

    return RunRecord(
        final_q=q,
        error_series=err,
        moving_avg=moving_average(err, cfg.error_window),
        visit_counts=mu,
        min_visit_ratio=float(mu.min()) / n_steps,
        box=box,
        box_violations=violations,
        n_iters=n_steps,
        config=cfg,
        snapshots=snapshots,
        updates=updates,
    )


def moving_average(series: np.ndarray, window: int) -> np.ndarray:
    """Running windowed mean; partial windows at the head use what exists."""
    c = np.concatenate([[0.0], np.cumsum(series)])
    n = series.size
    idx = np.arange(n)
    start = np.maximum(idx - window + 1, 0)
    return (c[idx + 1] - c[start]) / (idx - start + 1)


def exploration_diagnostic(rec: RunRecord) -> float:
    """Empirical exploration floor min over pairs of mu(i, v, n) / n; strictly
    positive for irreducible chains once every pair has been visited."""
    return float(rec.visit_counts.min()) / rec.n_iters


def replay_updates(rec: RunRecord, q0: np.ndarray) -> np.ndarray:
    """Re-apply recorded (a, target) pairs; bit-identical to the run."""
    if rec.updates is None:
        raise ValueError("run was not recorded with record_updates=True")
    q = np.array(q0, dtype=float).copy()
    for _, i, v, a, target in rec.updates:
        q[i, v] = convex_update(q[i, v], a, target)
    return q
