"""Deterministic operators of the limiting dynamics and their Jacobians.

Three operator modes act on a Q-table q of shape (s, r):

  classical         F(q)[i,v] = k(i,v) + alpha * sum_j p(j|i,v) max_w q(j,w)
  future_distorted  the greedy target is passed through the valuation curve
                    after subtracting bounded noise, and the action at the
                    next state follows the noise-perturbed epsilon-greedy law
  total_distorted   the curve is applied to the whole return
                    k(i,v) + alpha (q(j,w) - noise) instead of the future part

For the distorted modes the value at (i, v) is an expectation over the noise
vector attached to the next state's action block.  Writing Z_w = q(j,w) - y_w
and M = max_w Z_w, the inner integrand is

  (1 - eps) u(M) + eps/(r-1) * (sum_w u(Z_w) - u(M))          (future mode)

and the same shape with u(k + alpha Z) in the total mode.  Four backends
evaluate the expectation:

  exact_c0     integrand at y = 0 (only valid for zero noise half-width)
  quadrature   tensor-product Gauss-Legendre rule over the r-cube, weighted
               by the product noise density; deterministic, the reference
               backend at small r (node count order**r is guarded)
  monte_carlo  fixed common-random-number samples per next state, drawn once
               per spec so repeated evaluations at different q share noise
  factored     exact reduction to one-dimensional integrals: the max M has
               CDF prod_w Phi(t - q_w), so every term above is an integral
               against phi(t - q_w) prod_{w' != w} Phi(t - q_w'), integrated
               piecewise between the kinks of Phi by Gauss-Legendre panels;
               cost is polynomial in r, which makes large action spaces cheap

Jacobians are assembled from the same nodes as the operator, entry
((i,v),(j,w)) = alpha p(j|i,v) E[mix_w u'(arg_w)], where mix_w puts weight
(1 - eps) on the perturbed argmax action and eps/(r-1) on each other action.
Ties in the perturbed argmax are broken by lowest action index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from prospectq.mdp import MdpInstance
from prospectq.valuation import NoiseModel, SCurve

TENSOR_NODE_LIMIT = 10**7
MC_MIN_SAMPLES = 1000
_ALT_CHUNK = 3 * 10**7  # element budget for node-based total-mode broadcasts

MODES = ("classical", "future_distorted", "total_distorted")
BACKEND_KINDS = ("exact_c0", "quadrature", "monte_carlo", "factored")


@dataclass(frozen=True)
class Backend:
    kind: str
    order: int = 16          # 1-d node count (quadrature tensor axis / factored panel)
    samples: int = 100_000   # monte_carlo draw count per next state
    seed: int = 0            # monte_carlo stream key

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend {self.kind!r}")
        if self.order < 1:
            raise ValueError("backend order must be >= 1")
        if self.kind == "monte_carlo" and self.samples < MC_MIN_SAMPLES:
            raise ValueError(f"monte_carlo needs at least {MC_MIN_SAMPLES} samples")

    @staticmethod
    def exact_c0() -> "Backend":
        return Backend(kind="exact_c0")

    @staticmethod
    def quadrature(order: int = 16) -> "Backend":
        return Backend(kind="quadrature", order=order)

    @staticmethod
    def monte_carlo(samples: int = 100_000, seed: int = 0) -> "Backend":
        return Backend(kind="monte_carlo", samples=samples, seed=seed)

    @staticmethod
    def factored(order: int = 32) -> "Backend":
        return Backend(kind="factored", order=order)

    @staticmethod
    def auto(mdp: MdpInstance, noise: NoiseModel | None) -> "Backend":
        """Zero noise: exact; small action spaces: tensor quadrature; large
        ones: the factored reduction (a full tensor rule would need order**r
        nodes there)."""
        if noise is None or noise.c == 0.0:
            return Backend.exact_c0()
        if mdp.r <= 4:
            return Backend.quadrature(16)
        return Backend.factored(32)


@dataclass
class OperatorSpec:
    """Operator mode plus everything needed to evaluate it reproducibly.

    Immutable after construction; evaluation is pure, so specs are safe to
    share across threads.  Monte-Carlo noise is drawn once, lazily, from
    per-next-state substreams keyed by (seed, state), so evaluations at
    different q reuse common random numbers and parallel row evaluation
    matches serial.
    """

    mode: str
    mdp: MdpInstance
    curve: SCurve | None = None
    noise: NoiseModel | None = None
    epsilon: float = 0.05
    backend: Backend | None = None
    _nodes: list | None = field(default=None, repr=False, compare=False)
    _packages_cache: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "classical":
            return
        if self.curve is None or self.noise is None:
            raise ValueError(f"{self.mode} mode needs a valuation curve and a noise model")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.noise.c > self.mdp.k_min + 1e-12:
            raise ValueError("noise half-width must not exceed k_min")
        if self.backend is None:
            self.backend = Backend.auto(self.mdp, self.noise)
        b = self.backend
        if b.kind == "exact_c0" and self.noise.c != 0.0:
            raise ValueError("exact_c0 backend requires zero noise half-width")
        if b.kind == "quadrature" and float(b.order) ** self.mdp.r > TENSOR_NODE_LIMIT:
            raise ValueError(
                f"tensor rule needs order**r = {b.order}**{self.mdp.r} nodes; "
                "use a monte_carlo (or factored) backend for this action count")

    # -- noise node sets ----------------------------------------------------

    def _node_sets(self):
        """Per-next-state (Y, W): Y of shape (N, r), W of shape (N,) with
        sum(W) ~ 1.  Shared across states except for monte_carlo."""
        if self._nodes is not None:
            return self._nodes
        m, b = self.mdp, self.backend
        if b.kind == "exact_c0" or self.noise.c == 0.0:
            shared = (np.zeros((1, m.r)), np.ones(1))
            self._nodes = [shared] * m.s
        elif b.kind == "quadrature":
            y, w = self.noise.nodes(b.order)
            grids = np.meshgrid(*([y] * m.r), indexing="ij")
            Y = np.stack([g.ravel() for g in grids], axis=-1)
            wgrids = np.meshgrid(*([w] * m.r), indexing="ij")
            W = np.ones(Y.shape[0])
            for g in wgrids:
                W = W * g.ravel()
            shared = (Y, W)
            self._nodes = [shared] * m.s
        elif b.kind == "monte_carlo":
            sets = []
            for j in range(m.s):
                rng = np.random.default_rng([b.seed, j])
                Y = self.noise.sample(rng, (b.samples, m.r))
                sets.append((Y, np.full(b.samples, 1.0 / b.samples)))
            self._nodes = sets
        else:
            raise ValueError(f"backend {b.kind} has no node sets")
        return self._nodes

    def _gl_rule(self):
        x, w = np.polynomial.legendre.leggauss(self.backend.order)
        return x, w


def _as_q(q, m: MdpInstance) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape == (m.s, m.r):
        return q
    if q.shape == (m.s * m.r,):
        return q.reshape(m.s, m.r)
    raise ValueError(f"Q-table shape {q.shape} does not match ({m.s}, {m.r})")


# ---------------------------------------------------------------------------
# classical operator
# ---------------------------------------------------------------------------

def classical_F(q, m: MdpInstance) -> np.ndarray:
    """Dynamic-programming operator for Q-values; a max-norm contraction with
    modulus alpha."""
    q = _as_q(q, m)
    best = q.max(axis=1)
    return m.k + m.alpha * (m.p @ best)


def classical_fixed_point(m: MdpInstance, tol: float = 1e-12,
                          q0: np.ndarray | None = None) -> np.ndarray:
    """Unique fixed point of classical_F by value iteration, accurate to tol
    in sup norm (the contraction bound converts the step size into an error)."""
    q = np.zeros((m.s, m.r)) if q0 is None else _as_q(q0, m).copy()
    gap = tol * (1.0 - m.alpha) / m.alpha
    for _ in range(100_000):
        qn = classical_F(q, m)
        if np.max(np.abs(qn - q)) <= gap:
            return qn
        q = qn
    raise RuntimeError("value iteration failed to converge")


# ---------------------------------------------------------------------------
# distorted operators, node-based backends
# ---------------------------------------------------------------------------

def _mix_coeffs(r: int, epsilon: float) -> tuple[float, float]:
    """(weight on the perturbed-greedy value, weight per non-greedy action)."""
    if r == 1:
        return 1.0, 0.0
    return 1.0 - epsilon, epsilon / (r - 1)


def _future_rows_nodes(q: np.ndarray, spec: OperatorSpec) -> np.ndarray:
    """Per-next-state inner expectations e_j for the future mode."""
    m, curve = spec.mdp, spec.curve
    greedy_w, eps_frac = _mix_coeffs(m.r, spec.epsilon)
    e = np.empty(m.s)
    for j, (Y, W) in enumerate(spec._node_sets()):
        Z = q[j][None, :] - Y
        uM = curve.u(Z.max(axis=1))
        if eps_frac == 0.0:
            e[j] = W @ uM
        else:
            T = curve.u(Z).sum(axis=1)
            e[j] = greedy_w * (W @ uM) + eps_frac * (W @ (T - uM))
    return e


def _alt_rows_nodes(q: np.ndarray, spec: OperatorSpec) -> np.ndarray:
    """Inner expectations for the total mode, shape (s*r, s): entry (iv, j)
    is E[u(k_iv + alpha Z)] mixed over actions of state j."""
    m, curve = spec.mdp, spec.curve
    greedy_w, eps_frac = _mix_coeffs(m.r, spec.epsilon)
    kflat = m.k.reshape(-1)
    out = np.empty((m.s * m.r, m.s))
    for j, (Y, W) in enumerate(spec._node_sets()):
        Z = q[j][None, :] - Y                  # (N, r)
        M = Z.max(axis=1)
        n = Z.shape[0]
        chunk = max(1, int(_ALT_CHUNK / max(n * m.r, 1)))
        for start in range(0, kflat.size, chunk):
            kk = kflat[start:start + chunk, None]
            uM = curve.u(kk + m.alpha * M[None, :])            # (chunk, N)
            if eps_frac == 0.0:
                out[start:start + chunk, j] = uM @ W
            else:
                T = curve.u(kk[:, :, None] + m.alpha * Z[None, :, :]).sum(axis=2)
                out[start:start + chunk, j] = (greedy_w * (uM @ W)
                                               + eps_frac * ((T - uM) @ W))
    return out


def _future_jac_factors_nodes(q: np.ndarray, spec: OperatorSpec) -> np.ndarray:
    """G[j, w] = E[mix_w u'(Z_w)] for the future mode, shape (s, r)."""
    m, curve = spec.mdp, spec.curve
    greedy_w, eps_frac = _mix_coeffs(m.r, spec.epsilon)
    G = np.empty((m.s, m.r))
    for j, (Y, W) in enumerate(spec._node_sets()):
        Z = q[j][None, :] - Y
        du = curve.du(Z)
        if m.r == 1:
            G[j, 0] = W @ du[:, 0]
            continue
        ind = np.zeros_like(du)
        ind[np.arange(Z.shape[0]), Z.argmax(axis=1)] = 1.0
        G[j] = W @ (du * (greedy_w * ind + eps_frac * (1.0 - ind)))
    return G


def _alt_jac_factors_nodes(q: np.ndarray, spec: OperatorSpec) -> np.ndarray:
    """G[iv, j, w] = E[mix_w u'(k_iv + alpha Z_w)] for the total mode."""
    m, curve = spec.mdp, spec.curve
    greedy_w, eps_frac = _mix_coeffs(m.r, spec.epsilon)
    kflat = m.k.reshape(-1)
    G = np.empty((m.s * m.r, m.s, m.r))
    for j, (Y, W) in enumerate(spec._node_sets()):
        Z = q[j][None, :] - Y
        n = Z.shape[0]
        if m.r == 1:
            mixw = W[:, None]
        else:
            ind = np.zeros_like(Z)
            ind[np.arange(n), Z.argmax(axis=1)] = 1.0
            mixw = W[:, None] * (greedy_w * ind + eps_frac * (1.0 - ind))
        chunk = max(1, int(_ALT_CHUNK / max(n * m.r, 1)))
        for start in range(0, kflat.size, chunk):
            kk = kflat[start:start + chunk, None, None]
            du = curve.du(kk + m.alpha * Z[None, :, :])        # (chunk, N, r)
            G[start:start + chunk, j, :] = np.einsum("cnw,nw->cw", du, mixw)
    return G


# ---------------------------------------------------------------------------
# factored backend: exact one-dimensional reduction
# ---------------------------------------------------------------------------

def _max_packages(q_row: np.ndarray, noise: NoiseModel, gl_x: np.ndarray,
                  gl_w: np.ndarray) -> list:
    """Node/weight packages per action for the law of max_w (q_w - noise_w).

    The package for action w integrates against
    phi(t - q_w) * prod_{w' != w} Phi(t - q_w'), the w-slice of the max
    distribution, split into Gauss-Legendre panels at the kinks of the Phi
    factors so each panel integrand is analytic.  Actions more than 2c below
    the top carry zero mass and get None.
    """
    c = noise.c
    r = q_row.size
    m = float(q_row.max())
    packages = []
    for w in range(r):
        qw = float(q_row[w])
        if qw <= m - 2.0 * c:
            packages.append(None)
            continue
        lo = max(qw - c, m - c)
        hi = qw + c
        others = np.array([q_row[w2] for w2 in range(r) if w2 != w])
        rel = others[others > lo - c]          # CDF factors not identically 1
        cuts = {lo, hi}
        for q2 in rel:
            for kink in (q2 - c, q2 + c):
                if lo < kink < hi:
                    cuts.add(float(kink))
        bounds = sorted(cuts)
        ts, ws = [], []
        for p0, p1 in zip(bounds[:-1], bounds[1:]):
            mid, half = 0.5 * (p0 + p1), 0.5 * (p1 - p0)
            t = mid + half * gl_x
            wt = half * gl_w * noise.density(t - qw)
            for q2 in rel:
                wt = wt * noise.cdf(t - q2)
            ts.append(t)
            ws.append(wt)
        packages.append((np.concatenate(ts), np.concatenate(ws)))
    return packages


def _packages_for(q: np.ndarray, spec: OperatorSpec) -> list:
    gl_x, gl_w = spec._gl_rule()
    return [_max_packages(q[j], spec.noise, gl_x, gl_w) for j in range(spec.mdp.s)]


def _future_rows_factored(q: np.ndarray, spec: OperatorSpec, pkgs: list) -> np.ndarray:
    m, curve = spec.mdp, spec.curve
    greedy_w, eps_frac = _mix_coeffs(m.r, spec.epsilon)
    y, wphi = spec.noise.nodes(spec.backend.order)
    e = np.empty(m.s)
    B = curve.u(q[:, :, None] - y[None, None, :]) @ wphi       # (s, r)
    for j in range(m.s):
        eu_max = 0.0
        for pkg in pkgs[j]:
            if pkg is not None:
                t, wt = pkg
                eu_max += wt @ curve.u(t)
        e[j] = greedy_w * eu_max + eps_frac * (B[j].sum() - eu_max)
    return e


def _alt_rows_factored(q: np.ndarray, spec: OperatorSpec, pkgs: list) -> np.ndarray:
    m, curve = spec.mdp, spec.curve
    greedy_w, eps_frac = _mix_coeffs(m.r, spec.epsilon)
    y, wphi = spec.noise.nodes(spec.backend.order)
    kflat = m.k.reshape(-1)
    out = np.empty((m.s * m.r, m.s))
    for j in range(m.s):
        t_all = np.concatenate([p[0] for p in pkgs[j] if p is not None])
        w_all = np.concatenate([p[1] for p in pkgs[j] if p is not None])
        eu_max = curve.u(kflat[:, None] + m.alpha * t_all[None, :]) @ w_all
        args = kflat[:, None, None] + m.alpha * (q[j][None, :, None] - y[None, None, :])
        Bsum = (curve.u(args) @ wphi).sum(axis=1)
        out[:, j] = greedy_w * eu_max + eps_frac * (Bsum - eu_max)
    return out


def _future_jac_factors_factored(q: np.ndarray, spec: OperatorSpec, pkgs: list) -> np.ndarray:
    m, curve = spec.mdp, spec.curve
    greedy_w, eps_frac = _mix_coeffs(m.r, spec.epsilon)
    y, wphi = spec.noise.nodes(spec.backend.order)
    Edu = curve.du(q[:, :, None] - y[None, None, :]) @ wphi    # (s, r)
    G = np.empty((m.s, m.r))
    for j in range(m.s):
        for w in range(m.r):
            pkg = pkgs[j][w]
            D = 0.0 if pkg is None else pkg[1] @ curve.du(pkg[0])
            G[j, w] = greedy_w * D + eps_frac * (Edu[j, w] - D)
    return G


def _alt_jac_factors_factored(q: np.ndarray, spec: OperatorSpec, pkgs: list) -> np.ndarray:
    m, curve = spec.mdp, spec.curve
    greedy_w, eps_frac = _mix_coeffs(m.r, spec.epsilon)
    y, wphi = spec.noise.nodes(spec.backend.order)
    kflat = m.k.reshape(-1)
    G = np.empty((m.s * m.r, m.s, m.r))
    for j in range(m.s):
        args = kflat[:, None, None] + m.alpha * (q[j][None, :, None] - y[None, None, :])
        Edu = curve.du(args) @ wphi                            # (sr, r)
        for w in range(m.r):
            pkg = pkgs[j][w]
            if pkg is None:
                D = np.zeros(kflat.size)
            else:
                t, wt = pkg
                D = curve.du(kflat[:, None] + m.alpha * t[None, :]) @ wt
            G[:, j, w] = greedy_w * D + eps_frac * (Edu[:, w] - D)
    return G


# ---------------------------------------------------------------------------
# public operator surface
# ---------------------------------------------------------------------------

def prospect_F(q, spec: OperatorSpec) -> np.ndarray:
    """Future-distorted operator: k + alpha * P e(q), where e mixes the curve
    values of noise-perturbed Q-values under the epsilon-greedy law."""
    if spec.mode != "future_distorted":
        raise ValueError(f"spec mode is {spec.mode!r}, expected future_distorted")
    m = spec.mdp
    q = _as_q(q, m)
    if spec.backend.kind == "factored" and spec.noise.c > 0.0:
        e = _future_rows_factored(q, spec, _packages_for(q, spec))
    else:
        e = _future_rows_nodes(q, spec)
    return m.k + m.alpha * (m.p @ e)


def alt_F(q, spec: OperatorSpec) -> np.ndarray:
    """Total-distorted operator: the curve is applied to the whole return, so
    the inner expectation depends on (i, v) through the stage reward."""
    if spec.mode != "total_distorted":
        raise ValueError(f"spec mode is {spec.mode!r}, expected total_distorted")
    m = spec.mdp
    q = _as_q(q, m)
    if spec.backend.kind == "factored" and spec.noise.c > 0.0:
        rows = _alt_rows_factored(q, spec, _packages_for(q, spec))
    else:
        rows = _alt_rows_nodes(q, spec)
    pflat = m.p.reshape(m.s * m.r, m.s)
    return np.einsum("ej,ej->e", pflat, rows).reshape(m.s, m.r)


def operator_F(q, spec: OperatorSpec) -> np.ndarray:
    if spec.mode == "classical":
        return classical_F(q, spec.mdp)
    if spec.mode == "future_distorted":
        return prospect_F(q, spec)
    return alt_F(q, spec)


def vector_field(q, spec: OperatorSpec) -> np.ndarray:
    """Right-hand side h(q) = F(q) - q of the limiting flow."""
    return operator_F(q, spec) - _as_q(q, spec.mdp)


@dataclass
class JacobianMatrix:
    """Nonnegative Jacobian of F with its row-sum bounds.

    For strictly positive kernels and strictly increasing curves the matrix
    is strictly positive, hence irreducible, and its dominant eigenvalue is
    pinched between gamma_min and gamma_max (the extreme row sums).
    """

    entries: np.ndarray     # (s*r, s*r), canonical C-order pair indexing
    row_sums: np.ndarray
    gamma_max: float
    gamma_min: float
    backend: Backend

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def jacobian(q, spec: OperatorSpec) -> JacobianMatrix:
    """Analytic Jacobian of the distorted operator at q, built from the same
    nodes (or common random numbers) as the operator evaluation."""
    if spec.mode == "classical":
        raise ValueError("the classical operator is piecewise linear; no smooth Jacobian")
    m = spec.mdp
    q = _as_q(q, m)
    factored = spec.backend.kind == "factored" and spec.noise.c > 0.0
    if spec.mode == "future_distorted":
        if factored:
            G = _future_jac_factors_factored(q, spec, _packages_for(q, spec))
        else:
            G = _future_jac_factors_nodes(q, spec)
        J = m.alpha * np.einsum("ivj,jw->ivjw", m.p, G).reshape(m.n_pairs, m.n_pairs)
    else:
        if factored:
            G = _alt_jac_factors_factored(q, spec, _packages_for(q, spec))
        else:
            G = _alt_jac_factors_nodes(q, spec)
        pflat = m.p.reshape(m.n_pairs, m.s)
        J = m.alpha * np.einsum("ej,ejw->ejw", pflat, G).reshape(m.n_pairs, m.n_pairs)
    rows = J.sum(axis=1)
    return JacobianMatrix(entries=J, row_sums=rows, gamma_max=float(rows.max()),
                          gamma_min=float(rows.min()), backend=spec.backend)
