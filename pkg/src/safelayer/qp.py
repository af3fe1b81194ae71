"""Dense quadratic programs: problem/solution types, a primal-dual interior-point
solver (single and fixed-iteration batched), and implicit differentiation of the
optimum with respect to the linear objective term.

Problems have the form

    min_x  0.5 x'Px + q'x   s.t.  Gx <= h,  Ax = b

with P symmetric positive definite. The solver runs Mehrotra-style
predictor-corrector steps on the full unsymmetric KKT system, factored by LU
with partial pivoting; batches of identically-shaped problems are advanced in
lockstep for a fixed iteration count so the computation has constant shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QpError(Exception):
    pass


class SingularKkt(QpError):
    """A KKT factorization failed (degenerate constraint geometry)."""


class NumericalBlowup(QpError):
    """An iterate became non-finite."""


class ShapeMismatch(QpError):
    """Batch members do not share (n_x, n_in, n_eq)."""


class DegenerateActiveSet(QpError):
    """Strict complementarity fails at the optimum; the gradient is undefined."""


SYMMETRY_TOL = 1e-10
DEFAULT_K_MAX = 10
# Single-QP early-exit threshold; batch mode never exits early. Tight enough
# that an early-exited solve agrees with the fixed-iteration batch path to
# well below 1e-8 in the primal.
EARLY_EXIT_RESIDUAL = 1e-11
# Fraction-to-boundary factor keeping slacks and duals strictly positive.
STEP_SCALE = 0.99


def _as_matrix(value, rows, cols, name):
    arr = np.asarray(value, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(rows if rows is not None else 0, cols)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class QpProblem:
    """Objective and constraint matrices of one dense QP."""

    P: np.ndarray
    q: np.ndarray
    G: np.ndarray
    h: np.ndarray
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        q = np.asarray(self.q, dtype=float).ravel()
        n_x = q.shape[0]
        G = _as_matrix(self.G, None, n_x, "G")
        h = np.asarray(self.h, dtype=float).ravel()
        A = _as_matrix(self.A, None, n_x, "A")
        b = np.asarray(self.b, dtype=float).ravel()
        if P.shape != (n_x, n_x):
            raise ValueError(f"P must be {n_x}x{n_x}, got {P.shape}")
        if np.abs(P - P.T).max(initial=0.0) > SYMMETRY_TOL:
            raise ValueError("P is not symmetric within 1e-10")
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise ValueError("P is not positive definite") from None
        if G.shape[1] != n_x or A.shape[1] != n_x:
            raise ValueError("constraint matrices must have n_x columns")
        if G.shape[0] != h.shape[0]:
            raise ValueError(f"G has {G.shape[0]} rows but h has {h.shape[0]}")
        if A.shape[0] != b.shape[0]:
            raise ValueError(f"A has {A.shape[0]} rows but b has {b.shape[0]}")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n_x(self) -> int:
        return self.q.shape[0]

    @property
    def n_in(self) -> int:
        return self.h.shape[0]

    @property
    def n_eq(self) -> int:
        return self.b.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_x, self.n_in, self.n_eq)

    @classmethod
    def projection(cls, target, G, h, A=None, b=None) -> "QpProblem":
        """Projection of ``target`` onto {Gx <= h, Ax = b} (P = I, q = -target)."""
        target = np.asarray(target, dtype=float).ravel()
        n_x = target.shape[0]
        if A is None:
            A = np.zeros((0, n_x))
            b = np.zeros(0)
        return cls(P=np.eye(n_x), q=-target, G=G, h=h, A=A, b=b)


@dataclass(frozen=True)
class QpSolution:
    """Primal/dual/slack optimum with residual diagnostics."""

    x_star: np.ndarray
    s: np.ndarray
    z: np.ndarray
    y: np.ndarray
    kkt_residual: float
    iterations: int


def _stack(problems):
    P = np.stack([p.P for p in problems])
    q = np.stack([p.q for p in problems])
    G = np.stack([p.G for p in problems])
    h = np.stack([p.h for p in problems])
    A = np.stack([p.A for p in problems])
    b = np.stack([p.b for p in problems])
    return P, q, G, h, A, b


def _residual(P, q, G, h, A, b, x, s, z, y):
    """Max-norm of stationarity, primal and complementarity residuals, per instance."""
    r_dual = _bmv(P, x) + q + _bmv_t(G, z) + _bmv_t(A, y)
    res = np.abs(r_dual).max(axis=1)
    if G.shape[1]:
        r_pri = _bmv(G, x) + s - h
        res = np.maximum(res, np.abs(r_pri).max(axis=1))
        res = np.maximum(res, np.abs(s * z).max(axis=1))
    if A.shape[1]:
        r_eq = _bmv(A, x) - b
        res = np.maximum(res, np.abs(r_eq).max(axis=1))
    return res


def _bmv(M, v):
    return np.einsum("bij,bj->bi", M, v)


def _bmv_t(M, v):
    return np.einsum("bji,bj->bi", M, v)


def _bsolve(K, rhs):
    """Batched linear solve with an unambiguous vector right-hand side."""
    return np.linalg.solve(K, rhs[..., None])[..., 0]


def _init_stacked(P, q, G, h, A, b):
    """Starting point from the one-shot KKT-style system.

    The slack/dual estimates read off the system are shifted into strict
    positivity with the standard cold-start centering heuristic (push both
    vectors past their most negative entry, then balance the products); a
    final unit shift guards the degenerate all-zero case.
    """
    batch, n_x = q.shape
    n_in = h.shape[1]
    n_eq = b.shape[1]
    n = n_x + n_in + n_eq
    K = np.zeros((batch, n, n))
    K[:, :n_x, :n_x] = P
    K[:, :n_x, n_x : n_x + n_in] = np.transpose(G, (0, 2, 1))
    K[:, :n_x, n_x + n_in :] = np.transpose(A, (0, 2, 1))
    K[:, n_x : n_x + n_in, :n_x] = G
    idx = np.arange(n_in)
    K[:, n_x + idx, n_x + idx] = -1.0
    K[:, n_x + n_in :, :n_x] = A
    rhs = np.concatenate([-q, h, b], axis=1)
    try:
        sol = _bsolve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularKkt("initialization system is singular") from exc
    if not np.isfinite(sol).all():
        raise SingularKkt("initialization produced non-finite values")
    x = sol[:, :n_x]
    z_hat = sol[:, n_x : n_x + n_in]
    y = sol[:, n_x + n_in :]
    s = -z_hat.copy()
    z = z_hat.copy()
    if n_in:
        s += np.maximum(-1.5 * s.min(axis=1), 0.0)[:, None]
        z += np.maximum(-1.5 * z.min(axis=1), 0.0)[:, None]
        dot = (s * z).sum(axis=1)
        dot = np.where(dot > 0.0, dot, 1.0)
        s += (0.5 * dot / np.maximum(z.sum(axis=1), 1e-10))[:, None]
        z += (0.5 * dot / np.maximum(s.sum(axis=1), 1e-10))[:, None]
        s_min = s.min(axis=1)
        s += np.where(s_min <= 0.0, 1.0 - s_min, 0.0)[:, None]
        z_min = z.min(axis=1)
        z += np.where(z_min <= 0.0, 1.0 - z_min, 0.0)[:, None]
    return x, s, z, y


def _max_step(v, dv):
    """Largest alpha with v + alpha*dv >= 0, per instance (inf when unbounded)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(dv < 0.0, -v / dv, np.inf)
    return ratios.min(axis=1)


def _iterate(P, q, G, h, A, b, x, s, z, y, k_max, early_exit):
    """Predictor-corrector loop on stacked problems. Returns final iterates and
    per-instance iteration counts."""
    batch, n_x = q.shape
    n_in = h.shape[1]
    n_eq = b.shape[1]
    n = n_x + 2 * n_in + n_eq
    base = np.zeros((batch, n, n))
    base[:, :n_x, :n_x] = P
    base[:, :n_x, n_x + n_in : n_x + 2 * n_in] = np.transpose(G, (0, 2, 1))
    base[:, :n_x, n_x + 2 * n_in :] = np.transpose(A, (0, 2, 1))
    base[:, n_x + n_in : n_x + 2 * n_in, :n_x] = G
    idx = np.arange(n_in)
    base[:, n_x + n_in + idx, n_x + idx] = 1.0
    base[:, n_x + 2 * n_in :, :n_x] = A

    iterations = np.zeros(batch, dtype=int)
    for k in range(k_max):
        r_dual = _bmv(P, x) + q + _bmv_t(G, z) + _bmv_t(A, y)
        r_pri = _bmv(G, x) + s - h
        r_eq = _bmv(A, x) - b

        M = base.copy()
        M[:, n_x + idx, n_x + idx] = z
        M[:, n_x + idx, n_x + n_in + idx] = s
        rhs = np.concatenate([-r_dual, -(s * z), -r_pri, -r_eq], axis=1)
        try:
            d_aff = _bsolve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularKkt(f"KKT system singular at iteration {k}") from exc
        dx = d_aff[:, :n_x]
        ds = d_aff[:, n_x : n_x + n_in]
        dz = d_aff[:, n_x + n_in : n_x + 2 * n_in]
        dy = d_aff[:, n_x + 2 * n_in :]

        mu = (s * z).sum(axis=1) / n_in
        alpha_aff = np.minimum(1.0, np.minimum(_max_step(s, ds), _max_step(z, dz)))
        mu_aff = ((s + alpha_aff[:, None] * ds) * (z + alpha_aff[:, None] * dz)).sum(axis=1) / n_in
        with np.errstate(divide="ignore", invalid="ignore"):
            sigma = np.where(mu > 0.0, (mu_aff / mu) ** 3, 0.0)
        sigma = np.clip(sigma, 0.0, 1.0)

        # The second-order term is scaled by the squared affine step length:
        # with a short step only that fraction of the correction is realized,
        # and the full term destabilizes badly centered iterates.
        corr = (alpha_aff**2)[:, None] * ds * dz
        rhs[:, n_x : n_x + n_in] = -(s * z) - corr + (sigma * mu)[:, None]
        try:
            d = _bsolve(M, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularKkt(f"KKT system singular at iteration {k}") from exc
        dx = d[:, :n_x]
        ds = d[:, n_x : n_x + n_in]
        dz = d[:, n_x + n_in : n_x + 2 * n_in]
        dy = d[:, n_x + 2 * n_in :]

        alpha = np.minimum(1.0, STEP_SCALE * np.minimum(_max_step(s, ds), _max_step(z, dz)))
        x = x + alpha[:, None] * dx
        s = s + alpha[:, None] * ds
        z = z + alpha[:, None] * dz
        y = y + alpha[:, None] * dy
        iterations += 1

        if not (np.isfinite(x).all() and np.isfinite(s).all() and np.isfinite(z).all() and np.isfinite(y).all()):
            raise NumericalBlowup(f"non-finite iterate at iteration {k}")
        if early_exit is not None:
            if (_residual(P, q, G, h, A, b, x, s, z, y) < early_exit).all():
                break
    return x, s, z, y, iterations


def init_point(problem: QpProblem):
    """Solve the one-shot initialization system and return (x0, s0, z0, y0)
    with s0, z0 strictly positive."""
    P, q, G, h, A, b = _stack([problem])
    x, s, z, y = _init_stacked(P, q, G, h, A, b)
    return x[0], s[0], z[0], y[0]


def _solve_no_inequalities(problem: QpProblem) -> QpSolution:
    # Without inequalities the KKT conditions are one linear system.
    n_x, _, n_eq = problem.shape
    if n_eq == 0:
        x = np.linalg.solve(problem.P, -problem.q)
        y = np.zeros(0)
    else:
        n = n_x + n_eq
        K = np.zeros((n, n))
        K[:n_x, :n_x] = problem.P
        K[:n_x, n_x:] = problem.A.T
        K[n_x:, :n_x] = problem.A
        try:
            sol = np.linalg.solve(K, np.concatenate([-problem.q, problem.b]))
        except np.linalg.LinAlgError as exc:
            raise SingularKkt("equality KKT system is singular") from exc
        x = sol[:n_x]
        y = sol[n_x:]
    empty = np.zeros(0)
    P, q, G, h, A, b = _stack([problem])
    res = float(_residual(P, q, G, h, A, b, x[None], empty[None], empty[None], y[None])[0])
    return QpSolution(x_star=x, s=empty, z=empty, y=y, kkt_residual=res, iterations=0)


def solve(problem: QpProblem, k_max: int = DEFAULT_K_MAX) -> QpSolution:
    """Solve one QP; may stop before ``k_max`` once the KKT residual is tiny."""
    if problem.n_in == 0:
        return _solve_no_inequalities(problem)
    P, q, G, h, A, b = _stack([problem])
    x, s, z, y = _init_stacked(P, q, G, h, A, b)
    x, s, z, y, iters = _iterate(P, q, G, h, A, b, x, s, z, y, k_max, EARLY_EXIT_RESIDUAL)
    res = float(_residual(P, q, G, h, A, b, x, s, z, y)[0])
    return QpSolution(
        x_star=x[0], s=s[0], z=z[0], y=y[0], kkt_residual=res, iterations=int(iters[0])
    )


def solve_batch(problems, k_max: int = DEFAULT_K_MAX) -> list[QpSolution]:
    """Solve identically shaped QPs in lockstep, exactly ``k_max`` iterations each."""
    problems = list(problems)
    if not problems:
        return []
    shape = problems[0].shape
    for i, p in enumerate(problems):
        if p.shape != shape:
            raise ShapeMismatch(f"problem {i} has shape {p.shape}, expected {shape}")
    if shape[1] == 0:
        return [_solve_no_inequalities(p) for p in problems]
    P, q, G, h, A, b = _stack(problems)
    x, s, z, y = _init_stacked(P, q, G, h, A, b)
    x, s, z, y, iters = _iterate(P, q, G, h, A, b, x, s, z, y, k_max, None)
    res = _residual(P, q, G, h, A, b, x, s, z, y)
    return [
        QpSolution(
            x_star=x[i], s=s[i], z=z[i], y=y[i],
            kkt_residual=float(res[i]), iterations=int(iters[i]),
        )
        for i in range(len(problems))
    ]


CONVERGED_RESIDUAL = 1e-6
COMPLEMENTARITY_MIN = 1e-7


def solution_gradient(problem: QpProblem, solution: QpSolution) -> np.ndarray:
    """Jacobian of the optimum w.r.t. q, by implicit differentiation of the KKT
    conditions. Entry (i, j) is d x_star[i] / d q[j]. For a projection problem
    (q = -target) the Jacobian w.r.t. the target is the negation of this matrix.
    """
    if solution.kkt_residual >= CONVERGED_RESIDUAL:
        raise ValueError(
            f"solution not converged (kkt_residual={solution.kkt_residual:g})"
        )
    n_x, n_in, n_eq = problem.shape
    s, z = solution.s, solution.z
    active = s < z
    if n_in:
        if active.any() and z[active].min() <= COMPLEMENTARITY_MIN:
            raise DegenerateActiveSet("active constraint with vanishing dual")
        if (~active).any() and s[~active].min() <= COMPLEMENTARITY_MIN:
            raise DegenerateActiveSet("inactive constraint with vanishing slack")
    # Dependent active rows (e.g. duplicates) leave the multipliers, and hence
    # the linearized system, underdetermined.
    binding = np.vstack([problem.A, problem.G[active]])
    if binding.shape[0]:
        svals = np.linalg.svd(binding, compute_uv=False)
        if binding.shape[0] > n_x or svals.min() <= 1e-8 * svals.max():
            raise DegenerateActiveSet("active constraint rows are linearly dependent")
    n = n_x + n_in + n_eq
    K = np.zeros((n, n))
    K[:n_x, :n_x] = problem.P
    K[:n_x, n_x : n_x + n_in] = problem.G.T
    K[:n_x, n_x + n_in :] = problem.A.T
    K[n_x : n_x + n_in, :n_x] = z[:, None] * problem.G
    idx = np.arange(n_in)
    K[n_x + idx, n_x + idx] = problem.G @ solution.x_star - problem.h
    K[n_x + n_in :, :n_x] = problem.A
    rhs = np.zeros((n, n_x))
    rhs[:n_x, :] = -np.eye(n_x)
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateActiveSet("linearized KKT system is singular") from exc
    return sol[:n_x, :]


# Flat text record for oracle cross-checking: one `name=values` line per
# matrix (row-major), preceded by the three dimensions.

def format_problem(problem: QpProblem) -> str:
    def row(name, arr):
        return f"{name}=" + " ".join(repr(float(v)) for v in np.asarray(arr).ravel())

    lines = [
        f"n_x={problem.n_x}",
        f"n_in={problem.n_in}",
        f"n_eq={problem.n_eq}",
        row("P", problem.P),
        row("q", problem.q),
        row("G", problem.G),
        row("h", problem.h),
        row("A", problem.A),
        row("b", problem.b),
    ]
    return "\n".join(lines) + "\n"


def format_solution(solution: QpSolution) -> str:
    def row(name, arr):
        return f"{name}=" + " ".join(repr(float(v)) for v in np.asarray(arr).ravel())

    lines = [
        row("x_star", solution.x_star),
        row("s", solution.s),
        row("z", solution.z),
        row("y", solution.y),
        f"kkt_residual={solution.kkt_residual!r}",
        f"iterations={solution.iterations}",
    ]
    return "\n".join(lines) + "\n"


def parse_problem(text: str) -> QpProblem:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, _, value = line.partition("=")
        fields[name.strip()] = value.strip()
    try:
        n_x = int(fields["n_x"])
        n_in = int(fields["n_in"])
        n_eq = int(fields["n_eq"])
    except KeyError as exc:
        raise ValueError(f"dump record is missing dimension {exc}") from None

    def grab(name, rows, cols=None):
        raw = fields.get(name, "")
        vals = np.array([float(v) for v in raw.split()]) if raw else np.zeros(0)
        if cols is None:
            if vals.size != rows:
                raise ValueError(f"{name} has {vals.size} values, expected {rows}")
            return vals
        if vals.size != rows * cols:
            raise ValueError(f"{name} has {vals.size} values, expected {rows * cols}")
        return vals.reshape(rows, cols)

    return QpProblem(
        P=grab("P", n_x, n_x),
        q=grab("q", n_x),
        G=grab("G", n_in, n_x),
        h=grab("h", n_in),
        A=grab("A", n_eq, n_x),
        b=grab("b", n_eq),
    )
