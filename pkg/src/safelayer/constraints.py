"""Per-step constraint matrices assembled from the (extended) state vector.

Four block categories are supported: constant rows, rows affine in the state,
rows read off auxiliary dynamics entries of the state (mass matrix, bias), and
conditional rows enabled by a state test. Assembly always produces matrices of
the same shape: inactive conditional rows are replaced by duplicated base rows,
which never tighten the feasible set, so batches of states can be solved with
fixed-size matrices.

Builders take a ``layout`` object describing where named quantities live in
the state vector. The attributes consumed here are ``joint_positions``
(state index of each joint angle, or None when the joint is unlimited),
``joint_velocities``, ``mass_rows`` (per-joint tuples of 8 state indices
holding one mass-matrix row), ``bias_indices``, and the methods
``pair_distance_index(pair)`` / ``pair_jacobian_indices(pair)``.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np


class BadLimits(Exception):
    pass


class BadThresholds(Exception):
    pass


class LayoutError(Exception):
    pass


class BlockKind(enum.Enum):
    CONSTANT = "constant"
    AFFINE = "affine"
    AUXILIARY = "auxiliary"
    CONDITIONAL = "conditional"


# Assembly order of always-active blocks.
_BASE_ORDER = (BlockKind.CONSTANT, BlockKind.AFFINE, BlockKind.AUXILIARY)


@dataclass(frozen=True)
class ConstraintBlock:
    """One group of constraint rows plus the recipe producing them.

    ``emit`` maps a state vector to ``(G_rows, h_rows)``. ``reads`` lists the
    state indices the recipe looks at (rows must not depend on any other
    entry). Conditional blocks carry an activation test, ``0 <= test_offset +
    test_selection @ s``, and the half-open range of base rows substituted
    when the test fails.
    """

    kind: BlockKind
    label: str
    n_rows: int
    n_x: int
    emit: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    reads: tuple[int, ...] = ()
    equality: bool = False
    selection: np.ndarray | None = None
    offset: np.ndarray | None = None
    test_selection: np.ndarray | None = None
    test_offset: np.ndarray | None = None
    sub_rows: tuple[int, int] | None = None

    def rows(self, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.emit(state)

    def active(self, state: np.ndarray) -> bool:
        if self.kind is not BlockKind.CONDITIONAL:
            return True
        test = self.test_offset + self.test_selection @ state
        return bool((test >= 0.0).all())


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def constant_block(G, h, label: str = "constant", equality: bool = False) -> ConstraintBlock:
    """Fixed rows, identical for every state."""
    G = _freeze(np.atleast_2d(np.asarray(G, dtype=float)))
    h = _freeze(np.asarray(h, dtype=float).ravel())
    if G.shape[0] != h.shape[0]:
        raise ValueError("G and h row counts differ")
    return ConstraintBlock(
        kind=BlockKind.CONSTANT,
        label=label,
        n_rows=G.shape[0],
        n_x=G.shape[1],
        emit=lambda state, G=G, h=h: (G, h),
        equality=equality,
    )


def equality_block(A, b, label: str = "equality") -> ConstraintBlock:
    return constant_block(A, b, label=label, equality=True)


def build_constant_velocity_block(dt: float, qd_min, qd_max) -> ConstraintBlock:
    """Velocity-limit rows [I; -I] x <= [dt*qd_max; -dt*qd_min]."""
    qd_min = np.asarray(qd_min, dtype=float).ravel()
    qd_max = np.asarray(qd_max, dtype=float).ravel()
    if dt <= 0:
        raise BadLimits("dt must be positive")
    if qd_min.shape != qd_max.shape:
        raise BadLimits("velocity limit vectors differ in length")
    if not (qd_min < qd_max).all():
        raise BadLimits("qd_min must be strictly below qd_max on every joint")
    n = qd_max.shape[0]
    G = np.vstack([np.eye(n), -np.eye(n)])
    h = np.concatenate([dt * qd_max, -dt * qd_min])
    return constant_block(G, h, label="velocity")


def build_affine_position_block(theta_min, theta_max, layout) -> ConstraintBlock:
    """Position-limit rows [I; -I] x <= H s + [theta_max; -theta_min].

    Joints with infinite limits on both sides contribute no rows; a limited
    joint whose angle is absent from the state layout is a LayoutError.
    """
    theta_min = np.asarray(theta_min, dtype=float).ravel()
    theta_max = np.asarray(theta_max, dtype=float).ravel()
    n = theta_max.shape[0]
    if theta_min.shape != theta_max.shape:
        raise BadLimits("position limit vectors differ in length")
    rows_G = []
    selection_rows = []
    offsets = []
    reads = []
    for j in range(n):
        lo, hi = theta_min[j], theta_max[j]
        if np.isinf(lo) and np.isinf(hi):
            continue
        if not lo < hi:
            raise BadLimits(f"joint {j}: theta_min must be below theta_max")
        idx = layout.joint_positions[j]
        if idx is None:
            raise LayoutError(f"joint {j} is limited but its angle is not in the state")
        reads.append(idx)
        e = np.zeros(n)
        e[j] = 1.0
        sel = np.zeros(layout.dim)
        sel[idx] = -1.0
        rows_G.append(e)
        selection_rows.append(sel)
        offsets.append(hi)
        sel = np.zeros(layout.dim)
        sel[idx] = 1.0
        rows_G.append(-e)
        selection_rows.append(sel)
        offsets.append(-lo)
    G = _freeze(np.vstack(rows_G) if rows_G else np.zeros((0, n)))
    selection = _freeze(np.vstack(selection_rows) if selection_rows else np.zeros((0, layout.dim)))
    offset = _freeze(np.asarray(offsets, dtype=float))

    def emit(state, G=G, selection=selection, offset=offset):
        return G, offset + selection @ state

    return ConstraintBlock(
        kind=BlockKind.AFFINE,
        label="position",
        n_rows=G.shape[0],
        n_x=n,
        emit=emit,
        reads=tuple(reads),
        selection=selection,
        offset=offset,
    )


def build_torque_block(dt: float, tau_min, tau_max, layout) -> ConstraintBlock:
    """Torque-limit rows built from the mass-matrix/bias entries of the state.

    The predicted torque is affine in the joint step x:
    tau(x) = Hj x / dt^2 + C - Hj qd / dt, with Hj the joint columns of the
    mass-matrix rows stored in the state. Row right-hand sides are clamped at
    zero so that x = 0 (hold still) is always admissible, even when the
    current velocity already demands out-of-range torque.
    """
    tau_min = np.asarray(tau_min, dtype=float).ravel()
    tau_max = np.asarray(tau_max, dtype=float).ravel()
    if dt <= 0:
        raise BadLimits("dt must be positive")
    if not (tau_min < tau_max).all():
        raise BadLimits("tau_min must be strictly below tau_max on every joint")
    n = tau_max.shape[0]
    try:
        mass_rows = layout.mass_rows
        bias_idx = list(layout.bias_indices)
        vel_idx = list(layout.joint_velocities)
    except AttributeError as exc:
        raise LayoutError(f"state layout lacks dynamics entries: {exc}") from None
    if len(mass_rows) != n or len(bias_idx) != n or len(vel_idx) != n:
        raise LayoutError("dynamics entries do not cover every joint")
    # Joint columns are the last n entries of each stored mass-matrix row.
    joint_cols = np.array([[row[-n + c] for c in range(n)] for row in mass_rows])
    bias_idx = np.array(bias_idx)
    vel_idx = np.array(vel_idx)
    reads = tuple(joint_cols.ravel()) + tuple(bias_idx) + tuple(vel_idx)

    def emit(state):
        Hj = state[joint_cols]
        hold = state[bias_idx] - (Hj @ state[vel_idx]) / dt
        top = Hj / dt**2
        h_upper = np.maximum(tau_max - hold, 0.0)
        h_lower = np.maximum(hold - tau_min, 0.0)
        return np.vstack([top, -top]), np.concatenate([h_upper, h_lower])

    return ConstraintBlock(
        kind=BlockKind.AUXILIARY,
        label="torque",
        n_rows=2 * n,
        n_x=n,
        emit=emit,
        reads=reads,
    )


def build_collision_block(pair, xi: float, d_m: float, d_M: float, layout, dt: float) -> ConstraintBlock:
    """Velocity-damping row for one monitored distance pair.

    Active while the stored distance is at most the influence distance d_M;
    the row bounds how fast the distance may shrink:
    -(n'J) x <= dt * xi * (d - d_m) / (d_M - d_m). The bound is clamped at
    zero so a zero step stays admissible when d < d_m.
    """
    if d_m >= d_M:
        raise BadThresholds("security distance d_m must be below influence distance d_M")
    if xi <= 0:
        raise BadThresholds("velocity damping coefficient xi must be positive")
    if dt <= 0:
        raise BadThresholds("dt must be positive")
    try:
        d_idx = layout.pair_distance_index(pair)
        j_idx = np.array(layout.pair_jacobian_indices(pair))
    except (AttributeError, KeyError) as exc:
        raise LayoutError(f"pair {pair!r} is not in the state layout: {exc}") from None
    n_x = j_idx.shape[0]
    scale = xi / (d_M - d_m)

    def emit(state):
        G = -state[j_idx][None, :]
        h = np.array([dt * max(scale * (state[d_idx] - d_m), 0.0)])
        return G, h

    test_selection = np.zeros((1, layout.dim))
    test_selection[0, d_idx] = -1.0
    return ConstraintBlock(
        kind=BlockKind.CONDITIONAL,
        label=f"collision:{pair[0]}-{pair[1]}",
        n_rows=1,
        n_x=n_x,
        emit=emit,
        reads=(d_idx, *j_idx.tolist()),
        test_selection=_freeze(test_selection),
        test_offset=_freeze(np.array([d_M])),
    )


@dataclass(frozen=True)
class ConstraintSet:
    """Ordered blocks plus the metadata making assembled shapes constant.

    Base inequality blocks come first (constant, affine, auxiliary), then the
    conditional blocks; each conditional is assigned a range of base rows to
    duplicate when inactive. Equality blocks are kept apart.
    """

    blocks: tuple[ConstraintBlock, ...]
    n_x: int

    def __post_init__(self):
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        for blk in blocks:
            if blk.n_x != self.n_x:
                raise LayoutError(
                    f"block {blk.label!r} emits {blk.n_x} columns, set has n_x={self.n_x}"
                )
        eq = tuple(b for b in blocks if b.equality)
        if any(b.kind is BlockKind.CONDITIONAL for b in eq):
            raise LayoutError("conditional equality blocks are not supported")
        ineq = [b for b in blocks if not b.equality]
        base = [b for kind in _BASE_ORDER for b in ineq if b.kind is kind]
        cond = [b for b in ineq if b.kind is BlockKind.CONDITIONAL]
        base_rows = sum(b.n_rows for b in base)
        resolved = []
        cursor = 0
        for blk in cond:
            if blk.sub_rows is None:
                rng = (cursor, cursor + blk.n_rows)
                cursor += blk.n_rows
                blk = dataclasses.replace(blk, sub_rows=rng)
            start, stop = blk.sub_rows
            if stop - start != blk.n_rows:
                raise LayoutError(
                    f"block {blk.label!r}: substitute range covers {stop - start} rows, "
                    f"block has {blk.n_rows}"
                )
            if start < 0 or stop > base_rows:
                raise LayoutError(
                    f"block {blk.label!r}: substitute rows {blk.sub_rows} outside base rows"
                )
            resolved.append(blk)
        object.__setattr__(self, "base_blocks", tuple(base))
        object.__setattr__(self, "conditional_blocks", tuple(resolved))
        object.__setattr__(self, "equality_blocks", eq)
        object.__setattr__(self, "base_rows", base_rows)
        object.__setattr__(self, "n_in", base_rows + sum(b.n_rows for b in resolved))
        object.__setattr__(self, "n_eq", sum(b.n_rows for b in eq))
        reads = [i for b in blocks for i in b.reads]
        object.__setattr__(self, "min_state_dim", (max(reads) + 1) if reads else 0)


def assemble(cset: ConstraintSet, state) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Constraint matrices (G, h, A, b) for one state; shapes never vary."""
    state = np.asarray(state, dtype=float).ravel()
    if state.shape[0] < cset.min_state_dim:
        raise LayoutError(
            f"state has {state.shape[0]} entries, constraint recipes read up to "
            f"index {cset.min_state_dim - 1}"
        )
    g_parts, h_parts = [], []
    for blk in cset.base_blocks:
        G_b, h_b = blk.rows(state)
        g_parts.append(G_b)
        h_parts.append(h_b)
    if g_parts:
        base_G = np.vstack(g_parts)
        base_h = np.concatenate(h_parts)
    else:
        base_G = np.zeros((0, cset.n_x))
        base_h = np.zeros(0)
    g_parts, h_parts = [base_G], [base_h]
    for blk in cset.conditional_blocks:
        if blk.active(state):
            G_b, h_b = blk.rows(state)
        else:
            start, stop = blk.sub_rows
            G_b, h_b = base_G[start:stop], base_h[start:stop]
        g_parts.append(G_b)
        h_parts.append(h_b)
    G = np.vstack(g_parts)
    h = np.concatenate(h_parts)
    if cset.equality_blocks:
        A = np.vstack([blk.rows(state)[0] for blk in cset.equality_blocks])
        b = np.concatenate([blk.rows(state)[1] for blk in cset.equality_blocks])
    else:
        A = np.zeros((0, cset.n_x))
        b = np.zeros(0)
    return G, h, A, b
