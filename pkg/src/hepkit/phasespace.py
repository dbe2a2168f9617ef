"""n-body phase-space Monte Carlo generation.

Events are produced with the ordered-uniform construction: n-2 sorted
deviates place the intermediate invariant masses inside their kinematic
window, the event weight is the product of the two-body breakup momenta
along the chain, and the kinematics are built by successive isotropic
two-body decays boosted up the chain into the mother frame.

Weights are relative (unnormalized breakup-momentum products);
``phsp_average`` divides by the weight sum, so no absolute phase-space
volume normalization is needed.  Each event derives entirely from its own
counter block, making every generation path worker-count invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .integrate import IntegrationResult
from .functors import EvaluationError, FunctorExpr
from .kinematics import (
    MASS_TOLERANCE,
    BelowThreshold,
    FourVector,
    breakup_momentum,
    invariant_mass,
)
from .parallel import EVAL_BATCH, chunk_bounds, run_batches
from .rng import RngKey, uniform_array, _u64
from .store import ColumnSchema, ColumnStore


@dataclass(frozen=True)
class DecaySpec:
    """Mother mass and ordered daughter masses (GeV)."""

    mother_mass: float
    daughter_masses: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "daughter_masses", tuple(float(m) for m in self.daughter_masses))
        if len(self.daughter_masses) < 2:
            raise ValueError("a decay needs at least two daughters")
        if any(m < 0 for m in self.daughter_masses):
            raise ValueError("daughter masses must be non-negative")
        if not self.mother_mass > sum(self.daughter_masses):
            raise BelowThreshold(
                f"mother mass {self.mother_mass} is not above the daughter "
                f"mass sum {sum(self.daughter_masses)}"
            )

    @property
    def n(self) -> int:
        return len(self.daughter_masses)


def phsp_schema(n_daughters: int) -> ColumnSchema:
    names = ["weight"]
    for k in range(1, n_daughters + 1):
        names += [f"p{k}_e", f"p{k}_px", f"p{k}_py", f"p{k}_pz"]
    return ColumnSchema.real64(*names)


def _pdk_array(M: np.ndarray, m1: np.ndarray | float, m2: float) -> np.ndarray:
    """Vectorized breakup momentum; tiny negative lambdas from rounding clamp to 0."""
    M2, a2, b2 = M * M, np.square(m1), m2 * m2
    lam = (M2 - a2 - b2) ** 2 - 4.0 * a2 * b2
    return np.sqrt(np.maximum(lam, 0.0)) / (2.0 * M)


def _boost(e, px, py, pz, fe, fx, fy, fz, fm):
    """Boost (e, p) from the rest frame of a frame with components (fe, f*)
    and mass fm into the frame where it has that momentum.  Array-safe."""
    gamma = fe / fm
    bx, by, bz = fx / fe, fy / fe, fz / fe
    bp = bx * px + by * py + bz * pz
    k = gamma * gamma / (gamma + 1.0) * bp + gamma * e
    return gamma * (e + bp), px + k * bx, py + k * by, pz + k * bz


def _draws_per_event(n: int) -> int:
    # n-2 mass deviates plus (cos theta, phi) per chain step
    return (n - 2) + 2 * (n - 1)


def _generate_rest_frame(
    spec: DecaySpec, n_events: int, key: RngKey, workers: int | None
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Weights plus per-daughter component arrays in the mother rest frame."""
    n = spec.n
    masses = np.asarray(spec.daughter_masses)
    M = spec.mother_mass
    T = M - float(np.sum(masses))
    csum = np.cumsum(masses)
    D = _draws_per_event(n)

    weight = np.empty(n_events)
    comps = [np.empty(n_events) for _ in range(4 * n)]

    def batch(a: int, b: int) -> None:
        m_ev = b - a
        ev = np.arange(a, b, dtype=np.uint64)
        base = (ev + _u64(key.counter)) * np.uint64(D)

        def draw(offset: int) -> np.ndarray:
            return uniform_array(key.at(0), base + np.uint64(offset))

        # intermediate invariant masses from sorted uniforms
        rno = np.empty((m_ev, n))
        rno[:, 0] = 0.0
        rno[:, n - 1] = 1.0
        if n > 2:
            r = np.stack([draw(k) for k in range(n - 2)], axis=1)
            rno[:, 1 : n - 1] = np.sort(r, axis=1)
        inv_mas = rno * T + csum[None, :]

        w = np.ones(m_ev)
        pstars = []
        for k in range(1, n):
            pk = _pdk_array(inv_mas[:, k], inv_mas[:, k - 1], masses[k])
            pstars.append(pk)
            w = w * pk

        # chain construction: daughter 0 starts at rest with mass m_0
        e = [np.empty((m_ev,)) for _ in range(n)]
        px = [np.zeros(m_ev) for _ in range(n)]
        py = [np.zeros(m_ev) for _ in range(n)]
        pz = [np.zeros(m_ev) for _ in range(n)]
        e[0] = np.full(m_ev, masses[0])
        for k in range(1, n):
            p = pstars[k - 1]
            cz = 2.0 * draw(n - 2 + 2 * (k - 1)) - 1.0
            phi = 2.0 * np.pi * draw(n - 2 + 2 * (k - 1) + 1)
            sz = np.sqrt(np.maximum(1.0 - cz * cz, 0.0))
            nx, ny, nz = sz * np.cos(phi), sz * np.sin(phi), cz
            # the built cluster of mass inv_mas[:, k-1] recoils against
            # daughter k inside the rest frame of inv_mas[:, k]
            cl_m = inv_mas[:, k - 1]
            cl_e = np.sqrt(p * p + cl_m * cl_m)
            cl_x, cl_y, cl_z = p * nx, p * ny, p * nz
            for j in range(k):
                e[j], px[j], py[j], pz[j] = _boost(
                    e[j], px[j], py[j], pz[j], cl_e, cl_x, cl_y, cl_z, cl_m
                )
            e[k] = np.sqrt(p * p + masses[k] * masses[k])
            px[k], py[k], pz[k] = -cl_x, -cl_y, -cl_z

        weight[a:b] = w
        for j in range(n):
            comps[4 * j + 0][a:b] = e[j]
            comps[4 * j + 1][a:b] = px[j]
            comps[4 * j + 2][a:b] = py[j]
            comps[4 * j + 3][a:b] = pz[j]

    run_batches(batch, n_events, workers, batch=EVAL_BATCH)
    return weight, comps


def phsp_generate(
    spec: DecaySpec,
    mother: FourVector,
    n_events: int,
    key: RngKey,
    workers: int | None = 1,
) -> ColumnStore:
    """Generate weighted n-body decays of ``mother``.

    The mother's invariant mass must match the spec mass to 1e-9 relative.
    Per event the daughters sum to the mother four-vector and each daughter
    is on shell at its spec mass.
    """
    m_mother = invariant_mass(mother)
    if abs(m_mother - spec.mother_mass) > MASS_TOLERANCE * spec.mother_mass:
        raise ValueError(
            f"mother mass {m_mother!r} does not match spec mass {spec.mother_mass!r}"
        )
    weight, comps = _generate_rest_frame(spec, n_events, key, workers)
    moving = mother.px != 0.0 or mother.py != 0.0 or mother.pz != 0.0
    if moving:
        for j in range(spec.n):
            comps[4 * j], comps[4 * j + 1], comps[4 * j + 2], comps[4 * j + 3] = _boost(
                comps[4 * j], comps[4 * j + 1], comps[4 * j + 2], comps[4 * j + 3],
                mother.e, mother.px, mother.py, mother.pz, m_mother,
            )
    return ColumnStore.from_columns(phsp_schema(spec.n), [weight] + comps)


def phsp_max_weight(spec: DecaySpec) -> float:
    """Upper bound on event weights: each chain factor maximized at its
    extremal intermediate masses independently."""
    masses = spec.daughter_masses
    T = spec.mother_mass - sum(masses)
    emmax = T + masses[0]
    emmin = 0.0
    wt = 1.0
    for k in range(1, spec.n):
        emmin += masses[k - 1]
        emmax += masses[k]
        wt *= breakup_momentum(emmax, emmin, masses[k])
    return wt


def phsp_unweight(
    block: ColumnStore,
    w_max: float,
    key: RngKey,
    workers: int | None = 1,
) -> ColumnStore:
    """Accept event i iff u_i * w_max < weight_i; accepted weights become 1.

    Order is preserved.  Any weight above ``w_max`` is an error (a silent
    ceiling violation would bias the sample).
    """
    w = block.column("weight")
    over = w > w_max
    if np.any(over):
        j = int(np.argmax(over))
        raise ValueError(f"event {j} weight {w[j]!r} exceeds w_max {w_max!r}")
    n = len(block)
    accept = np.empty(n, dtype=bool)

    def batch(a: int, b: int) -> None:
        u = uniform_array(key, np.arange(a, b, dtype=np.uint64))
        accept[a:b] = u * w_max < w[a:b]

    run_batches(batch, n, workers, batch=EVAL_BATCH)
    out = block.where_mask(accept)
    cols = [np.ones(len(out))] + [
        np.array(out.column(name)) for name in out.schema.names[1:]
    ]
    return ColumnStore.from_columns(out.schema, cols)


def phsp_decay_chain(
    block: ColumnStore,
    daughter_index: int,
    subspec: DecaySpec,
    key: RngKey,
    workers: int | None = 1,
) -> ColumnStore:
    """Decay daughter ``daughter_index`` (1-based) of every event in turn.

    The sub-decay is generated in the daughter's rest frame and boosted by
    the daughter's momentum; the event weight picks up the sub-decay
    weight.  The daughter's columns are replaced, in place in the ordering,
    by the sub-daughters, and daughters are renumbered.
    """
    n_old = (len(block.schema) - 1) // 4
    if not 1 <= daughter_index <= n_old:
        raise ValueError(f"daughter index {daughter_index} out of range 1..{n_old}")
    k = daughter_index
    fe = block.column(f"p{k}_e")
    fx = block.column(f"p{k}_px")
    fy = block.column(f"p{k}_py")
    fz = block.column(f"p{k}_pz")
    m2 = fe * fe - fx * fx - fy * fy - fz * fz
    fm = np.sqrt(np.maximum(m2, 0.0))
    tol = MASS_TOLERANCE * max(subspec.mother_mass, 1e-6)
    bad = np.abs(fm - subspec.mother_mass) > tol
    if np.any(bad):
        j = int(np.argmax(bad))
        raise ValueError(
            f"event {j}: daughter {k} mass {fm[j]!r} does not match "
            f"sub-decay mother mass {subspec.mother_mass!r}"
        )

    sub_w, sub = _generate_rest_frame(subspec, len(block), key, workers)
    boosted = []
    for j in range(subspec.n):
        boosted.append(
            _boost(sub[4 * j], sub[4 * j + 1], sub[4 * j + 2], sub[4 * j + 3],
                   fe, fx, fy, fz, fm)
        )

    weight = block.column("weight") * sub_w
    cols: list[np.ndarray] = [weight]
    for i in range(1, n_old + 1):
        if i == k:
            for be, bx, by, bz in boosted:
                cols += [be, bx, by, bz]
        else:
            cols += [
                np.array(block.column(f"p{i}_{c}")) for c in ("e", "px", "py", "pz")
            ]
    return ColumnStore.from_columns(phsp_schema(n_old - 1 + subspec.n), cols)


def phsp_average(
    expr: FunctorExpr,
    block: ColumnStore,
    arg_builder,
    workers: int | None = 1,
) -> IntegrationResult:
    """Weighted average of ``expr`` over the event block.

    ``arg_builder`` receives a dict of column slices for a batch of events
    and returns the tuple of argument arrays for the expression.  The
    result value is sum(w f) / sum(w) with the weighted standard error;
    accumulation uses the fixed-order chunk reduction.
    """
    n = len(block)
    if n == 0:
        raise ValueError("cannot average over an empty block")
    names = block.schema.names
    w_col = block.column("weight")

    def batch(a: int, b: int):
        cols = {name: block.column(name)[a:b] for name in names}
        args = arg_builder(cols)
        f = np.asarray(expr.eval(tuple(args)), dtype=float)
        if not np.all(np.isfinite(f)):
            j = int(np.argmax(~np.isfinite(f)))
            raise EvaluationError(f"non-finite model value at event {a + j}")
        w = w_col[a:b]
        out = []
        for ca, cb in chunk_bounds(a, b):
            lo_, hi_ = ca - a, cb - a
            ws, fs = w[lo_:hi_], f[lo_:hi_]
            out.append((
                float(np.sum(ws)),
                float(np.sum(ws * fs)),
                float(np.sum(ws * ws)),
                float(np.sum(ws * ws * fs)),
                float(np.sum(ws * ws * fs * fs)),
            ))
        return out

    partials = [p for chunk_list in run_batches(batch, n, workers) for p in chunk_list]
    sw = swf = sw2 = sw2f = sw2f2 = 0.0
    for p in partials:
        sw += p[0]
        swf += p[1]
        sw2 += p[2]
        sw2f += p[3]
        sw2f2 += p[4]
    if sw <= 0:
        raise ValueError("total weight is not positive")
    mu = swf / sw
    spread = max(sw2f2 - 2.0 * mu * sw2f + mu * mu * sw2, 0.0)
    return IntegrationResult(
        value=mu,
        error=math.sqrt(spread) / sw,
        iterations=1,
        chi2_per_dof=0.0,
        calls_used=n,
    )
