"""sPlot statistical unfolding.

From a fitted extended model, the sWeights covariance matrix is the
inverse of the accumulated

    (V^-1)_nj = sum_e pdf_n(x_e) pdf_j(x_e) / (sum_k N_k pdf_k(x_e))^2

and the per-event weight for species n is

    sw_n(e) = sum_j V_nj pdf_j(x_e) / sum_k N_k pdf_k(x_e).

At the extended-ML optimum the weights of each event sum to one and the
per-species weight sums reproduce the fitted yields.  Both accumulations
use the fixed-order chunk reduction, so matrix and table are bitwise
identical for any worker count.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .fitting import ExtendedModel
from .parallel import chunk_bounds, run_batches
from .store import ColumnSchema, ColumnStore

# the model must sit at its extended-ML optimum for the sPlot identities
# to hold; yields farther than this from stationarity are rejected
_STATIONARITY_TOL = 1e-6

_CONDITION_LIMIT = 1e12


def _pdf_matrix(model: ExtendedModel, args: tuple, offset: int) -> tuple[np.ndarray, np.ndarray]:
    p = np.stack([pdf.value(args) for _, pdf in model.components], axis=1)
    dens = p @ np.array([y.value for y, _ in model.components])
    bad = ~(dens > 0) | ~np.isfinite(dens)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise ValueError(f"model density {dens[j]!r} is not positive at event {offset + j}")
    return p, dens


def splot_matrix(
    model: ExtendedModel,
    store: ColumnStore,
    observable_columns: Sequence[str],
    workers: int | None = 1,
) -> np.ndarray:
    """The sWeights covariance matrix V for the fitted model on the data.

    Raises when the accumulated matrix is numerically singular (degenerate
    species) or when the yields are not at their extended-ML optimum.
    """
    cols = store.columns(observable_columns)
    k = len(model.components)
    for _, pdf in model.components:
        pdf.norm()

    def batch(a: int, b: int):
        p, dens = _pdf_matrix(model, tuple(c[a:b] for c in cols), a)
        ratios = p / dens[:, None]
        out = []
        for ca, cb in chunk_bounds(a, b):
            r = ratios[ca - a : cb - a]
            out.append((r.T @ r, r.sum(axis=0)))
        return out

    partials = [p for chunk_list in run_batches(batch, len(store), workers) for p in chunk_list]
    vinv = np.zeros((k, k))
    station = np.zeros(k)
    for am, gs in partials:
        vinv = vinv + am
        station = station + gs
    residual = np.max(np.abs(station - 1.0))
    if residual > _STATIONARITY_TOL:
        raise ValueError(
            f"yields are not at the extended-ML optimum "
            f"(stationarity residual {residual:.3g}); fit before computing sWeights"
        )
    if np.linalg.cond(vinv) > _CONDITION_LIMIT:
        raise ValueError(
            "accumulated sWeights matrix is numerically singular; "
            "the model species are degenerate on this data"
        )
    return np.linalg.inv(vinv)


def splot_weights(
    model: ExtendedModel,
    store: ColumnStore,
    observable_columns: Sequence[str],
    V: np.ndarray,
    workers: int | None = 1,
) -> ColumnStore:
    """Per-event, per-species sWeights table aligned with the data store.

    Columns are named ``sw_<species>`` after the yield parameters.
    """
    k = len(model.components)
    V = np.asarray(V, dtype=float)
    if V.shape != (k, k):
        raise ValueError(f"V must be {k}x{k}, got {V.shape}")
    cols = store.columns(observable_columns)
    n = len(store)
    out = np.empty((n, k))
    for _, pdf in model.components:
        pdf.norm()

    def batch(a: int, b: int) -> None:
        p, dens = _pdf_matrix(model, tuple(c[a:b] for c in cols), a)
        out[a:b] = (p @ V.T) / dens[:, None]

    run_batches(batch, n, workers)
    schema = ColumnSchema.real64(*(f"sw_{name}" for name in model.species()))
    return ColumnStore.from_columns(schema, [out[:, i] for i in range(k)])
