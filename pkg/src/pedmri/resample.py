"""Inverse-distance resampling of per-direction volumes onto face centroids.

For each target direction r_j the weights are normalized inverse chord
distances to every (antipodally symmetrized) source direction g_i; the
resampled value is the weighted sum of the source channels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import IcosaScheme, SchemeLevel
from .phantom import GradientTable
from .volume import DataError, Volume4D

EXACT_HIT = 1e-9


class InsufficientSamplingError(DataError):
    pass


@dataclass(frozen=True)
class WeightMatrix:
    weights: np.ndarray        # (n_tokens, M)
    directions: np.ndarray     # (M, 3) source directions the columns refer to
    scheme_level: SchemeLevel

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


def symmetrize(table: GradientTable, vol: Volume4D | None = None):
    """Append -g_i (with a copy of channel i) for every direction g_i."""
    sym = GradientTable(np.concatenate([table.bvals, table.bvals]),
                        np.concatenate([table.bvecs, -table.bvecs]))
    if vol is None:
        return sym, None
    if vol.channels != len(table):
        raise DataError(f"volume has {vol.channels} channels, table has {len(table)} directions")
    data = np.concatenate([vol.data, vol.data], axis=-1)
    return sym, Volume4D(data, dict(vol.meta, symmetrized=True))


def build_weights(dirs, scheme: IcosaScheme, k: int | None = None) -> WeightMatrix:
    """Shepard weights (power 1, chord distance) from ``dirs`` to the centroids.

    ``k`` restricts each row to its k nearest source directions; the default
    uses every direction.
    """
    g = np.asarray(dirs, dtype=float).reshape(-1, 3)
    if len(np.unique(np.round(g, 9), axis=0)) < 4:
        raise InsufficientSamplingError("resampling needs at least 4 distinct directions")
    r = scheme.centroids
    dist = np.linalg.norm(r[:, None, :] - g[None, :, :], axis=-1)
    hit = dist < EXACT_HIT
    with np.errstate(divide="ignore"):
        inv = np.where(hit, 0.0, 1.0 / np.where(hit, 1.0, dist))
    if k is not None:
        if not 1 <= k <= len(g):
            raise ValueError(f"k={k} must lie in [1, {len(g)}]")
        far = np.argsort(dist, axis=1, kind="stable")[:, k:]
        np.put_along_axis(inv, far, 0.0, axis=1)
    w = inv / inv.sum(axis=1, keepdims=True)
    rows = np.flatnonzero(hit.any(axis=1))
    for j in rows:
        w[j] = 0.0
        w[j, np.argmin(dist[j])] = 1.0
    return WeightMatrix(w, g.copy(), scheme.level)


def resample_volume(vol: Volume4D, w: WeightMatrix) -> Volume4D:
    n, m = w.shape
    if vol.channels != m:
        raise DataError(f"volume has {vol.channels} channels but weights expect {m}")
    data = np.asarray(vol.data)
    out = data @ w.weights.T.astype(data.dtype, copy=False)
    return Volume4D(out, dict(vol.meta, scheme=w.scheme_level.name, resampled=True))
