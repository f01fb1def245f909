"""Icosahedral direction schemes.

The regular icosahedron is built from the golden-ratio construction, then
refined by edge bisection with every new vertex projected back onto the
unit sphere. Face centroids (normalized) are the resampling directions and
their order is the token order used by the models, so everything here is
deterministic and platform-independent.
"""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass

import numpy as np

ROUND_DECIMALS = 12


class SchemeLevel(enum.Enum):
    ICOSA6 = 0
    ICOSA21 = 1
    ICOSA46 = 2

    @property
    def n_directions(self) -> int:
        """Unique antipodal vertex directions, 5 n^2 + 1 with n = 2^level."""
        n = 2 ** self.value
        return 5 * n * n + 1

    @property
    def token_count(self) -> int:
        return 20 * 4 ** self.value

    @classmethod
    def parse(cls, name: "str | SchemeLevel") -> "SchemeLevel":
        if isinstance(name, SchemeLevel):
            return name
        key = str(name).strip().upper()
        if key in cls.__members__:
            return cls[key]
        raise ValueError(f"unknown icosahedral scheme {name!r}; expected one of "
                         f"{', '.join(m.lower() for m in cls.__members__)}")


@dataclass(frozen=True)
class IcosaScheme:
    level: SchemeLevel
    vertices: np.ndarray   # (V, 3) unit vectors
    faces: np.ndarray      # (F, 3) vertex indices
    centroids: np.ndarray  # (F, 3) unit vectors, token order

    @property
    def token_count(self) -> int:
        return len(self.faces)

    def to_json(self) -> str:
        """Serialize with 17 significant digits per real."""
        def vec(rows):
            return "[" + ", ".join(
                "[" + ", ".join(format(float(v), ".17g") for v in row) + "]" for row in rows) + "]"

        faces = "[" + ", ".join("[" + ", ".join(str(int(i)) for i in f) + "]"
                                for f in self.faces) + "]"
        return ("{" + f'"level": {json.dumps(self.level.name)}, '
                f'"vertices": {vec(self.vertices)}, "faces": {faces}, '
                f'"centroids": {vec(self.centroids)}' + "}\n")


def _key(v: np.ndarray) -> tuple:
    return tuple(round(float(c), ROUND_DECIMALS) + 0.0 for c in v)


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def face_centroids(vertices, faces=None) -> np.ndarray:
    """Normalized mean of each face's three vertices, in face order.

    Accepts either an :class:`IcosaScheme` or explicit vertex/face arrays.
    """
    if isinstance(vertices, IcosaScheme):
        vertices, faces = vertices.vertices, vertices.faces
    return _normalize(vertices[faces].sum(axis=1) / 3.0)


def build_icosahedron() -> IcosaScheme:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    raw = []
    for s1, s2 in itertools.product((-1.0, 1.0), repeat=2):
        # cyclic permutations of (0, +-1, +-phi)
        raw.append((0.0, s1, s2 * phi))
        raw.append((s1, s2 * phi, 0.0))
        raw.append((s2 * phi, 0.0, s1))
    verts = _normalize(np.array(raw))
    verts = verts[sorted(range(12), key=lambda i: _key(verts[i]))]

    d = np.linalg.norm(verts[:, None, :] - verts[None, :, :], axis=-1)
    edge = d[d > 0].min()
    adj = np.abs(d - edge) < 1e-9
    faces = [(i, j, k) for i, j, k in itertools.combinations(range(12), 3)
             if adj[i, j] and adj[j, k] and adj[i, k]]
    faces = np.array(faces, dtype=np.int64)
    return IcosaScheme(SchemeLevel.ICOSA6, verts, faces, face_centroids(verts, faces))


def subdivide(scheme: IcosaScheme) -> IcosaScheme:
    """Split every face into four; children of face k land at 4k..4k+3."""
    if scheme.level is SchemeLevel.ICOSA46:
        raise ValueError("ICOSA46 is the finest supported level; cannot subdivide further")
    verts = [v for v in scheme.vertices]
    index = {_key(v): i for i, v in enumerate(verts)}

    def midpoint(a: int, b: int) -> int:
        m = verts[a] + verts[b]
        m = m / np.linalg.norm(m)
        k = _key(m)
        if k not in index:
            index[k] = len(verts)
            verts.append(m)
        return index[k]

    faces = []
    for a, b, c in scheme.faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    verts = np.array(verts)
    faces = np.array(faces, dtype=np.int64)
    level = SchemeLevel(scheme.level.value + 1)
    return IcosaScheme(level, verts, faces, face_centroids(verts, faces))


def build_scheme(level: "str | SchemeLevel") -> IcosaScheme:
    level = SchemeLevel.parse(level)
    scheme = build_icosahedron()
    while scheme.level is not level:
        scheme = subdivide(scheme)
    return scheme


def unique_antipodal_count(dirs: np.ndarray, tol: float = 1e-9) -> int:
    """Number of distinct axes (directions identified with their negations)."""
    kept: list[np.ndarray] = []
    for v in dirs:
        if not any(np.linalg.norm(v - u) < tol or np.linalg.norm(v + u) < tol for u in kept):
            kept.append(v)
    return len(kept)


def fibonacci_directions(n: int, hemisphere: bool = True) -> np.ndarray:
    """Fibonacci-lattice unit vectors.

    With ``hemisphere=True`` the points cover z > 0 only, so that together
    with their antipodes they sample the full sphere evenly. This is the
    natural layout for antipodally symmetric dMRI signals.
    """
    i = np.arange(n) + 0.5
    if hemisphere:
        z = 1.0 - i / n
    else:
        z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    theta = golden * np.arange(n)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return _normalize(pts)
