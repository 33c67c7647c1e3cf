"""Spatial triangle meshes, space-time tensor meshes and time-slice partitions."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Planar triangle surface mesh with per-triangle area and unit normal."""

    vertices: np.ndarray
    triangles: np.ndarray
    warnings: tuple = ()
    areas: np.ndarray = field(init=False, repr=False)
    normals: np.ndarray = field(init=False, repr=False)
    centroids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError("vertices must have shape (n, 3)")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError("triangles must have shape (m, 3)")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError("triangle index out of range")
        p0, p1, p2 = (vertices[triangles[:, i]] for i in range(3))
        cross = np.cross(p1 - p0, p2 - p0)
        twice_area = np.linalg.norm(cross, axis=1)
        if np.any(twice_area <= 0.0):
            raise ValueError("degenerate triangle with zero area")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "areas", 0.5 * twice_area)
        object.__setattr__(self, "normals", cross / twice_area[:, None])
        object.__setattr__(self, "centroids", (p0 + p1 + p2) / 3.0)
        for arr in (self.vertices, self.triangles, self.areas, self.normals, self.centroids):
            arr.flags.writeable = False

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def n_vertices(self):
        return len(self.vertices)

    def corners(self, j):
        """Return the three vertex coordinates of triangle ``j`` as a (3, 3) array."""
        return self.vertices[self.triangles[j]]

    def diameters(self):
        p = self.vertices[self.triangles]
        edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.linalg.norm(edges, axis=2).max(axis=1)

    def edge_counts(self):
        """Map each undirected edge to the number of triangles using it."""
        counts = Counter()
        for tri in self.triangles:
            for i in range(3):
                a, b = int(tri[i]), int(tri[(i + 1) % 3])
                counts[(min(a, b), max(a, b))] += 1
        return counts

    def is_closed(self):
        return all(c == 2 for c in self.edge_counts().values())

    def save(self, path):
        write_spatial_mesh(self, path)


def generate_cube_surface(subdiv_per_edge, center=(0.0, 0.0, 0.0), half_width=0.5):
    """Triangulate the surface of an axis-aligned cube.

    Each face is split into ``n x n`` squares and every square into two
    triangles, giving ``12 n**2`` triangles oriented counterclockwise when
    viewed from outside.
    """
    n = int(subdiv_per_edge)
    if n < 1:
        raise ValueError("subdiv_per_edge must be >= 1")
    center = np.asarray(center, dtype=float)
    h = float(half_width)
    if h <= 0:
        raise ValueError("half_width must be positive")

    index = {}
    vertices = []

    def vid(i, j, k):
        key = (i, j, k)
        if key not in index:
            index[key] = len(vertices)
            vertices.append(center + h * (2.0 * np.array(key, dtype=float) / n - 1.0))
        return index[key]

    triangles = []
    # (normal axis, side, u axis, v axis) with u x v pointing outward
    faces = [
        (0, n, 1, 2), (0, 0, 2, 1),
        (1, n, 2, 0), (1, 0, 0, 2),
        (2, n, 0, 1), (2, 0, 1, 0),
    ]
    for axis, side, ua, va in faces:
        for a in range(n):
            for b in range(n):
                quad = []
                for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    ijk = [0, 0, 0]
                    ijk[axis] = side
                    ijk[ua] = a + da
                    ijk[va] = b + db
                    quad.append(vid(*ijk))
                triangles.append((quad[0], quad[1], quad[2]))
                triangles.append((quad[0], quad[2], quad[3]))
    return TriMesh(np.array(vertices), np.array(triangles, dtype=np.int64))


def write_spatial_mesh(mesh, path):
    """Write ``mesh`` in the plain text format read by :func:`load_spatial_mesh`."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles}"]
    lines += ["{:.17g} {:.17g} {:.17g}".format(*v) for v in mesh.vertices]
    lines += ["{} {} {}".format(*t) for t in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def load_spatial_mesh(path):
    """Read a triangle mesh.

    The file starts with ``N_VERTICES N_TRIANGLES``, followed by one vertex
    per line (three floats) and one triangle per line (three 0-based vertex
    indices). Blank lines and ``#`` comments are ignored. Normals are
    recomputed from the vertex order; non-manifold edges are reported in
    ``TriMesh.warnings`` rather than rejected.
    """
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            rows.append((lineno, text.split()))
    if not rows:
        raise MeshFormatError("empty mesh file", line=1)

    lineno, header = rows[0]
    try:
        n_vert, n_tri = (int(tok) for tok in header)
    except ValueError:
        raise MeshFormatError("header must be 'N_VERTICES N_TRIANGLES'", line=lineno) from None
    if n_vert < 3 or n_tri < 1:
        raise MeshFormatError("mesh needs at least 3 vertices and 1 triangle", line=lineno)
    if len(rows) - 1 < n_vert + n_tri:
        last = rows[-1][0]
        raise MeshFormatError(
            f"expected {n_vert + n_tri} data lines, found {len(rows) - 1}", line=last + 1
        )

    vertices = np.empty((n_vert, 3))
    for i, (lineno, toks) in enumerate(rows[1 : 1 + n_vert]):
        if len(toks) != 3:
            raise MeshFormatError("vertex line needs 3 coordinates", line=lineno)
        try:
            vertices[i] = [float(t) for t in toks]
        except ValueError:
            raise MeshFormatError("invalid vertex coordinate", line=lineno) from None

    triangles = np.empty((n_tri, 3), dtype=np.int64)
    for i, (lineno, toks) in enumerate(rows[1 + n_vert : 1 + n_vert + n_tri]):
        if len(toks) != 3:
            raise MeshFormatError("triangle line needs 3 indices", line=lineno)
        try:
            idx = [int(t) for t in toks]
        except ValueError:
            raise MeshFormatError("invalid triangle index", line=lineno) from None
        if min(idx) < 0 or max(idx) >= n_vert:
            raise MeshFormatError(f"triangle index out of range 0..{n_vert - 1}", line=lineno)
        if len(set(idx)) < 3:
            raise MeshFormatError("triangle repeats a vertex", line=lineno)
        triangles[i] = idx
    if len(rows) > 1 + n_vert + n_tri:
        raise MeshFormatError("trailing data after triangles", line=rows[1 + n_vert + n_tri][0])

    try:
        mesh = TriMesh(vertices, triangles)
    except ValueError as exc:
        raise MeshFormatError(str(exc)) from None
    bad = sorted(e for e, c in mesh.edge_counts().items() if c != 2)
    if bad:
        msg = f"{len(bad)} edges not shared by exactly two triangles"
        log.warning("%s: %s", path, msg)
        mesh = TriMesh(vertices, triangles, warnings=(msg,))
    return mesh


@dataclass(frozen=True, eq=False)
class SpaceTimeMesh:
    """Tensor product of a triangle mesh with ``n_timesteps`` uniform steps on (0, t_end]."""

    space: TriMesh
    t_end: float
    n_timesteps: int

    def __post_init__(self):
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if int(self.n_timesteps) != self.n_timesteps or self.n_timesteps < 1:
            raise ValueError("n_timesteps must be a positive integer")
        object.__setattr__(self, "t_end", float(self.t_end))
        object.__setattr__(self, "n_timesteps", int(self.n_timesteps))

    @property
    def h_t(self):
        return self.t_end / self.n_timesteps

    @property
    def n_space(self):
        return self.space.n_triangles

    @property
    def n_dofs(self):
        return self.n_timesteps * self.n_space

    @property
    def time_nodes(self):
        """Time-steps ``t_0 = 0, ..., t_E = T``."""
        return np.arange(self.n_timesteps + 1) * self.h_t

    def global_index(self, k_t, k_x):
        """1-based row/column index ``(k_t - 1) E_x + k_x`` of element (k_t, k_x)."""
        if not (1 <= k_t <= self.n_timesteps and 1 <= k_x <= self.n_space):
            raise IndexError(f"element ({k_t}, {k_x}) outside mesh")
        return (k_t - 1) * self.n_space + k_x

    def element_of(self, index):
        """Inverse of :meth:`global_index`."""
        if not 1 <= index <= self.n_dofs:
            raise IndexError(f"index {index} outside 1..{self.n_dofs}")
        k_t, k_x = divmod(index - 1, self.n_space)
        return k_t + 1, k_x + 1

    def dofs(self, steps, triangles):
        """0-based global DOFs of steps x triangles, step-major."""
        steps = np.asarray(steps, dtype=np.int64)
        triangles = np.asarray(triangles, dtype=np.int64)
        return (steps[:, None] * self.n_space + triangles[None, :]).ravel()


def build_tensor_mesh(space, t_end, n_timesteps):
    return SpaceTimeMesh(space, t_end, n_timesteps)


@dataclass(frozen=True)
class TimeSlicePartition:
    """Contiguous groups of time-steps; ``bounds[i]:bounds[i+1]`` are the 0-based steps of slice i."""

    bounds: tuple

    @property
    def n_slices(self):
        return len(self.bounds) - 1

    @property
    def n_timesteps(self):
        return self.bounds[-1]

    def steps(self, i):
        return range(self.bounds[i], self.bounds[i + 1])

    def sizes(self):
        return [b - a for a, b in zip(self.bounds[:-1], self.bounds[1:])]

    def slice_of(self, step):
        return int(np.searchsorted(self.bounds, step, side="right")) - 1


def partition_time_slices(n_timesteps, n_slices):
    """Split ``n_timesteps`` into ``n_slices`` ordered slices whose sizes differ by at most one."""
    if n_slices < 1:
        raise ValueError("n_slices must be >= 1")
    if n_slices > n_timesteps:
        raise ValueError(f"cannot split {n_timesteps} time-steps into {n_slices} slices")
    base, extra = divmod(n_timesteps, n_slices)
    bounds = [0]
    for i in range(n_slices):
        bounds.append(bounds[-1] + base + (1 if i < extra else 0))
    return TimeSlicePartition(tuple(bounds))
