"""P1 meshes on the unit interval and the unit square, and nodal fields."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

logger = logging.getLogger(__name__)

QUADRATURE_MODES = ("nodal", "gauss")

# Degree-5 Gauss rule on a segment, barycentric coordinates.
_G1 = np.sqrt(3.0 / 5.0)
_SEGMENT_GAUSS = (
    np.array(
        [
            [0.5 * (1.0 + _G1), 0.5 * (1.0 - _G1)],
            [0.5, 0.5],
            [0.5 * (1.0 - _G1), 0.5 * (1.0 + _G1)],
        ]
    ),
    np.array([5.0, 8.0, 5.0]) / 18.0,
)

# Degree-4 six-point rule on a triangle, barycentric coordinates.
_TA, _WA = 0.445948490915965, 0.223381589678011
_TB, _WB = 0.091576213509771, 0.109951743655322
_TRIANGLE_GAUSS = (
    np.array(
        [
            [_TA, _TA, 1.0 - 2.0 * _TA],
            [_TA, 1.0 - 2.0 * _TA, _TA],
            [1.0 - 2.0 * _TA, _TA, _TA],
            [_TB, _TB, 1.0 - 2.0 * _TB],
            [_TB, 1.0 - 2.0 * _TB, _TB],
            [1.0 - 2.0 * _TB, _TB, _TB],
        ]
    ),
    np.array([_WA, _WA, _WA, _WB, _WB, _WB]),
)


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class Mesh:
    """Simplicial mesh with P1 basis data.

    ``grads[e, k]`` is the (constant) gradient of the hat function of the
    k-th vertex of element e restricted to that element.
    """

    def __init__(self, nodes, elements, boundary_nodes):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        elements = np.asarray(elements, dtype=np.int64)
        self.dim = nodes.shape[1]
        if self.dim not in (1, 2):
            raise ValueError(f"unsupported mesh dimension {self.dim}")
        if elements.ndim != 2 or elements.shape[1] != self.dim + 1:
            raise ValueError(f"{self.dim}D elements need {self.dim + 1} vertices")

        edges = nodes[elements[:, 1:]] - nodes[elements[:, :1]]
        det = np.linalg.det(edges)
        if np.any(np.abs(det) <= 0.0):
            raise ValueError("mesh has degenerate elements")
        tail = np.linalg.inv(edges).transpose(0, 2, 1)
        grads = np.concatenate([-tail.sum(axis=1, keepdims=True), tail], axis=1)

        self.nodes = _frozen(nodes)
        self.elements = _frozen(elements)
        self.volumes = _frozen(np.abs(det) / (1.0 if self.dim == 1 else 2.0))
        self.grads = _frozen(grads)
        self.measure = float(np.sum(self.volumes))

        mask = np.zeros(len(nodes), dtype=bool)
        mask[np.asarray(boundary_nodes, dtype=np.int64)] = True
        self.boundary_mask = _frozen(mask)
        self.boundary_nodes = _frozen(np.flatnonzero(mask))
        self.interior_nodes = _frozen(np.flatnonzero(~mask))
        self._rules: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def h(self) -> float:
        return float(np.max(self.volumes) ** (1.0 / self.dim))

    def quad_rule(self, mode: str = "gauss"):
        """Barycentric points (n_q, dim+1) and per-element weights (n_el, n_q).

        ``nodal`` is the vertex rule, ``gauss`` a rule exact for degree 4.
        """
        if mode not in self._rules:
            if mode == "nodal":
                bary = np.eye(self.dim + 1)
                ref = np.full(self.dim + 1, 1.0 / (self.dim + 1))
            elif mode == "gauss":
                bary, ref = _SEGMENT_GAUSS if self.dim == 1 else _TRIANGLE_GAUSS
            else:
                raise ValueError(f"unknown quadrature mode {mode!r}")
            weights = self.volumes[:, None] * ref[None, :]
            self._rules[mode] = (_frozen(bary), _frozen(weights))
        return self._rules[mode]

    def at_quadrature(self, coeffs, mode: str = "gauss"):
        """Values of the P1 interpolant at quadrature points, shape (n_el, n_q)."""
        bary, _ = self.quad_rule(mode)
        return np.asarray(coeffs, dtype=float)[self.elements] @ bary.T

    def scatter(self, element_values):
        """Sum per-element, per-vertex contributions (n_el, dim+1) into nodes."""
        return np.bincount(
            self.elements.ravel(),
            weights=np.asarray(element_values, dtype=float).ravel(),
            minlength=self.n_nodes,
        )

    def gradient(self, coeffs):
        """Element-wise gradient of the P1 interpolant, shape (n_el, dim)."""
        return np.einsum("ek,ekd->ed", np.asarray(coeffs, dtype=float)[self.elements], self.grads)

    def zero_field(self) -> "Field":
        return Field(self, np.zeros(self.n_nodes))

    def field_from_function(self, func) -> "Field":
        values = np.asarray(func(self.nodes), dtype=float).reshape(self.n_nodes)
        values = np.where(self.boundary_mask, 0.0, values)
        return Field(self, values)

    def bubble(self) -> "Field":
        """Π x_d (1 - x_d), positive inside and zero on the boundary."""
        return self.field_from_function(lambda x: np.prod(x * (1.0 - x), axis=1))

    def random_field(self, rng: np.random.Generator, modes: int = 6, nonnegative: bool = False) -> "Field":
        """Random combination of Dirichlet sine modes with 1/k decay."""
        x = self.nodes
        values = np.zeros(self.n_nodes)
        for k in range(1, modes + 1):
            for l in range(1, (modes if self.dim == 2 else 1) + 1):
                mode = np.sin(k * np.pi * x[:, 0])
                if self.dim == 2:
                    mode = mode * np.sin(l * np.pi * x[:, 1])
                values += rng.standard_normal() / (k * l) * mode
        if nonnegative:
            values = np.abs(values)
        values[self.boundary_mask] = 0.0
        return Field(self, values)

    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "n_nodes": self.n_nodes,
            "n_elements": self.n_elements,
            "h": self.h,
            "measure": self.measure,
        }


def build_mesh_1d(n_elems: int) -> Mesh:
    if n_elems < 2:
        raise ValueError(f"n_elems must be >= 2, got {n_elems}")
    nodes = np.linspace(0.0, 1.0, n_elems + 1)
    elements = np.column_stack([np.arange(n_elems), np.arange(1, n_elems + 1)])
    return Mesh(nodes, elements, [0, n_elems])


def build_mesh_rect_2d(nx: int, ny: int) -> Mesh:
    """Unit square, each grid cell split along its diagonal into two triangles."""
    if nx < 2 or ny < 2:
        raise ValueError(f"nx and ny must be >= 2, got {nx}, {ny}")
    xs, ys = np.meshgrid(np.linspace(0.0, 1.0, nx + 1), np.linspace(0.0, 1.0, ny + 1))
    nodes = np.column_stack([xs.ravel(), ys.ravel()])

    def idx(i, j):
        return j * (nx + 1) + i

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    v00, v10, v11, v01 = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    elements = np.stack([lower, upper], axis=1).reshape(-1, 3)

    gi, gj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    on_edge = (gi == 0) | (gi == nx) | (gj == 0) | (gj == ny)
    return Mesh(nodes, elements, idx(gi[on_edge], gj[on_edge]))


def build_mesh(dim: int, n: int = None, nx: int = None, ny: int = None) -> Mesh:
    if dim == 1:
        return build_mesh_1d(n)
    if dim == 2:
        return build_mesh_rect_2d(nx or n, ny or n)
    raise ValueError(f"mesh_dim must be 1 or 2, got {dim}")


@dataclass(eq=False)
class Field:
    """Nodal coefficients of a P1 function vanishing on the boundary."""

    mesh: Mesh
    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.array(self.coeffs, dtype=float).reshape(-1)
        if coeffs.shape[0] != self.mesh.n_nodes:
            raise ValueError(
                f"field has {coeffs.shape[0]} coefficients, mesh has {self.mesh.n_nodes} nodes"
            )
        if np.any(coeffs[self.mesh.boundary_mask] != 0.0):
            raise ValueError("field must vanish on boundary nodes")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("field has non-finite coefficients")
        self.coeffs = coeffs

    def copy(self) -> "Field":
        return Field(self.mesh, self.coeffs.copy())

    def with_coeffs(self, coeffs) -> "Field":
        return Field(self.mesh, coeffs)

    def scaled(self, factor: float) -> "Field":
        return Field(self.mesh, factor * self.coeffs)

    def __add__(self, other: "Field") -> "Field":
        return Field(self.mesh, self.coeffs + other.coeffs)

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.mesh, self.coeffs - other.coeffs)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.coeffs)))

    def l2_norm(self) -> float:
        values = self.mesh.at_quadrature(self.coeffs, "gauss")
        _, weights = self.mesh.quad_rule("gauss")
        return float(np.sqrt(np.sum(weights * values**2)))

    def l2_distance(self, other: "Field") -> float:
        return (self - other).l2_norm()


def write_field_csv(fields: Dict[str, Field], path: Path):
    """One row per node: node_id, coordinates, then one column per field."""
    names = list(fields)
    mesh = fields[names[0]].mesh
    coord_cols = ["x"] if mesh.dim == 1 else ["x", "y"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["node_id", *coord_cols, *names])
        for i in range(mesh.n_nodes):
            writer.writerow(
                [i, *(repr(float(c)) for c in mesh.nodes[i]), *(repr(float(fields[n].coeffs[i])) for n in names)]
            )
    logger.debug(f"Wrote {mesh.n_nodes} nodes to {path}")


def write_mesh_csv(mesh: Mesh, directory: Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    coord_cols = ["x"] if mesh.dim == 1 else ["x", "y"]
    with open(directory / "mesh_nodes.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["node_id", *coord_cols, "boundary"])
        for i in range(mesh.n_nodes):
            writer.writerow([i, *(repr(float(c)) for c in mesh.nodes[i]), int(mesh.boundary_mask[i])])
    with open(directory / "mesh_elements.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["element_id", *(f"v{k}" for k in range(mesh.dim + 1))])
        for e, verts in enumerate(mesh.elements):
            writer.writerow([e, *(int(v) for v in verts)])
