"""Meshes, P1 finite element assembly, and pointwise observation operators.

Supports uniform interval meshes on (0, 1) and ring-structured triangulations
of the unit disc. All matrices are dense numpy arrays; problem sizes here are
a few hundred nodes at most, where dense factorizations beat sparse ones.
"""

import logging

import numpy as np

logger = logging.getLogger(__name__)

# tolerance for accepting a point as inside an element (barycentric slack)
POINT_LOCATE_TOL = 1e-10


class Mesh:
    """Simplicial mesh: nodes, elements, and tagged boundary nodes.

    Parameters
    ----------
    nodes : array, shape (n_nodes, dim)
        Node coordinates, dim is 1 or 2.
    elements : int array, shape (n_elements, dim + 1)
        Node indices of each interval/triangle.
    boundary_nodes : int array
        Indices of nodes on the Dirichlet boundary.
    """

    def __init__(self, nodes, elements, boundary_nodes):
        self.nodes = np.atleast_2d(np.asarray(nodes, dtype=float))
        if self.nodes.shape[0] == 1 and self.nodes.shape[1] > 2:
            self.nodes = self.nodes.T
        self.elements = np.asarray(elements, dtype=int)
        self.boundary_nodes = np.unique(np.asarray(boundary_nodes, dtype=int))
        self.dim = self.nodes.shape[1]

        if self.dim not in (1, 2):
            raise ValueError(f"only dim 1 or 2 supported, got {self.dim}")
        if self.elements.shape[1] != self.dim + 1:
            raise ValueError("element arity does not match mesh dimension")
        if self.elements.min() < 0 or self.elements.max() >= self.n_nodes:
            raise ValueError("element indices out of range")
        if self.dim == 2:
            self._orient_elements()

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    @property
    def interior_nodes(self):
        """Indices of nodes not on the boundary, ascending."""
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    def _orient_elements(self):
        """Swap vertices so every triangle has positive signed area."""
        p = self.nodes[self.elements]
        area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
            p[:, 2, 0] - p[:, 0, 0]
        ) * (p[:, 1, 1] - p[:, 0, 1])
        flip = area2 < 0
        if np.any(flip):
            self.elements[flip, 1], self.elements[flip, 2] = (
                self.elements[flip, 2].copy(),
                self.elements[flip, 1].copy(),
            )

    def element_volumes(self):
        """Lengths (1D) or areas (2D) of all elements, all positive."""
        p = self.nodes[self.elements]
        if self.dim == 1:
            return np.abs(p[:, 1, 0] - p[:, 0, 0])
        area2 = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
            p[:, 2, 0] - p[:, 0, 0]
        ) * (p[:, 1, 1] - p[:, 0, 1])
        return 0.5 * area2


class DirichletSpec:
    """Dirichlet boundary data: node indices plus per-node values.

    Values default to zero (homogeneous conditions).
    """

    def __init__(self, nodes, values=None):
        self.nodes = np.asarray(nodes, dtype=int)
        if values is None:
            self.values = np.zeros(self.nodes.shape[0])
        else:
            self.values = np.broadcast_to(
                np.asarray(values, dtype=float), self.nodes.shape
            ).copy()

    @classmethod
    def homogeneous(cls, mesh):
        return cls(mesh.boundary_nodes)


def build_interval_mesh(n_nodes):
    """Uniform mesh of (0, 1) with n_nodes nodes and n_nodes - 1 elements.

    Boundary nodes are the two endpoints.
    """
    if n_nodes < 3:
        raise ValueError("interval mesh needs at least 3 nodes")
    x = np.linspace(0.0, 1.0, n_nodes)[:, None]
    elems = np.column_stack([np.arange(n_nodes - 1), np.arange(1, n_nodes)])
    return Mesh(x, elems, [0, n_nodes - 1])


def build_disc_mesh(n_rings):
    """Triangulate the unit disc with concentric rings of nodes.

    Ring r (r = 1..n_rings) sits at radius r / n_rings and carries 6r
    equispaced nodes, so element sizes stay roughly uniform. Consecutive
    rings are stitched by an angular sweep, giving 6 * n_rings**2 triangles.
    Boundary nodes are the outermost ring.

    Parameters
    ----------
    n_rings : int
        Number of rings; node count is 1 + 3 * n_rings * (n_rings + 1).
    """
    if n_rings < 1:
        raise ValueError("need at least one ring")
    nodes = [np.zeros(2)]
    ring_start = [0]
    for r in range(1, n_rings + 1):
        m = 6 * r
        ang = 2.0 * np.pi * np.arange(m) / m
        rad = r / n_rings
        ring = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        ring_start.append(len(nodes))
        nodes.extend(ring)
    nodes = np.asarray(nodes)

    elems = []
    # innermost fan around the center node
    first = ring_start[1]
    for j in range(6):
        elems.append([0, first + j, first + (j + 1) % 6])
    # stitch ring r-1 to ring r by merging the two angular sequences
    for r in range(2, n_rings + 1):
        m_in, m_out = 6 * (r - 1), 6 * r
        s_in, s_out = ring_start[r - 1], ring_start[r]
        i = j = 0
        while i < m_in or j < m_out:
            ang_in = 2.0 * np.pi * (i + 1) / m_in
            ang_out = 2.0 * np.pi * (j + 1) / m_out
            if j < m_out and (i == m_in or ang_out <= ang_in):
                elems.append(
                    [s_in + i % m_in, s_out + j % m_out, s_out + (j + 1) % m_out]
                )
                j += 1
            else:
                elems.append(
                    [s_in + i % m_in, s_out + j % m_out, s_in + (i + 1) % m_in]
                )
                i += 1
    boundary = np.arange(ring_start[n_rings], len(nodes))
    return Mesh(nodes, np.asarray(elems), boundary)


def save_mesh(mesh, path):
    """Write a mesh in the plain-text node/elem/boundary format."""
    with open(path, "w") as fh:
        fh.write("# simplicial mesh\n")
        fh.write(f"dim {mesh.dim}\n")
        for p in mesh.nodes:
            fh.write("node " + " ".join(f"{c:.17g}" for c in p) + "\n")
        for e in mesh.elements:
            fh.write("elem " + " ".join(str(i) for i in e) + "\n")
        for i in mesh.boundary_nodes:
            fh.write(f"boundary {i}\n")


def load_mesh(path):
    """Read a mesh written by save_mesh.

    Lines: ``dim <1|2>``, ``node <x> [<y>]``, ``elem <i> <j> [<k>]``,
    ``boundary <i>``; ``#`` starts a comment.
    """
    dim = None
    nodes, elems, bnodes = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            kind, args = parts[0], parts[1:]
            try:
                if kind == "dim":
                    dim = int(args[0])
                elif kind == "node":
                    nodes.append([float(a) for a in args])
                elif kind == "elem":
                    elems.append([int(a) for a in args])
                elif kind == "boundary":
                    bnodes.append(int(args[0]))
                else:
                    raise ValueError(f"unknown record '{kind}'")
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad mesh line: {raw!r}") from exc
    if dim is None:
        raise ValueError(f"{path}: missing 'dim' record")
    nodes = np.asarray(nodes, dtype=float)
    if nodes.ndim != 2 or nodes.shape[1] != dim:
        raise ValueError(f"{path}: node coordinates do not match dim {dim}")
    return Mesh(nodes, np.asarray(elems, dtype=int), bnodes)


def _gradients_2d(p):
    """Barycentric gradients and area for one triangle with vertex rows p."""
    b = np.array([p[1] - p[0], p[2] - p[0]]).T
    det = b[0, 0] * b[1, 1] - b[0, 1] * b[1, 0]
    binv_t = np.array([[b[1, 1], -b[1, 0]], [-b[0, 1], b[0, 0]]]) / det
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return ref @ binv_t.T, 0.5 * det


def assemble_stiffness(mesh):
    """Assemble the P1 stiffness matrix (no boundary treatment).

    Returns
    -------
    A : array, shape (n_nodes, n_nodes)
        Symmetric positive semidefinite; nullspace is the constant vector.
    """
    n = mesh.n_nodes
    _check_volumes(mesh)
    A = np.zeros((n, n))
    if mesh.dim == 1:
        for e in mesh.elements:
            h = abs(mesh.nodes[e[1], 0] - mesh.nodes[e[0], 0])
            ke = np.array([[1.0, -1.0], [-1.0, 1.0]]) / h
            A[np.ix_(e, e)] += ke
    else:
        for e in mesh.elements:
            grads, area = _gradients_2d(mesh.nodes[e])
            A[np.ix_(e, e)] += area * (grads @ grads.T)
    return A


def _check_volumes(mesh):
    if np.any(mesh.element_volumes() <= 0.0):
        raise ValueError("mesh contains a degenerate (zero-measure) element")


def assemble_mass(mesh):
    """Assemble the P1 mass matrix (consistent, not lumped)."""
    n = mesh.n_nodes
    _check_volumes(mesh)
    M = np.zeros((n, n))
    if mesh.dim == 1:
        me_ref = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
        for e in mesh.elements:
            h = abs(mesh.nodes[e[1], 0] - mesh.nodes[e[0], 0])
            M[np.ix_(e, e)] += h * me_ref
    else:
        me_ref = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
        areas = mesh.element_volumes()
        for e, area in zip(mesh.elements, areas):
            M[np.ix_(e, e)] += area * me_ref
    return M


# quadrature rules used by the load vector: 2-point Gauss on intervals
# (exact through cubics), edge midpoints on triangles (exact through quadratics)
_GAUSS_1D = (np.array([-1.0, 1.0]) / np.sqrt(3.0), np.array([1.0, 1.0]))
_MID_2D_BARY = np.array(
    [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]
)


def assemble_load(mesh, f):
    """Assemble the load vector b_i = integral of f * phi_i.

    Parameters
    ----------
    f : callable
        Maps an (m, dim) array of points to m values. For 1D meshes a
        callable of a 1D abscissa array also works.

    Returns
    -------
    b : array, shape (n_nodes,)
    """
    n = mesh.n_nodes
    b = np.zeros(n)
    if mesh.dim == 1:
        xi, w = _GAUSS_1D
        use_points = _wants_points(f)
        phi = np.column_stack([0.5 * (1.0 - xi), 0.5 * (1.0 + xi)])
        for e in mesh.elements:
            x0, x1 = mesh.nodes[e[0], 0], mesh.nodes[e[1], 0]
            h = x1 - x0
            xq = 0.5 * (x0 + x1) + 0.5 * h * xi
            fq = np.asarray(f(xq[:, None] if use_points else xq))
            b[e] += 0.5 * h * (w * fq) @ phi
    else:
        areas = mesh.element_volumes()
        for e, area in zip(mesh.elements, areas):
            p = mesh.nodes[e]
            xq = _MID_2D_BARY @ p
            fq = np.asarray(f(xq))
            b[e] += (area / 3.0) * fq @ _MID_2D_BARY
    return b


def _wants_points(f):
    """1D loads accept either x arrays or (m, 1) point arrays; probe once."""
    try:
        out = f(np.array([[0.5]]))
        return np.asarray(out).shape == (1,)
    except Exception:
        return False


def apply_dirichlet(A, b, spec):
    """Impose Dirichlet values on an assembled system, keeping A symmetric.

    Boundary rows and columns of A are zeroed with a unit diagonal, the
    boundary entries of b are set to the prescribed values, and the interior
    entries of b absorb the lifted column contributions. Applying the
    treatment twice is a no-op.

    Parameters
    ----------
    A, b : assembled stiffness matrix and load vector.
    spec : DirichletSpec

    Returns
    -------
    A_bc, b_bc : treated copies.
    """
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    nodes, values = spec.nodes, spec.values
    mask = np.zeros(A.shape[0], dtype=bool)
    mask[nodes] = True
    free = ~mask
    # lifting: move known boundary values to the right-hand side
    if np.any(values != 0.0):
        b[free] -= A[np.ix_(free, nodes)] @ values
    A[nodes, :] = 0.0
    A[:, nodes] = 0.0
    A[nodes, nodes] = 1.0
    b[nodes] = values
    return A, b


def build_observation_operator(mesh, points):
    """Interpolation matrix H with (H u)_j = u_h(x_j) for P1 coefficients u.

    Each point is located by a linear scan over elements; the first element
    whose barycentric coordinates are all >= -1e-10 wins. Rows hold the
    barycentric weights, clipped and renormalized so they are nonnegative
    and sum to one.

    Raises
    ------
    ValueError
        If some point lies in no element (outside the mesh).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != mesh.dim:
        pts = pts.reshape(-1, mesh.dim)
    H = np.zeros((pts.shape[0], mesh.n_nodes))
    for j, x in enumerate(pts):
        hit = False
        for e in mesh.elements:
            lam = _barycentric(mesh, e, x)
            if lam is not None and lam.min() >= -POINT_LOCATE_TOL:
                lam = np.clip(lam, 0.0, None)
                H[j, e] = lam / lam.sum()
                hit = True
                break
        if not hit:
            raise ValueError(f"observation point {x} lies outside the mesh")
    return H


def _barycentric(mesh, element, x):
    """Barycentric coordinates of x in one element, or None if degenerate."""
    p = mesh.nodes[element]
    if mesh.dim == 1:
        h = p[1, 0] - p[0, 0]
        if h == 0.0:
            return None
        t = (x[0] - p[0, 0]) / h
        return np.array([1.0 - t, t])
    b = np.array([p[1] - p[0], p[2] - p[0]]).T
    det = b[0, 0] * b[1, 1] - b[0, 1] * b[1, 0]
    if det == 0.0:
        return None
    rhs = x - p[0]
    s = (b[1, 1] * rhs[0] - b[0, 1] * rhs[1]) / det
    t = (-b[1, 0] * rhs[0] + b[0, 0] * rhs[1]) / det
    return np.array([1.0 - s - t, s, t])


class FemSystem:
    """Assembled P1 system for one mesh: stiffness, mass, load, boundary data.

    The stiffness matrix and load vector carry the symmetric Dirichlet
    treatment; raw (untreated) copies stay available for lifting and for
    nonlinear residuals. The mass matrix is left untreated.

    Parameters
    ----------
    mesh : Mesh
    f : callable or None
        Forcing for the load vector; zero load when None.
    dirichlet : DirichletSpec or None
        Defaults to homogeneous conditions on all tagged boundary nodes.
    """

    def __init__(self, mesh, f=None, dirichlet=None):
        self.mesh = mesh
        self.dirichlet = (
            dirichlet if dirichlet is not None else DirichletSpec.homogeneous(mesh)
        )
        if not np.isin(self.dirichlet.nodes, mesh.boundary_nodes).all():
            raise ValueError("Dirichlet spec names a non-boundary node")
        self.A_raw = assemble_stiffness(mesh)
        self.M = assemble_mass(mesh)
        if f is None:
            b_raw = np.zeros(mesh.n_nodes)
        else:
            b_raw = assemble_load(mesh, f)
        self.b_raw = b_raw
        self.A, self.b = apply_dirichlet(self.A_raw, b_raw, self.dirichlet)

    @property
    def n_nodes(self):
        return self.mesh.n_nodes

    def solve(self):
        """Direct solve of the treated system A u = b."""
        return np.linalg.solve(self.A, self.b)
