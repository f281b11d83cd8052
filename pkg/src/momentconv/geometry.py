"""Tensor fields on regular grids and orthogonal-group actions on them.

A rank-r tensor field assigns a d^r-component tensor to every point of a
d-dimensional grid.  An orthogonal matrix R acts on such a field by moving
the grid points (x -> R x about the array center) and mixing the tensor
components with r copies of R:

    (R . f)^{i1..ir}(x) = R^{i1 j1} ... R^{ir jr} f^{j1..jr}(R^-1 x)

For signed permutation matrices (the 2^d d! exact symmetries of the pixel
grid) the grid motion is an axis permutation plus axis flips and the action
is exact.  For general orthogonal matrices the grid values are resampled by
multilinear interpolation and the action is only approximate.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy import ndimage

SIGNED_PERMUTATION = "signed_permutation"
GENERAL = "general"

ORTHOGONALITY_TOL = 1e-12


class DimensionMismatchError(ValueError):
    """Grid extents are incompatible with the requested operation."""


class UnsupportedExactActionError(ValueError):
    """Exact grid action requested for a non signed-permutation element."""


@dataclass(frozen=True)
class GridShape:
    """Extents of a d-dimensional grid."""

    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) < 1:
            raise ValueError("grid needs at least one axis")
        if any(n < 1 for n in dims):
            raise ValueError(f"all extents must be >= 1, got {dims}")

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))


@dataclass(frozen=True)
class TensorField:
    """A grid of rank-r tensors, components in lexicographic order.

    ``data`` has shape ``dims + (d,) * rank`` with the first tensor index
    slowest, so flattening the trailing component axes in C order gives the
    lexicographic component vector at each grid point.
    """

    shape: GridShape
    rank: int
    data: np.ndarray

    def __post_init__(self):
        d = self.shape.ndim
        expected = self.shape.dims + (d,) * self.rank
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != expected:
            raise ValueError(
                f"data shape {data.shape} does not match grid {self.shape.dims} "
                f"with rank {self.rank} (expected {expected})"
            )
        object.__setattr__(self, "data", data)

    @property
    def dim(self) -> int:
        return self.shape.ndim

    def flatten(self) -> np.ndarray:
        """Grid-major, component-minor 1-D copy of the field."""
        return self.data.reshape(-1).copy()

    @classmethod
    def from_flat(cls, shape: GridShape, rank: int, flat: np.ndarray) -> "TensorField":
        d = shape.ndim
        expected = shape.size * d**rank
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != expected:
            raise ValueError(f"flat length {flat.size}, expected {expected}")
        return cls(shape, rank, flat.reshape(shape.dims + (d,) * rank))

    @classmethod
    def zeros(cls, shape: GridShape, rank: int) -> "TensorField":
        d = shape.ndim
        return cls(shape, rank, np.zeros(shape.dims + (d,) * rank))


@dataclass(frozen=True)
class GroupElement:
    """A d x d orthogonal matrix, tagged exact (signed permutation) or general."""

    matrix: np.ndarray
    kind: str = GENERAL

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"matrix must be square, got shape {m.shape}")
        err = np.max(np.abs(m.T @ m - np.eye(m.shape[0])))
        if err > ORTHOGONALITY_TOL:
            raise ValueError(f"matrix is not orthogonal (deviation {err:.3e})")
        if self.kind == SIGNED_PERMUTATION:
            signed_permutation_parts(m)  # raises if malformed
        elif self.kind != GENERAL:
            raise ValueError(f"unknown kind {self.kind!r}")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, d: int) -> "GroupElement":
        return cls(np.eye(d), SIGNED_PERMUTATION)

    def inverse(self) -> "GroupElement":
        return GroupElement(self.matrix.T.copy(), self.kind)

    def compose(self, other: "GroupElement") -> "GroupElement":
        """Return self * other (apply other first)."""
        kind = (
            SIGNED_PERMUTATION
            if self.kind == other.kind == SIGNED_PERMUTATION
            else GENERAL
        )
        return GroupElement(self.matrix @ other.matrix, kind)

    def key(self) -> bytes:
        """Exact lookup key; valid for signed permutations (integer entries)."""
        return np.rint(self.matrix).astype(np.int8).tobytes()


def signed_permutation_parts(matrix: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Decompose a signed permutation matrix into (perm, signs).

    Row i carries signs[i] at column perm[i].  Raises ValueError if the
    matrix is not exactly one +-1 per row and column.
    """
    m = np.asarray(matrix)
    d = m.shape[0]
    perm = []
    signs = []
    for i in range(d):
        nz = np.flatnonzero(np.abs(m[i]) > 0.5)
        if len(nz) != 1 or not np.isclose(abs(m[i, nz[0]]), 1.0, atol=1e-12):
            raise ValueError("not a signed permutation matrix")
        perm.append(int(nz[0]))
        signs.append(int(np.sign(m[i, nz[0]])))
    if sorted(perm) != list(range(d)):
        raise ValueError("not a signed permutation matrix")
    return tuple(perm), tuple(signs)


def enumerate_hyperoctahedral(d: int) -> list[GroupElement]:
    """All 2^d * d! signed permutation matrices, identity first.

    Order is deterministic: permutations lexicographically, sign patterns
    with +1 before -1, so element 0 is always the identity.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    elements = []
    for perm in itertools.permutations(range(d)):
        for signs in itertools.product((1, -1), repeat=d):
            m = np.zeros((d, d))
            for i in range(d):
                m[i, perm[i]] = signs[i]
            elements.append(GroupElement(m, SIGNED_PERMUTATION))
    return elements


def component_matrix(R: np.ndarray, rank: int) -> np.ndarray:
    """The d^r x d^r matrix R (x) R (x) ... (x) R mixing rank-r components."""
    R = np.asarray(R)
    if rank == 0:
        return np.ones((1, 1))
    return reduce(np.kron, [R] * rank)


def act_on_components(R: GroupElement | np.ndarray, tensor: np.ndarray, rank: int | None = None) -> np.ndarray:
    """Mix the components of a single rank-r tensor with r copies of R.

    out^{i1..ir} = R^{i1 j1} ... R^{ir jr} t^{j1..jr}; for rank 1 this is the
    matrix-vector product R t, for rank 2 it is R t R^T.
    """
    m = R.matrix if isinstance(R, GroupElement) else np.asarray(R, dtype=np.float64)
    t = np.asarray(tensor, dtype=np.float64)
    if rank is None:
        rank = t.ndim
    d = m.shape[0]
    if t.shape[t.ndim - rank:] != (d,) * rank:
        raise ValueError(f"tensor trailing shape {t.shape} incompatible with d={d}, rank={rank}")
    lead = t.ndim - rank
    for axis in range(lead, t.ndim):
        t = np.moveaxis(np.tensordot(t, m, axes=([axis], [1])), -1, axis)
    return t


def move_grid(data: np.ndarray, perm: tuple[int, ...], signs: tuple[int, ...],
               dims: tuple[int, ...], lead: int) -> np.ndarray:
    """Apply x -> R x to the grid axes [lead, lead+d) of ``data``.

    The moved array satisfies out[y] = in[x] with x[perm[i]] = signs[i] . y[i],
    flips taken about the array center (index k <-> n-1-k).
    """
    d = len(perm)
    for i in range(d):
        if dims[perm[i]] != dims[i]:
            raise DimensionMismatchError(
                f"axis swap {i}<->{perm[i]} needs equal extents, "
                f"got {dims[i]} and {dims[perm[i]]}"
            )
    axes = list(range(data.ndim))
    axes[lead:lead + d] = [lead + p for p in perm]
    out = np.transpose(data, axes)
    flip_axes = [lead + i for i in range(d) if signs[i] < 0]
    if flip_axes:
        out = np.flip(out, axis=flip_axes)
    return np.ascontiguousarray(out)


def act_on_field(R: GroupElement, f: TensorField) -> TensorField:
    """Exact action of a signed permutation on a tensor field.

    output[x] = R^{(x)r} f[R^-1 x]: an axis permutation plus axis flips about
    the array center followed by component mixing.  No interpolation.
    """
    if R.kind != SIGNED_PERMUTATION:
        raise UnsupportedExactActionError(
            "exact action needs a signed permutation; use act_on_field_approx"
        )
    if R.dim != f.dim:
        raise DimensionMismatchError(f"R is {R.dim}-d but field is {f.dim}-d")
    perm, signs = signed_permutation_parts(R.matrix)
    moved = move_grid(f.data, perm, signs, f.shape.dims, lead=0)
    mixed = act_on_components(R, moved, rank=f.rank)
    return TensorField(f.shape, f.rank, mixed)


def act_on_field_approx(R: GroupElement, f: TensorField) -> TensorField:
    """Action of a general orthogonal matrix via multilinear resampling.

    Grid values are sampled at R^-1 x about the grid center (zero outside the
    grid), then components are mixed.  Coincides with act_on_field for signed
    permutations up to floating point rounding.
    """
    if R.dim != f.dim:
        raise DimensionMismatchError(f"R is {R.dim}-d but field is {f.dim}-d")
    d = f.dim
    dims = f.shape.dims
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grids], axis=0)  # (d, npoints)
    source = R.matrix.T @ (coords - center[:, None]) + center[:, None]

    comp_shape = (d,) * f.rank
    flat = f.data.reshape(dims + (-1,))
    out = np.empty_like(flat)
    # one ring of explicit zeros so boundary samples blend with the zero
    # exterior instead of being cut off at the edge
    pad = [(1, 1)] * d + [(0, 0)]
    padded = np.pad(flat, pad)
    for c in range(flat.shape[-1]):
        out[..., c] = ndimage.map_coordinates(
            padded[..., c], source + 1.0, order=1, mode="constant", cval=0.0
        ).reshape(dims)
    moved = out.reshape(dims + comp_shape)
    mixed = act_on_components(R, moved, rank=f.rank)
    return TensorField(f.shape, f.rank, mixed)


def rotation_2d(angle: float) -> GroupElement:
    """Counterclockwise rotation by ``angle`` radians.

    Multiples of 90 degrees snap to exact signed permutation matrices so the
    exact action applies at those angles.
    """
    c, s = np.cos(angle), np.sin(angle)
    m = np.array([[c, -s], [s, c]])
    snapped = np.rint(m)
    if np.max(np.abs(m - snapped)) < 1e-12:
        return GroupElement(snapped, SIGNED_PERMUTATION)
    return GroupElement(m, GENERAL)
