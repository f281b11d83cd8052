"""Equivariant network layers: block convolution, bias, magnitude
nonlinearity, log-magnitude batch normalization, downsampling, pooling,
and the backbone/head constructions for the three demo tasks.

Feature maps are FieldStacks: a batch of mixed-rank tensor fields flattened
to a (batch, width, *grid) array, channels in stack order with components
lexicographic.  All layer operations commute with the exact grid action of
signed permutations, which is what makes the assembled networks exactly
equivariant under 90-degree rotations and reflections.

Every operation has an array-level core used both by the public FieldStack
functions (inference) and by tape-recording wrappers (training).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .autodiff import Node, Tape, as_node
from .kernels import BlockKernel, BlockKernelMap, ChannelSpec

MAGNITUDE_EPS = 1e-6
# unit exponentiated variance under the lognormal assumption:
# (e^{s^2}-1) e^{s^2} = 1  =>  e^{s^2} = golden ratio
BATCHNORM_SCALE = math.sqrt(math.log((1.0 + math.sqrt(5.0)) / 2.0))

HEADS = ("classify", "register", "detect")


class SpecMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# containers


@dataclass
class FieldStack:
    """A batch of stacked tensor fields, shape (batch, width, *grid)."""

    spec: ChannelSpec
    d: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 + self.d:
            raise SpecMismatchError(
                f"data must be (batch, width, *grid) with {self.d} grid axes, "
                f"got shape {self.data.shape}"
            )
        if self.data.shape[1] != self.spec.width(self.d):
            raise SpecMismatchError(
                f"width {self.data.shape[1]} != spec width {self.spec.width(self.d)}"
            )

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape[2:]

    @classmethod
    def from_single(cls, spec: ChannelSpec, d: int, data: np.ndarray) -> "FieldStack":
        return cls(spec, d, np.asarray(data)[None])

    def channel_field(self, b: int, channel: int) -> geo.TensorField:
        rank, start, span = self.spec.channels(self.d)[channel]
        arr = self.data[b, start:start + span]
        arr = np.moveaxis(arr, 0, -1).reshape(self.dims + (self.d,) * rank)
        return geo.TensorField(geo.GridShape(self.dims), rank, np.ascontiguousarray(arr))

    def set_channel_field(self, b: int, channel: int, f: geo.TensorField) -> None:
        rank, start, span = self.spec.channels(self.d)[channel]
        arr = f.data.reshape(self.dims + (span,))
        self.data[b, start:start + span] = np.moveaxis(arr, -1, 0)


@dataclass
class BiasParams:
    """One offset per scalar channel, one identity multiplier per matrix channel."""

    scalar: np.ndarray
    matrix: np.ndarray

    @classmethod
    def zeros(cls, spec: ChannelSpec) -> "BiasParams":
        ranks = spec.ranks()
        return cls(
            scalar=np.zeros(sum(1 for r in ranks if r == 0)),
            matrix=np.zeros(sum(1 for r in ranks if r == 2)),
        )


@dataclass
class NormState:
    """Running statistics of the log magnitude, one pair per channel."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    var_clamp: float = 1e-8
    mode: str = "train"

    @classmethod
    def for_spec(cls, spec: ChannelSpec) -> "NormState":
        c = spec.n_channels
        return cls(running_mean=np.zeros(c), running_var=np.ones(c))

    def copy(self) -> "NormState":
        return NormState(self.running_mean.copy(), self.running_var.copy(),
                         self.momentum, self.var_clamp, self.mode)


def _channel_layout(spec: ChannelSpec, d: int):
    chans = spec.channels(d)
    starts = np.array([c[1] for c in chans])
    spans = np.array([c[2] for c in chans])
    return starts, spans


def _expand(values: np.ndarray, spans: np.ndarray) -> np.ndarray:
    """Per-channel values (B, C, *grid) -> per-column (B, W, *grid)."""
    return np.repeat(values, spans, axis=1)


def channel_magnitudes(x: np.ndarray, spec: ChannelSpec, d: int, eps: float) -> np.ndarray:
    """sqrt(sum of squared components + eps) per channel, shape (B, C, *grid)."""
    starts, _ = _channel_layout(spec, d)
    sums = np.add.reduceat(x * x, starts, axis=1)
    return np.sqrt(sums + np.asarray(eps, dtype=x.dtype))


# ---------------------------------------------------------------------------
# convolution


def _conv_core(x: np.ndarray, w: np.ndarray, support: int, d: int) -> np.ndarray:
    """Same-size cross-correlation with zero padding.

    x: (B, Win, *dims); w: (support^d, Wout, Win) with voxels in
    lexicographic offset order.  out[b, o, p] = sum_{v,i} w[v,o,i] *
    x[b, i, p + offset_v] with zero outside the grid.
    """
    b, win = x.shape[:2]
    dims = x.shape[2:]
    wout = w.shape[1]
    pad = (support - 1) // 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * d)
    npoints = int(np.prod(dims))
    out = np.zeros((b, wout, npoints), dtype=x.dtype)
    for v, idx in enumerate(np.ndindex(*(support,) * d)):
        sl = tuple(slice(i, i + n) for i, n in zip(idx, dims))
        xs = xp[(slice(None), slice(None)) + sl].reshape(b, win, npoints)
        out += np.matmul(w[v], xs)
    return out.reshape((b, wout) + dims)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, support: int, d: int,
                     dims: tuple[int, ...]) -> np.ndarray:
    b, wout = g.shape[:2]
    win = w.shape[2]
    pad = (support - 1) // 2
    gp = np.zeros((b, win) + tuple(n + 2 * pad for n in dims), dtype=g.dtype)
    npoints = int(np.prod(dims))
    gflat = g.reshape(b, wout, npoints)
    for v, idx in enumerate(np.ndindex(*(support,) * d)):
        sl = tuple(slice(i, i + n) for i, n in zip(idx, dims))
        contrib = np.matmul(w[v].T, gflat).reshape((b, win) + dims)
        gp[(slice(None), slice(None)) + sl] += contrib
    crop = (slice(None), slice(None)) + tuple(slice(pad, pad + n) for n in dims)
    return gp[crop]


def _conv_kernel_grad(g: np.ndarray, x: np.ndarray, support: int, d: int) -> np.ndarray:
    b, win = x.shape[:2]
    dims = x.shape[2:]
    wout = g.shape[1]
    pad = (support - 1) // 2
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * d)
    npoints = int(np.prod(dims))
    gflat = g.reshape(b, wout, npoints)
    gw = np.zeros((support**d, wout, win), dtype=x.dtype)
    for v, idx in enumerate(np.ndindex(*(support,) * d)):
        sl = tuple(slice(i, i + n) for i, n in zip(idx, dims))
        xs = xp[(slice(None), slice(None)) + sl].reshape(b, win, npoints)
        gw[v] = np.einsum("bop,bip->oi", gflat, xs)
    return gw


def _bias_indices(spec: ChannelSpec, d: int):
    scalar_cols = []
    diag_cols = []
    for rank, start, span in spec.channels(d):
        if rank == 0:
            scalar_cols.append(start)
        elif rank == 2:
            diag_cols.extend(start + j * (d + 1) for j in range(d))
    return np.array(scalar_cols, dtype=int), np.array(diag_cols, dtype=int)


def _bias_core(y: np.ndarray, spec: ChannelSpec, d: int,
               scalar_bias: np.ndarray, matrix_bias: np.ndarray) -> np.ndarray:
    scalar_cols, diag_cols = _bias_indices(spec, d)
    out = y.copy()
    idx = (slice(None),) + (None,) * d
    if scalar_cols.size:
        out[:, scalar_cols] += scalar_bias.astype(y.dtype)[idx]
    if diag_cols.size:
        out[:, diag_cols] += np.repeat(matrix_bias.astype(y.dtype), d)[idx]
    return out


def conv_forward(x: FieldStack, k: BlockKernel, b: BiasParams | None = None) -> FieldStack:
    """Block convolution with the bias rules (nothing added to odd ranks)."""
    if k.in_spec != x.spec or k.d != x.d:
        raise SpecMismatchError("kernel input spec does not match the field stack")
    w = k.weights.reshape(k.support**k.d, k.out_spec.width(k.d), k.in_spec.width(k.d))
    out = _conv_core(x.data, w, k.support, k.d)
    if b is not None:
        out = _bias_core(out, k.out_spec, k.d, b.scalar, b.matrix)
    return FieldStack(k.out_spec, k.d, out)


# ---------------------------------------------------------------------------
# pointwise nonlinearity


def _magnitude_nl_core(x: np.ndarray, spec: ChannelSpec, d: int, eps: float):
    starts, spans = _channel_layout(spec, d)
    m = channel_magnitudes(x, spec, d, eps)
    scale = np.maximum(m, 1.0) / m
    out = x * _expand(scale, spans)
    return out, m


def _magnitude_nl_grad(g, x, m, spec, d):
    starts, spans = _channel_layout(spec, d)
    active = m < 1.0
    xg = np.add.reduceat(x * g, starts, axis=1)
    coef = np.where(active, 1.0 / m, np.asarray(1.0, dtype=x.dtype))
    corr = np.where(active, xg / (m * m * m), np.asarray(0.0, dtype=x.dtype))
    return g * _expand(coef, spans) - x * _expand(corr, spans)


def magnitude_nonlinearity(x: FieldStack, eps: float = MAGNITUDE_EPS) -> FieldStack:
    """Rescale each tensor so its magnitude becomes max(1, magnitude)."""
    out, _ = _magnitude_nl_core(x.data, x.spec, x.d, eps)
    return FieldStack(x.spec, x.d, out)


# ---------------------------------------------------------------------------
# log-magnitude batch normalization


def _lognorm_core(x: np.ndarray, spec: ChannelSpec, d: int, state: NormState,
                  eps: float = MAGNITUDE_EPS):
    starts, spans = _channel_layout(spec, d)
    m = channel_magnitudes(x, spec, d, eps)
    logm = np.log(m)
    axes = (0,) + tuple(range(2, 2 + d))
    if state.mode == "train":
        if np.prod([x.shape[0]] + list(x.shape[2:])) < 2:
            raise ValueError("train-mode batchnorm needs at least 2 samples per channel")
        mu = logm.mean(axis=axes)
        var = np.mean((logm - mu[(slice(None),) + (None,) * d]) ** 2, axis=axes)
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * np.asarray(mu, dtype=np.float64)
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * np.asarray(var, dtype=np.float64)
    else:
        mu = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    clamped = np.maximum(var, np.asarray(state.var_clamp, dtype=x.dtype))
    sigma = np.sqrt(clamped)
    bc = (slice(None),) + (None,) * d
    zhat = (logm - mu[bc]) / sigma[bc]
    mprime = np.exp(np.asarray(BATCHNORM_SCALE, dtype=x.dtype) * zhat)
    c = mprime / m
    out = x * _expand(c, spans)
    residuals = (m, zhat, sigma, c, var > state.var_clamp)
    return out, residuals


def _lognorm_grad(g, x, spec, d, residuals, train: bool):
    starts, spans = _channel_layout(spec, d)
    m, zhat, sigma, c, var_free = residuals
    bc = (slice(None),) + (None,) * d
    cbar = np.add.reduceat(g * x, starts, axis=1)
    gx = g * _expand(c, spans)
    ybar = cbar * c
    mbar = -cbar * c / m
    tbar = ybar * np.asarray(BATCHNORM_SCALE, dtype=x.dtype)
    if train:
        axes = (0,) + tuple(range(2, 2 + d))
        mean_t = tbar.mean(axis=axes)
        mean_tz = (tbar * zhat).mean(axis=axes)
        mean_tz = mean_tz * var_free  # clamped channels: no gradient through sigma
        lbar = (tbar - mean_t[bc] - zhat * mean_tz[bc]) / sigma[bc]
    else:
        lbar = tbar / sigma[bc]
    mbar = mbar + lbar / m
    gx = gx + x * _expand(mbar / m, spans)
    return gx


def lognorm_batchnorm(x: FieldStack, state: NormState, eps: float = MAGNITUDE_EPS) -> FieldStack:
    """Standardize log magnitudes, scale so exp has unit variance, rescale tensors."""
    out, _ = _lognorm_core(x.data, x.spec, x.d, state, eps)
    return FieldStack(x.spec, x.d, out)


# ---------------------------------------------------------------------------
# downsampling and pooling


def _downsample_core(x: np.ndarray, d: int) -> np.ndarray:
    for axis in range(2, 2 + d):
        n = x.shape[axis]
        if n == 1:
            continue  # degenerate axis left unchanged
        if n % 2 == 0:
            a = x[(slice(None),) * axis + (slice(0, None, 2),)]
            b = x[(slice(None),) * axis + (slice(1, None, 2),)]
            x = (a + b) * np.asarray(0.5, dtype=x.dtype)
        else:
            x = x[(slice(None),) * axis + (slice(0, None, 2),)]
    return x


def _downsample_grad(g: np.ndarray, d: int, in_dims: tuple[int, ...]) -> np.ndarray:
    for axis in range(2 + d - 1, 1, -1):
        n = in_dims[axis - 2]
        if n == 1:
            continue
        if n % 2 == 0:
            g = np.repeat(g * np.asarray(0.5, dtype=g.dtype), 2, axis=axis)
        else:
            shape = list(g.shape)
            shape[axis] = n
            out = np.zeros(shape, dtype=g.dtype)
            out[(slice(None),) * axis + (slice(0, None, 2),)] = g
            g = out
    return g


def downsample2(x: FieldStack) -> FieldStack:
    """Halve each grid axis: average adjacent pairs (even), subsample (odd)."""
    return FieldStack(x.spec, x.d, _downsample_core(x.data, x.d))


def pool_global(x: FieldStack) -> list[np.ndarray]:
    """Spatial mean per channel; one (batch,) + (d,)*rank array per channel."""
    axes = tuple(range(2, 2 + x.d))
    pooled = x.data.mean(axis=axes)  # (B, W)
    out = []
    for rank, start, span in x.spec.channels(x.d):
        out.append(pooled[:, start:start + span].reshape((x.batch,) + (x.d,) * rank))
    return out


# ---------------------------------------------------------------------------
# group action on stacks


def stack_mixer(spec: ChannelSpec, d: int, R: geo.GroupElement) -> np.ndarray:
    """Block-diagonal width x width component-mixing matrix for a stack."""
    w = spec.width(d)
    out = np.zeros((w, w))
    per_rank: dict[int, np.ndarray] = {}
    for rank, start, span in spec.channels(d):
        if rank not in per_rank:
            per_rank[rank] = geo.component_matrix(R.matrix, rank)
        out[start:start + span, start:start + span] = per_rank[rank]
    return out


def act_on_stack(R: geo.GroupElement, x: FieldStack) -> FieldStack:
    """Exact action of a signed permutation on every field in the stack."""
    perm, signs = geo.signed_permutation_parts(R.matrix)
    moved = geo.move_grid(x.data, perm, signs, x.dims, lead=2)
    mixer = stack_mixer(x.spec, x.d, R).astype(x.data.dtype)
    mixed = np.moveaxis(np.tensordot(mixer, moved, axes=([1], [1])), 0, 1)
    return FieldStack(x.spec, x.d, np.ascontiguousarray(mixed))


def act_on_stack_approx(R: geo.GroupElement, x: FieldStack) -> FieldStack:
    """Interpolated action of a general orthogonal matrix on the stack."""
    out = FieldStack(x.spec, x.d, x.data.astype(np.float64).copy())
    for b in range(x.batch):
        for c in range(x.spec.n_channels):
            moved = geo.act_on_field_approx(R, x.channel_field(b, c))
            out.set_channel_field(b, c, moved)
    return FieldStack(x.spec, x.d, out.data.astype(x.data.dtype))


# ---------------------------------------------------------------------------
# tape-recording wrappers


def assemble_op(tape: Tape | None, kmap: BlockKernelMap, profiles: Node,
                perturbation: np.ndarray | None = None) -> Node:
    w = kmap.assemble(profiles.data)
    if perturbation is not None:
        w = w + perturbation.astype(w.dtype)
    out = Node(w)
    if tape is not None:
        tape.record(out, (profiles,), lambda g: (kmap.backprop(g),))
    return out


def conv_op(tape: Tape | None, x: Node, w: Node, support: int, d: int) -> Node:
    out = Node(_conv_core(x.data, w.data, support, d))
    if tape is not None:
        xdata, wdata = x.data, w.data
        dims = x.data.shape[2:]
        def vjp(g):
            return (_conv_input_grad(g, wdata, support, d, dims),
                    _conv_kernel_grad(g, xdata, support, d))
        tape.record(out, (x, w), vjp)
    return out


def bias_op(tape: Tape | None, y: Node, spec: ChannelSpec, d: int,
            scalar_bias: Node, matrix_bias: Node) -> Node:
    out = Node(_bias_core(y.data, spec, d, scalar_bias.data, matrix_bias.data))
    if tape is not None:
        scalar_cols, diag_cols = _bias_indices(spec, d)
        sum_axes = (0,) + tuple(range(2, 2 + d))
        def vjp(g):
            gs = g[:, scalar_cols].sum(axis=sum_axes) if scalar_cols.size else np.zeros(0, dtype=g.dtype)
            if diag_cols.size:
                gm = g[:, diag_cols].sum(axis=sum_axes).reshape(-1, d).sum(axis=1)
            else:
                gm = np.zeros(0, dtype=g.dtype)
            return g, gs, gm
        tape.record(out, (y, scalar_bias, matrix_bias), vjp)
    return out


def magnitude_nl_op(tape: Tape | None, x: Node, spec: ChannelSpec, d: int,
                    eps: float = MAGNITUDE_EPS) -> Node:
    outdata, m = _magnitude_nl_core(x.data, spec, d, eps)
    out = Node(outdata)
    if tape is not None:
        xdata = x.data
        tape.record(out, (x,), lambda g: (_magnitude_nl_grad(g, xdata, m, spec, d),))
    return out


def lognorm_bn_op(tape: Tape | None, x: Node, spec: ChannelSpec, d: int,
                  state: NormState, eps: float = MAGNITUDE_EPS) -> Node:
    outdata, residuals = _lognorm_core(x.data, spec, d, state, eps)
    out = Node(outdata)
    if tape is not None:
        xdata = x.data
        train = state.mode == "train"
        tape.record(out, (x,),
                    lambda g: (_lognorm_grad(g, xdata, spec, d, residuals, train),))
    return out


def downsample_op(tape: Tape | None, x: Node, d: int) -> Node:
    out = Node(_downsample_core(x.data, d))
    if tape is not None:
        in_dims = x.data.shape[2:]
        tape.record(out, (x,), lambda g: (_downsample_grad(g, d, in_dims),))
    return out


def pool_op(tape: Tape | None, x: Node, d: int) -> Node:
    axes = tuple(range(2, 2 + d))
    npoints = int(np.prod(x.data.shape[2:]))
    out = Node(x.data.mean(axis=axes))
    if tape is not None:
        dims = x.data.shape[2:]
        def vjp(g):
            expand = (slice(None), slice(None)) + (None,) * d
            return (np.broadcast_to(g[expand] / npoints, g.shape + dims).astype(g.dtype).copy(),)
        tape.record(out, (x,), vjp)
    return out


def relu_op(tape: Tape | None, x: Node) -> Node:
    out = Node(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = (x.data > 0.0).astype(x.data.dtype)
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


def plain_bn_op(tape: Tape | None, x: Node, d: int, state: NormState) -> Node:
    """Standard per-column batchnorm (no affine) for the baseline network."""
    axes = (0,) + tuple(range(2, 2 + d))
    bc = (slice(None),) + (None,) * d
    if state.mode == "train":
        mu = x.data.mean(axis=axes)
        var = np.mean((x.data - mu[bc]) ** 2, axis=axes)
        state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * np.asarray(mu, dtype=np.float64)
        state.running_var = state.momentum * state.running_var + (1 - state.momentum) * np.asarray(var, dtype=np.float64)
    else:
        mu = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    sigma = np.sqrt(np.maximum(var, np.asarray(state.var_clamp, dtype=x.data.dtype)))
    zhat = (x.data - mu[bc]) / sigma[bc]
    out = Node(zhat)
    if tape is not None:
        train = state.mode == "train"
        def vjp(g):
            if not train:
                return (g / sigma[bc],)
            mean_g = g.mean(axis=axes)
            mean_gz = (g * zhat).mean(axis=axes)
            return ((g - mean_g[bc] - zhat * mean_gz[bc]) / sigma[bc],)
        tape.record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# architecture


@dataclass
class ArchConfig:
    """Flat architecture description, mirrors the key=value config files."""

    dim: int = 2
    layers: int = 8
    base_scalars: int = 4
    base_vectors: int = 4
    base_matrices: int = 4
    support: int = 3
    radial_samples: int = 3
    head: str = "classify"
    eps: float = MAGNITUDE_EPS
    seed: int = 0

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")

    @classmethod
    def from_dict(cls, raw: dict) -> "ArchConfig":
        kw = {}
        for f_ in ("dim", "layers", "base_scalars", "base_vectors", "base_matrices",
                   "support", "radial_samples", "seed"):
            if f_ in raw:
                kw[f_] = int(raw[f_])
        if "eps" in raw:
            kw["eps"] = float(raw["eps"])
        if "head" in raw:
            kw["head"] = str(raw["head"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim, "layers": self.layers,
            "base_scalars": self.base_scalars, "base_vectors": self.base_vectors,
            "base_matrices": self.base_matrices, "support": self.support,
            "radial_samples": self.radial_samples, "head": self.head,
            "eps": self.eps, "seed": self.seed,
        }


def input_spec_for(head: str) -> ChannelSpec:
    return ChannelSpec.of(scalars=1)


def head_spec_for(head: str, n_classes: int = 3) -> ChannelSpec:
    if head == "classify":
        return ChannelSpec.of(scalars=n_classes)
    if head == "register":
        return ChannelSpec.of(vectors=4)
    if head == "detect":
        # scalars: [conf0, conf1, class scores]; then offsets, then quadratic forms
        return ChannelSpec.of(scalars=2 + n_classes, vectors=2, matrices=2)
    raise ValueError(f"unknown head {head!r}")


def backbone_specs(cfg: ArchConfig) -> list[ChannelSpec]:
    """Channel spec after each layer; multiplicity doubles after each downsample."""
    specs = []
    s, v, m = cfg.base_scalars, cfg.base_vectors, cfg.base_matrices
    for i in range(1, cfg.layers + 1):
        specs.append(ChannelSpec.of(scalars=s, vectors=v, matrices=m))
        if i % 2 == 0 and i < cfg.layers:
            s, v, m = 2 * s, 2 * v, 2 * m
    return specs


def downsample_after(cfg: ArchConfig) -> list[bool]:
    return [i % 2 == 0 and i < cfg.layers for i in range(1, cfg.layers + 1)]


class EquivariantLayer:
    """conv -> bias -> lognorm batchnorm -> magnitude nonlinearity."""

    def __init__(self, in_spec: ChannelSpec, out_spec: ChannelSpec, d: int,
                 support: int, n_samples: int, rng: np.random.Generator,
                 eps: float = MAGNITUDE_EPS, with_norm: bool = True,
                 dtype=np.float64):
        self.in_spec = in_spec
        self.out_spec = out_spec
        self.d = d
        self.support = support
        self.eps = eps
        self.with_norm = with_norm
        self.kmap = BlockKernelMap(in_spec, out_spec, d, support, n_samples)
        self.profiles = Node(self.kmap.init_profiles(rng).astype(dtype))
        ranks = out_spec.ranks()
        self.scalar_bias = Node(np.zeros(sum(1 for r in ranks if r == 0), dtype=dtype))
        self.matrix_bias = Node(np.zeros(sum(1 for r in ranks if r == 2), dtype=dtype))
        self.norm = NormState.for_spec(out_spec) if with_norm else None
        self.perturbation = None  # optional symmetry-breaking injection

    def forward(self, x: Node, tape: Tape | None, mode: str) -> Node:
        w = assemble_op(tape, self.kmap, self.profiles, self.perturbation)
        y = conv_op(tape, x, w, self.support, self.d)
        y = bias_op(tape, y, self.out_spec, self.d, self.scalar_bias, self.matrix_bias)
        if self.with_norm:
            self.norm.mode = mode
            y = lognorm_bn_op(tape, y, self.out_spec, self.d, self.norm, self.eps)
            y = magnitude_nl_op(tape, y, self.out_spec, self.d, self.eps)
        return y

    def parameters(self) -> list[Node]:
        params = [self.profiles]
        if self.scalar_bias.data.size:
            params.append(self.scalar_bias)
        if self.matrix_bias.data.size:
            params.append(self.matrix_bias)
        return params

    def named_parameters(self, prefix: str) -> list[tuple[str, Node]]:
        out = [(f"{prefix}.profiles", self.profiles)]
        if self.scalar_bias.data.size:
            out.append((f"{prefix}.scalar_bias", self.scalar_bias))
        if self.matrix_bias.data.size:
            out.append((f"{prefix}.matrix_bias", self.matrix_bias))
        return out


class BaselineLayer:
    """Plain conv -> bias -> standard batchnorm -> ReLU (matched-budget control)."""

    def __init__(self, in_width: int, out_width: int, d: int, support: int,
                 rng: np.random.Generator, with_norm: bool = True, dtype=np.float64):
        self.in_width = in_width
        self.out_width = out_width
        self.d = d
        self.support = support
        self.with_norm = with_norm
        bound = 1.0 / math.sqrt(in_width * support**d)
        self.kernel = Node(rng.uniform(-bound, bound,
                                       size=(support**d, out_width, in_width)).astype(dtype))
        self.bias = Node(np.zeros(out_width, dtype=dtype))
        self.norm = NormState(np.zeros(out_width), np.ones(out_width)) if with_norm else None

    def forward(self, x: Node, tape: Tape | None, mode: str) -> Node:
        y = conv_op(tape, x, self.kernel, self.support, self.d)
        bcast = (slice(None),) + (None,) * self.d
        out = Node(y.data + self.bias.data[bcast])
        if tape is not None:
            sum_axes = (0,) + tuple(range(2, 2 + self.d))
            bias = self.bias
            tape.record(out, (y, bias), lambda g: (g, g.sum(axis=sum_axes)))
        y = out
        if self.with_norm:
            self.norm.mode = mode
            y = plain_bn_op(tape, y, self.d, self.norm)
            y = relu_op(tape, y)
        return y

    def parameters(self) -> list[Node]:
        return [self.kernel, self.bias]

    def named_parameters(self, prefix: str) -> list[tuple[str, Node]]:
        return [(f"{prefix}.kernel", self.kernel), (f"{prefix}.bias", self.bias)]


class Model:
    """Backbone of conv blocks with a task head.

    head outputs:
      classify -> (batch, n_classes) invariant scores
      register -> (batch, 4 * dim): three linear columns then a translation
      detect   -> head FieldStack data (batch, head_width, *grid)
    """

    def __init__(self, cfg: ArchConfig, baseline: bool = False, n_classes: int = 3,
                 dtype=np.float64):
        self.cfg = cfg
        self.baseline = baseline
        self.n_classes = n_classes
        self.d = cfg.dim
        self.head = cfg.head
        self.input_spec = input_spec_for(cfg.head)
        self.head_spec = head_spec_for(cfg.head, n_classes)
        self.downsample_after = downsample_after(cfg)
        rng = np.random.default_rng(cfg.seed)

        if not baseline:
            specs = backbone_specs(cfg)
            self.specs = specs
            self.layers = []
            prev = self.input_spec
            for spec in specs:
                self.layers.append(EquivariantLayer(prev, spec, cfg.dim, cfg.support,
                                                    cfg.radial_samples, rng,
                                                    eps=cfg.eps, dtype=dtype))
                prev = spec
            self.head_layer = EquivariantLayer(prev, self.head_spec, cfg.dim, 1, 1,
                                               rng, eps=cfg.eps, with_norm=False,
                                               dtype=dtype)
        else:
            budget = equivariant_param_total(cfg, n_classes)
            width = baseline_width_for_budget(cfg, n_classes, budget)
            self.baseline_width = width
            widths = []
            w = width
            for i in range(1, cfg.layers + 1):
                widths.append(w)
                if i % 2 == 0 and i < cfg.layers:
                    w *= 2
            self.widths = widths
            self.layers = []
            prev = self.input_spec.width(cfg.dim)
            for w in widths:
                self.layers.append(BaselineLayer(prev, w, cfg.dim, cfg.support, rng,
                                                 dtype=dtype))
                prev = w
            self.head_layer = BaselineLayer(prev, self.head_spec.width(cfg.dim),
                                            cfg.dim, 1, rng, with_norm=False,
                                            dtype=dtype)

    def forward(self, x, tape: Tape | None = None, mode: str = "eval",
                collect: list | None = None) -> Node:
        node = as_node(x)
        if node.data.ndim != 2 + self.d or node.data.shape[1] != self.input_spec.width(self.d):
            raise SpecMismatchError(
                f"input must be (batch, {self.input_spec.width(self.d)}, *grid), "
                f"got {node.data.shape}"
            )
        for i, layer in enumerate(self.layers):
            node = layer.forward(node, tape, mode)
            if self.downsample_after[i]:
                node = downsample_op(tape, node, self.d)
            if collect is not None:
                spec = layer.out_spec if not self.baseline else ChannelSpec.of(scalars=layer.out_width)
                collect.append((f"layer{i + 1}", spec, node))
        node = self.head_layer.forward(node, tape, mode)
        if collect is not None:
            collect.append(("head", self.head_spec, node))
        if self.head in ("classify", "register"):
            node = pool_op(tape, node, self.d)
        return node

    def parameters(self) -> list[Node]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        out.extend(self.head_layer.parameters())
        return out

    def named_parameters(self) -> list[tuple[str, Node]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"layer{i + 1}"))
        out.extend(self.head_layer.named_parameters("head"))
        return out

    def norm_states(self) -> list[tuple[str, NormState]]:
        out = []
        for i, layer in enumerate(self.layers):
            if layer.norm is not None:
                out.append((f"layer{i + 1}.norm", layer.norm))
        return out

    def param_total(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def cast(self, dtype) -> "Model":
        other = Model(self.cfg, baseline=self.baseline, n_classes=self.n_classes,
                      dtype=dtype)
        for (_, src), (_, dst) in zip(self.named_parameters(), other.named_parameters()):
            dst.data = src.data.astype(dtype)
        for (_, src), (_, dst) in zip(self.norm_states(), other.norm_states()):
            dst.running_mean = src.running_mean.copy()
            dst.running_var = src.running_var.copy()
            dst.momentum = src.momentum
        for src, dst in zip(self.layers, other.layers):
            if getattr(src, "perturbation", None) is not None:
                dst.perturbation = src.perturbation.astype(dtype)
        return other


def equivariant_param_total(cfg: ArchConfig, n_classes: int = 3) -> int:
    from .kernels import param_count
    total = 0
    prev = input_spec_for(cfg.head)
    for spec in backbone_specs(cfg):
        total += param_count(prev, spec, cfg.radial_samples, cfg.support, cfg.dim,
                             include_bias=True)
        prev = spec
    total += param_count(prev, head_spec_for(cfg.head, n_classes), 1, 1, cfg.dim,
                         include_bias=True)
    return total


def baseline_param_total(cfg: ArchConfig, width: int, n_classes: int = 3) -> int:
    total = 0
    prev = input_spec_for(cfg.head).width(cfg.dim)
    w = width
    v = cfg.support**cfg.dim
    for i in range(1, cfg.layers + 1):
        total += v * w * prev + w
        prev = w
        if i % 2 == 0 and i < cfg.layers:
            w *= 2
    head_w = head_spec_for(cfg.head, n_classes).width(cfg.dim)
    total += head_w * prev + head_w
    return total


def baseline_width_for_budget(cfg: ArchConfig, n_classes: int, budget: int) -> int:
    """Largest base width whose plain network stays within the parameter budget."""
    width = 1
    while baseline_param_total(cfg, width + 1, n_classes) <= budget:
        width += 1
    return width


def build_backbone(cfg: ArchConfig | dict, baseline: bool = False,
                   n_classes: int = 3, dtype=np.float64) -> Model:
    if isinstance(cfg, dict):
        cfg = ArchConfig.from_dict(cfg)
    return Model(cfg, baseline=baseline, n_classes=n_classes, dtype=dtype)
