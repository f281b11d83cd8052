"""Moment kernels: equivariant convolution weights from radial profiles.

A rank-r moment kernel is a radial function times products of position
components and Kronecker deltas:

    k^{i1..ir}(x) = f(|x|) * prod_{(a,b) in pairs} delta^{ia ib}
                           * prod_{j unpaired}     x^{ij}

The set of disjoint unordered index pairs is the kernel's signature; the
signatures of a rank enumerate a basis for all kernels of that rank that
are equivariant under rotations and reflections.  The radial function is
stored as samples at integer radii and spread over the kernel support by
precomputed linear interpolation, so assembly is a fixed linear map from
profile samples to dense convolution weights.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


class InsufficientSamplesError(ValueError):
    """Radial profile too short to cover the kernel support without extrapolating."""


class ParameterShapeError(ValueError):
    """Profile table does not match the expected (out, in, signature) triples."""


# ---------------------------------------------------------------------------
# signatures


@dataclass(frozen=True)
class Signature:
    """Disjoint unordered index pairs over {1..rank}; unpaired indices keep x factors."""

    rank: int
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        norm = tuple(sorted((min(a, b), max(a, b)) for a, b in self.pairs))
        object.__setattr__(self, "pairs", norm)
        seen = set()
        for a, b in norm:
            if a == b or not (1 <= a <= self.rank and 1 <= b <= self.rank):
                raise ValueError(f"bad pair ({a},{b}) for rank {self.rank}")
            if a in seen or b in seen:
                raise ValueError(f"index reused across pairs in {norm}")
            seen.update((a, b))

    @property
    def unpaired(self) -> tuple[int, ...]:
        used = {i for p in self.pairs for i in p}
        return tuple(i for i in range(1, self.rank + 1) if i not in used)

    def __str__(self):
        if not self.pairs:
            return f"r{self.rank}:empty"
        body = ",".join(f"{{{a},{b}}}" for a, b in self.pairs)
        return f"r{self.rank}:{body}"


def enumerate_signatures(rank: int) -> list[Signature]:
    """All signatures of a rank, ordered by pair count then lexicographically."""
    if rank < 0:
        raise ValueError("rank must be >= 0")

    def matchings(indices):
        if len(indices) < 2:
            yield ()
            return
        first, rest = indices[0], indices[1:]
        # first index unpaired
        for m in matchings(rest):
            yield m
        # first index paired with each later one
        for k, other in enumerate(rest):
            remaining = rest[:k] + rest[k + 1:]
            for m in matchings(remaining):
                yield ((first, other),) + m

    sigs = {Signature(rank, pairs) for pairs in matchings(tuple(range(1, rank + 1)))}
    return sorted(sigs, key=lambda s: (len(s.pairs), s.pairs))


def signature_count(rank: int) -> int:
    """Closed-form count a(r) = a(r-1) + (r-1) a(r-2)."""
    a, b = 1, 1  # a(0), a(1)
    if rank == 0:
        return a
    for r in range(2, rank + 1):
        a, b = b, b + (r - 1) * a
    return b


# ---------------------------------------------------------------------------
# radial profiles and interpolation


@dataclass(frozen=True)
class RadialProfile:
    """Samples of a scalar function of radius at radii 0, 1, ..., n-1 pixels."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.samples, dtype=np.float64))
        if s.ndim != 1 or s.size < 2:
            raise ValueError("profile needs at least 2 samples")
        object.__setattr__(self, "samples", s)

    @property
    def n(self) -> int:
        return self.samples.size


def support_offsets(support: int, d: int) -> np.ndarray:
    """Centered integer offsets of the kernel support, lexicographic order."""
    if support < 1 or support % 2 == 0:
        raise ValueError(f"support must be odd and positive, got {support}")
    half = (support - 1) // 2
    idx = np.array(list(np.ndindex(*(support,) * d)), dtype=np.int64)
    return idx - half


def max_radius(support: int, d: int) -> float:
    return math.sqrt(d) * (support - 1) / 2.0


@dataclass(frozen=True)
class InterpolationMatrix:
    """(support^d x n) map from profile samples to a radial scalar over the support."""

    support: int
    n: int
    d: int
    weights: np.ndarray


def build_interpolation(support: int, n: int, d: int) -> InterpolationMatrix:
    """Linear interpolation of the profile at each voxel's radius.

    Each row has at most two nonzeros (the bracketing integer radii) and sums
    to one.  Raises InsufficientSamplesError if any voxel radius would need a
    sample beyond index n-1.
    """
    offsets = support_offsets(support, d)
    radii = np.linalg.norm(offsets.astype(np.float64), axis=1)
    need = int(math.ceil(max_radius(support, d) - 1e-12))
    if n - 1 < need:
        raise InsufficientSamplesError(
            f"support {support} in {d}-d reaches radius {max_radius(support, d):.4f}; "
            f"need at least {need + 1} samples, got {n}"
        )
    weights = np.zeros((offsets.shape[0], n))
    for row, r in enumerate(radii):
        lo = int(math.floor(r))
        frac = r - lo
        if frac < 1e-12:
            weights[row, lo] = 1.0
        else:
            weights[row, lo] = 1.0 - frac
            weights[row, lo + 1] = frac
    return InterpolationMatrix(support, n, d, weights)


# ---------------------------------------------------------------------------
# single moment kernels


@dataclass(frozen=True)
class MomentKernel:
    """One basis kernel: a rank, a signature, a radial profile, and a support."""

    rank: int
    signature: Signature
    profile: RadialProfile
    support: int = 3

    def __post_init__(self):
        if self.signature.rank != self.rank:
            raise ValueError("signature rank does not match kernel rank")


def signature_template(signature: Signature, support: int, d: int) -> np.ndarray:
    """Profile-independent geometric factor, shape (support^d, d^rank).

    Entry [v, comps] = prod delta factors * prod offset components; multiplied
    by the interpolated radial value it yields the assembled kernel.
    """
    r = signature.rank
    offsets = support_offsets(support, d).astype(np.float64)
    nvox = offsets.shape[0]
    out = np.zeros((nvox, d**r))
    pairs = [(a - 1, b - 1) for a, b in signature.pairs]
    unpaired = [j - 1 for j in signature.unpaired]
    for flat, comps in enumerate(itertools.product(range(d), repeat=r)):
        if any(comps[a] != comps[b] for a, b in pairs):
            continue
        vals = np.ones(nvox)
        for j in unpaired:
            vals = vals * offsets[:, comps[j]]
        out[:, flat] = vals
    return out


def assemble_moment_kernel(kernel: MomentKernel, d: int) -> np.ndarray:
    """Dense array of shape (support,)*d + (d,)*rank for one moment kernel."""
    interp = build_interpolation(kernel.support, kernel.profile.n, d)
    radial = interp.weights @ kernel.profile.samples  # (support^d,)
    template = signature_template(kernel.signature, kernel.support, d)
    flat = radial[:, None] * template
    return flat.reshape((kernel.support,) * d + (d,) * kernel.rank)


# ---------------------------------------------------------------------------
# channel specifications and block kernels


@dataclass(frozen=True)
class ChannelSpec:
    """An ordered stack of (tensor rank, multiplicity) channel groups."""

    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        entries = tuple((int(r), int(m)) for r, m in self.entries)
        object.__setattr__(self, "entries", entries)
        for r, m in entries:
            if r < 0 or m < 0:
                raise ValueError(f"bad channel entry (rank={r}, mult={m})")

    def width(self, d: int) -> int:
        return sum(m * d**r for r, m in self.entries)

    def channels(self, d: int) -> list[tuple[int, int, int]]:
        """Per-channel (rank, start_column, component_count), in stack order."""
        out = []
        col = 0
        for r, m in self.entries:
            span = d**r
            for _ in range(m):
                out.append((r, col, span))
                col += span
        return out

    @property
    def n_channels(self) -> int:
        return sum(m for _, m in self.entries)

    def ranks(self) -> list[int]:
        return [r for r, m in self.entries for _ in range(m)]

    @classmethod
    def of(cls, scalars: int = 0, vectors: int = 0, matrices: int = 0) -> "ChannelSpec":
        entries = []
        if scalars:
            entries.append((0, scalars))
        if vectors:
            entries.append((1, vectors))
        if matrices:
            entries.append((2, matrices))
        return cls(tuple(entries))


@dataclass(frozen=True)
class BlockKernel:
    """Dense convolution weight, shape (support,)*d + (out_width, in_width)."""

    d: int
    support: int
    in_spec: ChannelSpec
    out_spec: ChannelSpec
    weights: np.ndarray


class BlockKernelMap:
    """The fixed linear map from radial-profile samples to a dense block kernel.

    One profile of n samples exists per (out channel, in channel, signature of
    rank r_out + r_in) triple.  Profiles are stored as a (n_triples, n) array
    in deterministic order: channel pairs in stack order (out major), then
    signatures in enumeration order.  ``assemble`` applies the map and
    ``backprop`` applies its transpose, which is all the kernel gradient
    needs.
    """

    def __init__(self, in_spec: ChannelSpec, out_spec: ChannelSpec,
                 d: int, support: int = 3, n_samples: int = 3):
        self.in_spec = in_spec
        self.out_spec = out_spec
        self.d = d
        self.support = support
        self.n_samples = n_samples
        self.interp = build_interpolation(support, n_samples, d)
        self.in_width = in_spec.width(d)
        self.out_width = out_spec.width(d)

        self._sig_cache: dict[int, list[Signature]] = {}
        self._template_cache: dict[Signature, np.ndarray] = {}
        self.triples: list[tuple[int, int, Signature]] = []  # (out_ch, in_ch, sig)
        out_ranks = out_spec.ranks()
        in_ranks = in_spec.ranks()
        for o, ro in enumerate(out_ranks):
            for i, ri in enumerate(in_ranks):
                for sig in self._signatures(ro + ri):
                    self.triples.append((o, i, sig))
        self.n_triples = len(self.triples)

        self._out_channels = out_spec.channels(d)
        self._in_channels = in_spec.channels(d)

    def _signatures(self, rank: int) -> list[Signature]:
        if rank not in self._sig_cache:
            self._sig_cache[rank] = enumerate_signatures(rank)
        return self._sig_cache[rank]

    def _template(self, sig: Signature) -> np.ndarray:
        if sig not in self._template_cache:
            self._template_cache[sig] = signature_template(sig, self.support, self.d)
        return self._template_cache[sig]

    def assemble(self, profiles: np.ndarray) -> np.ndarray:
        """Profiles (n_triples, n) -> dense weights (support^d, out_width, in_width)."""
        profiles = np.asarray(profiles)
        if profiles.shape != (self.n_triples, self.n_samples):
            raise ParameterShapeError(
                f"profiles shape {profiles.shape}, expected {(self.n_triples, self.n_samples)}"
            )
        nvox = self.support**self.d
        K = np.zeros((nvox, self.out_width, self.in_width), dtype=profiles.dtype)
        radial = profiles @ self.interp.weights.T.astype(profiles.dtype)  # (T, nvox)
        for t, (o, i, sig) in enumerate(self.triples):
            ro, ocol, ospan = self._out_channels[o]
            ri, icol, ispan = self._in_channels[i]
            tmpl = self._template(sig).astype(profiles.dtype)  # (nvox, d^(ro+ri))
            block = radial[t][:, None] * tmpl
            K[:, ocol:ocol + ospan, icol:icol + ispan] += block.reshape(nvox, ospan, ispan)
        return K

    def backprop(self, grad_weights: np.ndarray) -> np.ndarray:
        """Transpose of ``assemble``: dense-weight gradient -> profile gradient."""
        nvox = self.support**self.d
        g = grad_weights.reshape(nvox, self.out_width, self.in_width)
        out = np.zeros((self.n_triples, self.n_samples), dtype=grad_weights.dtype)
        for t, (o, i, sig) in enumerate(self.triples):
            ro, ocol, ospan = self._out_channels[o]
            ri, icol, ispan = self._in_channels[i]
            tmpl = self._template(sig).astype(grad_weights.dtype)
            gblock = g[:, ocol:ocol + ospan, icol:icol + ispan].reshape(nvox, -1)
            dradial = np.einsum("vc,vc->v", gblock, tmpl)
            out[t] = self.interp.weights.T.astype(grad_weights.dtype) @ dradial
        return out

    def init_profiles(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform init in [-b, b] with b = 1 / sqrt(flattened input width)."""
        b = 1.0 / math.sqrt(max(self.in_width, 1))
        return rng.uniform(-b, b, size=(self.n_triples, self.n_samples))


def build_block_kernel(in_spec: ChannelSpec, out_spec: ChannelSpec,
                       params: dict[tuple[int, int, int], RadialProfile | np.ndarray],
                       support: int, d: int, n_samples: int | None = None) -> BlockKernel:
    """Assemble a dense block kernel from an explicit per-triple profile table.

    ``params`` maps (out_channel, in_channel, signature_index) to a profile;
    the signature index refers to enumerate_signatures(rank_out + rank_in).
    The table must contain exactly one entry per expected triple.
    """
    first = next(iter(params.values()), None)
    if n_samples is None:
        if first is None:
            raise ParameterShapeError("empty profile table and no n_samples given")
        n_samples = first.n if isinstance(first, RadialProfile) else np.asarray(first).size

    kmap = BlockKernelMap(in_spec, out_spec, d, support, n_samples)
    expected = set()
    sig_index: dict[tuple[int, int, int], int] = {}
    counters: dict[tuple[int, int], int] = {}
    for t, (o, i, sig) in enumerate(kmap.triples):
        k = counters.get((o, i), 0)
        counters[(o, i)] = k + 1
        expected.add((o, i, k))
        sig_index[(o, i, k)] = t

    given = set(params.keys())
    if given != expected:
        missing = sorted(expected - given)
        extra = sorted(given - expected)
        raise ParameterShapeError(f"profile table mismatch; missing={missing}, extra={extra}")

    table = np.zeros((kmap.n_triples, n_samples))
    for key, prof in params.items():
        samples = prof.samples if isinstance(prof, RadialProfile) else np.asarray(prof, dtype=np.float64)
        if samples.size != n_samples:
            raise ParameterShapeError(f"profile for {key} has {samples.size} samples, expected {n_samples}")
        table[sig_index[key]] = samples

    weights = kmap.assemble(table).reshape((support,) * d + (kmap.out_width, kmap.in_width))
    return BlockKernel(d, support, in_spec, out_spec, weights)


def param_count(in_spec: ChannelSpec, out_spec: ChannelSpec, n_samples: int,
                support: int, d: int, include_bias: bool = False) -> int:
    """Learnable parameter count of one block-kernel layer.

    Sums signatures-of-rank-sum times samples over all channel pairs.  With
    include_bias, adds one scalar per rank-0 output channel and one identity
    multiplier per rank-2 output channel (odd ranks carry no bias).
    """
    count = 0
    for ro in out_spec.ranks():
        for ri in in_spec.ranks():
            count += signature_count(ro + ri) * n_samples
    if include_bias:
        for r in out_spec.ranks():
            if r == 0 or r == 2:
                count += 1
    return count
