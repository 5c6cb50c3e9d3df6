"""Algebra of O(3)-steerable features up to vector degree.

Features are direct sums of scalar (l=0) and vector (l=1) channels with an
explicit layout. With degrees capped at l=1 the parametrized Clebsch-Gordan
product reduces to four bilinear families plus the cross product:

    (0,0)->0  scalar * scalar          constant 1
    (0,1)->1  scalar scales vector     constant 1
    (1,0)->1  vector scaled by scalar  constant 1
    (1,1)->0  dot product              constant 1/sqrt(3)
    (1,1)->1  cross product            constant 1/sqrt(2)

Path constants follow component normalization: with unit path weight and
unit-variance i.i.d. inputs each output component has unit variance
(Var(u.w) = 3 and Var((u x w)_k) = 2 for standard-normal u, w).

Parity is implicit: l=0 even, l=1 odd (velocities, forces, displacements are
proper vectors). Under that convention the cross path maps two odd vectors
to an *even* vector, so it cannot appear in a strictly O(3)-equivariant map
whose outputs are declared odd; ``PARITY_PATHS`` excludes it and is the
default everywhere a model is built. The cross path remains available via
``ALL_PATHS`` and is exactly SO(3)-equivariant; under an improper element it
picks up the det(R) = -1 factor of a pseudovector.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

# (l_in, l_attr, l_out) -> component-normalization constant
PATH_CONSTANTS = {
    (0, 0, 0): 1.0,
    (0, 1, 1): 1.0,
    (1, 0, 1): 1.0,
    (1, 1, 0): 1.0 / np.sqrt(3.0),
    (1, 1, 1): 1.0 / np.sqrt(2.0),
}
ALL_PATHS = tuple(PATH_CONSTANTS)
PARITY_PATHS = ((0, 0, 0), (0, 1, 1), (1, 0, 1), (1, 1, 0))

_LEVI_CIVITA = np.zeros((3, 3, 3))
for _i, _j, _k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
    _LEVI_CIVITA[_i, _j, _k] = 1.0
    _LEVI_CIVITA[_j, _i, _k] = -1.0


class LayoutError(ValueError):
    """Coefficient length or irrep bookkeeping violation."""


@dataclass(frozen=True)
class IrrepsLayout:
    """Ordered direct sum of (degree, multiplicity) blocks, degrees in {0, 1}."""

    entries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        for l, m in self.entries:
            if l not in (0, 1):
                raise LayoutError(f"degree {l} unsupported (l_max = 1)")
            if m <= 0:
                raise LayoutError(f"multiplicity must be positive, got {m}")

    @classmethod
    def of(cls, n_scalar: int, n_vector: int) -> "IrrepsLayout":
        """Canonical scalars-then-vectors layout; zero multiplicities dropped."""
        entries = []
        if n_scalar:
            entries.append((0, n_scalar))
        if n_vector:
            entries.append((1, n_vector))
        if not entries:
            raise LayoutError("layout cannot be empty")
        return cls(tuple(entries))

    @property
    def dim(self) -> int:
        return sum(m * (2 * l + 1) for l, m in self.entries)

    def mult(self, l: int) -> int:
        return sum(m for ll, m in self.entries if ll == l)

    def __str__(self):
        return " + ".join(f"{m}x{'0e' if l == 0 else '1o'}" for l, m in self.entries)


@dataclass
class SteerableTensor:
    """Batched coefficients of a steerable feature, shape (batch, layout.dim).

    Under R in O(3), scalar blocks are unchanged and every vector block
    transforms as v -> R v (spherical-harmonic / proper-vector convention).
    """

    layout: IrrepsLayout
    coefficients: object  # ndarray or autodiff Var

    def __post_init__(self):
        shape = ad.value(self.coefficients).shape
        if len(shape) != 2:
            raise LayoutError(f"coefficients must be 2D (batch, dim), got {shape}")
        if shape[1] != self.layout.dim:
            raise LayoutError(
                f"coefficient length {shape[1]} != layout dim {self.layout.dim} "
                f"({self.layout})"
            )

    @property
    def batch(self) -> int:
        return ad.value(self.coefficients).shape[0]

    @property
    def data(self) -> np.ndarray:
        return ad.value(self.coefficients)

    def blocks(self):
        """(scalars (B, n0) or None, vectors (B, n1, 3) or None), entry order."""
        scalars, vectors = [], []
        offset = 0
        for l, m in self.layout.entries:
            width = m * (2 * l + 1)
            blk = ad.narrow(self.coefficients, -1, offset, width)
            if l == 0:
                scalars.append(blk)
            else:
                vectors.append(ad.reshape(blk, (-1, m, 3)))
            offset += width
        s = scalars[0] if len(scalars) == 1 else (
            ad.concat(scalars, axis=-1) if scalars else None
        )
        v = vectors[0] if len(vectors) == 1 else (
            ad.concat(vectors, axis=1) if vectors else None
        )
        return s, v


def from_blocks(scalars, vectors) -> SteerableTensor:
    """Assemble a canonical tensor from (B, n0) scalars and (B, n1, 3) vectors."""
    parts = []
    n0 = n1 = 0
    if scalars is not None:
        n0 = ad.value(scalars).shape[1]
        parts.append(scalars)
    if vectors is not None:
        n1 = ad.value(vectors).shape[1]
        parts.append(ad.reshape(vectors, (-1, 3 * n1)))
    coeffs = parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)
    return SteerableTensor(IrrepsLayout.of(n0, n1), coeffs)


def direct_sum(*tensors: SteerableTensor) -> SteerableTensor:
    """Concatenate features channel-wise into one canonical tensor."""
    scalars = [s for t in tensors for s in [t.blocks()[0]] if s is not None]
    vectors = [v for t in tensors for v in [t.blocks()[1]] if v is not None]
    s = scalars[0] if len(scalars) == 1 else (ad.concat(scalars, axis=-1) if scalars else None)
    v = vectors[0] if len(vectors) == 1 else (ad.concat(vectors, axis=1) if vectors else None)
    return from_blocks(s, v)


def transform(t: SteerableTensor, rot: np.ndarray) -> SteerableTensor:
    """Apply an orthogonal matrix to every vector block (data path, no grad)."""
    s, v = t.blocks()
    s = None if s is None else ad.value(s)
    if v is not None:
        v = ad.value(v) @ rot.T
    return from_blocks(s, v)


ATTR_LAYOUT = IrrepsLayout.of(1, 1)


def sh_embed(v: np.ndarray) -> SteerableTensor:
    """Degree-(0 + 1) embedding of direction: l0 = 1, l1 = v / |v|.

    The zero vector embeds with an all-zero l1 block (the only equivariant
    choice; coincident particles and resting histories must not blow up).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 1:
        v = v[None, :]
    if v.shape[-1] != 3:
        raise LayoutError("sh_embed expects 3-vectors")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    direction = np.where(norm > 0.0, v / np.where(norm > 0.0, norm, 1.0), 0.0)
    coeffs = np.concatenate([np.ones_like(norm), direction], axis=-1)
    return SteerableTensor(ATTR_LAYOUT, coeffs)


# ---------------------------------------------------------------------------
# parametrized Clebsch-Gordan product


def valid_paths(
    layout_in: IrrepsLayout,
    layout_attr: IrrepsLayout,
    layout_out: IrrepsLayout,
    allowed=PARITY_PATHS,
):
    """Paths from ``allowed`` whose degrees all have nonzero multiplicity."""
    return tuple(
        p
        for p in allowed
        if layout_in.mult(p[0]) and layout_attr.mult(p[1]) and layout_out.mult(p[2])
    )


@dataclass
class CGWeights:
    """One weight array per path, shaped (mult_in, mult_attr, mult_out)."""

    layout_in: IrrepsLayout
    layout_attr: IrrepsLayout
    layout_out: IrrepsLayout
    weights: dict  # path tuple -> ndarray or Var

    def __post_init__(self):
        for path, w in self.weights.items():
            if path not in PATH_CONSTANTS:
                raise LayoutError(f"unknown CG path {path}")
            want = (
                self.layout_in.mult(path[0]),
                self.layout_attr.mult(path[1]),
                self.layout_out.mult(path[2]),
            )
            got = ad.value(w).shape
            if tuple(got) != want:
                raise LayoutError(f"path {path} weights {got}, expected {want}")

    @property
    def paths(self):
        return tuple(self.weights)

    @property
    def n_weights(self) -> int:
        return sum(ad.value(w).size for w in self.weights.values())


def cg_fan_in(layout_in: IrrepsLayout, layout_attr: IrrepsLayout, paths, l_out: int) -> int:
    """Input channels feeding one output irrep, for init scaling."""
    return sum(
        layout_in.mult(p[0]) * layout_attr.mult(p[1]) for p in paths if p[2] == l_out
    )


def cg_product(
    f: SteerableTensor, attr: SteerableTensor, w: CGWeights
) -> SteerableTensor:
    """Weighted sum over CG paths; linear in ``f``, ``attr`` and ``w`` separately."""
    if f.layout.dim != w.layout_in.dim or f.layout.mult(0) != w.layout_in.mult(0):
        raise LayoutError(f"feature layout {f.layout} != weight input {w.layout_in}")
    if attr.layout.dim != w.layout_attr.dim or attr.layout.mult(0) != w.layout_attr.mult(0):
        raise LayoutError(f"attr layout {attr.layout} != weight attr {w.layout_attr}")
    f0, f1 = f.blocks()
    a0, a1 = attr.blocks()
    n0_out, n1_out = w.layout_out.mult(0), w.layout_out.mult(1)
    batch = f.batch
    dtype = f.data.dtype

    out0, out1 = [], []
    for path, W in w.weights.items():
        k = PATH_CONSTANTS[path]
        if path == (0, 0, 0):
            out0.append(ad.einsum("uvw,bu,bv->bw", W, f0, a0))
        elif path == (0, 1, 1):
            out1.append(ad.einsum("uvw,bu,bvk->bwk", W, f0, a1))
        elif path == (1, 0, 1):
            out1.append(ad.einsum("uvw,buk,bv->bwk", W, f1, a0))
        elif path == (1, 1, 0):
            out0.append(ad.mul(ad.einsum("uvw,buk,bvk->bw", W, f1, a1), k))
        elif path == (1, 1, 1):
            out1.append(
                ad.mul(
                    ad.einsum("uvw,bui,bvj,ijk->bwk", W, f1, a1, _LEVI_CIVITA), k
                )
            )

    def _total(terms, zero_shape):
        if not terms:
            return np.zeros(zero_shape, dtype=dtype)
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return acc

    scalars = _total(out0, (batch, n0_out)) if n0_out else None
    vectors = _total(out1, (batch, n1_out, 3)) if n1_out else None
    return from_blocks(scalars, vectors)


def unit_scalar_attr(batch: int, dtype=np.float64) -> SteerableTensor:
    """Constant l0 = 1 attribute; conditions a CG product into a plain linear map."""
    return SteerableTensor(IrrepsLayout.of(1, 0), np.ones((batch, 1), dtype=dtype))


# ---------------------------------------------------------------------------
# nonlinearities


def gated_nonlinearity(f: SteerableTensor) -> SteerableTensor:
    """Equivariant activation.

    Layout convention: the *last* n1 scalar channels are gates, one per
    vector channel. Gates are consumed: output layout is
    (n0 - n1) scalars + n1 vectors. Remaining scalars pass through SiLU;
    each vector channel is multiplied by sigmoid(gate). Gating by invariant
    scalars commutes exactly with every rotation and reflection.
    """
    n0, n1 = f.layout.mult(0), f.layout.mult(1)
    if n0 < n1:
        raise LayoutError(f"need one gate scalar per vector channel ({f.layout})")
    scalars, vectors = f.blocks()
    if n1 == 0:
        return from_blocks(ad.silu(scalars), None)
    out_s = None
    if n0 > n1:
        out_s = ad.silu(ad.narrow(scalars, -1, 0, n0 - n1))
    gates = ad.sigmoid(ad.narrow(scalars, -1, n0 - n1, n1))
    gated = ad.mul(vectors, ad.reshape(gates, (-1, n1, 1)))
    return from_blocks(out_s, gated)


def gated_output_layout(n_scalar: int, n_vector: int) -> IrrepsLayout:
    """Pre-activation layout whose gating yields (n_scalar, n_vector)."""
    return IrrepsLayout.of(n_scalar + n_vector, n_vector)


def steerable_mlp(
    f: SteerableTensor,
    attr: SteerableTensor,
    layers: list[CGWeights],
    gate_last: bool = False,
) -> SteerableTensor:
    """Stack of CG products conditioned on ``attr``, gated between layers.

    The final product stays linear unless ``gate_last`` is set (decoder-style
    heads want an unconstrained vector output).
    """
    if not layers:
        raise ValueError("steerable_mlp needs at least one layer")
    for i, w in enumerate(layers):
        f = cg_product(f, attr, w)
        if i < len(layers) - 1 or gate_last:
            f = gated_nonlinearity(f)
    return f


# ---------------------------------------------------------------------------
# group elements for tests and symmetry checks


def random_rotation(rng: np.random.Generator, reflect: bool = False) -> np.ndarray:
    """Haar-ish random element of SO(3), composed with a reflection on request."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    if reflect:
        q = q @ np.diag([1.0, 1.0, -1.0])
    return q
