"""Structure-invariant 3D block transformation of hyperspectral patches.

A patch is cut into ``a x a`` spatial by ``b`` spectral blocks at random
anchor positions; each block is independently rewritten by one randomly
chosen transform from the registry (vertical/horizontal circular shift, flips,
scaling, rotation, nearest-neighbour resize blur, voxel dropout, blockwise DCT
low-pass, additive Gaussian noise).  Blocks never write outside their own
voxel set, so the coarse layout of the patch is preserved, and the whole
operation is differentiable with respect to the input (transform draws are
constants of the graph).

``apply_plan`` installs the operation as a single node in the gradient graph;
the adjoint of every transform kind is applied blockwise on the way back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .autodiff import Tensor
from .seeding import TRANSFORM, derive_rng
from .validation import check_patch_batch

TRANSFORM_KINDS = (
    "vshift", "vflip", "scale", "rotate", "resize",
    "hshift", "hflip", "dropout", "dct", "addnoise",
)


@dataclass(frozen=True)
class BlockPartition:
    """Anchor grid: cut positions along bands, rows, cols (first=0, last=extent)."""

    band_cuts: tuple[int, ...]
    row_cuts: tuple[int, ...]
    col_cuts: tuple[int, ...]

    def __post_init__(self):
        for name, cuts in (("band", self.band_cuts), ("row", self.row_cuts), ("col", self.col_cuts)):
            if len(cuts) < 2 or cuts[0] != 0:
                raise ValueError(f"{name} cuts must start at 0 and contain at least one block")
            if any(cuts[i] >= cuts[i + 1] for i in range(len(cuts) - 1)):
                raise ValueError(f"{name} cuts must be strictly increasing, got {cuts}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.band_cuts[-1], self.row_cuts[-1], self.col_cuts[-1])

    def blocks(self) -> list[tuple[slice, slice, slice]]:
        """All blocks in canonical order: bands outermost, then rows, then cols."""
        out = []
        for b0, b1 in zip(self.band_cuts, self.band_cuts[1:]):
            for r0, r1 in zip(self.row_cuts, self.row_cuts[1:]):
                for c0, c1 in zip(self.col_cuts, self.col_cuts[1:]):
                    out.append((slice(b0, b1), slice(r0, r1), slice(c0, c1)))
        return out


def random_partition(shape, a: int, b: int, seed, equal_blocks: bool = False) -> BlockPartition:
    """Partition a (C, h, w) cube into a*a spatial x b spectral blocks.

    Interior cut points are drawn uniformly without replacement, so every
    block is non-empty.  ``equal_blocks=True`` uses evenly spaced cuts instead.
    """
    c, h, w = (int(s) for s in shape)
    if a < 1 or b < 1:
        raise ValueError(f"division parameters must be >= 1, got a={a}, b={b}")
    if a > min(h, w):
        raise ValueError(f"spatial division a={a} exceeds patch extent {min(h, w)}")
    if b > c:
        raise ValueError(f"spectral division b={b} exceeds band count {c}")
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, TRANSFORM)

    def cuts(extent: int, parts: int) -> tuple[int, ...]:
        if parts == 1:
            return (0, extent)
        if equal_blocks:
            inner = [round(extent * i / parts) for i in range(1, parts)]
        else:
            inner = sorted(rng.choice(np.arange(1, extent), size=parts - 1, replace=False).tolist())
        return (0, *inner, extent)

    row_cuts = cuts(h, a)
    col_cuts = cuts(w, a)
    band_cuts = cuts(c, b)
    return BlockPartition(band_cuts, row_cuts, col_cuts)


@dataclass(frozen=True)
class TransformRegistry:
    """Enabled transform kinds and their parameter ranges."""

    kinds: tuple[str, ...] = TRANSFORM_KINDS
    seed: int = 0
    scale_range: tuple[float, float] = (0.7, 1.3)
    dropout_rate: float = 0.1
    noise_sigma: float = 0.02
    dct_drop_fraction: float = 0.25
    include_identity: bool = False

    def __post_init__(self):
        known = set(TRANSFORM_KINDS) | {"identity"}
        bad = [k for k in self.kinds if k not in known]
        if bad:
            raise ValueError(f"unknown transform kinds: {bad}")
        if not self.kinds and not self.include_identity:
            raise ValueError("registry must enable at least one kind")

    def enabled(self) -> tuple[str, ...]:
        if self.include_identity and "identity" not in self.kinds:
            return self.kinds + ("identity",)
        return self.kinds


IDENTITY_REGISTRY = TransformRegistry(kinds=(), include_identity=True)


@dataclass(frozen=True)
class BlockOp:
    """One block plus the transform applied to it (sampled parameters frozen)."""

    block: tuple[slice, slice, slice]
    kind: str
    params: dict = field(default_factory=dict)


TransformPlan = tuple[BlockOp, ...]


def sample_plan(partition: BlockPartition, registry: TransformRegistry, rng: np.random.Generator) -> TransformPlan:
    """Draw one transform kind + parameters per block, in canonical block order."""
    kinds = registry.enabled()
    ops = []
    for block in partition.blocks():
        kind = kinds[int(rng.integers(len(kinds)))]
        ops.append(BlockOp(block, kind, _sample_params(kind, block, registry, rng)))
    return tuple(ops)


def _block_shape(block) -> tuple[int, int, int]:
    return tuple(s.stop - s.start for s in block)


def _sample_params(kind: str, block, registry: TransformRegistry, rng: np.random.Generator) -> dict:
    nb, nr, nc = _block_shape(block)
    if kind == "vshift":
        return {"offset": int(rng.integers(1, nr)) if nr > 1 else 0}
    if kind == "hshift":
        return {"offset": int(rng.integers(1, nc)) if nc > 1 else 0}
    if kind == "scale":
        lo, hi = registry.scale_range
        return {"factor": float(rng.uniform(lo, hi))}
    if kind == "rotate":
        # 90/270 degrees only keep the shape when the spatial block is square
        quarter = int(rng.choice((1, 2, 3))) if nr == nc else 2
        return {"quarter_turns": quarter}
    if kind == "dropout":
        keep = rng.random((nb, nr, nc)) >= registry.dropout_rate
        return {"keep": keep}
    if kind == "addnoise":
        return {"noise": rng.normal(0.0, registry.noise_sigma, size=(nb, nr, nc))}
    if kind == "dct":
        return {"drop_fraction": registry.dct_drop_fraction}
    return {}


# ---------------------------------------------------------------------------
# per-kind forward / adjoint (arrays are single blocks, shape (nb, nr, nc))
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix (float64)."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] *= np.sqrt(0.5)
    return m


@lru_cache(maxsize=None)
def _zigzag_keep_mask(rows: int, cols: int, drop_fraction: float) -> np.ndarray:
    """Keep-mask that zeroes the top `drop_fraction` highest-frequency
    coefficients by zig-zag rank (floor of fraction * count)."""
    order = sorted(
        ((i, j) for i in range(rows) for j in range(cols)),
        key=lambda t: (t[0] + t[1], t[0] if (t[0] + t[1]) % 2 else -t[0]),
    )
    n_drop = int(rows * cols * drop_fraction)
    mask = np.ones((rows, cols), dtype=bool)
    for (i, j) in order[rows * cols - n_drop:]:
        mask[i, j] = False
    return mask


def _dct_lowpass(x: np.ndarray, drop_fraction: float) -> np.ndarray:
    _, nr, nc = x.shape
    tr = _dct_matrix(nr).astype(x.dtype)
    tc = _dct_matrix(nc).astype(x.dtype)
    mask = _zigzag_keep_mask(nr, nc, drop_fraction)
    coef = tr @ x @ tc.T
    coef *= mask
    return tr.T @ coef @ tc


def _resize_forward(x: np.ndarray) -> np.ndarray:
    _, nr, nc = x.shape
    down = x[:, ::2, ::2]
    up = down.repeat(2, axis=1).repeat(2, axis=2)
    return up[:, :nr, :nc]


def _resize_adjoint(g: np.ndarray) -> np.ndarray:
    nb, nr, nc = g.shape
    r2, c2 = -(-nr // 2) * 2, -(-nc // 2) * 2  # ceil to even
    gp = np.zeros((nb, r2, c2), dtype=g.dtype)
    gp[:, :nr, :nc] = g
    pooled = gp.reshape(nb, r2 // 2, 2, c2 // 2, 2).sum(axis=(2, 4))
    out = np.zeros_like(g)
    out[:, ::2, ::2] = pooled
    return out


def _apply_kind(x: np.ndarray, kind: str, params: dict) -> np.ndarray:
    if kind == "identity":
        return x
    if kind == "vshift":
        return np.roll(x, params["offset"], axis=1)
    if kind == "hshift":
        return np.roll(x, params["offset"], axis=2)
    if kind == "vflip":
        return x[:, ::-1, :]
    if kind == "hflip":
        return x[:, :, ::-1]
    if kind == "scale":
        return x * x.dtype.type(params["factor"])
    if kind == "rotate":
        return np.rot90(x, params["quarter_turns"], axes=(1, 2))
    if kind == "resize":
        return _resize_forward(x)
    if kind == "dropout":
        return x * params["keep"]
    if kind == "dct":
        return _dct_lowpass(x, params["drop_fraction"])
    if kind == "addnoise":
        return x + params["noise"].astype(x.dtype)
    raise ValueError(f"unknown transform kind {kind!r}")


def _adjoint_kind(g: np.ndarray, kind: str, params: dict) -> np.ndarray:
    if kind in ("identity", "addnoise"):
        return g
    if kind == "vshift":
        return np.roll(g, -params["offset"], axis=1)
    if kind == "hshift":
        return np.roll(g, -params["offset"], axis=2)
    if kind == "vflip":
        return g[:, ::-1, :]
    if kind == "hflip":
        return g[:, :, ::-1]
    if kind == "scale":
        return g * g.dtype.type(params["factor"])
    if kind == "rotate":
        return np.rot90(g, -params["quarter_turns"], axes=(1, 2))
    if kind == "resize":
        return _resize_adjoint(g)
    if kind == "dropout":
        return g * params["keep"]
    if kind == "dct":
        return _dct_lowpass(g, params["drop_fraction"])  # orthonormal masked DCT is self-adjoint
    raise ValueError(f"unknown transform kind {kind!r}")


# ---------------------------------------------------------------------------
# whole-cube application
# ---------------------------------------------------------------------------

def _forward_plan(data: np.ndarray, plan: TransformPlan):
    out = data.copy()
    for op in plan:
        out[op.block] = _apply_kind(data[op.block], op.kind, op.params)
    inside = (out >= 0.0) & (out <= 1.0)
    np.clip(out, 0.0, 1.0, out=out)
    return out, inside


def apply_plan(x, plan: TransformPlan):
    """Apply a sampled plan; output is clipped to [0, 1].

    Accepts a numpy array (returns an array) or a graph Tensor (returns a
    Tensor node whose backward applies the per-block adjoints, with gradient
    passing through the clip only where the pre-clip value was in range).
    """
    if isinstance(x, Tensor):
        out, inside = _forward_plan(x.data, plan)

        def vjp(g):
            gi = g * inside
            dx = gi.copy()
            for op in plan:
                dx[op.block] = _adjoint_kind(np.ascontiguousarray(gi[op.block]), op.kind, op.params)
            return (dx,)

        return Tensor._make(out, (x,), vjp)
    out, _ = _forward_plan(np.asarray(x), plan)
    return out


def apply_blockwise(x, partition: BlockPartition, registry: TransformRegistry):
    """Sample one transform per block (keyed on registry.seed) and apply it."""
    rng = derive_rng(registry.seed, TRANSFORM)
    plan = sample_plan(partition, registry, rng)
    return apply_plan(x, plan)


def make_copies(
    x,
    n: int,
    a: int,
    b: int,
    seed: int,
    registry: TransformRegistry | None = None,
    iteration: int = 0,
    equal_blocks: bool = False,
) -> list:
    """Build n independently partitioned and transformed copies of x.

    Copy j at iteration i is keyed on (seed, i, j), so the transform draws are
    refreshed every iteration and every copy, yet fully reproducible.
    """
    if n < 1:
        raise ValueError(f"need at least one copy, got n={n}")
    if registry is None:
        registry = TransformRegistry()
    shape = x.shape if not isinstance(x, Tensor) else x.data.shape
    copies = []
    for j in range(n):
        rng = derive_rng(seed, TRANSFORM, iteration, j)
        partition = random_partition(shape, a, b, rng, equal_blocks=equal_blocks)
        plan = sample_plan(partition, registry, rng)
        copies.append(apply_plan(x, plan))
    return copies


class BlockRandomTransform(BaseEstimator, TransformerMixin):
    """Estimator-style wrapper: independently re-randomized per sample.

    ``transform`` draws a fresh partition and per-block transforms for each
    sample, keyed on (seed, sample index), and returns an array of the same
    shape. Stateless; ``fit`` only validates parameters.
    """

    def __init__(
        self,
        spatial_divisions: int = 3,
        spectral_divisions: int = 3,
        kinds: Sequence[str] = TRANSFORM_KINDS,
        seed: int = 0,
        equal_blocks: bool = False,
        scale_range: tuple[float, float] = (0.7, 1.3),
        dropout_rate: float = 0.1,
        noise_sigma: float = 0.02,
        dct_drop_fraction: float = 0.25,
        include_identity: bool = False,
    ):
        self.spatial_divisions = spatial_divisions
        self.spectral_divisions = spectral_divisions
        self.kinds = kinds
        self.seed = seed
        self.equal_blocks = equal_blocks
        self.scale_range = scale_range
        self.dropout_rate = dropout_rate
        self.noise_sigma = noise_sigma
        self.dct_drop_fraction = dct_drop_fraction
        self.include_identity = include_identity

    def _registry(self) -> TransformRegistry:
        return TransformRegistry(
            kinds=tuple(self.kinds),
            seed=self.seed,
            scale_range=tuple(self.scale_range),
            dropout_rate=self.dropout_rate,
            noise_sigma=self.noise_sigma,
            dct_drop_fraction=self.dct_drop_fraction,
            include_identity=self.include_identity,
        )

    def fit(self, X, y=None):
        self._registry()
        check_patch_batch(X)
        return self

    def transform(self, X) -> np.ndarray:
        arr = check_patch_batch(X)
        registry = self._registry()
        out = np.empty_like(arr)
        for i in range(arr.shape[0]):
            copies = make_copies(
                arr[i], 1, self.spatial_divisions, self.spectral_divisions,
                seed=self.seed, registry=registry, iteration=i,
                equal_blocks=self.equal_blocks,
            )
            out[i] = copies[0]
        return out if np.asarray(X).ndim == 4 else out[0]
