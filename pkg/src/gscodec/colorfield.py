"""View-dependent color from a multiresolution hash grid and a tiny MLP.

Positions are contracted into a ball of radius 2, mapped to the unit cube and
encoded by trilinearly interpolated per-level features.  The features and the
raw view direction feed an MLP whose three outputs are read as degree-0 SH
coefficients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .model import SH_C0, GaussianCloud, evaluate_sh
from .optim import Adam

log = logging.getLogger(__name__)

PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class FieldConfig:
    num_levels: int = 16
    features_per_level: int = 2
    base_resolution: int = 16
    max_resolution: int = 4096
    hash_log2: int = 19
    mlp_hidden: int = 64
    mlp_layers: int = 2

    def __post_init__(self):
        for name in ("num_levels", "features_per_level", "base_resolution", "max_resolution",
                     "hash_log2", "mlp_hidden", "mlp_layers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution must be >= base_resolution")

    @property
    def max_hashmap(self) -> int:
        return 1 << self.hash_log2

    def resolutions(self) -> np.ndarray:
        if self.num_levels == 1:
            return np.array([self.base_resolution], dtype=np.int64)
        growth = np.exp((np.log(self.max_resolution) - np.log(self.base_resolution)) / (self.num_levels - 1))
        res = np.rint(self.base_resolution * growth ** np.arange(self.num_levels)).astype(np.int64)
        return res

    def table_sizes(self) -> np.ndarray:
        dense = (self.resolutions() + 1) ** 3
        dense = (dense + 7) // 8 * 8
        return np.minimum(dense, self.max_hashmap)

    def is_dense(self) -> np.ndarray:
        return (self.resolutions() + 1) ** 3 <= self.table_sizes()

    @property
    def encoding_dim(self) -> int:
        return self.num_levels * self.features_per_level

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.encoding_dim + 3] + [self.mlp_hidden] * self.mlp_layers + [3]
        return list(zip(dims[:-1], dims[1:]))

    def num_table_params(self) -> int:
        return int(self.table_sizes().sum()) * self.features_per_level

    def num_mlp_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())


def contract(p):
    """Identity inside the unit ball; (2 - 1/|p|) p/|p| outside."""
    p = np.asarray(p, dtype=np.float64)
    r = np.linalg.norm(p, axis=-1, keepdims=True)
    safe = np.where(r > 1, r, 1.0)
    return np.where(r > 1, (2.0 - 1.0 / safe) * (p / safe), p)


def to_unit_cube(p):
    """Contract and map [-2, 2]^3 affinely to [0, 1]^3."""
    return (contract(p) + 2.0) / 4.0


@numba.njit(cache=True)
def _slot(ix, iy, iz, res, size, dense):
    if dense:
        return ix + iy * (res + 1) + iz * (res + 1) * (res + 1)
    h = np.uint64(ix) ^ ((np.uint64(iy) * np.uint64(2654435761)) & np.uint64(0xFFFFFFFF))
    h = h ^ ((np.uint64(iz) * np.uint64(805459861)) & np.uint64(0xFFFFFFFF))
    return np.int64(h % np.uint64(size))


@numba.njit(cache=True)
def _lookup_kernel(x, offsets, res, sizes, dense):
    n = x.shape[0]
    L = res.shape[0]
    slots = np.empty((n, L, 8), dtype=np.int64)
    weights = np.empty((n, L, 8))
    for i in range(n):
        for l in range(L):
            r = res[l]
            p0 = x[i, 0] * r
            p1 = x[i, 1] * r
            p2 = x[i, 2] * r
            c0 = min(max(np.int64(np.floor(p0)), 0), r - 1)
            c1 = min(max(np.int64(np.floor(p1)), 0), r - 1)
            c2 = min(max(np.int64(np.floor(p2)), 0), r - 1)
            f0 = p0 - c0
            f1 = p1 - c1
            f2 = p2 - c2
            for corner in range(8):
                b0 = corner & 1
                b1 = (corner >> 1) & 1
                b2 = (corner >> 2) & 1
                w = (f0 if b0 else 1.0 - f0) * (f1 if b1 else 1.0 - f1) * (f2 if b2 else 1.0 - f2)
                slots[i, l, corner] = offsets[l] + _slot(c0 + b0, c1 + b1, c2 + b2, r, sizes[l], dense[l])
                weights[i, l, corner] = w
    return slots, weights


@numba.njit(cache=True)
def _gather_kernel(slots, weights, table):
    n, L, K = slots.shape
    F = table.shape[1]
    out = np.zeros((n, L * F), dtype=table.dtype)
    for i in range(n):
        for l in range(L):
            for f in range(F):
                acc = 0.0
                for k in range(K):
                    acc += weights[i, l, k] * table[slots[i, l, k], f]
                out[i, l * F + f] = acc
    return out


@numba.njit(cache=True)
def _scatter_kernel(slots, weights, grad_out, n_rows):
    n, L, K = slots.shape
    F = grad_out.shape[1] // L
    g = np.zeros((n_rows, F), dtype=grad_out.dtype)
    for i in range(n):
        for l in range(L):
            for f in range(F):
                go = grad_out[i, l * F + f]
                if go == 0.0:
                    continue
                for k in range(K):
                    g[slots[i, l, k], f] += weights[i, l, k] * go
    return g


@dataclass
class HashGrid:
    config: FieldConfig
    table: np.ndarray  # (sum T_l, F), levels stacked

    @classmethod
    def create(cls, config: FieldConfig, rng=None, dtype=np.float32, init_range=1e-4) -> "HashGrid":
        rng = np.random.default_rng(rng)
        rows = int(config.table_sizes().sum())
        table = rng.uniform(-init_range, init_range, (rows, config.features_per_level)).astype(dtype)
        return cls(config, table)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.config.table_sizes())[:-1]]).astype(np.int64)

    def level_tables(self) -> list[np.ndarray]:
        sizes = self.config.table_sizes()
        return [self.table[o:o + s] for o, s in zip(self.offsets, sizes)]

    def _args(self):
        c = self.config
        return self.offsets, c.resolutions(), c.table_sizes().astype(np.int64), c.is_dense()


def grid_lookup(x, grid: HashGrid):
    """Table rows (N, levels, 8) and trilinear weights for unit-cube points.

    Depends only on the positions and the grid layout, so it can be computed
    once per Gaussian and reused while the table values change.
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 3))
    offsets, res, sizes, dense = grid._args()
    return _lookup_kernel(x, offsets, res, sizes, dense)


def hash_encode(x, grid: HashGrid, lookup=None) -> np.ndarray:
    """Features (N, levels*F) for points ``x`` already in the unit cube."""
    slots, weights = grid_lookup(x, grid) if lookup is None else lookup
    return _gather_kernel(slots, weights, grid.table)


def hash_encode_backward(x, grid: HashGrid, grad_features, lookup=None) -> np.ndarray:
    """Gradient w.r.t. the stacked table given dL/dfeatures (accumulated in a fixed order)."""
    slots, weights = grid_lookup(x, grid) if lookup is None else lookup
    g = np.ascontiguousarray(grad_features, dtype=grid.table.dtype)
    return _scatter_kernel(slots, weights, g, grid.table.shape[0])


@dataclass
class Mlp:
    weights: list  # [(W (in, out), b (out,)), ...]

    @classmethod
    def create(cls, config: FieldConfig, rng=None, dtype=np.float32) -> "Mlp":
        rng = np.random.default_rng(rng)
        layers = []
        for fan_in, fan_out in config.layer_shapes():
            bound = 1.0 / np.sqrt(fan_in)
            W = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
            b = rng.uniform(-bound, bound, fan_out).astype(dtype)
            layers.append((W, b))
        return cls(layers)

    def params(self) -> list:
        return [a for layer in self.weights for a in layer]

    def forward(self, inp):
        acts = [inp]
        h = inp
        for k, (W, b) in enumerate(self.weights):
            h = h @ W + b
            if k < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, grad_out):
        """Gradients for every (W, b) and for the input."""
        grads = []
        g = grad_out
        for k in range(len(self.weights) - 1, -1, -1):
            W, _ = self.weights[k]
            if k < len(self.weights) - 1:
                g = g * (acts[k + 1] > 0)
            grads.append((acts[k].T @ g, g.sum(axis=0)))
            g = g @ W.T
        grads.reverse()
        return [a for layer in grads for a in layer], g


@dataclass
class ColorField:
    config: FieldConfig
    grid: HashGrid
    mlp: Mlp

    @classmethod
    def create(cls, config: FieldConfig | None = None, seed=0, dtype=np.float32) -> "ColorField":
        config = config or FieldConfig()
        rng = np.random.default_rng(seed)
        return cls(config, HashGrid.create(config, rng, dtype), Mlp.create(config, rng, dtype))

    def params(self) -> list:
        return [self.grid.table] + self.mlp.params()

    def features(self, positions) -> np.ndarray:
        return hash_encode(to_unit_cube(positions), self.grid)

    def _mlp(self, feats, dirs):
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        d = d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        return self.mlp.forward(np.concatenate([feats, d.astype(feats.dtype)], axis=1))

    def sh_dc(self, positions, dirs, features=None) -> np.ndarray:
        """Raw MLP output: three degree-0 SH coefficients per query."""
        feats = self.features(positions) if features is None else features
        return self._mlp(feats, dirs)[0]

    def forward(self, positions, dirs, features=None, lookup=None):
        """(rgb, cache for backward).

        ``features`` bypasses the grid entirely (no table gradient); ``lookup``
        reuses precomputed rows/weights from :func:`grid_lookup`.
        """
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite query position")
        if features is None:
            if lookup is None:
                lookup = grid_lookup(to_unit_cube(p), self.grid)
            features = hash_encode(None, self.grid, lookup)
        out, acts = self._mlp(features, dirs)
        pre = 0.5 + SH_C0 * out
        rgb = np.clip(pre, 0.0, 1.0)
        return rgb, (lookup, acts, (pre > 0) & (pre < 1))

    def backward(self, cache, grad_rgb) -> list:
        """Gradients for [table, W0, b0, W1, b1, ...] given dL/drgb."""
        lookup, acts, inside = cache
        g_out = (np.asarray(grad_rgb) * inside * SH_C0).astype(acts[-1].dtype)
        mlp_grads, g_in = self.mlp.backward(acts, g_out)
        if lookup is not None:
            g_table = hash_encode_backward(None, self.grid, g_in[:, : self.config.encoding_dim], lookup)
        else:
            g_table = np.zeros_like(self.grid.table)
        return [g_table] + mlp_grads


def query_color(p, d, field_: ColorField, features=None) -> np.ndarray:
    """RGB for positions ``p`` seen along unit directions ``d``."""
    return field_.forward(p, d, features)[0]


def precompute_features(cloud_or_positions, field_: ColorField) -> np.ndarray:
    """Hash-grid features per Gaussian; reusable for any view direction."""
    pos = cloud_or_positions.positions if isinstance(cloud_or_positions, GaussianCloud) else cloud_or_positions
    return field_.features(pos)


def resolve_colors(positions, camera_center, field_: ColorField, features=None) -> np.ndarray:
    """Per-Gaussian RGB for one camera, optionally from a precomputed feature cache."""
    positions = np.asarray(positions, dtype=np.float64)
    if features is not None and len(features) != len(positions):
        raise ValueError(f"feature cache has {len(features)} rows for {len(positions)} Gaussians")
    return query_color(positions, positions - np.asarray(camera_center), field_, features)


def random_directions(rng, n) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@dataclass
class DistillConfig:
    iters: int = 5000
    lr: float = 1e-2
    batch_size: int = 1024
    decay_marks: tuple = (5 / 30, 15 / 30, 25 / 30)
    decay_factor: float = 0.33
    seed: int = 0


@dataclass
class DistillResult:
    field: ColorField
    losses: list = field(default_factory=list)


def lr_at(cfg: DistillConfig, it: int) -> float:
    """Step-decayed learning rate; marks are fractions of the iteration budget."""
    n = sum(it >= int(round(m * cfg.iters)) for m in cfg.decay_marks)
    return cfg.lr * cfg.decay_factor**n


def distill_train(cloud: GaussianCloud, field_: ColorField, config: DistillConfig | None = None,
                  camera_centers=None) -> DistillResult:
    """Fit the field to the cloud's SH colors (MSE in RGB).

    Directions are uniform on the sphere, or point from randomly chosen camera
    centers to the Gaussians when ``camera_centers`` is given.
    """
    cfg = config or DistillConfig()
    n = len(cloud)
    if n == 0:
        return DistillResult(field_, [])
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(field_.params(), lr=cfg.lr)
    centers = None if camera_centers is None else np.asarray(camera_centers, dtype=np.float64).reshape(-1, 3)
    slots, weights = grid_lookup(to_unit_cube(cloud.positions), field_.grid)
    losses = []
    first = None
    for it in range(cfg.iters):
        sel = np.arange(n) if n <= cfg.batch_size else np.sort(rng.choice(n, cfg.batch_size, replace=False))
        p = cloud.positions[sel]
        if centers is None:
            d = random_directions(rng, len(sel))
        else:
            d = p - centers[rng.integers(len(centers), size=len(sel))]
        target = evaluate_sh(cloud.sh_coeffs[sel], d)
        rgb, cache = field_.forward(p, d, lookup=(slots[sel], weights[sel]))
        diff = rgb - target
        loss = float(np.mean(diff * diff))
        if first is None and np.isfinite(loss):
            first = max(loss, 1e-12)
        elif not np.isfinite(loss) or loss > 10 * first:
            raise FloatingPointError(f"color field distillation diverged at iteration {it}")
        grads = field_.backward(cache, 2.0 * diff / diff.size)
        opt.step(grads, lr=lr_at(cfg, it))
        losses.append(loss)
    return DistillResult(field_, losses)


def train_field_end_to_end(field_: ColorField, view_fn, cameras, references, iters=100, lr=1e-2, seed=0):
    """Fit the field through the renderer against reference images.

    ``view_fn(colors, camera)`` must return a SplatView of the scene with the
    given per-Gaussian colors; positions come from ``view_fn.positions``.
    """
    from .render import backward, rasterize, render_loss

    rng = np.random.default_rng(seed)
    opt = Adam(field_.params(), lr=lr)
    positions = view_fn.positions
    lookup = grid_lookup(to_unit_cube(positions), field_.grid)
    losses = []
    for _ in range(iters):
        v = int(rng.integers(len(cameras)))
        cam = cameras[v]
        rgb, cache = field_.forward(positions, positions - cam.center, lookup=lookup)
        res = rasterize(view_fn(rgb, cam), cam)
        loss, dimg = render_loss(res.image, references[v])
        g = backward(res.tape, dimg)
        opt.step(field_.backward(cache, g.colors))
        losses.append(loss)
    return losses


def field_storage_bytes(config: FieldConfig, bytes_per_value: int = 2) -> dict:
    return {
        "hash": config.num_table_params() * bytes_per_value,
        "mlp": config.num_mlp_params() * bytes_per_value,
    }
