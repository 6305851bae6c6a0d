"""Residual vector quantization for per-Gaussian scale and rotation vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .optim import Adam


class CorruptIndexError(ValueError):
    """An index stream refers to a code outside the codebook."""


@dataclass
class RvqCodec:
    codebooks: np.ndarray  # (L, C, D)

    def __post_init__(self):
        self.codebooks = np.asarray(self.codebooks)
        if self.codebooks.ndim != 3:
            raise ValueError("codebooks must have shape (stages, codes, dim)")
        if self.num_stages < 1 or self.codebook_size < 2:
            raise ValueError("need at least one stage and two codes per stage")
        if not np.all(np.isfinite(self.codebooks)):
            raise ValueError("codebooks contain non-finite values")

    @property
    def num_stages(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    @property
    def dim(self) -> int:
        return self.codebooks.shape[2]

    @property
    def bits_per_index(self) -> int:
        return max(1, int(np.ceil(np.log2(self.codebook_size))))


@numba.njit(cache=True)
def _nearest_kernel(x, codes):
    n, D = x.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = np.inf
        arg = 0
        for k in range(codes.shape[0]):
            acc = x.dtype.type(0)
            for d in range(D):
                diff = x[i, d] - codes[k, d]
                acc += diff * diff
            if acc < best:
                best = acc
                arg = k
        out[i] = arg
    return out


def nearest(x, codes):
    """Index of the nearest code per row; ties resolve to the lowest index."""
    x = np.asarray(x)
    dt = np.result_type(x, codes)
    return _nearest_kernel(np.ascontiguousarray(x, dtype=dt), np.ascontiguousarray(codes, dtype=dt))


def kmeans_init(vectors, C, seed=0, iters=50):
    """Lloyd's algorithm with greedy k-means++ seeding; empty clusters take the worst-fit point."""
    x = np.asarray(vectors, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("k-means needs at least one vector")
    rng = np.random.default_rng(seed)
    n = len(x)
    trials = 2 + int(np.log(C))
    first = int(rng.integers(n))
    centers = [x[first]]
    d2 = np.sum((x - x[first]) ** 2, axis=1)
    for _ in range(1, C):
        total = d2.sum()
        if total <= 0:
            pick = int(rng.integers(n))
        else:
            # greedy k-means++: best of a few D^2-sampled candidates
            cand = rng.choice(n, size=trials, p=d2 / total)
            cost = [np.minimum(d2, np.sum((x - x[c]) ** 2, axis=1)).sum() for c in cand]
            pick = int(cand[int(np.argmin(cost))])
        centers.append(x[pick])
        d2 = np.minimum(d2, np.sum((x - x[pick]) ** 2, axis=1))
    centers = np.array(centers)
    assign = nearest(x, centers)
    for _ in range(iters):
        counts = np.bincount(assign, minlength=C)
        sums = np.zeros_like(centers)
        for d in range(x.shape[1]):
            sums[:, d] = np.bincount(assign, weights=x[:, d], minlength=C)
        new = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], centers)
        err = np.sum((x - new[assign]) ** 2, axis=1)
        for k in np.flatnonzero(counts == 0):
            far = int(np.argmax(err))
            if err[far] <= 0:
                break
            new[k] = x[far]
            err[far] = 0.0
        new_assign = nearest(x, new)
        converged = np.array_equal(new_assign, assign) and np.array_equal(new, centers)
        centers, assign = new, new_assign
        if converged:
            break
    return centers


def encode(vectors, codec: RvqCodec):
    """Greedy stage-wise nearest-code search. Returns (indices (N, L), reconstruction)."""
    x = np.asarray(vectors, dtype=codec.codebooks.dtype)
    if x.ndim != 2 or x.shape[1] != codec.dim:
        raise ValueError(f"expected vectors of dimension {codec.dim}")
    recon = np.zeros_like(x)
    idx = np.empty((len(x), codec.num_stages), dtype=np.int64)
    for l in range(codec.num_stages):
        idx[:, l] = nearest(x - recon, codec.codebooks[l])
        recon = recon + codec.codebooks[l][idx[:, l]]
    return idx, recon


def decode(indices, codec: RvqCodec, up_to_stage=None):
    """Cumulative code sum through ``up_to_stage`` stages (all by default)."""
    idx = np.asarray(indices)
    L = codec.num_stages if up_to_stage is None else up_to_stage
    if not 0 <= L <= codec.num_stages:
        raise ValueError(f"up_to_stage must be in [0, {codec.num_stages}]")
    if idx.size and (idx.min() < 0 or idx.max() >= codec.codebook_size):
        raise CorruptIndexError(f"index out of range for codebook size {codec.codebook_size}")
    recon = np.zeros((len(idx), codec.dim), dtype=codec.codebooks.dtype)
    for l in range(L):
        recon = recon + codec.codebooks[l][idx[:, l]]
    return recon


def codebook_loss(vectors, codec: RvqCodec, indices):
    """Stage-summed commitment-free codebook loss and its gradient w.r.t. the codebooks.

    Targets are the (stop-gradient) stage residuals; normalization is 1/(N*C).
    """
    x = np.asarray(vectors, dtype=np.float64)
    Z = np.asarray(codec.codebooks, dtype=np.float64)
    L, C, _ = Z.shape
    n = len(x)
    norm = 1.0 / (max(n, 1) * C)
    recon = np.zeros_like(x)
    loss = 0.0
    grad = np.zeros_like(Z)
    for l in range(L):
        sel = Z[l][indices[:, l]]
        diff = sel - (x - recon)
        loss += np.sum(diff * diff)
        for d in range(Z.shape[2]):
            grad[l, :, d] = np.bincount(indices[:, l], weights=2.0 * norm * diff[:, d], minlength=C)
        recon = recon + sel
    return loss * norm, grad


def stage_distortion(vectors, codec: RvqCodec, indices=None):
    """Mean squared reconstruction error after each of stages 0..L."""
    if indices is None:
        indices, _ = encode(vectors, codec)
    x = np.asarray(vectors, dtype=np.float64)
    out = [float(np.mean(np.sum(x**2, axis=1)))]
    for l in range(1, codec.num_stages + 1):
        r = decode(indices, codec, l).astype(np.float64)
        out.append(float(np.mean(np.sum((x - r) ** 2, axis=1))))
    return np.array(out)


def train_rvq(vectors, C=64, L=6, iters=1000, lr=1e-3, seed=0, kmeans_iters=50):
    """K-means-initialized stages followed by joint refinement of all codebooks.

    Each refinement step re-encodes the data and takes an Adam step on the
    codebook loss.  The codebooks with the lowest final reconstruction error
    seen (including the k-means initialization) are kept.  The returned codec
    stores float32 codebooks and the indices are re-encoded against them.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("cannot train codebooks on zero vectors")
    books = []
    resid = x.copy()
    for l in range(L):
        cb = kmeans_init(resid, C, seed=seed + l, iters=kmeans_iters)
        books.append(cb)
        resid = resid - cb[nearest(resid, cb)]
    Z = np.array(books)
    codec = RvqCodec(Z)

    def final_error(codec_):
        _, r = encode(x, codec_)
        return float(np.mean(np.sum((x - r) ** 2, axis=1)))

    best, best_err = Z.copy(), final_error(codec)
    opt = Adam([Z], lr=lr)
    for _ in range(iters):
        idx, recon = encode(x, codec)
        err = float(np.mean(np.sum((x - recon) ** 2, axis=1)))
        if err < best_err:
            best, best_err = Z.copy(), err
        _, grad = codebook_loss(x, codec, idx)
        opt.step([grad])
    if iters and final_error(codec) < best_err:
        best = Z.copy()
    out = RvqCodec(best.astype(np.float32))
    idx, _ = encode(x, out)
    return out, idx
