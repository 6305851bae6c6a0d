"""Learnable volume/opacity masking of Gaussians with a straight-through estimator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import GaussianCloud, logit, sigmoid
from .optim import Adam
from .render import COV2D_FLOOR, RenderSettings, SplatView, backward, rasterize, render_loss

log = logging.getLogger(__name__)

MASK_MODES = ("opacity_only", "scale_only", "both")


@dataclass
class MaskState:
    logits: np.ndarray
    epsilon: float = 0.01
    mode: str = "both"

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        if self.mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mode!r}")
        if not 0 < self.epsilon < 1:
            raise ValueError("mask epsilon must lie in (0, 1)")

    @classmethod
    def initial(cls, n, init_prob=0.99, epsilon=0.01, mode="both") -> "MaskState":
        return cls(np.full(n, float(logit(init_prob))), epsilon, mode)

    def __len__(self):
        return len(self.logits)


def soft_mask(state: MaskState) -> np.ndarray:
    return sigmoid(state.logits)


def binary_mask(state: MaskState) -> np.ndarray:
    """Forward value of the straight-through mask: exactly 0.0 or 1.0."""
    return (soft_mask(state) > state.epsilon).astype(np.float64)


def mask_logit_grad(state: MaskState, grad_mask) -> np.ndarray:
    """Straight-through backward: dL/dm = dL/dM * sigmoid'(m)."""
    s = soft_mask(state)
    return np.asarray(grad_mask) * s * (1 - s)


def apply_mask(cloud: GaussianCloud, state: MaskState, soft: bool = False):
    """Masked (scales, opacities) and the mask values used.

    ``soft=True`` uses sigmoid(m) directly instead of the binarized value; it is
    the smooth surrogate the straight-through gradient is taken from.
    """
    M = soft_mask(state) if soft else binary_mask(state)
    scales = cloud.scales * M[:, None] if state.mode != "opacity_only" else cloud.scales
    opac = cloud.opacities * M if state.mode != "scale_only" else cloud.opacities
    return scales, opac, M


def masking_loss(state: MaskState):
    """Mean of sigmoid(m) and its gradient w.r.t. m."""
    n = len(state)
    if n == 0:
        raise ValueError("masking loss needs at least one Gaussian")
    s = soft_mask(state)
    return float(s.mean()), s * (1 - s) / n


def prune(cloud: GaussianCloud, state: MaskState):
    """Drop every Gaussian whose binary mask is 0; returns (cloud, kept_indices, state)."""
    keep = np.flatnonzero(binary_mask(state) > 0)
    if len(keep) == 0 and len(cloud):
        log.warning("mask removed every Gaussian; returning an empty cloud")
    return cloud.subset(keep), keep, MaskState(state.logits[keep], state.epsilon, state.mode)


def masked_view(cloud: GaussianCloud, state: MaskState, colors, soft: bool = False, probe: bool = True):
    """SplatView of the masked cloud.

    With ``probe`` set, Gaussians switched off by the opacity mask are rasterized
    at their unmasked footprint with zero opacity, so the backward pass still
    reports how much the loss would gain by switching them back on.
    """
    scales, opac, M = apply_mask(cloud, state, soft)
    probe_o = None
    if probe and not soft and state.mode != "scale_only":
        off = M == 0
        if off.any():
            probe_o = np.where(off, cloud.opacities, 0.0)
            if state.mode == "both":
                scales = np.where(off[:, None], cloud.scales, scales)
    return SplatView(cloud.positions, scales, cloud.rotations, opac, colors, probe_o), M


@dataclass
class MaskConfig:
    lambda_mask: float = 5e-4
    epsilon: float = 0.01
    mode: str = "both"
    prune_interval: int = 500
    lr: float = 1e-2
    iters: int = 2000
    seed: int = 0
    init_prob: float = 0.99


@dataclass
class MaskResult:
    state: MaskState
    cloud: GaussianCloud
    kept: np.ndarray
    log: list = field(default_factory=list)

    def log_csv(self) -> str:
        rows = ["iteration,n_gaussians,l_ren,l_m"]
        rows += [f"{it},{n},{lr:.8g},{lm:.8g}" for it, n, lr, lm in self.log]
        return "\n".join(rows) + "\n"


def loss_and_grad(cloud, state, camera, reference, colors, settings=None, lambda_mask=0.0, soft=False, probe=True):
    """Total loss L_ren + lambda * L_m for one view and its gradient w.r.t. the mask logits."""
    view, M = masked_view(cloud, state, colors, soft=soft, probe=probe)
    res = rasterize(view, camera, settings)
    l_ren, dimg = render_loss(res.image, reference)
    g = backward(res.tape, dimg)
    gM = np.zeros(len(cloud))
    if state.mode != "scale_only":
        gM += g.opacities * cloud.opacities
    if state.mode != "opacity_only":
        on = M > 0
        raw = res.tape.cov2d - np.array([COV2D_FLOOR, 0.0, COV2D_FLOOR])
        dM = np.where(on[:, None], 2.0 * raw / np.where(on, M, 1.0)[:, None], 0.0)
        gM += np.sum(g.cov2d * dM, axis=1)
    l_m, g_m = masking_loss(state) if len(state) else (0.0, np.zeros(0))
    grad = mask_logit_grad(state, gM) + lambda_mask * g_m
    return l_ren, l_m, grad, res


def train_mask(cloud: GaussianCloud, cameras, references, config: MaskConfig | None = None,
               settings: RenderSettings | None = None) -> MaskResult:
    """Optimize mask logits against reference renders, pruning every ``prune_interval`` steps."""
    cfg = config or MaskConfig()
    if not cameras:
        raise ValueError("mask training needs at least one view")
    rng = np.random.default_rng(cfg.seed)
    state = MaskState.initial(len(cloud), cfg.init_prob, cfg.epsilon, cfg.mode)
    kept = np.arange(len(cloud))
    opt = Adam([state.logits], lr=cfg.lr)
    history = []
    color_cache = {}
    for it in range(1, cfg.iters + 1):
        if len(cloud) == 0:
            break
        v = int(rng.integers(len(cameras)))
        if v not in color_cache:
            color_cache[v] = cloud.colors(cameras[v].center)
        l_ren, l_m, grad, _ = loss_and_grad(
            cloud, state, cameras[v], references[v], color_cache[v], settings, cfg.lambda_mask
        )
        if not (np.isfinite(l_ren) and np.all(np.isfinite(grad))):
            raise FloatingPointError(f"non-finite mask loss at iteration {it}")
        opt.step([grad])
        state.logits = opt.params[0]
        history.append((it, len(cloud), l_ren, l_m))
        if it % cfg.prune_interval == 0 or it == cfg.iters:
            cloud, keep, state = _prune_step(cloud, state, opt)
            kept = kept[keep]
            color_cache.clear()
    return MaskResult(state, cloud, kept, history)


def _prune_step(cloud, state, opt):
    keep = np.flatnonzero(binary_mask(state) > 0)
    if len(keep) == len(cloud):
        return cloud, keep, state
    opt.compact(keep)
    cloud = cloud.subset(keep)
    if len(keep) == 0:
        log.warning("mask removed every Gaussian; returning an empty cloud")
    return cloud, keep, MaskState(opt.params[0], state.epsilon, state.mode)
