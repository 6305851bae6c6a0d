"""CPU splatting renderer with a hand-written backward pass, plus image losses.

Gaussians are projected with the EWA construction, sorted globally by depth and
alpha-blended front to back.  The backward pass produces gradients for the
blended opacity, the per-Gaussian color and the projected 2D covariance; 3D
position and rotation gradients are not computed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage

from .model import CameraPose, covariance_from

COV2D_FLOOR = 0.3
ALPHA_MAX = 0.99
PSNR_CAP = 99.0


@dataclass
class RenderSettings:
    size: tuple | None = None  # (width, height); None -> camera size
    near: float = 0.01
    alpha_min: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.size is not None and (self.size[0] < 1 or self.size[1] < 1):
            raise ValueError("image size must be at least 1x1")
        if not (0 < self.alpha_min < 1 and 0 < self.transmittance_min < 1):
            raise ValueError("alpha_min and transmittance_min must lie in (0, 1)")


@dataclass
class SplatView:
    """What the rasterizer consumes: geometry plus already-resolved colors.

    ``probe_opacities`` marks Gaussians that are switched off (zero blended
    opacity) but should still receive an opacity gradient as if their opacity
    were infinitesimally above zero; the value sets their footprint.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    probe_opacities: np.ndarray | None = None


@dataclass
class RenderTape:
    order: np.ndarray
    means2d: np.ndarray
    cov2d: np.ndarray  # (N, 3) a, b, c including the floor
    conics: np.ndarray
    opacities: np.ndarray
    probe: np.ndarray
    colors: np.ndarray
    bbox: np.ndarray
    final_t: np.ndarray
    stop: np.ndarray
    background: np.ndarray
    alpha_min: float
    n: int


@dataclass
class RenderResult:
    image: np.ndarray
    tape: RenderTape
    culled: int = 0
    singular: int = 0


@dataclass
class Gradients:
    opacities: np.ndarray
    colors: np.ndarray
    cov2d: np.ndarray = field(repr=False)


def project_gaussians(positions, cov3d, camera: CameraPose, near: float = 0.01):
    """Project 3D Gaussians to the image plane.

    Returns (means2d, cov2d_raw, depth, visible) where cov2d_raw holds the
    (a, b, c) entries of J W Sigma W^T J^T without the low-pass floor.
    """
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    W = camera.rotation
    xc = (p - camera.center) @ W.T
    z = xc[:, 2]
    visible = z > near
    zs = np.where(visible, z, 1.0)
    fx, fy = camera.focal
    cx, cy = camera.principal
    means = np.stack([fx * xc[:, 0] / zs + cx, fy * xc[:, 1] / zs + cy], axis=1)
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * xc[:, 0] / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * xc[:, 1] / zs**2
    T = J @ W
    cov = T @ np.asarray(cov3d, dtype=np.float64).reshape(-1, 3, 3) @ np.swapaxes(T, 1, 2)
    cov2d = np.stack([cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]], axis=1)
    return means, cov2d, z, visible


def project_gaussian(position, scale, rotation, camera: CameraPose, near: float = 0.01):
    """Single-Gaussian projection: (mean2d, 2x2 covariance with floor, depth) or None if culled."""
    cov3d = covariance_from(scale, rotation)[None]
    m, c, z, vis = project_gaussians(np.asarray(position)[None], cov3d, camera, near)
    if not vis[0]:
        return None
    a, b, cc = c[0]
    return m[0], np.array([[a + COV2D_FLOOR, b], [b, cc + COV2D_FLOOR]]), float(z[0])


@numba.njit(cache=True)
def _forward_kernel(order, means, conics, opac, colors, bbox, H, W, bg, alpha_min, t_min):
    n = order.shape[0]
    img = np.zeros((H, W, 3))
    T = np.ones((H, W))
    stop = np.full((H, W), n, dtype=np.int64)
    for k in range(n):
        g = order[k]
        o = opac[g]
        if o <= 0.0:
            continue
        mx = means[g, 0]
        my = means[g, 1]
        A = conics[g, 0]
        B = conics[g, 1]
        C = conics[g, 2]
        for py in range(bbox[g, 2], bbox[g, 3]):
            dy = py - my
            for px in range(bbox[g, 0], bbox[g, 1]):
                if stop[py, px] < n:
                    continue
                dx = px - mx
                q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
                a = o * np.exp(-0.5 * q)
                if a > 0.99:
                    a = 0.99
                if a < alpha_min:
                    continue
                t = T[py, px]
                tn = t * (1.0 - a)
                if tn < t_min:
                    stop[py, px] = k
                    continue
                w = a * t
                img[py, px, 0] += colors[g, 0] * w
                img[py, px, 1] += colors[g, 1] * w
                img[py, px, 2] += colors[g, 2] * w
                T[py, px] = tn
    for py in range(H):
        for px in range(W):
            for c in range(3):
                img[py, px, c] += bg[c] * T[py, px]
    return img, T, stop


@numba.njit(cache=True)
def _backward_kernel(order, means, conics, opac, probe, colors, bbox, final_t, stop, bg, alpha_min, dimg):
    n = order.shape[0]
    H = final_t.shape[0]
    W = final_t.shape[1]
    N = opac.shape[0]
    g_opac = np.zeros(N)
    g_col = np.zeros((N, 3))
    g_conic = np.zeros((N, 3))
    Tcur = final_t.copy()
    S = np.empty((H, W, 3))
    for py in range(H):
        for px in range(W):
            for c in range(3):
                S[py, px, c] = bg[c] * final_t[py, px]
    for kk in range(n):
        k = n - 1 - kk
        g = order[k]
        is_probe = probe[g] > 0.0
        o = probe[g] if is_probe else opac[g]
        if o <= 0.0:
            continue
        mx = means[g, 0]
        my = means[g, 1]
        A = conics[g, 0]
        B = conics[g, 1]
        C = conics[g, 2]
        for py in range(bbox[g, 2], bbox[g, 3]):
            dy = py - my
            for px in range(bbox[g, 0], bbox[g, 1]):
                if k >= stop[py, px]:
                    continue
                dx = px - mx
                q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
                G = np.exp(-0.5 * q)
                if is_probe:
                    if o * G < alpha_min:
                        continue
                    t = Tcur[py, px]
                    dl_da = 0.0
                    for c in range(3):
                        dl_da += dimg[py, px, c] * (colors[g, c] * t - S[py, px, c])
                    g_opac[g] += dl_da * G
                    continue
                raw = o * G
                a = raw if raw < 0.99 else 0.99
                if a < alpha_min:
                    continue
                one_m = 1.0 - a
                t = Tcur[py, px] / one_m
                dl_da = 0.0
                for c in range(3):
                    gc = dimg[py, px, c]
                    dl_da += gc * (colors[g, c] * t - S[py, px, c] / one_m)
                    g_col[g, c] += gc * a * t
                    S[py, px, c] += colors[g, c] * a * t
                Tcur[py, px] = t
                if raw < 0.99:
                    g_opac[g] += dl_da * G
                    dl_dq = -0.5 * dl_da * o * G
                    g_conic[g, 0] += dl_dq * dx * dx
                    g_conic[g, 1] += dl_dq * 2.0 * dx * dy
                    g_conic[g, 2] += dl_dq * dy * dy
    return g_opac, g_col, g_conic


def _footprints(means, cov, opac, width, height, alpha_min):
    """Pixel bounding boxes [x0, x1, y0, y1) covering every pixel where alpha can reach alpha_min."""
    a, b, c = cov[:, 0], cov[:, 1], cov[:, 2]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    ratio = np.maximum(opac, 0.0) / alpha_min
    live = ratio >= 1.0
    r = np.sqrt(2.0 * np.log(np.where(live, ratio, 1.0)) * lam) + 1e-6
    x0 = np.ceil(means[:, 0] - r)
    x1 = np.floor(means[:, 0] + r) + 1
    y0 = np.ceil(means[:, 1] - r)
    y1 = np.floor(means[:, 1] + r) + 1
    box = np.stack([np.clip(x0, 0, width), np.clip(x1, 0, width), np.clip(y0, 0, height), np.clip(y1, 0, height)], 1)
    box = np.where(live[:, None], box, 0)
    return box.astype(np.int64)


def rasterize(view: SplatView, camera: CameraPose, settings: RenderSettings | None = None) -> RenderResult:
    """Render one view; the returned tape feeds :func:`backward`."""
    settings = settings or RenderSettings()
    width, height = settings.size or camera.size
    bg = np.asarray(settings.background, dtype=np.float64)
    n = len(view.positions)
    opac = np.asarray(view.opacities, dtype=np.float64).reshape(n)
    probe = np.zeros(n) if view.probe_opacities is None else np.asarray(view.probe_opacities, np.float64).reshape(n)
    colors = np.ascontiguousarray(np.asarray(view.colors, dtype=np.float64).reshape(n, 3))
    cov3d = covariance_from(view.scales, view.rotations) if n else np.zeros((0, 3, 3))
    means, cov, depth, visible = project_gaussians(view.positions, cov3d, camera, settings.near)
    cov = cov + np.array([COV2D_FLOOR, 0.0, COV2D_FLOOR])
    det = cov[:, 0] * cov[:, 2] - cov[:, 1] ** 2
    singular = visible & ~(det > 0)
    ok = visible & ~singular
    safe_det = np.where(ok, det, 1.0)
    conics = np.stack([cov[:, 2] / safe_det, -cov[:, 1] / safe_det, cov[:, 0] / safe_det], axis=1)
    bbox = _footprints(means, np.where(ok[:, None], cov, 0.0), np.where(ok, np.maximum(opac, probe), 0.0),
                       width, height, settings.alpha_min)
    idx = np.flatnonzero(ok)
    order = idx[np.argsort(depth[idx], kind="stable")]
    img, final_t, stop = _forward_kernel(
        order, means, conics, np.where(probe > 0, 0.0, opac), colors, bbox,
        height, width, bg, settings.alpha_min, settings.transmittance_min,
    )
    tape = RenderTape(order, means, cov, conics, opac, probe, colors, bbox, final_t, stop, bg, settings.alpha_min, n)
    return RenderResult(img, tape, culled=int(np.count_nonzero(~visible)), singular=int(np.count_nonzero(singular)))


def backward(tape: RenderTape, dimage: np.ndarray) -> Gradients:
    """Reverse-mode gradients of a scalar loss given dL/dimage.

    Returns gradients w.r.t. blended opacity, color and the (a, b, c) entries of
    the floored 2D covariance.  Culled Gaussians receive zeros.
    """
    dimage = np.ascontiguousarray(dimage, dtype=np.float64)
    g_opac, g_col, g_conic = _backward_kernel(
        tape.order, tape.means2d, tape.conics, np.where(tape.probe > 0, 0.0, tape.opacities), tape.probe,
        tape.colors, tape.bbox, tape.final_t, tape.stop, tape.background, tape.alpha_min, dimage,
    )
    # conic = inv(cov): dL/dcov = -P G P with G the symmetric matrix gradient.
    A, B, C = tape.conics[:, 0], tape.conics[:, 1], tape.conics[:, 2]
    gA, gB, gC = g_conic[:, 0], 0.5 * g_conic[:, 1], g_conic[:, 2]
    # P G P entries for P = [[A, B], [B, C]], G = [[gA, gB], [gB, gC]]
    m00 = A * (A * gA + B * gB) + B * (A * gB + B * gC)
    m01 = A * (B * gA + C * gB) + B * (B * gB + C * gC)
    m11 = B * (B * gA + C * gB) + C * (B * gB + C * gC)
    g_cov = -np.stack([m00, 2.0 * m01, m11], axis=1)
    return Gradients(g_opac, g_col, g_cov)


def render(view: SplatView, camera: CameraPose, settings: RenderSettings | None = None) -> np.ndarray:
    return rasterize(view, camera, settings).image


# --- losses and metrics ----------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


_WINDOW = _gaussian_window()
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _blur(x):
    # zero-padded separable filter; symmetric kernel -> self-adjoint
    y = ndimage.correlate1d(x, _WINDOW, axis=0, mode="constant")
    return ndimage.correlate1d(y, _WINDOW, axis=1, mode="constant")


def _ssim_terms(x, y):
    mu_x, mu_y = _blur(x), _blur(y)
    sxx = _blur(x * x) - mu_x**2
    syy = _blur(y * y) - mu_y**2
    sxy = _blur(x * y) - mu_x * mu_y
    n1 = 2 * mu_x * mu_y + SSIM_C1
    n2 = 2 * sxy + SSIM_C2
    d1 = mu_x**2 + mu_y**2 + SSIM_C1
    d2 = sxx + syy + SSIM_C2
    return mu_x, mu_y, n1, n2, d1, d2


def ssim_map(image, reference) -> np.ndarray:
    """Per-pixel, per-channel SSIM (zero padding at the borders)."""
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    _, _, n1, n2, d1, d2 = _ssim_terms(x, y)
    return (n1 * n2) / (d1 * d2)


def ssim(image, reference, return_grad: bool = False):
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    mu_x, mu_y, n1, n2, d1, d2 = _ssim_terms(x, y)
    value = float(np.mean((n1 * n2) / (d1 * d2)))
    if not return_grad:
        return value
    scale = 1.0 / x.size
    dm = (2 * mu_y * n2 / (d1 * d2) - n1 * n2 * 2 * mu_x / (d1**2 * d2)) * scale
    ds_xx = -n1 * n2 / (d1 * d2**2) * scale
    ds_xy = 2 * n1 / (d1 * d2) * scale
    dmu = dm - 2 * mu_x * ds_xx - mu_y * ds_xy
    grad = _blur(dmu) + 2 * x * _blur(ds_xx) + y * _blur(ds_xy)
    return value, grad


def render_loss(image, reference, lam: float = 0.2):
    """(1 - lam) * L1 + lam * (1 - SSIM) and its gradient w.r.t. ``image``."""
    x = np.asarray(image, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shape {x.shape} does not match reference {y.shape}")
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    s, gs = ssim(x, y, return_grad=True)
    loss = (1 - lam) * l1 + lam * (1 - s)
    grad = (1 - lam) * np.sign(diff) / x.size - lam * gs
    return loss, grad


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def to_u8(image) -> np.ndarray:
    return np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_png(image, path):
    from PIL import Image

    Image.fromarray(to_u8(image)).save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
