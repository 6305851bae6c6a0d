"""Procedural scenes for tests and the toy benchmark.

Scenes mix *contributors* (visible, reasonably opaque Gaussians) with
*decoys* that never reach the alpha cutoff in any view, either because
they are nearly transparent or because they sit outside every frustum.
A working mask should remove the decoys and keep the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SH_C0, CameraPose, GaussianCloud, canonicalize_quaternions
from .render import RenderSettings, SplatView, render

DECOY_OPACITY = 1e-3  # below the 1/255 alpha cutoff even at the Gaussian center


@dataclass
class SyntheticScene:
    cloud: GaussianCloud
    cameras: list
    is_decoy: np.ndarray  # bool per Gaussian

    @property
    def contributors(self) -> np.ndarray:
        return np.flatnonzero(~self.is_decoy)

    @property
    def decoys(self) -> np.ndarray:
        return np.flatnonzero(self.is_decoy)

    def references(self, settings: RenderSettings | None = None) -> list:
        return [render_cloud(self.cloud, cam, settings) for cam in self.cameras]


def ring_cameras(n=8, radius=4.0, height=1.5, size=128, fov_deg=55.0) -> list:
    f = 0.5 * size / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for i in range(n):
        a = 2 * np.pi * i / n
        eye = (radius * np.cos(a), radius * np.sin(a), height)
        cams.append(CameraPose.look_at(eye, focal=(f, f), principal=(size / 2, size / 2),
                                       size=(size, size), name=f"ring{i:02d}"))
    return cams


def random_rotations(rng, n) -> np.ndarray:
    return canonicalize_quaternions(rng.normal(size=(n, 4)))


def smooth_rgb(p) -> np.ndarray:
    """A smooth, bounded color function of position."""
    p = np.asarray(p, dtype=np.float64)
    return np.stack([
        0.5 + 0.35 * np.sin(1.7 * p[:, 0] + 0.3),
        0.5 + 0.35 * np.sin(1.3 * p[:, 1] - 0.8 * p[:, 2]),
        0.5 + 0.35 * np.cos(1.1 * p[:, 2] + 0.9 * p[:, 0]),
    ], axis=1)


def sh_from_rgb(rgb, degree=0, rng=None, view_strength=0.0) -> np.ndarray:
    """SH coefficients whose DC term reproduces ``rgb``; higher bands get small random values."""
    rgb = np.asarray(rgb, dtype=np.float64)
    B = (degree + 1) ** 2
    sh = np.zeros((len(rgb), 3, B))
    sh[:, :, 0] = (rgb - 0.5) / SH_C0
    if B > 1 and view_strength > 0:
        rng = rng or np.random.default_rng(0)
        # one shared random pattern per band, modulated smoothly, keeps colors learnable
        pattern = rng.normal(scale=view_strength, size=(3, B - 1))
        sh[:, :, 1:] = pattern[None] * (0.5 + 0.5 * np.tanh(rgb))[:, :, None]
    return sh


def _surface_points(rng, n):
    """Points on a bumpy sphere and a ring around it."""
    n_ring = n // 4
    v = rng.normal(size=(n - n_ring, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    r = 1.0 + 0.15 * np.sin(3 * v[:, 0]) * np.cos(2 * v[:, 1])
    sphere = v * r[:, None]
    t = rng.uniform(0, 2 * np.pi, n_ring)
    ring = np.stack([1.7 * np.cos(t), 1.7 * np.sin(t), 0.15 * np.sin(5 * t)], axis=1)
    ring += rng.normal(scale=0.05, size=ring.shape)
    return np.concatenate([sphere, ring])


def toy_scene(n=5000, decoy_fraction=0.56, n_cameras=8, size=128, degree=3, seed=0) -> SyntheticScene:
    """About ``n`` Gaussians with a ``decoy_fraction`` share of zero-contribution decoys."""
    rng = np.random.default_rng(seed)
    n_dec = int(round(n * decoy_fraction))
    n_con = n - n_dec
    pos_c = _surface_points(rng, n_con)
    n_far = n_dec // 2
    pos_t = rng.uniform(-1.8, 1.8, size=(n_dec - n_far, 3))
    pos_f = np.column_stack([rng.uniform(-3, 3, (n_far, 2)), rng.uniform(-40, -30, n_far)])
    positions = np.concatenate([pos_c, pos_t, pos_f])
    opac = np.concatenate([rng.uniform(0.4, 0.95, n_con), np.full(n_dec, DECOY_OPACITY)])
    scales = np.exp(rng.uniform(np.log(0.025), np.log(0.07), size=(n, 3)))
    scales[:n_con, 2] *= 0.4  # flattened splats
    rgb = smooth_rgb(positions)
    cloud = GaussianCloud(positions, opac, scales, random_rotations(rng, n),
                          sh_from_rgb(rgb, degree, rng, view_strength=0.08))
    is_decoy = np.zeros(n, dtype=bool)
    is_decoy[n_con:] = True
    perm = rng.permutation(n)
    return SyntheticScene(cloud.subset(perm), ring_cameras(n_cameras, size=size), is_decoy[perm])


def decoy_scene(n_contrib=100, n_decoy=100, size=32, n_cameras=4, seed=0) -> SyntheticScene:
    """Small scene of well-separated contributors plus zero-opacity decoys."""
    rng = np.random.default_rng(seed)
    n = n_contrib + n_decoy
    pos = rng.uniform(-0.9, 0.9, size=(n, 3))
    opac = np.concatenate([rng.uniform(0.5, 0.9, n_contrib), np.zeros(n_decoy)])
    scales = np.exp(rng.uniform(np.log(0.06), np.log(0.12), size=(n, 3)))
    rgb = rng.uniform(0.1, 0.9, size=(n, 3))
    cloud = GaussianCloud(pos, opac, scales, random_rotations(rng, n), sh_from_rgb(rgb))
    is_decoy = np.arange(n) >= n_contrib
    return SyntheticScene(cloud, ring_cameras(n_cameras, radius=3.5, height=1.0, size=size, fov_deg=60), is_decoy)


def constant_color_scene(n=500, rgb=(0.8, 0.3, 0.2), seed=0) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-1, 1, size=(n, 3))
    cols = np.broadcast_to(np.asarray(rgb, dtype=np.float64), (n, 3))
    return GaussianCloud(pos, rng.uniform(0.3, 0.9, n), np.full((n, 3), 0.05), random_rotations(rng, n),
                         sh_from_rgb(cols))


def render_cloud(cloud: GaussianCloud, camera: CameraPose, settings: RenderSettings | None = None) -> np.ndarray:
    view = SplatView(cloud.positions, cloud.scales, cloud.rotations, cloud.opacities,
                     cloud.colors(camera.center))
    return render(view, camera, settings)
