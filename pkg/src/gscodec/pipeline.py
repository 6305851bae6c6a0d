"""End-to-end compression: mask -> prune -> R-VQ -> color field -> post-processing -> container."""

from __future__ import annotations

import dataclasses
import logging
import os
import time
from dataclasses import dataclass

import numpy as np

from .colorfield import ColorField, DistillConfig, FieldConfig, distill_train, precompute_features
from .container import CompactScene, PostprocFlags, decode_file, encode_file, stats
from .masking import MASK_MODES, MaskConfig, train_mask
from .model import GaussianCloud, save_ply
from .render import RenderSettings, SplatView, psnr, render, ssim
from .rvq import train_rvq

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"invalid config key '{key}': {message}")
        self.key = key


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass
class RunConfig:
    lambda_mask: float = 5e-4
    epsilon: float = 0.01
    mask_mode: str = "both"
    mask_lr: float = 1e-2
    prune_interval: int = 500
    codebook_size: int = 64
    stages: int = 6
    iters_rvq: int = 1000
    hash_log2: int = 19
    field_lr: float = 1e-2
    iters_mask: int = 2000
    iters_field: int = 5000
    seed: int = 0
    pp: bool = True
    mask: bool = True
    hash_threshold: float = 0.1

    LONG_SCHEDULE = {"iters_mask": 30000, "iters_field": 30000, "iters_rvq": 1000, "prune_interval": 1000}
    # object-centric synthetic scenes use a stronger mask and a smaller hash table
    SYNTHETIC = {"lambda_mask": 4e-3, "hash_log2": 16}

    def validate(self) -> "RunConfig":
        def need(key, ok, msg):
            if not ok:
                raise ConfigError(key, msg)

        need("lambda_mask", np.isfinite(self.lambda_mask) and self.lambda_mask >= 0, "must be >= 0")
        need("epsilon", 0 < self.epsilon < 1, "must lie in (0, 1)")
        need("mask_mode", self.mask_mode in MASK_MODES, f"must be one of {', '.join(MASK_MODES)}")
        need("codebook_size", 2 <= self.codebook_size <= 65535, "must be in [2, 65535]")
        need("stages", 1 <= self.stages <= 255, "must be in [1, 255]")
        need("hash_log2", 1 <= self.hash_log2 <= 24, "must be in [1, 24]")
        for key in ("iters_mask", "iters_field", "iters_rvq"):
            need(key, int(getattr(self, key)) >= 0, "must be >= 0")
        need("prune_interval", self.prune_interval >= 1, "must be >= 1")
        need("mask_lr", self.mask_lr > 0, "must be > 0")
        need("field_lr", self.field_lr > 0, "must be > 0")
        need("hash_threshold", self.hash_threshold >= 0, "must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in names:
                raise ConfigError(k, "unknown key")
        return cls(**d).validate()

    def with_long_schedule(self) -> "RunConfig":
        return dataclasses.replace(self, **self.LONG_SCHEDULE)

    def with_synthetic_defaults(self) -> "RunConfig":
        return dataclasses.replace(self, **self.SYNTHETIC)

    @property
    def field_config(self) -> FieldConfig:
        return FieldConfig(hash_log2=self.hash_log2)

    @property
    def pp_flags(self) -> PostprocFlags:
        return PostprocFlags(hash_threshold=self.hash_threshold) if self.pp else PostprocFlags.off()

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def configure_threads(deterministic=False):
    """Cap numba threads from GSCODEC_THREADS; deterministic runs use one thread."""
    import numba

    n = 1 if deterministic else int(os.environ.get("GSCODEC_THREADS", "0") or 0)
    if n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# --- scenes as renderables -----------------------------------------------------

def scene_view(scene, camera, features=None) -> SplatView:
    """SplatView for a GaussianCloud (SH colors) or a CompactScene (field colors)."""
    if isinstance(scene, CompactScene):
        colors = scene.colors(camera.center, features)
        return SplatView(scene.positions, scene.scales, scene.rotations, scene.opacities, colors)
    return SplatView(scene.positions, scene.scales, scene.rotations, scene.opacities, scene.colors(camera.center))


class Renderer:
    """Renders a scene from many cameras; geometry and grid features are decoded once."""

    def __init__(self, scene, precompute=True, settings: RenderSettings | None = None):
        self.scene = scene
        self.settings = settings
        self.features = None
        self._geom = None
        if isinstance(scene, CompactScene):
            self._geom = (scene.positions, scene.scales, scene.rotations, scene.opacities)
            if precompute and len(scene):
                self.features = precompute_features(scene.positions, scene.field)

    def colors(self, camera):
        if self._geom is None:
            return self.scene.colors(camera.center)
        return self.scene.colors(camera.center, self.features)

    def __call__(self, camera) -> np.ndarray:
        if self._geom is None:
            return render(scene_view(self.scene, camera), camera, self.settings)
        p, s, r, o = self._geom
        return render(SplatView(p, s, r, o, self.colors(camera)), camera, self.settings)


def render_all(scene, cameras, settings=None) -> list:
    r = Renderer(scene, settings=settings)
    return [r(c) for c in cameras]


def image_metrics(a, b) -> dict:
    return {"psnr": psnr(a, b), "ssim": float(ssim(a, b)), "l1": float(np.mean(np.abs(a - b)))}


# --- stages ----------------------------------------------------------------------

@dataclass
class MaskStage:
    cloud: GaussianCloud
    kept: np.ndarray
    log: list
    seconds: float


@dataclass
class RvqStage:
    scale: tuple  # (codec, indices)
    rotation: tuple
    seconds: float


@dataclass
class FieldStage:
    field: ColorField
    losses: list
    seconds: float


class Compressor:
    """Runs the pipeline with per-stage memoization, so sweeps reuse shared work."""

    def __init__(self, cloud: GaussianCloud, cameras=None, references=None, settings: RenderSettings | None = None):
        self.cloud = cloud
        self.cameras = list(cameras or [])
        self.settings = settings
        self._references = references
        self._mask, self._rvq, self._field = {}, {}, {}

    @property
    def references(self):
        if self._references is None:
            self._references = render_all(self.cloud, self.cameras, self.settings)
        return self._references

    def mask_stage(self, cfg: RunConfig) -> MaskStage:
        if not (cfg.mask and self.cameras and cfg.iters_mask > 0):
            if cfg.mask and not self.cameras:
                log.warning("no cameras given; skipping mask training")
            return MaskStage(self.cloud, np.arange(len(self.cloud)), [], 0.0)
        key = (cfg.lambda_mask, cfg.epsilon, cfg.mask_mode, cfg.mask_lr, cfg.iters_mask, cfg.prune_interval, cfg.seed)
        if key not in self._mask:
            t = time.perf_counter()
            mc = MaskConfig(cfg.lambda_mask, cfg.epsilon, cfg.mask_mode, cfg.prune_interval, cfg.mask_lr,
                            cfg.iters_mask, cfg.seed)
            res = train_mask(self.cloud, self.cameras, self.references, mc, self.settings)
            self._mask[key] = MaskStage(res.cloud, res.kept, res.log, time.perf_counter() - t)
        return self._mask[key]

    def rvq_stage(self, cfg: RunConfig, mask: MaskStage) -> RvqStage:
        key = (id(mask), cfg.codebook_size, cfg.stages, cfg.iters_rvq, cfg.seed)
        if key not in self._rvq:
            t = time.perf_counter()
            c = mask.cloud
            sc = train_rvq(c.scales, cfg.codebook_size, cfg.stages, cfg.iters_rvq, seed=cfg.seed)
            rc = train_rvq(c.rotations, cfg.codebook_size, cfg.stages, cfg.iters_rvq, seed=cfg.seed + 1000)
            self._rvq[key] = RvqStage(sc, rc, time.perf_counter() - t)
        return self._rvq[key]

    def field_stage(self, cfg: RunConfig, mask: MaskStage) -> FieldStage:
        key = (id(mask), cfg.hash_log2, cfg.iters_field, cfg.field_lr, cfg.seed)
        if key not in self._field:
            t = time.perf_counter()
            f = ColorField.create(cfg.field_config, seed=cfg.seed)
            dc = DistillConfig(iters=cfg.iters_field, lr=cfg.field_lr, seed=cfg.seed)
            centers = [c.center for c in self.cameras] or None
            res = distill_train(mask.cloud, f, dc, camera_centers=centers)
            self._field[key] = FieldStage(res.field, res.losses, time.perf_counter() - t)
        return self._field[key]

    def run(self, cfg: RunConfig, evaluate=True) -> tuple[bytes, dict]:
        cfg.validate()
        try:
            mask = self.mask_stage(cfg)
        except Exception as e:
            raise StageError("mask", e) from e
        if len(mask.cloud) == 0:
            raise StageError("mask", "every Gaussian was removed")
        try:
            rv = self.rvq_stage(cfg, mask)
        except Exception as e:
            raise StageError("rvq", e) from e
        try:
            fs = self.field_stage(cfg, mask)
        except Exception as e:
            raise StageError("field", e) from e
        try:
            data = encode_file(mask.cloud, cfg.mask_mode if cfg.mask else None, (rv.scale, rv.rotation),
                               fs.field, cfg.pp_flags)
        except Exception as e:
            raise StageError("encode", e) from e
        report = self.report(cfg, data, mask, rv, fs, evaluate)
        return data, report

    def report(self, cfg, data, mask, rv, fs, evaluate=True) -> dict:
        st = stats(data, baseline_n=len(self.cloud))
        rep = {
            "config": cfg.as_dict(),
            "n_input": len(self.cloud),
            "n_kept": len(mask.cloud),
            "file_bytes": len(data),
            "ply_bytes": len(save_ply(self.cloud)),
            "sizes": st.as_dict(),
            "losses": {
                "mask_l_ren_final": mask.log[-1][2] if mask.log else None,
                "mask_l_m_final": mask.log[-1][3] if mask.log else None,
                "field_mse_final": fs.losses[-1] if fs.losses else None,
            },
            "seconds": {"mask": mask.seconds, "rvq": rv.seconds, "field": fs.seconds},
        }
        rep["ratio_vs_ply"] = rep["ply_bytes"] / len(data)
        if evaluate and self.cameras:
            dec = render_all(decode_file(data), self.cameras, self.settings)
            ps = [psnr(a, b) for a, b in zip(self.references, dec)]
            rep["psnr_mean"] = float(np.mean(ps))
            rep["psnr_min"] = float(np.min(ps))
        return rep


def compress(cloud: GaussianCloud, cameras=None, config: RunConfig | None = None, evaluate=True):
    """Compress a cloud; returns (file bytes, JSON-ready report)."""
    return Compressor(cloud, cameras).run(config or RunConfig(), evaluate)


# --- sweeps ------------------------------------------------------------------------

SWEEP_COLUMNS = ("lambda_m", "hash_log2", "stages", "bytes", "psnr", "n_kept", "frontier")


def default_grid(base: RunConfig) -> list[RunConfig]:
    """Base config plus one knob made more compact at a time, by factors of two."""
    rep = dataclasses.replace
    grid = [base]
    grid += [rep(base, lambda_mask=base.lambda_mask * k) for k in (2, 4, 8)]
    grid += [rep(base, hash_log2=base.hash_log2 - k) for k in (1, 2, 3) if base.hash_log2 - k >= 1]
    grid += [rep(base, stages=s) for s in sorted({max(1, base.stages * 2 // 3), max(1, base.stages // 3), 1},
                                                  reverse=True) if s < base.stages]
    return grid


def pareto_flags(sizes, quality) -> list[bool]:
    """True where no other point is at least as small and strictly better, or smaller and as good."""
    out = []
    for i, (s, q) in enumerate(zip(sizes, quality)):
        dominated = any(
            (s2 <= s and q2 >= q) and (s2 < s or q2 > q)
            for j, (s2, q2) in enumerate(zip(sizes, quality)) if j != i
        )
        out.append(not dominated)
    return out


def sweep(cloud, cameras, grid, references=None, compressor: Compressor | None = None) -> list[dict]:
    """One row per config; failures are logged and recorded with empty size/PSNR.

    Pass an existing ``compressor`` to reuse stages it has already computed.
    """
    comp = compressor or Compressor(cloud, cameras, references)
    rows = []
    for cfg in grid:
        row = {"lambda_m": cfg.lambda_mask, "hash_log2": cfg.hash_log2, "stages": cfg.stages}
        try:
            data, rep = comp.run(cfg)
            row.update(bytes=len(data), psnr=rep.get("psnr_mean", float("nan")), n_kept=rep["n_kept"])
        except Exception as e:  # keep sweeping
            log.error("sweep config %s failed: %s", row, e)
            row.update(bytes=None, psnr=None, n_kept=None)
        rows.append(row)
    ok = [i for i, r in enumerate(rows) if r["bytes"] is not None]
    flags = pareto_flags([rows[i]["bytes"] for i in ok], [rows[i]["psnr"] for i in ok])
    for r in rows:
        r["frontier"] = False
    for i, f in zip(ok, flags):
        rows[i]["frontier"] = f
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def sweep_csv(rows) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    lines += [",".join(_cell(r.get(k)) for k in SWEEP_COLUMNS) for r in rows]
    return "\n".join(lines) + "\n"
