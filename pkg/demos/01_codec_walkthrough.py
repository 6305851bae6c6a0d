# %% [markdown]
# # Compressing a toy splat scene, stage by stage
#
# Builds the synthetic toy scene, then runs each stage of the codec by hand:
# mask training, residual VQ of the geometry, color-field distillation and
# the post-processed container.  Run top to bottom, or cell by cell in an
# editor that understands `# %%` markers.

# %%
import dataclasses
import time

import numpy as np

from gscodec.colorfield import ColorField, DistillConfig, distill_train
from gscodec.container import decode_file, encode_file, stats
from gscodec.masking import MaskConfig, train_mask
from gscodec.model import save_ply
from gscodec.pipeline import RunConfig, render_all
from gscodec.render import psnr
from gscodec.rvq import stage_distortion, train_rvq
from gscodec.synthetic import toy_scene

# %%
scene = toy_scene(n=5000, seed=0)
cloud, cams = scene.cloud, scene.cameras
refs = scene.references()
print(len(cloud), "Gaussians,", scene.is_decoy.sum(), "of them decoys")
print("PLY bytes:", len(save_ply(cloud)))

# %% [markdown]
# ## 1. Learnable mask
# Decoys never reach the alpha cutoff, so only the mask penalty acts on them
# and their logits drift below the threshold.

# %%
cfg = dataclasses.replace(RunConfig().with_synthetic_defaults(), hash_log2=10)
t = time.perf_counter()
res = train_mask(cloud, cams, refs, MaskConfig(lambda_mask=cfg.lambda_mask, iters=cfg.iters_mask))
kept = res.cloud
print(f"kept {len(kept)} / {len(cloud)} in {time.perf_counter() - t:.0f} s")
print("decoys left:", np.isin(scene.decoys, res.kept).sum())
for it, n, l_ren, l_m in res.log[:: max(1, len(res.log) // 10)]:
    print(f"  iter {it:5d}  n={n:5d}  L_ren={l_ren:.4f}  L_m={l_m:.3f}")

# %% [markdown]
# ## 2. Residual VQ of scales and rotations
# Each extra stage quantizes what the previous ones left over.

# %%
(sc, si) = train_rvq(kept.scales, cfg.codebook_size, cfg.stages, cfg.iters_rvq, seed=0)
(rc, ri) = train_rvq(kept.rotations, cfg.codebook_size, cfg.stages, cfg.iters_rvq, seed=1000)
print("scale MSE per stage:   ", np.array2string(stage_distortion(kept.scales, sc, si), precision=2))
print("rotation MSE per stage:", np.array2string(stage_distortion(kept.rotations, rc, ri), precision=4))

# %% [markdown]
# ## 3. Hash-grid color field
# Distilled from the kept Gaussians' SH colors, sampling view directions
# from the training cameras.

# %%
field = ColorField.create(cfg.field_config, seed=0)
fres = distill_train(kept, field, DistillConfig(iters=cfg.iters_field), camera_centers=[c.center for c in cams])
print("distillation MSE: first", f"{fres.losses[0]:.4f}", "last", f"{fres.losses[-1]:.2e}")

# %% [markdown]
# ## 4. Container, with and without post-processing

# %%
for pp in (False, True):
    data = encode_file(kept, cfg.mask_mode, ((sc, si), (rc, ri)), fres.field, pp)
    rep = stats(data, baseline_n=len(cloud))
    dec = render_all(decode_file(data), cams)
    ps = [psnr(a, b) for a, b in zip(refs, dec)]
    print(f"pp={pp!s:5}  {rep.total:7d} B  ratio {rep.ratio:5.1f}x  PSNR mean {np.mean(ps):.1f} min {np.min(ps):.1f}")
    print("   ", {k: v for k, v in rep.bytes.items()})
