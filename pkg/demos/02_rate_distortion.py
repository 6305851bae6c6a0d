# %% [markdown]
# # Rate-distortion sweep on the toy scene
#
# One knob at a time is pushed toward a smaller file: the mask weight is
# doubled, the hash table halved, or R-VQ stages dropped.  Stages shared
# between configurations are computed once.

# %%
import dataclasses

from gscodec.pipeline import Compressor, RunConfig, default_grid, sweep, sweep_csv
from gscodec.synthetic import toy_scene

# %%
scene = toy_scene()
base = dataclasses.replace(RunConfig().with_synthetic_defaults(), hash_log2=10)
grid = default_grid(base)
print(len(grid), "configurations")

# %%
comp = Compressor(scene.cloud, scene.cameras)
rows = sweep(scene.cloud, scene.cameras, grid, compressor=comp)
print(sweep_csv(rows))

# %% [markdown]
# Rows flagged `frontier=1` are not beaten on both size and PSNR by any
# other row.  Optionally plot them.

# %%
try:
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    ok = [r for r in rows if r["bytes"]]
    plt.scatter([r["bytes"] / 1e3 for r in ok], [r["psnr"] for r in ok],
                c=["C3" if r["frontier"] else "C0" for r in ok])
    plt.xlabel("file size (KB)")
    plt.ylabel("PSNR vs original (dB)")
    plt.savefig("rate_distortion.png", dpi=120)
