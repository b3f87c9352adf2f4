"""
A tour of the synthetic world
=============================

Images in this world are striped textures. Classes come in pairs that look
almost alike, and *where* and *when* an image was taken decides which member
of a pair is likely. This script builds a world, renders a few samples and
shows how much the location/date prior knows on its own.

Run with ``python3 demos/01_synthetic_world.py [out_dir]``.
"""
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from stssl.dataset import SyntheticWorldConfig, build_world, render_synthetic

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

# A small 6-class world; classes c and c+3 share an orientation
cfg = SyntheticWorldConfig(samples_total=600, num_classes=6, image_size=32, seed=0)
world = build_world(cfg)
print("region grid:", world.grid, " classes per pair group:", cfg.num_classes // world.num_groups)

# the region prior is a (regions, classes) table; rows sum to one
np.set_printoptions(precision=2, suppress=True)
print("region prior, first 4 regions:\n", world.region_prior[:4])

# render and look at one example per class
data = render_synthetic(cfg, "train", world)
labels = np.array([l[0] for l in data.labels])
fig, axes = plt.subplots(1, cfg.num_classes, figsize=(2 * cfg.num_classes, 2.2))
for c, ax in enumerate(axes):
    i = int(np.flatnonzero(labels == c)[0])
    ax.imshow(data.images[i])
    ax.set_title(f"class {c}\nday {data.day[i]:.0f}", fontsize=8)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "samples.png", dpi=100)
print("wrote", out / "samples.png")

# How good is a classifier that only sees metadata? Take the argmax of the prior.
prior = world.class_prior(data.lat, data.lon, data.day)
meta_only = (prior.argmax(axis=1) == labels).mean()
# The image tells the pairs apart easily; the prior is what settles the member within a pair.
same_pair = world.group_of(prior.argmax(axis=1)) == world.group_of(labels)
within = (prior.argmax(axis=1) == labels)[same_pair].mean()
print(f"metadata-only accuracy {meta_only:.3f} (chance {1 / cfg.num_classes:.3f}); "
      f"right member when the pair is right {within:.3f}")
