"""
Where ensemble spread goes blind
================================

A hash-encoded field with a small table stores many unrelated points in
the same slots. Masking the network after the table perturbs them all
alike, so foreground that renders as background need not look any more
uncertain than foreground that renders correctly. A positional-encoding field has no shared table.
"""

# %%
import numpy as np

from phdrop.optim import TrainConfig
from phdrop.phd import PHDConfig, run_phd
from phdrop.pipeline import ModelSettings, train_model
from phdrop.scene import SceneSpec, make_dataset

data = make_dataset(SceneSpec("spheres", seed=2), n_train=8, n_test=4, seed=2, resolution=(32, 32))
background = np.asarray(data.spec.background)
settings = ModelSettings(width=64, depth=3, n_samples=24, log2_table_size=10)

for tag in ("nerf-hash", "nerf-pe"):
    model, log = train_model(tag, data, TrainConfig(iterations=600, batch_rays=512, seed=2), settings)
    report, maps = run_phd(model, data, PHDConfig(seed=2, eps=0.02))
    missed, correct = [], []
    for m in maps:
        gt = data.test[m.view_id].image
        fg = np.abs(gt - background).mean(axis=2) >= 0.1
        as_background = np.abs(m.mean - background).mean(axis=2) < 0.1
        right = np.abs(m.mean - gt).mean(axis=2) < 0.1
        zeta = m.zeta.mean(axis=2)
        missed.append(zeta[fg & as_background])
        correct.append(zeta[fg & right])
    missed, correct = np.concatenate(missed), np.concatenate(correct)
    print(f"{tag:9s} r_drop {report.r_drop:.2f}  median zeta: missed {np.median(missed):.4f} "
          f"({missed.size} px), correct {np.median(correct):.4f} ({correct.size} px)")
