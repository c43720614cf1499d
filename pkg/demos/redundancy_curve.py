"""
How much of a trained model can be switched off?
================================================

Trace the train-fit gap (mean absolute change of the train renders) as
the dropout ratio grows. The gate keeps the largest ratio whose gap is
below eps; a model with spare capacity shows a long flat start.
"""

# %%
import numpy as np

from phdrop.optim import TrainConfig
from phdrop.phd import train_fit_gap
from phdrop.pipeline import ModelSettings, train_model
from phdrop.scene import SceneSpec, make_dataset

data = make_dataset(SceneSpec("checker-cube", seed=5), n_train=12, n_test=2, seed=5, resolution=(32, 32))
model, log = train_model("gs3d", data, TrainConfig(iterations=1500, seed=5), ModelSettings(n_splats=1024))
print(f"train PSNR {log.final_psnr:.2f} dB")

# %%
# Each point averages 8 masks; masks for different ratios are independent.
eps = 0.01
for r in np.round(np.arange(0.02, 0.42, 0.04), 2):
    gap = train_fit_gap(model, data.train, float(r), 8, key=int(r * 100))
    bar = "#" * int(round(gap / eps * 10))
    print(f"r = {r:.2f}  gap = {gap:.4f}  {'pass' if gap < eps else 'fail'}  {bar}")
