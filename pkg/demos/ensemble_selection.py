"""
Picking the better of two models per view
=========================================

Two splat models see disjoint halves of the train views. For every test
view we keep the render of whichever model is less uncertain there, and
score the pick by its SSIM relative to the better of the two renders
(1.0 means every pick was right).
"""

# %%
from phdrop.ensemble import run_ensemble
from phdrop.optim import TrainConfig
from phdrop.phd import PHDConfig
from phdrop.pipeline import ModelSettings, train_model
from phdrop.scene import SceneSpec, make_dataset

full = make_dataset(SceneSpec("spheres", seed=11), n_train=16, n_test=6, seed=11, resolution=(32, 32))
halves = full.subset(range(0, 8)), full.subset(range(8, 16))
models = [train_model("gs3d", d, TrainConfig(iterations=1500, seed=11), ModelSettings(n_splats=1024))[0]
          for d in halves]

# %%
report = run_ensemble(models[0], models[1], halves[0], halves[1], PHDConfig(seed=11))
picks = "".join(c["pick"] for c in report["choices"])
print(f"picks {picks}: E_ME = {report['eme']:.4f}")
print(f"SSIM a {report['ssim_a']:.4f}, b {report['ssim_b']:.4f}, selected {report['ssim_selected']:.4f}")
