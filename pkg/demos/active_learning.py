"""
Redundancy and uncertainty as the train set grows
=================================================

Train the same splat model on nested train sets of 4, 8 and 16 views.
More views should leave more of the model redundant (r_drop rises) and
make it more certain about held-out views (mean sigma_max falls), which
is the signal an active-learning loop would watch.
"""

# %%
from phdrop.optim import TrainConfig
from phdrop.phd import PHDConfig, run_phd
from phdrop.pipeline import ModelSettings, monotone_pattern, train_model, trend
from phdrop.scene import SceneSpec, make_dataset

full = make_dataset(SceneSpec("spheres", seed=7), n_train=16, n_test=4, seed=7, resolution=(32, 32))
views, r_drops, sigmas = [4, 8, 16], [], []
for n in views:
    data = full.subset(range(n))
    model, _ = train_model("gs3d", data, TrainConfig(iterations=1500, seed=7), ModelSettings(n_splats=1024))
    report, _ = run_phd(model, data, PHDConfig(seed=7))
    r_drops.append(report.r_drop)
    sigmas.append(report.sigma_max_mean)
    print(f"{n:3d} views: r_drop {report.r_drop:.2f}, mean sigma_max {report.sigma_max_mean:.4f}")

# %%
# Spearman of each series against the view count.
print(f"r_drop {monotone_pattern(r_drops)} (rho_R = {trend(views, r_drops)}), "
      f"sigma_max {monotone_pattern(sigmas)} (rho_U = {trend(views, sigmas)})")
