"""Look inside a trained model: mix-weight sweep, attention and a 2-D map."""

import tempfile

import numpy as np

from gea.exports import export_heatmap, omega_sweep, project_2d
from gea.fixture import make_fixture
from gea.trainer import Trainer, TrainConfig

root = tempfile.mkdtemp(prefix="gea-inspect-")
m = make_fixture(root, num_identities=8, texts_per_identity=3, dim=64)
cfg = TrainConfig(epochs=10, batch_size=16, heads=4, fusion_layers=1, lr_backbone=1e-3,
                  warmup_epochs=1, warmup_start_lr=1e-5, lr_decay="constant")
trainer = Trainer(m["train"], cfg, m["val"])
trainer.fit()
model = trainer.state.model

print("omega   R-1    mAP")
for omega, r1, _, _, mAP in omega_sweep(m["test"], model, [0.0, 0.3, 0.6, 1.0]):
    print(f"{omega:4.1f} {r1:6.2f} {100 * mAP:6.2f}")

sid = m["test"].records[0].sample_id
weights = export_heatmap(m["test"], model, sid, branch="text")
print(f"text-to-generated attention for {sid} (rows sum to 1):")
print(np.round(weights, 3))

rows = project_2d(m["test"], model)
for modality in ("image", "text", "fused"):
    xy = np.array([(x, y) for _, mod, _, x, y in rows if mod == modality])
    print(f"{modality:<6} centroid ({xy[:, 0].mean():+.2f}, {xy[:, 1].mean():+.2f})")
