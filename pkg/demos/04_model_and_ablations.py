"""
The dual-branch network and its ablations
=========================================

Builds the full model next to the three reduced variants used for the
ablation comparison and checks the asymmetric-convolution fusion that
lets each ACB run as a single kernel.
"""

# %%
import numpy as np

from dfdnet.autodiff import Tensor, conv2d
from dfdnet.net import ABLATIONS, ACB, DerainNet, ModelConfig, acb_forward, fuse_acb_kernel, parameter_count

image = Tensor(np.random.default_rng(1).random((1, 3, 32, 32)))

for ablation in ABLATIONS:
    cfg = ModelConfig(ablation=ablation)
    model = DerainNet(cfg, seed=0)
    detail, structure, prediction = model(image)
    print(f"{ablation:6s} params {parameter_count(cfg):7d}  output {prediction.shape}")

# %%
# an ACB is a kxk, a 1xk and a kx1 convolution summed; padding the thin
# kernels into the kxk frame gives one equivalent kernel
acb = ACB(np.random.default_rng(2), 3, 8, 3)
x = Tensor(np.random.default_rng(3).standard_normal((1, 3, 10, 10)))
branches = acb_forward(x, acb).data
fused = conv2d(x, fuse_acb_kernel(acb.square, acb.hor, acb.ver), acb.bias, padding="same").data
print("ACB fusion max difference", float(np.abs(branches - fused).max()))

# %%
# intermediate branch features, one (detail, structure) pair per stage
features = []
DerainNet(ModelConfig(stages=2, width=8))(image, features=features)
for t, (z_d, z_s) in enumerate(features, 1):
    print(f"stage {t}: detail mean {z_d.data.mean():.3f}, structure mean {z_s.data.mean():.3f}")
