"""Gating weights and variance ratios: negative gamma damps a layer, positive gamma amplifies it.

Run: python3 demos/gamma_and_variance_analysis.py
"""
import numpy as np

from gctnet.analysis import analyze
from gctnet.network import build_network, miniresnet

rng = np.random.default_rng(0)
batch = rng.standard_normal((16, 3, 32, 32)).astype(np.float32)
net = build_network(miniresnet(placement="before_conv"), seed=0)

print("fresh network: every ratio is exactly 1")
for r in analyze(net, batch)[:3]:
    print(f"  {r.layer_name:28s} gamma {r.gamma_mean:+.2f} ({r.gamma_std:.2f})  "
          f"ratio {r.variance_ratio:.4f}")

# hand-set gammas: shallow layers positive, deeper layers negative
layers = net.gct_layers()
for i, layer in enumerate(layers):
    layer.params["gamma"][:] = np.linspace(0.6, -0.6, len(layers))[i] \
        + rng.normal(0, 0.05, layer.channels)

print("\nhand-set gammas, shallow to deep")
for r in analyze(net, batch):
    direction = "magnify" if r.variance_ratio > 1 else "reduce"
    print(f"  {r.layer_name:28s} gamma {r.gamma_mean:+.2f} ({r.gamma_std:.2f})  "
          f"ratio {r.variance_ratio:.4f}  -> {direction}")
