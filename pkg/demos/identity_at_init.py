"""A freshly initialized GCT layer is the identity, and so is a GCT-augmented network.

Run: python3 demos/identity_at_init.py
"""
import numpy as np

from gctnet.gct import GctParams, gct_forward
from gctnet.network import build_network, smallcnn

rng = np.random.default_rng(0)

# alpha = 1, gamma = beta = 0 gives gate = 1 + tanh(0) = 1 for every channel
x = rng.standard_normal((4, 16, 8, 8)).astype(np.float32)
out, cache = gct_forward(x, GctParams.init(16))
print("gate values at init:", np.unique(cache.gate))
print("output == input, bit for bit:", np.array_equal(out, x))

# Same seed, with and without GCT before every conv. GCT layers consume no
# random draws, so every other weight matches and the logits agree exactly.
images = rng.standard_normal((8, 3, 32, 32)).astype(np.float32)
base = build_network(smallcnn(), seed=1)
gct = build_network(smallcnn(placement="before_conv"), seed=1)
print(f"{len(gct.gct_layers())} GCT layers inserted:", [g.name for g in gct.gct_layers()])
print("logits identical:", np.array_equal(base.forward(images), gct.forward(images)))

# once gamma moves away from zero the layers start to act
for layer in gct.gct_layers():
    layer.params["gamma"][:] = 0.5
diff = np.abs(base.forward(images) - gct.forward(images)).max()
print(f"after setting gamma = 0.5, max logit difference {diff:.4f}")
