"""Walk through the attention block's two gates on a toy feature map.

Run: python3 demos/attention_gating.py
"""

import numpy as np

from pavedet.cbam import (CbamBlock, cbam_forward, channel_attention,
                          spatial_attention)
from pavedet.tensor import Tensor

rng = np.random.default_rng(0)

# a tiny 4-channel feature map with one "hot" channel and one hot location
f = rng.normal(0, 0.3, size=(1, 4, 6, 6))
f[0, 2] += 2.0          # channel 2 carries most of the signal
f[0, :, 1, 4] += 3.0    # position (1,4) is the most active site

block = CbamBlock(channels=4, reduction=2, rng=rng, dtype=np.float64)

mc = channel_attention(Tensor(f), block.channel)
print("channel gate (one weight per channel, in (0,1)):")
print(np.round(mc.data.reshape(-1), 3))

ms = spatial_attention(Tensor(f), block.spatial)
print("\nspatial gate (one weight per position):")
print(np.round(ms.data[0, 0], 3))

out = cbam_forward(Tensor(f), block)
print("\ngated output keeps shape", out.shape)
print("energy before:", float((f ** 2).sum()).__round__(2),
      "after:", float((out.data ** 2).sum()).__round__(2),
      "(gates only attenuate)")

# with all parameters at zero every sigmoid is 0.5, so the block is an
# exact 0.25x scaling -- a handy sanity anchor
zero = CbamBlock(channels=4, reduction=2, dtype=np.float64)
scaled = cbam_forward(Tensor(f), zero)
print("\nzero-parameter block == 0.25 * input:",
      bool(np.allclose(scaled.data, 0.25 * f)))
