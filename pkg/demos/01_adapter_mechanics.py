"""Tour of the adapter mechanics: sharing, rotation, expansion, merging.

A low-rank update delta_w = (alpha/r) * B @ A is stored as four chunks:
unshared ranks kept whole, plus one broadcast chunk per factor whose copies
are circularly rotated. This script materializes the update for the three
variants and prints the block structure so the sharing patterns are visible.
"""

import numpy as np

from prolora import adapter
from prolora.adapter import AdapterConfig, clora_config, prolora_config, rolora_config
from prolora.matrix import SplitMix64

np.set_printoptions(precision=2, suppress=True, linewidth=120)

H, O, R, M, N = 8, 6, 4, 2, 2
rng = SplitMix64(7)
w0 = rng.uniform(-0.5, 0.5, size=(O, H))


def show(title, cfg):
    state = adapter.init(cfg, H, O, seed=1, w0=w0)
    # random B chunks so the update is visibly non-zero
    state.b_unshared = SplitMix64(2).uniform(-0.5, 0.5, size=state.b_unshared.shape)
    state.b_shared = SplitMix64(3).uniform(-0.5, 0.5, size=state.b_shared.shape)
    dw = adapter.delta_w(state)
    params = adapter.trainable_count(cfg, H, O)
    print(f"--- {title} (stored params: {params}, full factors would be {R * (H + O)})")
    print(dw)
    bh, bw = O // N, H // M
    top_left = dw[:bh, :bw]
    print("block grid equal to top-left block?")
    for i in range(N):
        row = []
        for j in range(M):
            blk = dw[i * bh:(i + 1) * bh, j * bw:(j + 1) * bw]
            row.append("same" if np.allclose(blk, top_left, atol=1e-12) else "diff")
        print("   ", row)
    print()


# pure broadcast: every block of the update is the same block
show("broadcast only", clora_config(R, M, N))

# rotation differentiates the copies; equal strides leave the diagonal equal
show("broadcast + rotation", rolora_config(R, M, N))

# one unshared rank breaks the remaining structure
show("partial sharing (u=1)", prolora_config(R, 1, M, N))

# the u=r corner is plain LoRA: expansion returns the stored factors as-is
full = adapter.init(AdapterConfig(r=R, u=R), H, O, seed=1, w0=w0)
print("u=r expansion returns the unshared factor unchanged:",
      np.array_equal(adapter.expand_a(full), full.a_unshared))

# merging folds the update into the base weight and back out, bit-tight
state = adapter.init(prolora_config(R, 1, M, N), H, O, seed=4, w0=w0)
state.b_shared = SplitMix64(5).uniform(-0.5, 0.5, size=state.b_shared.shape)
x = rng.normal((H, 5))
before = adapter.forward(state, x)
adapter.merge(state)
after = adapter.forward(state, x)
restored = adapter.unmerge(state)
print(f"merged vs unmerged forward, max diff: {np.max(np.abs(after - before)):.2e}")
print(f"merge -> unmerge base recovery, max diff: {np.max(np.abs(restored - w0)):.2e}")
