"""Adapter container files: layout, round trips, and merging into raw weights.

Only the four stored chunks are written, so file size tracks the trainable
parameter count. The header is plain JSON; everything else is fixed-order
little-endian scalars.
"""

import json
import struct
import tempfile
from pathlib import Path

import numpy as np

from prolora import adapter, container
from prolora.adapter import prolora_config, trainable_count
from prolora.matrix import SplitMix64

workdir = Path(tempfile.mkdtemp(prefix="prolora-demo-"))
H, O = 16, 12
cfg = prolora_config(4, 1, 2, 2)

state = adapter.init(cfg, H, O, seed=11)
state.b_unshared = SplitMix64(12).uniform(-0.3, 0.3, size=state.b_unshared.shape)
state.b_shared = SplitMix64(13).uniform(-0.3, 0.3, size=state.b_shared.shape)
state.extra_header = {"producer": "demo-04"}

path = workdir / "adapter.prla"
written = container.save(state, path, dtype="f32")
params = trainable_count(cfg, H, O)

blob = path.read_bytes()
version, header_len = struct.unpack("<II", blob[4:12])
print(f"wrote {written} bytes to {path.name}")
print(f"   magic        : {blob[:4]!r}")
print(f"   version      : {version}")
print(f"   header bytes : {header_len}")
print(f"   payload bytes: {written - 12 - header_len} "
      f"(= 4 bytes x {params} stored params)")
print("   header JSON  :")
print("   " + json.dumps(json.loads(blob[12:12 + header_len]), indent=2)
      .replace("\n", "\n   "))
print()

back = container.load(path)
drift = max(float(np.max(np.abs(a - b))) if a.size else 0.0
            for a, b in zip(state.chunks().values(), back.chunks().values()))
print(f"f32 round trip max drift: {drift:.2e} (one float32 ulp at most)")

p64 = workdir / "adapter64.prla"
container.save(state, p64, dtype="f64")
again = container.load(p64)
exact = all(np.array_equal(a, b)
            for a, b in zip(state.chunks().values(), again.chunks().values()))
print(f"f64 round trip bit-exact: {exact}")
print()

# merging: fold the update into a raw weight blob and restore it
w0 = SplitMix64(20).uniform(-0.5, 0.5, size=(O, H))
merged = adapter.merge(back, w0)
restored = adapter.unmerge(back)
print(f"merge adds the update (max |delta|): {np.max(np.abs(merged - w0)):.3f}")
print(f"unmerge restores the base          : {np.max(np.abs(restored - w0)):.2e}")
print()

# tampering is rejected with a specific error
bad = workdir / "tampered.prla"
bad.write_bytes(b"XXXX" + blob[4:])
try:
    container.load(bad)
except container.ContainerFormatError as exc:
    print(f"tampered magic rejected: {exc}")
