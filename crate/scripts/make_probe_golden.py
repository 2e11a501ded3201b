#!/usr/bin/env python3
"""Golden probabilities for the fixture probe, computed independently in float64.

Reads assets/fixtures/tiny-gpt2/probe/{probe.json, probe.weights.bin} and writes
probe_golden.json with seeded random inputs and sigmoid(w . x + b) for each.
"""
import hashlib
import json
import math
import pathlib
import random
import struct

root = pathlib.Path(__file__).resolve().parent.parent / "assets/fixtures/tiny-gpt2/probe"
manifest = json.loads((root / "probe.json").read_text())
raw = (root / manifest["weights_file"]).read_bytes()
assert hashlib.sha256(raw).hexdigest() == manifest["weights_sha256"]
dim = manifest["dim"]
weights = struct.unpack(f"<{dim}d", raw)
bias = manifest["bias"]

rng = random.Random(20240611)
cases = []
for i in range(16):
    scale = [0.1, 1.0, 10.0, 100.0][i % 4]
    x = [rng.gauss(0.0, scale) for _ in range(dim)]
    z = math.fsum(w * v for w, v in zip(weights, x)) + bias
    p = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    cases.append({"input": x, "logit": z, "probability": p})

(root / "probe_golden.json").write_text(json.dumps({"dim": dim, "cases": cases}, indent=1) + "\n")
print(f"wrote {len(cases)} cases")
