"""
Training a single biped to walk
===============================

The smoke preset trains one fixed biped to follow a 0.5 m/s command. Pass an
output directory and an iteration count; training resumes if the directory
already holds checkpoints. The committed run lives in artifacts/smoke.

    python demos/03_smoke_training.py runs/smoke 50
"""

import json
import os
import sys

from icloco.config import preset
from icloco.ppo import train

out_dir = sys.argv[1] if len(sys.argv) > 1 else "runs/smoke_demo"
iterations = int(sys.argv[2]) if len(sys.argv) > 2 else 20

run = preset("smoke")
run.ppo.iterations = iterations
train(run, out_dir, resume=True, log=lambda s: print(s, flush=True))

# tracking is exp(-(v - 0.5)^2 / 0.25): 0.37 for standing still, 1.0 for perfect tracking
rows = [json.loads(line) for line in open(os.path.join(out_dir, "metrics.jsonl"))]
last = rows[-10:]
print(f"mean tracking over the last {len(last)} iterations: {sum(r['tracking'] for r in last) / len(last):.3f}")
