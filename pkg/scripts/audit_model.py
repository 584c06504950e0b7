"""Audit a registry model: per-layer SOP counts, energy estimate, equivalence check.

Runs one batch of random images through the model, prints the per-layer table
and the 0.9 pJ/SOP energy estimate, then replays every synaptic layer in
event-driven form and compares against the dense forward.
"""

import argparse

import numpy as np

from dualspike.audit import audit_model, verify_spike_driven
from dualspike.config import REGISTRY
from dualspike.model import build


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--arch", default="Nano", choices=sorted(REGISTRY))
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skip-equivalence", action="store_true")
    args = ap.parse_args()

    cfg = REGISTRY[args.arch]
    model = build(args.arch, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    images = rng.standard_normal(
        (args.batch, cfg.in_channels, cfg.input_height, cfg.input_width)
    ).astype(np.float32)

    report = audit_model(model, images)
    print(report.to_table())

    if not args.skip_equivalence:
        equiv = verify_spike_driven(model, images[:1], tolerance=1e-6)
        worst = max(r["max_deviation"] for r in equiv.rows)
        status = "passed" if equiv.passed else "FAILED"
        print(f"event-driven equivalence {status} on {len(equiv.rows)} layers "
              f"(worst deviation {worst:.2e})")
        return 0 if equiv.passed else 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
