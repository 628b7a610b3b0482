#!/usr/bin/env python3
"""Run the end-to-end smoke pipeline: clean, train tokenizer, pack, MLM,
contrastive training, and retrieval eval on the bundled mini corpus.

Usage:
    python3 scripts/smoke_pipeline.py --out /tmp/smoke --seed 0

Exits 0 and prints the artifact paths as JSON. Two runs with the same
seed produce byte-identical checkpoints and reports.
"""

import argparse
import json
import sys
from pathlib import Path

from medeir.smoke import run_smoke_pipeline


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True, help="work directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--mlm-steps", type=int, default=50)
    parser.add_argument("--contrastive-steps", type=int, default=200)
    args = parser.parse_args()
    paths = run_smoke_pipeline(Path(args.out), seed=args.seed,
                               mlm_steps=args.mlm_steps,
                               contrastive_steps=args.contrastive_steps)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
