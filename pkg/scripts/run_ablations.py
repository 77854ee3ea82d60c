"""Grounder ablations on shared encoders, averaged over seeds.

    python3 scripts/run_ablations.py --presets features,qta-mtr --seeds 3
"""
import argparse
import logging
from pathlib import Path

from salient_grounding import pipeline as pl
from salient_grounding.config import load


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="demo")
    ap.add_argument("--config")
    ap.add_argument("--presets", default="features,qta-mtr,selection")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = load(args.config, args.profile)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    prep = pl.prepare(cfg)
    for preset in args.presets.split(","):
        rows = pl.run_ablation(cfg, prep, preset, range(args.seeds))
        text = pl.ablation_table(rows)
        print(f"\n[{preset}]\n{text}")
        (out / f"{preset}.txt").write_text(text + "\n")


if __name__ == "__main__":
    main()
