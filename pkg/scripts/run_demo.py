"""Train the encoders and one grounder on a profile, then print selection and grounding results.

    python3 scripts/run_demo.py --profile demo --out runs/demo
"""
import argparse
import logging
import time
from pathlib import Path

from salient_grounding import evalbench, pipeline as pl
from salient_grounding.config import load


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="demo")
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--ratios", default="0.3,0.5")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = load(args.config, args.profile)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.time()
    prep = pl.prepare(cfg)
    print(f"encoders trained in {time.time() - t0:.0f}s")

    qs = prep.queries("val")
    lengths = [prep.ds.videos[q.video].shape[0] for q in qs]
    lines = ["ratio  learned  uniform  random(expected)"]
    for c in (float(r) for r in args.ratios.split(",")):
        learned = pl.selection_recall_of(qs, pl.select(prep.ds, qs, prep.dense, prep.qfeat, c))
        uniform = evalbench.selection_recall([evalbench.baseline_select(T, c, "uniform") for T in lengths],
                                             [q.span for q in qs])
        lines.append(f"{c:5.2f}  {learned:7.2f}  {uniform:7.2f}  {evalbench.expected_random_recall(lengths, c):7.2f}")
    print("\n".join(lines))

    t0 = time.time()
    _, rep = pl.fit_and_score(cfg, prep)
    print(f"grounder trained in {time.time() - t0:.0f}s")
    print(rep.table())
    (out / "demo.txt").write_text("\n".join(lines) + "\n\n" + rep.table() + "\n\n" + rep.key_values() + "\n")


if __name__ == "__main__":
    main()
