"""Selection recall of the learned saliency against the baselines over a sweep of ratios.

    python3 scripts/selection_sweep.py --profile demo --ratios 0.1,0.2,0.3,0.5,0.7
"""
import argparse
import logging

from salient_grounding import evalbench, pipeline as pl
from salient_grounding.config import load


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="demo")
    ap.add_argument("--config")
    ap.add_argument("--ratios", default="0.1,0.2,0.3,0.5,0.7")
    ap.add_argument("--split", default="val", choices=["train", "val"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    cfg = load(args.config, args.profile)
    prep = pl.prepare(cfg)
    qs = prep.queries(args.split)
    lengths = [prep.ds.videos[q.video].shape[0] for q in qs]
    spans = [q.span for q in qs]
    print(f"{'ratio':>5s} {'learned':>8s} {'uniform':>8s} {'random':>8s} {'drawn':>8s}")
    for c in (float(r) for r in args.ratios.split(",")):
        learned = pl.selection_recall_of(qs, pl.select(prep.ds, qs, prep.dense, prep.qfeat, c))
        uniform = evalbench.selection_recall([evalbench.baseline_select(T, c, "uniform") for T in lengths], spans)
        drawn = evalbench.selection_recall(
            [evalbench.baseline_select(T, c, "random", seed=n) for n, T in enumerate(lengths)], spans)
        print(f"{c:5.2f} {learned:8.2f} {uniform:8.2f} {evalbench.expected_random_recall(lengths, c):8.2f} {drawn:8.2f}")


if __name__ == "__main__":
    main()
