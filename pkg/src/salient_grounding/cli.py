"""Command-line front end.

Every command reads the run configuration (profile, then ``--config``
file, then ``--set`` overrides) and works inside one output directory::

    OUT/dataset/        videos.dcf, queries.tsv, manifest.txt
    OUT/ckpt/           encoders.dcf, grounder.dcf, sidekick_losses.tsv
    OUT/selection.dcf   saliency/<qid>, selected/<qid>
    OUT/features.dcf    grounder inputs per query
    OUT/preds.tsv  OUT/report.txt  OUT/flops.csv  OUT/ablation.txt
    OUT/run.log         one line per event, appended by every command

Torch is imported lazily so that ``flops-report`` stays fast.
"""
from __future__ import annotations

import argparse
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

from . import __version__, evalbench
from .config import ConfigError, RunConfig, load

log = logging.getLogger("salient_grounding")

EXIT_INPUT = 2  # bad config, missing or corrupt files
EXIT_CHECK = 3  # a produced artifact failed validation


class CheckFailed(RuntimeError):
    pass


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _setup_logging(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s", "%Y-%m-%dT%H:%M:%S")
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    for h in (logging.StreamHandler(sys.stderr), logging.FileHandler(out / "run.log", encoding="utf-8")):
        h.setFormatter(fmt)
        root.addHandler(h)
    root.setLevel(logging.INFO)


def _config(args) -> RunConfig:
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if args.seed is not None:
        overrides.setdefault("seed", str(args.seed))
        overrides.setdefault("data.seed", str(args.seed))
    if args.jobs is not None:
        overrides["jobs"] = str(args.jobs)
    return load(args.config, args.profile, overrides)


class Run:
    """Paths and lazily loaded artifacts of one output directory."""

    def __init__(self, cfg: RunConfig, out: Path, data_dir: Path | None = None):
        self.cfg = cfg
        self.out = out
        self.data_dir = data_dir or out / "dataset"
        self.ckpt = out / "ckpt"

    def need(self, path: Path, made_by: str) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"{path} not found (run `{made_by}` first)")
        return path

    def dataset(self):
        from .synthdata import load_dataset

        self.need(self.data_dir / "videos.dcf", "gen-data")
        return load_dataset(self.data_dir, self.cfg)

    def suite(self):
        from .pipeline import build_suite, load_module

        return load_module(self.need(self.ckpt / "encoders.dcf", "train-sidekick"), build_suite(self.cfg))

    def features(self):
        from .pipeline import load_features

        return load_features(self.need(self.out / "features.dcf", "extract"), self.cfg.torch_dtype)

    def grounder(self):
        from .pipeline import build_grounder, load_module

        return load_module(self.need(self.ckpt / "grounder.dcf", "train-grounder"), build_grounder(self.cfg))


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run, args):
    import hashlib

    from .synthdata import generate, write_dataset

    ds = generate(run.cfg.data)
    paths = write_dataset(ds, run.data_dir)
    for name, p in paths.items():
        log.info("wrote %s sha256=%s", p, hashlib.sha256(p.read_bytes()).hexdigest())
    log.info("dataset: %d videos, %d train / %d val queries", len(ds.videos), len(ds.split("train")),
             len(ds.split("val")))


def cmd_train_sidekick(run: Run, args):
    from .pipeline import build_suite, pretrain_expert, save_module, train_sidekick

    ds = run.dataset()
    suite = build_suite(run.cfg)
    pretrain_expert(run.cfg, ds, suite)
    hist = train_sidekick(run.cfg, ds, suite)
    run.ckpt.mkdir(parents=True, exist_ok=True)
    save_module(run.ckpt / "encoders.dcf", suite)
    keys = ["step", "total", "saliency", "distill"]
    lines = ["\t".join(keys)] + ["\t".join(f"{r[k]:.6g}" for k in keys) for r in hist.rows]
    (run.ckpt / "sidekick_losses.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote %s", run.ckpt / "encoders.dcf")


def cmd_select(run: Run, args):
    import numpy as np

    from . import container
    from .pipeline import dense_features, query_features, select, selection_recall_of

    ratio = run.cfg.ratio if args.ratio is None else args.ratio
    ds = run.dataset()
    suite = run.suite()
    dense = dense_features(suite, ds, range(len(ds.videos)), run.cfg.torch_dtype)
    qfeat = query_features(suite, ds.queries)
    sel = select(ds, ds.queries, dense, qfeat, ratio, args.method, seed=run.cfg.seed)
    records = {"ratio": np.array([ratio], dtype=np.float32)}
    for q in ds.queries:
        records[f"saliency/{q.qid}"] = sel.scores[q.qid].numpy()
        records[f"selected/{q.qid}"] = np.asarray(sel.selected[q.qid], dtype=np.float32)
    container.write(run.out / "selection.dcf", records)
    for split in ("train", "val"):
        log.info("selection recall (%s, %s, c=%g): %.2f", args.method, split, ratio,
                 selection_recall_of(ds.split(split), sel))


def cmd_extract(run: Run, args):
    import torch

    from . import container
    from .pipeline import Selection, dense_features, extract, query_features, save_features, video_tensor

    ds = run.dataset()
    suite = run.suite()
    records = container.read(run.need(run.out / "selection.dcf", "select"))
    scores, chosen = {}, {}
    for q in ds.queries:
        try:
            scores[q.qid] = torch.as_tensor(records[f"saliency/{q.qid}"]).to(run.cfg.torch_dtype)
            chosen[q.qid] = [int(t) for t in records[f"selected/{q.qid}"].tolist()]
        except KeyError as exc:
            raise container.ContainerError(f"{run.out / 'selection.dcf'}: missing record {exc.args[0]!r}")
    dense = dense_features(suite, ds, range(len(ds.videos)), run.cfg.torch_dtype)
    qfeat = query_features(suite, ds.queries)
    # the expert only sees clips selected by at least one query of the video
    expert, encoded = {}, 0
    with torch.no_grad():
        for v in range(len(ds.videos)):
            clips = sorted({t for q in ds.queries if q.video == v for t in chosen[q.qid]})
            T, C = ds.videos[v].shape[0], run.cfg.encoder.d_model
            full = torch.zeros(T, C, dtype=run.cfg.torch_dtype)
            if clips:
                full[clips] = suite.expert(video_tensor(ds, v, run.cfg.torch_dtype)[clips])
            expert[v] = full
            encoded += len(clips)
    items = extract(ds, ds.queries, dense, expert, qfeat, Selection(scores, chosen))
    save_features(run.out / "features.dcf", items)
    total = sum(v.shape[0] for v in ds.videos)
    log.info("expert encoded %d of %d clips (%.1f%%); wrote %s", encoded, total, 100 * encoded / total,
             run.out / "features.dcf")


def _split_items(run: Run, items: dict, split: str) -> dict:
    ds_queries = run.dataset().queries
    want = {q.qid for q in ds_queries if split == "all" or q.split == split}
    return {k: v for k, v in items.items() if k in want}


def cmd_train_grounder(run: Run, args):
    from .pipeline import save_module, train_grounder

    items = _split_items(run, run.features(), "train")
    if not items:
        raise CheckFailed("no training queries in features.dcf")
    model, hist = train_grounder(run.cfg, list(items.values()))
    run.ckpt.mkdir(parents=True, exist_ok=True)
    save_module(run.ckpt / "grounder.dcf", model)
    log.info("wrote %s (final loss %.4f)", run.ckpt / "grounder.dcf", hist.rows[-1]["total"])


def cmd_infer(run: Run, args):
    from .pipeline import format_predictions, infer

    items = _split_items(run, run.features(), args.split)
    preds = infer(run.cfg, run.grounder(), items)
    (run.out / "preds.tsv").write_text(format_predictions(preds), encoding="utf-8")
    log.info("wrote %d predictions to %s", len(preds), run.out / "preds.tsv")


def cmd_eval(run: Run, args):
    from .pipeline import parse_predictions

    path = Path(args.preds) if args.preds else run.out / "preds.tsv"
    preds = parse_predictions(run.need(path, "infer").read_text(encoding="utf-8"), str(path))
    gts = {q.qid: q.span for q in run.dataset().queries}
    unknown = [q for q in preds if q not in gts]
    if unknown:
        raise CheckFailed(f"{path}: query {unknown[0]!r} is not in the dataset")
    qids = list(preds)
    rep = evalbench.evaluate([[p[:2] for p in preds[q]] for q in qids], [gts[q] for q in qids])
    text = f"{rep.table()}\n\n{rep.key_values()}\nversion={version_string()}\n"
    (run.out / "report.txt").write_text(text, encoding="utf-8")
    print(rep.table())
    bad = rep.check()
    if bad:
        raise CheckFailed("recall table violates ordering: " + "; ".join(bad))


def flops_rows(run: Run, ratios) -> list[list]:
    rows = []
    for name, fx in evalbench.PUBLISHED_COMPUTE.items():
        prof = evalbench.ComputeProfile(0.0, 0.0, fx["d_full"], fx["e_full"])
        for share_d, share_e, total, red in prof.rows(ratios):
            rows.append([name, share_d, share_e, f"{total:.1f}", f"{red:.1f}"])
        for c, printed in fx["rows"].items():
            got = prof.total(c)
            if abs(got - printed) > 0.1:
                raise CheckFailed(f"{name}: total at c={c} is {got:.2f}, expected {printed}")
    cfg = run.cfg
    T = (cfg.data.t_min + cfg.data.t_max) // 2
    prof = evalbench.compute_profile(cfg.encoder, cfg.data, T)
    for share_d, share_e, total, red in prof.rows(ratios):
        rows.append([f"{cfg.profile}-T{T}", share_d, share_e, f"{total:.0f}", f"{red:.1f}"])
    return rows


def cmd_flops_report(run: Run, args):
    ratios = [float(r) for r in args.ratios.split(",")]
    if args.d_full is not None or args.e_full is not None:
        if args.d_full is None or args.e_full is None:
            raise ConfigError("--d-full and --e-full go together")
        prof = evalbench.ComputeProfile(0.0, 0.0, args.d_full, args.e_full)
        rows = [["custom", d, e, f"{t:.1f}", f"{r:.1f}"] for d, e, t, r in prof.rows(ratios)]
    else:
        rows = flops_rows(run, ratios)
    head = ["source", "sidekick", "expert", "total", "reduction_pct"]
    csv = "\n".join(",".join(map(str, r)) for r in [head] + rows) + "\n"
    (run.out / "flops.csv").write_text(csv, encoding="utf-8")
    width = [max(len(str(r[i])) for r in [head] + rows) for i in range(len(head))]
    for r in [head] + rows:
        print("  ".join(str(v).rjust(w) for v, w in zip(r, width)))
    cfg = run.cfg
    log.info("per-clip FLOPs: sidekick %d, expert %d (FLOPs = 2 x MACs)",
             evalbench.sidekick_clip_flops(cfg.encoder, cfg.data), evalbench.expert_clip_flops(cfg.encoder, cfg.data))


def cmd_ablate(run: Run, args):
    from . import pipeline as P

    cfg = run.cfg
    ds = run.dataset() if (run.data_dir / "videos.dcf").exists() else None
    if args.preset == "tau-pool":
        text = tau_pool_table(cfg, ds)
    else:
        suite = run.suite() if (run.ckpt / "encoders.dcf").exists() else None
        prep = P.prepare(cfg, ds=ds, suite=suite)
        seeds = range(args.seeds)
        rows = P.run_ablation(cfg, prep, args.preset, seeds)
        text = P.ablation_table(rows)
        if args.preset in ("features", "qta-mtr"):
            full = rows[-1]
            worse = [r.name for r in rows[:-1] if r.avg > full.avg]
            text += f"\nfull model {'>=' if not worse else 'below'} every variant"
            text += "" if not worse else f" ({', '.join(worse)})"
    (run.out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)


def tau_pool_table(cfg: RunConfig, ds=None) -> str:
    """Sidekick FLOPs and selection recall across sampling stride and pooling factor."""
    import copy

    from . import pipeline as P
    from .synthdata import generate

    ds = generate(cfg.data) if ds is None else ds
    base = P.build_suite(cfg)
    P.pretrain_expert(cfg, ds, base)
    videos = range(len(ds.videos))
    expert = P.expert_features(base, ds, videos, cfg.torch_dtype)
    T = (cfg.data.t_min + cfg.data.t_max) // 2
    lines = [f"{'tau':>3s} {'pool':>4s} {'GFLOPs/video':>13s} {'sel-recall':>10s}"]
    for tau, pool in ((1, 1), (1, 4), (2, 4), (4, 4)):
        c = copy.deepcopy(cfg)
        c.encoder.tau, c.encoder.pool_factor = tau, pool
        c.validate()
        suite = P.build_suite(c)
        suite.expert.load_state_dict(base.expert.state_dict())
        suite.text.load_state_dict(base.text.state_dict())
        P.train_sidekick(c, ds, suite, expert=expert)
        dense = P.dense_features(suite, ds, videos, c.torch_dtype)
        qf = P.query_features(suite, ds.queries)
        val = ds.split("val")
        rec = P.selection_recall_of(val, P.select(ds, val, dense, qf, c.ratio))
        flops = evalbench.flops_encoder(c.encoder, c.data, T)
        lines.append(f"{tau:3d} {pool:4d} {flops / 1e9:13.4f} {rec:10.2f}")
    return "\n".join(lines)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-sidekick": cmd_train_sidekick,
    "select": cmd_select,
    "extract": cmd_extract,
    "train-grounder": cmd_train_grounder,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "flops-report": cmd_flops_report,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--profile", help="test, demo or paper-default (default: demo)")
    common.add_argument("--seed", type=int, help="run and data seed")
    common.add_argument("--jobs", type=int, help="torch threads")
    common.add_argument("--out", help="output directory (default: $SALIENT_GROUNDING_DATA_DIR or ./run)")
    common.add_argument("--data", help="dataset directory (default: OUT/dataset)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")

    parser = argparse.ArgumentParser(prog="salient-grounding", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "select":
            p.add_argument("--ratio", type=float, help="selection ratio c (default: config ratio)")
            p.add_argument("--method", default="saliency", choices=["saliency", "random", "uniform"])
        elif name == "infer":
            p.add_argument("--split", default="val", choices=["train", "val", "all"])
        elif name == "eval":
            p.add_argument("--preds", help="prediction dump (default: OUT/preds.tsv)")
        elif name == "flops-report":
            p.add_argument("--ratios", default="0.3,0.5", help="comma-separated selection ratios")
            p.add_argument("--d-full", type=float, help="sidekick cost of a full video")
            p.add_argument("--e-full", type=float, help="expert cost of a full video")
        elif name == "ablate":
            p.add_argument("--preset", required=True, choices=["features", "selection", "qta-mtr", "tau-pool"])
            p.add_argument("--seeds", type=int, default=3, help="grounder seeds per variant")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out or os.environ.get("SALIENT_GROUNDING_DATA_DIR") or "run")
    _setup_logging(out)
    t0 = time.time()
    try:
        cfg = _config(args)
        log.info("command %s profile=%s seed=%d version=%s", args.command, cfg.profile, cfg.seed, version_string())
        (out / "config.txt").write_text(cfg.dumps(), encoding="utf-8")
        COMMANDS[args.command](Run(cfg, out, Path(args.data) if args.data else None), args)
    except (CheckFailed, FloatingPointError) as exc:
        log.error("validation failed: %s", exc)
        return EXIT_CHECK
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        # ContainerError and DataError are ValueErrors carrying the file and record
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_INPUT
    log.info("command %s done in %.1fs", args.command, time.time() - t0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
