"""End-to-end stages shared by the CLI, the experiment scripts and the tests."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import container, evalbench, grounder as gr, saliency as sal
from .config import RunConfig
from .encoders import EncoderSuite
from .synthdata import Dataset, Query, positive_clips

log = logging.getLogger(__name__)


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def make_optimizer(params, kind: str, lr: float, weight_decay: float = 0.0):
    params = [p for p in params if p.requires_grad]
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr)
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def build_suite(cfg: RunConfig) -> EncoderSuite:
    seed_everything(cfg.seed + 101)
    return EncoderSuite(cfg.encoder, cfg.data).to(cfg.torch_dtype)


def build_grounder(cfg: RunConfig, seed: Optional[int] = None) -> gr.Grounder:
    seed_everything(cfg.grounder_train.seed if seed is None else seed)
    return gr.Grounder(cfg.grounder, cfg.encoder.d_model).to(cfg.torch_dtype)


def video_tensor(ds: Dataset, i: int, dtype) -> torch.Tensor:
    return torch.as_tensor(ds.videos[i]).to(dtype)


@torch.no_grad()
def expert_features(suite: EncoderSuite, ds: Dataset, videos: Sequence[int], dtype, chunk: int = 2048):
    """All-clip expert features per video (frozen expert, so safe to cache)."""
    out = {}
    for i in videos:
        v = video_tensor(ds, i, dtype)
        out[i] = torch.cat([suite.expert(v[s:s + chunk]) for s in range(0, v.shape[0], chunk)])
    return out


# ---------------------------------------------------------------- expert

def pretrain_expert(cfg: RunConfig, ds: Dataset, suite: EncoderSuite, steps: Optional[int] = None) -> History:
    """Align expert and text encoders with the saliency InfoNCE, then freeze the expert.

    Each step encodes the positive clips of a few training videos plus
    ``expert_clips`` random other clips per video.
    """
    sk = cfg.sidekick
    dtype = cfg.torch_dtype
    steps = sk.expert_steps if steps is None else steps
    train_videos = sorted({q.video for q in ds.split("train")})
    suite.expert.requires_grad_(True)
    opt = make_optimizer(list(suite.expert.parameters()) + list(suite.text.parameters()), sk.optimizer, sk.expert_lr)
    rng = np.random.default_rng(sk.seed + 7)
    hist = History()
    t0 = time.time()
    try:
        for step in range(steps):
            pick = sorted(rng.choice(train_videos, size=min(sk.batch_videos, len(train_videos)),
                                     replace=False).tolist())
            queries = [q for q in ds.queries if q.video in set(pick)]
            clips = {}
            for v in pick:
                T = ds.videos[v].shape[0]
                pos = {t for q in queries if q.video == v for t in positive_clips(q.span, T)}
                rest = sorted(set(range(T)) - pos)
                extra = rng.choice(rest, size=min(sk.expert_clips, len(rest)), replace=False).tolist()
                clips[v] = sorted(pos | set(extra))
            feats = {v: suite.expert(video_tensor(ds, v, dtype)[clips[v]]) for v in pick}
            positives, negatives = [], []
            for q in queries:
                T = ds.videos[q.video].shape[0]
                where = {t: k for k, t in enumerate(clips[q.video])}
                pos = [where[t] for t in positive_clips(q.span, T)]
                positives.append(pos)
                negatives.append(sorted(set(range(len(where))) - set(pos)))
            text_neg = [[j for j, o in enumerate(queries) if o.tokens != q.tokens] for q in queries]
            pairing = sal.ContrastivePairing(positives, negatives, text_neg)
            cls, _ = suite.text(torch.tensor([list(q.tokens) for q in queries]))
            opt.zero_grad()
            loss, stats = sal.saliency_loss([feats[q.video] for q in queries], cls, pairing, sk.temperature)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite expert loss {loss.item()}")
            loss.backward()
            opt.step()
            stats.update(total=loss.item(), step=step)
            hist.rows.append(stats)
            if step % 50 == 0 or step == steps - 1:
                log.info("expert step %d: saliency %.4f text %.4f video %.4f (%.1fs)", step, stats["total"], stats["text"], stats["video"], time.time() - t0)
    finally:
        suite.expert.requires_grad_(False)
    return hist


# ---------------------------------------------------------------- sidekick

def sidekick_batch(ds: Dataset, video_ids: Sequence[int], expert: dict, dtype) -> sal.SidekickBatch:
    by_video = {v: k for k, v in enumerate(video_ids)}
    queries = [q for q in ds.queries if q.video in by_video]
    positives, negatives, text_neg = [], [], []
    for q in queries:
        T = ds.videos[q.video].shape[0]
        pos = positive_clips(q.span, T)
        positives.append(pos)
        negatives.append(sorted(set(range(T)) - set(pos)))
    for q in queries:
        text_neg.append([j for j, o in enumerate(queries) if o.tokens != q.tokens])
    pairing = sal.ContrastivePairing(positives, negatives, text_neg)
    return sal.SidekickBatch(
        videos=[video_tensor(ds, v, dtype) for v in video_ids],
        expert=[expert[v] for v in video_ids],
        query_video=[by_video[q.video] for q in queries],
        query_ids=torch.tensor([list(q.tokens) for q in queries]),
        pairing=pairing,
    )


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def losses(self, key="total"):
        return [r[key] for r in self.rows]


def train_sidekick(cfg: RunConfig, ds: Dataset, suite: EncoderSuite, expert: Optional[dict] = None,
                   steps: Optional[int] = None, train_text: Optional[bool] = None) -> History:
    """Saliency + distillation training of the sidekick.

    The text encoder is trained too unless the expert was pre-trained with
    it, in which case it stays fixed so both video encoders share its space.
    """
    sk = cfg.sidekick
    dtype = cfg.torch_dtype
    train_videos = sorted({q.video for q in ds.split("train")})
    if expert is None:
        expert = expert_features(suite, ds, train_videos, dtype)
    if train_text is None:
        train_text = sk.expert_steps == 0
    params = list(suite.sidekick.parameters()) + (list(suite.text.parameters()) if train_text else [])
    opt = make_optimizer(params, sk.optimizer, sk.lr)
    rng = np.random.default_rng(sk.seed)
    hist = History()
    steps = sk.steps if steps is None else steps
    t0 = time.time()
    for step in range(steps):
        pick = rng.choice(train_videos, size=min(sk.batch_videos, len(train_videos)), replace=False)
        batch = sidekick_batch(ds, sorted(pick.tolist()), expert, dtype)
        stats = sal.sidekick_train_step(suite.sidekick, suite.text, batch, opt, sk.w_sal, sk.w_dist,
                                        sk.temperature)
        stats["step"] = step
        hist.rows.append(stats)
        if step % 50 == 0 or step == steps - 1:
            log.info("sidekick step %d: total %.4f saliency %.4f distill %.4f (%.1fs)", step,
                     stats["total"], stats["saliency"], stats["distill"], time.time() - t0)
    return hist


# ---------------------------------------------------------------- selection / extraction

@torch.no_grad()
def dense_features(suite: EncoderSuite, ds: Dataset, videos: Sequence[int], dtype) -> dict:
    return {i: suite.sidekick(video_tensor(ds, i, dtype)) for i in videos}


@torch.no_grad()
def query_features(suite: EncoderSuite, queries: Sequence[Query]) -> dict:
    out = {}
    for q in queries:
        cls, tokens = suite.text(torch.tensor([list(q.tokens)]))
        out[q.qid] = torch.cat([cls, tokens[0]])  # [N+1, C], CLS first
    return out


@dataclass
class Selection:
    scores: dict[str, torch.Tensor]
    selected: dict[str, list[int]]


def select(ds: Dataset, queries: Sequence[Query], dense: dict, qfeat: dict, ratio: float,
           method: str = "saliency", seed: int = 0) -> Selection:
    scores, chosen = {}, {}
    for n, q in enumerate(queries):
        F_D = dense[q.video]
        s = sal.compute_saliency(F_D, qfeat[q.qid][0])
        scores[q.qid] = s
        T = F_D.shape[0]
        if method == "saliency":
            chosen[q.qid] = sal.select_top_c(s, ratio, T)
        else:
            chosen[q.qid] = evalbench.baseline_select(T, ratio, method, seed=seed * 100003 + n)
    return Selection(scores, chosen)


def extract(ds: Dataset, queries: Sequence[Query], dense: dict, expert: dict, qfeat: dict,
            selection: Selection) -> dict[str, dict]:
    """Per-query grounder inputs: dense, zero-padded salient, saliency, query tokens, span."""
    items = {}
    for q in queries:
        F_D = dense[q.video]
        sel = selection.selected[q.qid]
        salient = expert[q.video][sel]
        items[q.qid] = {
            "dense": F_D,
            "salient": gr.pad_salient(salient, sel, F_D.shape[0]),
            "saliency": selection.scores[q.qid],
            "q_tokens": qfeat[q.qid],
            "span": q.span,
            "selected": sel,
        }
    return items


def selection_recall_of(queries: Sequence[Query], selection: Selection) -> float:
    return evalbench.selection_recall([selection.selected[q.qid] for q in queries], [q.span for q in queries])


# ---------------------------------------------------------------- grounder

def train_grounder(cfg: RunConfig, items: Sequence[dict], model: Optional[gr.Grounder] = None,
                   seed: Optional[int] = None) -> tuple[gr.Grounder, History]:
    gt = cfg.grounder_train
    model = model or build_grounder(cfg, seed)
    opt = make_optimizer(model.parameters(), gt.optimizer, gt.lr, gt.weight_decay)
    rng = np.random.default_rng(gt.seed if seed is None else seed)
    # bucket by padded length so batches stay compact
    hist = History()
    total_steps = max(1, gt.epochs * -(-len(items) // gt.batch))
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / max(1, total_steps // 20)) * 0.5 * (1 + np.cos(np.pi * min(s, total_steps) / total_steps)))
    t0 = time.time()
    for epoch in range(gt.epochs):
        order = rng.permutation(len(items))
        for s in range(0, len(order), gt.batch):
            batch = gr.collate([items[i] for i in order[s:s + gt.batch]], cfg.grounder.levels, cfg.torch_dtype)
            opt.zero_grad()
            loss, stats = gr.grounding_loss(model(batch), batch, cfg.grounder)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite grounder loss ({stats})")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 5.0)
            opt.step()
            sched.step()
            stats["epoch"] = epoch
            hist.rows.append(stats)
        log.info("grounder epoch %d: total %.4f (%.1fs)", epoch, hist.rows[-1]["total"], time.time() - t0)
    return model, hist


def infer(cfg: RunConfig, model: gr.Grounder, items: dict[str, dict], batch_size: int = 32
          ) -> dict[str, list[gr.MomentProposal]]:
    model.eval()
    qids = list(items)
    preds = {}
    for s in range(0, len(qids), batch_size):
        chunk = qids[s:s + batch_size]
        batch = gr.collate([items[q] for q in chunk], cfg.grounder.levels, cfg.torch_dtype)
        for qid, props in zip(chunk, gr.ground(model, batch)):
            preds[qid] = props
    model.train()
    return preds


def evaluate_predictions(preds: dict[str, list[gr.MomentProposal]], items: dict[str, dict]) -> evalbench.EvalReport:
    qids = list(items)
    return evalbench.evaluate([[(p.t_s, p.t_e) for p in preds.get(q, [])] for q in qids],
                              [items[q]["span"] for q in qids])


# ---------------------------------------------------------------- files

def format_predictions(preds: dict[str, list[gr.MomentProposal]]) -> str:
    lines = []
    for qid, props in preds.items():
        fields = [qid] + [f"{v:.6f}" for p in props for v in (p.t_s, p.t_e, p.score)]
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def parse_predictions(text: str, source: str = "<preds>") -> dict[str, list[tuple[float, float, float]]]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        vals = parts[1:]
        if len(vals) % 3:
            raise ValueError(f"{source}:{n}: expected query id then (t_s, t_e, score) triples")
        nums = [float(v) for v in vals]
        out[parts[0]] = [tuple(nums[i:i + 3]) for i in range(0, len(nums), 3)]
    return out


def save_module(path, module: torch.nn.Module, prefix: str = ""):
    container.write(path, {prefix + k: v.detach().cpu().float().numpy() for k, v in module.state_dict().items()})


def load_module(path, module: torch.nn.Module, prefix: str = ""):
    records = container.read(path)
    state = module.state_dict()
    missing = [k for k in state if prefix + k not in records]
    if missing:
        raise container.ContainerError(f"{path}: checkpoint lacks record {prefix + missing[0]!r}")
    module.load_state_dict({k: torch.as_tensor(records[prefix + k]).to(v.dtype).reshape(v.shape)
                            for k, v in state.items()})
    return module


def save_features(path, items: dict[str, dict], dense_by_video: Optional[dict] = None):
    records = {}
    for qid, it in items.items():
        records[f"dense/{qid}"] = it["dense"].detach().cpu().numpy()
        sel = it["selected"]
        records[f"salient/{qid}"] = it["salient"][sel].detach().cpu().numpy() if sel else np.zeros((0, it["dense"].shape[1]))
        records[f"selected/{qid}"] = np.asarray(sel, dtype=np.float32)
        records[f"saliency/{qid}"] = it["saliency"].detach().cpu().numpy()
        records[f"query/{qid}"] = it["q_tokens"].detach().cpu().numpy()
        records[f"span/{qid}"] = np.asarray(it["span"], dtype=np.float32)
    container.write(path, records)


def load_features(path, dtype=torch.float32) -> dict[str, dict]:
    records = container.read(path)
    items = {}
    for name in records:
        if not name.startswith("dense/"):
            continue
        qid = name.split("/", 1)[1]
        try:
            dense = torch.as_tensor(records[f"dense/{qid}"]).to(dtype)
            sel = [int(t) for t in records[f"selected/{qid}"].tolist()]
            salient = torch.as_tensor(records[f"salient/{qid}"]).to(dtype)
            items[qid] = {
                "dense": dense,
                "salient": gr.pad_salient(salient, sel, dense.shape[0]),
                "saliency": torch.as_tensor(records[f"saliency/{qid}"]).to(dtype),
                "q_tokens": torch.as_tensor(records[f"query/{qid}"]).to(dtype),
                "span": tuple(float(x) for x in records[f"span/{qid}"]),
                "selected": sel,
            }
        except KeyError as exc:
            raise container.ContainerError(f"{path}: query {qid} lacks record {exc.args[0]!r}") from exc
    return items


# ---------------------------------------------------------------- whole runs

@dataclass
class Prepared:
    """Trained encoders plus every per-video and per-query feature the grounder needs."""
    cfg: RunConfig
    ds: Dataset
    suite: EncoderSuite
    expert: dict
    dense: dict
    qfeat: dict

    def queries(self, split: str) -> list[Query]:
        return self.ds.split(split)

    def items(self, queries: Sequence[Query], ratio: Optional[float] = None, method: str = "saliency",
              seed: int = 0) -> dict[str, dict]:
        ratio = self.cfg.ratio if ratio is None else ratio
        sel = select(self.ds, queries, self.dense, self.qfeat, ratio, method, seed)
        return extract(self.ds, queries, self.dense, self.expert, self.qfeat, sel)


def prepare(cfg: RunConfig, ds: Optional[Dataset] = None, suite: Optional[EncoderSuite] = None,
            train: bool = True) -> Prepared:
    """Generate data (unless given), train the encoders (unless ``train`` is off) and cache features."""
    from .synthdata import generate

    torch.set_num_threads(max(1, cfg.jobs))
    ds = generate(cfg.data) if ds is None else ds
    if suite is None:
        suite = build_suite(cfg)
        if train:
            pretrain_expert(cfg, ds, suite)
            train_sidekick(cfg, ds, suite)
    videos = list(range(len(ds.videos)))
    return Prepared(cfg, ds, suite, expert_features(suite, ds, videos, cfg.torch_dtype),
                    dense_features(suite, ds, videos, cfg.torch_dtype), query_features(suite, ds.queries))


def fit_and_score(cfg: RunConfig, prep: Prepared, seed: Optional[int] = None, method: str = "saliency",
                  ratio: Optional[float] = None) -> tuple[gr.Grounder, evalbench.EvalReport]:
    """Train a grounder on the training split and evaluate it on the validation split."""
    train_items = list(prep.items(prep.queries("train"), ratio, method, seed or 0).values())
    val_items = prep.items(prep.queries("val"), ratio, method, (seed or 0) + 1)
    model, _ = train_grounder(cfg, train_items, seed=seed)
    return model, evaluate_predictions(infer(cfg, model, val_items), val_items)


def with_grounder(cfg: RunConfig, **flags) -> RunConfig:
    out = copy.deepcopy(cfg)
    for k, v in flags.items():
        if not hasattr(out.grounder, k):
            raise AttributeError(f"grounder config has no field {k!r}")
        setattr(out.grounder, k, v)
    return out


ABLATIONS = {
    "features": {
        "F_D": dict(use_salient=False, use_saliency=False),
        "F_S": dict(use_dense=False, use_saliency=False),
        "F_D+F_S": dict(use_saliency=False),
        "F_D+F_S+S": {},
    },
    "qta-mtr": {
        "neither": dict(use_qta=False, use_mtr=False),
        "QTA": dict(use_mtr=False),
        "MTR": dict(use_qta=False),
        "QTA+MTR": {},
    },
}


@dataclass
class AblationRow:
    name: str
    reports: list[evalbench.EvalReport]

    @property
    def avg(self) -> float:
        return float(np.mean([r.avg for r in self.reports]))

    def mean_recalls(self) -> dict:
        keys = self.reports[0].recalls
        return {k: float(np.mean([r.recalls[k] for r in self.reports])) for k in keys}


def run_ablation(cfg: RunConfig, prep: Prepared, preset: str, seeds: Sequence[int] = (0, 1, 2)
                 ) -> list[AblationRow]:
    """Grounder variants of a preset, each trained once per seed on the same encoders."""
    rows = []
    if preset in ABLATIONS:
        for name, flags in ABLATIONS[preset].items():
            c = with_grounder(cfg, **flags)
            reps = [fit_and_score(c, prep, seed=cfg.grounder_train.seed + 1000 * s)[1] for s in seeds]
            rows.append(AblationRow(name, reps))
            log.info("ablation %s/%s: AVG %.2f", preset, name, rows[-1].avg)
    elif preset == "selection":
        for method in ("random", "uniform", "saliency"):
            reps = [fit_and_score(cfg, prep, seed=cfg.grounder_train.seed + 1000 * s, method=method)[1]
                    for s in seeds]
            rows.append(AblationRow(method, reps))
            log.info("ablation selection/%s: AVG %.2f", method, rows[-1].avg)
    else:
        raise ValueError(f"unknown ablation preset {preset!r} (features, selection, qta-mtr, tau-pool)")
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    keys = list(rows[0].reports[0].recalls)
    head = f"{'variant':12s} " + " ".join(f"{f'R{k}@{t}':>7s}" for k, t in keys) + f" {'AVG':>7s}"
    lines = [head]
    for r in rows:
        rec = r.mean_recalls()
        lines.append(f"{r.name:12s} " + " ".join(f"{rec[k]:7.2f}" for k in keys) + f" {r.avg:7.2f}")
    return "\n".join(lines)
