"""Run configuration, the append-only results store, orchestration and reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Any, Iterable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import Alphabet, LabeledDataset, TaskSpec, gen_motif_task, load_plain, repeat_corpus
from .evaluate import FinetuneConfig, finetune, foundation_flow
from .metrics import spearman_rho
from .optim import AdamWConfig
from .ranking import EvalProtocol, PerfRecord, RankTable, filter_records, zscore_rank
from .space import Path, SpaceConfig, compose_space, load_space, save_space, space_stats
from .supernet import (Objective, PretrainConfig, SslConfig, Supernet, encode_corpus, load_supernet,
                       pretrain, resume)
from .tokenizers import KmerTokenizer, bpe_train, load_tokenizer, save_tokenizer

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


# ------------------------------------------------------------------ config

@dataclass
class TokenizerSpec:
    kind: str = "kmer"
    k: int = 1
    overlapping: bool = True
    vocab_size: int = 64

    def __post_init__(self):
        if self.kind not in ("kmer", "bpe"):
            raise ValueError(f"tokenizer kind must be kmer or bpe, got {self.kind!r}")


@dataclass
class TaskSource:
    """Either a planted-motif generator (``kind='motif'``) or a plain labeled file."""
    task_id: int
    kind: str = "motif"
    description: str = ""
    n: int = 400
    length: int = 32
    motif: str = "TATAAT"
    noise: float = 0.0
    seed: int = 0
    path: str = ""
    modality: str = "DNA"
    problem: str = "binary"
    metric: str = "accuracy"
    direction: int = 1
    n_classes: int = 2

    def __post_init__(self):
        if self.kind not in ("motif", "file"):
            raise ValueError(f"task source kind must be motif or file, got {self.kind!r}")
        if self.kind == "file" and not FsPath(self.path).exists():
            raise FileNotFoundError(f"task {self.task_id}: data file {self.path} not found")

    def load(self) -> tuple[TaskSpec, LabeledDataset]:
        if self.kind == "motif":
            return gen_motif_task(self.seed, self.n, self.length, self.motif, self.noise,
                                  task_id=self.task_id, description=self.description or None)
        spec = TaskSpec(self.task_id, self.description or FsPath(self.path).stem, self.modality,
                        self.problem, self.metric, self.direction, self.n_classes)
        return spec, load_plain(self.path, spec.modality, seed=self.seed)


@dataclass
class CorpusSpec:
    """Pretraining corpus: task training sequences, a repeat pattern, or a plain file."""
    kind: str = "tasks"
    pattern: str = "AC"
    n: int = 200
    length: int = 32
    seed: int = 0
    path: str = ""

    def __post_init__(self):
        if self.kind not in ("tasks", "repeat", "file"):
            raise ValueError(f"corpus kind must be tasks, repeat or file, got {self.kind!r}")
        if self.kind == "file" and not FsPath(self.path).exists():
            raise FileNotFoundError(f"corpus file {self.path} not found")


@dataclass
class PretrainSpec:
    steps: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-5
    mask_rate: float = 0.15
    temperature: float = 0.1


@dataclass
class RunConfig:
    name: str = "run"
    seed: int = 0
    out_dir: str = "runs/run"
    space: SpaceConfig = field(default_factory=SpaceConfig)
    tokenizer: TokenizerSpec = field(default_factory=TokenizerSpec)
    protocols: tuple[str, ...] = ("only-ft",)
    foundation_objective: str = "mm"
    tasks: list[TaskSource] = field(default_factory=list)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    pretrain: PretrainSpec = field(default_factory=PretrainSpec)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    block: dict[str, Any] = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        self.protocols = tuple(EvalProtocol(p).value for p in self.protocols)
        Objective(self.foundation_objective)
        if not self.tasks:
            raise ValueError("config lists no tasks")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate task ids in config: {ids}")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["space"] = self.space.to_json()
        return d

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    @property
    def objectives(self) -> list[Objective]:
        return sorted({Objective(EvalProtocol(p).objective) for p in self.protocols
                       if EvalProtocol(p).objective}, key=lambda o: o.value)


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    space = dict(d.pop("space", {}))
    if "targets" in space:
        space["targets"] = {int(k): int(v) for k, v in space["targets"].items()}
    for key in ("depths", "widths", "modules"):
        if key in space:
            space[key] = tuple(space[key])
    return RunConfig(
        space=SpaceConfig(**space),
        tokenizer=TokenizerSpec(**d.pop("tokenizer", {})),
        tasks=[TaskSource(**t) for t in d.pop("tasks", [])],
        corpus=CorpusSpec(**d.pop("corpus", {})),
        pretrain=PretrainSpec(**d.pop("pretrain", {})),
        finetune=FinetuneConfig(**d.pop("finetune", {})),
        protocols=tuple(d.pop("protocols", ("only-ft",))),
        **d)


def load_config(path: str | FsPath, out_dir: str | None = None) -> RunConfig:
    with open(path, "rb") as fh:
        d = tomllib.load(fh)
    if out_dir is not None:
        d["out_dir"] = out_dir
    return config_from_dict(d)


# ------------------------------------------------------------------ store

def record_key(r: PerfRecord) -> str:
    return hashlib.sha256(json.dumps(list(r.key)).encode()).hexdigest()[:16]


class ResultsStore:
    """``records.jsonl`` (one sorted-key JSON object per line) plus ``manifest.json``.

    Records are only ever appended; the manifest carries the config hash and
    the wall-clock timestamps, so the records file is byte-stable across runs.
    """

    def __init__(self, run_dir: str | FsPath, config: RunConfig | None = None):
        self.dir = FsPath(run_dir)
        self.records_path = self.dir / "records.jsonl"
        self.manifest_path = self.dir / "manifest.json"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._entries: list[dict] = []
        if self.records_path.exists():
            for line in self.records_path.read_text().splitlines():
                if line.strip():
                    self._entries.append(json.loads(line))
        self._keys = {e["key"] for e in self._entries}
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
            if config is not None and self.manifest.get("config_hash") != config.config_hash:
                raise ValueError(f"{self.dir} holds results for config {self.manifest.get('config_hash', '?')[:12]}, "
                                 f"not {config.config_hash[:12]}")
        else:
            if config is None:
                raise FileNotFoundError(f"no results store at {self.dir}")
            self.manifest = {"config": config.to_json(), "config_hash": config.config_hash,
                             "created": time.time(), "stages": []}
            self._write_manifest()

    def _write_manifest(self):
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1, sort_keys=True))

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key: str):
        return key in self._keys

    def records(self) -> list[PerfRecord]:
        return [PerfRecord.from_json(e["record"]) for e in self._entries]

    def append(self, rec: PerfRecord, stage: str) -> bool:
        key = record_key(rec)
        if key in self._keys:
            return False
        entry = {"key": key, "record": dataclasses.asdict(rec), "stage": stage}
        with self.records_path.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        self._entries.append(entry)
        self._keys.add(key)
        return True

    def log_stage(self, stage: str, **info) -> None:
        self.manifest["stages"].append({"stage": stage, "time": time.time(), **info})
        self._write_manifest()


# ------------------------------------------------------------------ orchestration

def build_tokenizer(spec: TokenizerSpec, corpus: list, alphabet: Alphabet):
    if spec.kind == "kmer":
        return KmerTokenizer(spec.k, spec.overlapping, alphabet)
    return bpe_train(corpus, spec.vocab_size, alphabet)


def _corpus(cfg: RunConfig, datasets: list[tuple[TaskSpec, LabeledDataset]]) -> list:
    c = cfg.corpus
    if c.kind == "tasks":
        return [x for _, ds in datasets for x, _ in ds.subset("train")]
    if c.kind == "repeat":
        return repeat_corpus(c.pattern, c.n, c.length, c.seed)
    return [line.strip() for line in FsPath(c.path).read_text().splitlines() if line.strip()]


@dataclass
class RunContext:
    cfg: RunConfig
    store: ResultsStore
    paths: list[Path]
    datasets: list[tuple[TaskSpec, LabeledDataset]]
    tokenizer: Any
    corpus: list


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def prepare(cfg: RunConfig) -> RunContext:
    store = ResultsStore(cfg.out_dir, cfg)
    run = FsPath(cfg.out_dir)
    space_file = run / "space.json"
    if space_file.exists():
        paths = load_space(space_file)
    else:
        paths = _stage("space", compose_space, cfg.space)
        save_space(paths, space_file)
        store.log_stage("space", **space_stats(paths, cfg.space.h0))
    datasets = _stage("data", lambda: [t.load() for t in cfg.tasks])
    corpus = _corpus(cfg, datasets)
    alphabet = datasets[0][0].modality
    tok_file = run / "tokenizer.json"
    if tok_file.exists():
        tok = load_tokenizer(tok_file)
    else:
        tok = _stage("tokenize", build_tokenizer, cfg.tokenizer, corpus, alphabet)
        save_tokenizer(tok, tok_file)
    return RunContext(cfg, store, paths, datasets, tok, corpus)


def pretrain_config(cfg: RunConfig, objective: Objective) -> PretrainConfig:
    p = cfg.pretrain
    return PretrainConfig(steps=p.steps, batch_size=p.batch_size, seed=cfg.seed,
                          ssl=SslConfig(objective, mask_rate=p.mask_rate, temperature=p.temperature),
                          opt=AdamWConfig(lr=p.lr, weight_decay=p.weight_decay),
                          checkpoint_every=max(p.steps // 4, 1))


def checkpoint_path(cfg: RunConfig, objective: Objective) -> FsPath:
    return FsPath(cfg.out_dir) / f"supernet-{objective.value}"


def pretrained_supernet(ctx: RunContext, objective: Objective) -> Supernet:
    """Load the finished checkpoint, resume a partial one, or train from scratch."""
    cfg = ctx.cfg
    pcfg = pretrain_config(cfg, objective)
    ck = checkpoint_path(cfg, objective)
    ids = encode_corpus(ctx.tokenizer, ctx.corpus, cfg.finetune.max_len)
    if ck.with_suffix(".json").exists():
        net, state = resume(ck, ctx.paths, pcfg)
        if state.step >= pcfg.steps:
            return net
        state = _stage(f"pretrain:{objective.value}", pretrain, net, ctx.paths, ids, pcfg, state, ck)
    else:
        net = Supernet(ctx.paths, len(ctx.tokenizer.vocab), cfg.space.h0, seed=cfg.seed,
                       max_len=cfg.finetune.max_len, block_kwargs=cfg.block)
        state = _stage(f"pretrain:{objective.value}", pretrain, net, ctx.paths, ids, pcfg, None, ck)
    ctx.store.log_stage(f"pretrain:{objective.value}", steps=state.step,
                        first_loss=state.losses[0], last_loss=state.losses[-1])
    return net


_WORKER: dict = {}


def _worker_init(cfg_json: dict, ck: str | None):
    cfg = config_from_dict(cfg_json)
    paths = load_space(FsPath(cfg.out_dir) / "space.json")
    _WORKER.update(cfg=cfg, paths={p.path_id: p for p in paths},
                   data={s.task_id: (s, ds) for s, ds in (t.load() for t in cfg.tasks)},
                   tok=load_tokenizer(FsPath(cfg.out_dir) / "tokenizer.json"),
                   net=load_supernet(ck, paths)[0] if ck else None)


def _worker_job(job: tuple[str, int, str]) -> PerfRecord:
    pid, tid, proto = job
    w = _WORKER
    spec, ds = w["data"][tid]
    return finetune(w["paths"][pid], proto, spec, ds, w["tok"], w["cfg"].finetune, checkpoint=w["net"],
                    seed=w["cfg"].seed, h0=w["cfg"].space.h0, block_kwargs=w["cfg"].block)


def run_grid(ctx: RunContext, protocol: str, net: Supernet | None) -> int:
    """Fine-tune every (path, task) pair for one protocol; returns the number of new records."""
    cfg, store = ctx.cfg, ctx.store
    jobs = []
    for p in ctx.paths:
        for spec, _ in ctx.datasets:
            probe = PerfRecord(p.path_id, spec.task_id, protocol, ctx.tokenizer.id, 0.0, cfg.seed)
            if record_key(probe) not in store:
                jobs.append((p.path_id, spec.task_id, protocol))
    if not jobs:
        return 0
    stage = f"finetune:{protocol}"
    if cfg.workers > 1:
        ck = str(checkpoint_path(cfg, Objective(EvalProtocol(protocol).objective))) if net is not None else None
        with ProcessPoolExecutor(cfg.workers, initializer=_worker_init,
                                 initargs=(cfg.to_json(), ck)) as ex:
            for rec in _stage(stage, lambda: list(ex.map(_worker_job, jobs))):
                store.append(rec, stage)
    else:
        by_id = {p.path_id: p for p in ctx.paths}
        data = {s.task_id: (s, ds) for s, ds in ctx.datasets}
        for pid, tid, proto in jobs:
            spec, ds = data[tid]
            rec = _stage(stage, finetune, by_id[pid], proto, spec, ds, ctx.tokenizer, cfg.finetune,
                         checkpoint=net, seed=cfg.seed, h0=cfg.space.h0, block_kwargs=cfg.block)
            store.append(rec, stage)
    store.log_stage(stage, new_records=len(jobs))
    return len(jobs)


def run_experiment(cfg: RunConfig, stages: Iterable[str] = ("pretrain", "finetune", "rank", "report")) -> ResultsStore:
    """space -> tokenizer -> pretrain per objective -> fine-tune grid -> rank -> reports; resumable."""
    stages = set(stages)
    ctx = prepare(cfg)
    nets: dict[Objective, Supernet] = {}
    if "pretrain" in stages or "finetune" in stages:
        for obj in cfg.objectives:
            nets[obj] = pretrained_supernet(ctx, obj)
    if "finetune" in stages:
        for proto in cfg.protocols:
            p = EvalProtocol(proto)
            if p is EvalProtocol.FOUNDATION:
                continue
            run_grid(ctx, proto, nets.get(Objective(p.objective)) if p.objective else None)
        if EvalProtocol.FOUNDATION.value in cfg.protocols:
            run_foundation(ctx)
    if "report" in stages and len(ctx.store):
        for kind in ("leaderboard", "task-table", "correlation"):
            report(ctx.store, kind, FsPath(cfg.out_dir) / "reports", [s for s, _ in ctx.datasets])
    return ctx.store


def run_foundation(ctx: RunContext) -> int:
    cfg, store = ctx.cfg, ctx.store
    base = next((p for p in cfg.protocols if p != EvalProtocol.FOUNDATION.value), None)
    if base is None:
        raise StageError("foundation", ValueError("foundation flow needs another protocol to rank paths"))
    tasks = [s for s, _ in ctx.datasets]
    top = zscore_rank(filter_records(store.records(), base, ctx.tokenizer.id), tasks).order[0]
    by_id = {p.path_id: p for p in ctx.paths}
    done = [r for r in store.records() if r.protocol == EvalProtocol.FOUNDATION.value]
    if len(done) == len(tasks):
        return 0
    pcfg = pretrain_config(cfg, Objective(cfg.foundation_objective))
    recs = _stage("foundation", foundation_flow, by_id[top], ctx.corpus, ctx.tokenizer, pcfg,
                  ctx.datasets, cfg.finetune, seed=cfg.seed, h0=cfg.space.h0, block_kwargs=cfg.block)
    n = sum(store.append(r, "foundation") for r in recs)
    store.log_stage("foundation", top_path=top, new_records=n)
    return n


# ------------------------------------------------------------------ reports

def _fmt(x: float) -> str:
    return repr(float(x))


def rank_tables(records: list[PerfRecord], tasks: list[TaskSpec]) -> dict[tuple[str, str], RankTable]:
    """One RankTable per (protocol, tokenizer) group that has at least two architectures."""
    groups = sorted({(r.protocol, r.tokenizer_id) for r in records})
    out = {}
    task_ids = {r.task_id for r in records}
    use = [t for t in tasks if t.task_id in task_ids]
    for proto, tok in groups:
        recs = filter_records(records, proto, tok)
        if len({r.path_id for r in recs}) >= 2:
            out[(proto, tok)] = zscore_rank(recs, use)
    return out


def _write_csv(path: FsPath, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _write_md(path: FsPath, header: list[str], rows: list[list]) -> None:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    path.write_text("\n".join(lines) + "\n")


def report(store: ResultsStore, kind: str, out_dir: str | FsPath, tasks: list[TaskSpec] | None = None) -> list[FsPath]:
    records = store.records()
    if not records:
        raise ValueError("results store is empty")
    if tasks is None:
        tasks = [TaskSpec.from_json(t) for t in _manifest_tasks(store)]
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    tables = rank_tables(records, tasks)
    if kind == "leaderboard":
        for (proto, tok), tab in tables.items():
            rows = [[i + 1, pid, _fmt(tab.scores[pid])] for i, pid in enumerate(tab.order)]
            stem = out / f"leaderboard-{proto}-{tok}"
            _write_csv(stem.with_suffix(".csv"), ["rank", "path_id", "score"], rows)
            _write_md(stem.with_suffix(".md"), ["rank", "path_id", "score"],
                      [[r[0], r[1], f"{float(r[2]):.4f}"] for r in rows])
            written += [stem.with_suffix(".csv"), stem.with_suffix(".md")]
    elif kind == "task-table":
        for proto, tok in sorted({(r.protocol, r.tokenizer_id) for r in records}):
            recs = filter_records(records, proto, tok)
            tids = sorted({r.task_id for r in recs})
            val = {(r.path_id, r.task_id): r.metric_value for r in recs}
            rows = [[pid] + [_fmt(val[(pid, t)]) if (pid, t) in val else "" for t in tids]
                    for pid in sorted({r.path_id for r in recs})]
            p = out / f"task-table-{proto}-{tok}.csv"
            _write_csv(p, ["path_id"] + [f"task_{t}" for t in tids], rows)
            written.append(p)
    elif kind == "correlation":
        keys = sorted(tables)
        rows = []
        for i, a in enumerate(keys):
            for b in keys[i + 1:]:
                common = set(tables[a].scores) & set(tables[b].scores)
                if len(common) >= 2:
                    rho = spearman_rho({k: tables[a].scores[k] for k in common},
                                       {k: tables[b].scores[k] for k in common})
                    rows.append([f"{a[0]}/{a[1]}", f"{b[0]}/{b[1]}", len(common), _fmt(rho)])
        p = out / "correlation.csv"
        _write_csv(p, ["ranking_a", "ranking_b", "n", "spearman"], rows)
        written.append(p)
    else:
        raise ValueError(f"unknown report kind {kind!r}")
    return written


def _manifest_tasks(store: ResultsStore) -> list[dict]:
    cfg = config_from_dict(store.manifest["config"])
    return [s.to_json() for s, _ in (t.load() for t in cfg.tasks)]


def correlation_between(store_a: ResultsStore, store_b: ResultsStore, protocol: str,
                        tasks: list[TaskSpec]) -> float:
    ta = zscore_rank(filter_records(store_a.records(), protocol), tasks)
    tb = zscore_rank(filter_records(store_b.records(), protocol), tasks)
    return spearman_rho(ta.scores, tb.scores)


def read_csv(path: str | FsPath) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
