"""Command-line entry point: ``seqnas <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path as FsPath

from . import agent as ag
from .blocks import BlockKind
from .data import Alphabet, load_manifests
from .experiment import (ResultsStore, TaskSource, load_config, prepare, pretrained_supernet, report, run_experiment,
                         run_grid)
from .predictor import (SPLIT_PRESETS, Predictor, PredictorConfig, dim_bounds_for, embed_task, encode_arch,
                        evaluate_predictor, predict_topk, train_predictor)
from .ranking import EvalProtocol, filter_records, zscore_rank
from .space import SpaceConfig, compose_space, load_space, save_space, space_stats, unpruned_size
from .supernet import Objective
from .tokenizers import KmerTokenizer, bpe_train, load_tokenizer, save_tokenizer


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x)


def cmd_space(a) -> int:
    if a.config:
        cfg = load_config(a.config).space
    else:
        targets = dict(zip(_ints(a.depths), _ints(a.targets))) if a.targets else None
        kw = {"targets": targets} if targets else {}
        cfg = SpaceConfig(depths=_ints(a.depths), widths=_ints(a.widths), h0=a.h0, tau_dist=a.tau,
                          seed=a.seed, modules=tuple(BlockKind(m) for m in a.modules.split(",")), **kw)
    paths = compose_space(cfg)
    stats = space_stats(paths, cfg.h0)
    stats["unpruned"] = unpruned_size(cfg)
    if a.out:
        save_space(paths, a.out)
    print(json.dumps(stats, indent=1))
    return 0


def cmd_tokenize(a) -> int:
    if a.action == "train":
        if a.kind == "bpe" and not a.corpus:
            raise SystemExit("tokenize train --kind bpe needs --corpus")
        lines = [ln.strip() for ln in FsPath(a.corpus).read_text().splitlines() if ln.strip()] if a.corpus else []
        alphabet = Alphabet(a.alphabet)
        tok = (bpe_train(lines, a.vocab_size, alphabet) if a.kind == "bpe"
               else KmerTokenizer(a.k, not a.non_overlapping, alphabet))
        save_tokenizer(tok, a.out)
        print(f"{tok.id}: {len(tok.vocab)} tokens -> {a.out}")
    else:
        tok = load_tokenizer(a.tokenizer)
        for s in a.sequences:
            print(" ".join(map(str, tok.encode(s))))
    return 0


def cmd_supernet(a) -> int:
    cfg = load_config(a.config, a.out_dir)
    ctx = prepare(cfg)
    pretrained_supernet(ctx, Objective(a.objective))
    print(f"supernet-{a.objective} ready under {cfg.out_dir}")
    return 0


def cmd_eval(a) -> int:
    cfg = load_config(a.config, a.out_dir)
    protocols = [a.protocol] if a.protocol else list(cfg.protocols)
    ctx = prepare(cfg)
    for proto in protocols:
        p = EvalProtocol(proto)
        net = pretrained_supernet(ctx, Objective(p.objective)) if p.objective else None
        n = run_grid(ctx, proto, net)
        print(f"{proto}: {n} new records, store has {len(ctx.store)}")
    return 0


def _tasks_of(store: ResultsStore):
    cfg_tasks = store.manifest["config"]["tasks"]
    return [TaskSource(**t).load()[0] for t in cfg_tasks]


def cmd_rank(a) -> int:
    store = ResultsStore(a.run_dir)
    tasks = _tasks_of(store)
    table = zscore_rank(filter_records(store.records(), a.protocol, a.tokenizer), tasks)
    for i, pid in enumerate(table.order[: a.top or None], 1):
        print(f"{i:4d}  {pid:10s}  {table.scores[pid]: .4f}")
    report(store, "leaderboard", FsPath(a.run_dir) / "reports", tasks)
    return 0


def cmd_report(a) -> int:
    store = ResultsStore(a.run_dir)
    for p in report(store, a.kind, FsPath(a.run_dir) / "reports", _tasks_of(store)):
        print(p)
    return 0


def _predictor_inputs(run_dir: str):
    store = ResultsStore(run_dir)
    tasks = _tasks_of(store)
    paths = load_space(FsPath(run_dir) / "space.json")
    cfg = store.manifest["config"]["space"]
    bounds = dim_bounds_for(cfg["widths"], cfg["h0"])
    encs = {p.path_id: encode_arch(p, bounds, cfg["h0"]) for p in paths}
    embs = {t.task_id: embed_task(t) for t in tasks}
    dirs = {t.task_id: t.direction for t in tasks}
    return store, tasks, paths, encs, embs, dirs


def _split(a, tasks) -> tuple[list[int], list[int]]:
    if a.train_tasks or a.test_tasks:
        return list(_ints(a.train_tasks)), list(_ints(a.test_tasks))
    train, test = SPLIT_PRESETS[a.setting]
    have = {t.task_id for t in tasks}
    return [t for t in train if t in have], [t for t in test if t in have]


def cmd_predict(a) -> int:
    store, tasks, paths, encs, embs, dirs = _predictor_inputs(a.run_dir)
    records = filter_records(store.records(), a.protocol)
    ck = FsPath(a.run_dir) / f"predictor-{a.setting}"
    train_ids, test_ids = _split(a, tasks)
    if a.action == "train":
        model = train_predictor(records, encs, embs, dirs, split=train_ids,
                                cfg=PredictorConfig(epochs=a.epochs, seed=a.seed))
        model.save(ck)
        print(f"trained on tasks {train_ids}; final loss {model.history[-1]:.4f} -> {ck}")
    elif a.action == "rank":
        model = Predictor.load(ck)
        task = next(t for t in tasks if t.task_id == a.task)
        for pid in predict_topk(model, paths, encs, embs[task.task_id], a.k):
            print(pid)
    else:
        model = Predictor.load(ck)
        rep = evaluate_predictor(model, records, paths, encs, embs, dirs, test_ids)
        print(json.dumps({"spearman": rep.spearman, "mean_spearman": rep.mean_spearman,
                          "metrics": rep.metrics}, indent=1))
    return 0


def cmd_agent(a) -> int:
    store = ResultsStore(a.run_dir)
    tasks = _tasks_of(store)
    kb = ag.KnowledgeBase.build(tasks, filter_records(store.records(), a.protocol),
                                load_space(FsPath(a.run_dir) / "space.json"))
    query = load_manifests(a.task)[0]
    n = min(a.n, len(kb.tasks))
    if a.backend == "http":
        client = ag.LlmClient.from_env(timeout=a.timeout)
    else:
        client = ag.LlmClient(transport="mock", mock=ag.load_mock(a.mock_file) if a.mock_file else None)
    if a.mode == "rag":
        names, trace = ag.rag_recommend(kb, query, client, n, a.k, a.m)
    else:
        names, trace = ag.run_agent_pipeline(kb, query, client, n, a.k, a.m)
    if a.trace:
        FsPath(a.trace).write_text(json.dumps(trace.to_json(), indent=1))
    for name in names:
        print(name)
    return 0


def cmd_run(a) -> int:
    cfg = load_config(a.config, a.out_dir)
    store = run_experiment(cfg)
    print(f"{len(store)} records in {store.records_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seqnas", description="Weight-sharing architecture search for sequences.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("space", help="compile the pruned path list")
    s.add_argument("--config")
    s.add_argument("--depths", default="3,4,5,6")
    s.add_argument("--widths", default="64,128,256,512")
    s.add_argument("--targets", default="60,100,100,100", help="k_d per depth, same order as --depths")
    s.add_argument("--modules", default=",".join(k.value for k in BlockKind))
    s.add_argument("--h0", type=int, default=64)
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_space)

    s = sub.add_parser("tokenize", help="train or apply a tokenizer")
    tsub = s.add_subparsers(dest="action", required=True)
    t = tsub.add_parser("train", help="build a k-mer tokenizer or learn BPE merges")
    t.add_argument("--kind", choices=["kmer", "bpe"], default="kmer")
    t.add_argument("--k", type=int, default=1)
    t.add_argument("--non-overlapping", action="store_true")
    t.add_argument("--vocab-size", type=int, default=64)
    t.add_argument("--alphabet", default="DNA")
    t.add_argument("--corpus", help="one sequence per line (required for bpe)")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_tokenize)
    t = tsub.add_parser("encode", help="print token ids for each sequence")
    t.add_argument("--tokenizer", required=True)
    t.add_argument("sequences", nargs="+")
    t.set_defaults(fn=cmd_tokenize)

    s = sub.add_parser("supernet", help="pretrain the supernet for one objective")
    s.add_argument("action", choices=["pretrain"])
    s.add_argument("--config", required=True)
    s.add_argument("--objective", choices=[o.value for o in Objective], default="mm")
    s.add_argument("--out-dir")
    s.set_defaults(fn=cmd_supernet)

    s = sub.add_parser("eval", help="fine-tune every path on every task")
    s.add_argument("--config", required=True)
    s.add_argument("--protocol", choices=[p.value for p in EvalProtocol if p is not EvalProtocol.FOUNDATION])
    s.add_argument("--out-dir")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("rank", help="z-score leaderboard for one protocol")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--protocol", default="only-ft")
    s.add_argument("--tokenizer")
    s.add_argument("--top", type=int, default=0)
    s.set_defaults(fn=cmd_rank)

    s = sub.add_parser("predict", help="train, apply or evaluate the performance predictor")
    s.add_argument("action", choices=["train", "rank", "eval"])
    s.add_argument("--run-dir", required=True)
    s.add_argument("--setting", choices=sorted(SPLIT_PRESETS), default="supervised")
    s.add_argument("--train-tasks", default="")
    s.add_argument("--test-tasks", default="")
    s.add_argument("--protocol", default="only-ft")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--task", type=int, default=0)
    s.add_argument("--k", type=int, default=3)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("agent", help="recommend architectures for a new task")
    s.add_argument("action", choices=["recommend"])
    s.add_argument("--run-dir", required=True)
    s.add_argument("--task", required=True, help="task manifest JSON")
    s.add_argument("--backend", choices=["mock", "http"], default="mock")
    s.add_argument("--mode", choices=["agent", "rag"], default="agent")
    s.add_argument("--mock-file")
    s.add_argument("--protocol", default="only-ft")
    s.add_argument("--n", type=int, default=3)
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--m", type=int, default=3)
    s.add_argument("--timeout", type=float, default=60.0)
    s.add_argument("--trace")
    s.set_defaults(fn=cmd_agent)

    s = sub.add_parser("report", help="write leaderboard, task-table or correlation files")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--kind", choices=["leaderboard", "task-table", "correlation"], default="leaderboard")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("run", help="run every stage of an experiment config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")
    s.set_defaults(fn=cmd_run)
    return ap


def main(argv: list[str] | None = None) -> int:
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return a.fn(a)


if __name__ == "__main__":
    sys.exit(main())
