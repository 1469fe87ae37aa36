"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line with its runtime.

The lines are also gathered into an ``acceptance criteria`` section of the
pytest terminal summary (see ``conftest.py``).
"""
import importlib.util
import itertools
import math
from pathlib import Path as FsPath
from types import SimpleNamespace

import numpy as np
import pytest

from seqnas import agent as ag
from seqnas import autodiff as ad
from seqnas.autodiff import Tensor, gradcheck
from seqnas.blocks import BlockKind, BlockSpec, build_block
from seqnas.data import Alphabet, TaskSpec, repeat_corpus
from seqnas.experiment import load_config, run_experiment
from seqnas.metrics import spearman
from seqnas.predictor import (PredictorConfig, embed_text, encode_arch, prediction_metrics, train_predictor)
from seqnas.ranking import PerfRecord, zscore_rank
from seqnas.space import Path, SpaceConfig, compose_space
from seqnas.supernet import (BlockKey, Objective, PretrainConfig, SslConfig, Supernet, encode_corpus, mm_loss,
                             ntp_loss, nt_xent, pretrain)
from seqnas.tokenizers import UNK, KmerTokenizer, bpe_train

ROOT = FsPath(__file__).resolve().parent.parent
CNN, HY, TR, LSTM, MB = (BlockKind.CNN, BlockKind.HYENA, BlockKind.TRANSFORMER, BlockKind.LSTM,
                         BlockKind.MAMBA)
TOL = 1e-3


# 1. encoding fixture

def test_c01_encoding_fixture(criterion):
    with criterion(1, "worked-example encoding", limit=1) as c:
        enc = encode_arch(Path("w", (CNN, TR, LSTM), (128, 256, 512)), (64, 512))
        adj_ok = np.array_equal(enc.adjacency, [[0, 1, 0], [0, 0, 1], [0, 0, 0]])
        out_dims = enc.features[:, -1]
        c.check(adj_ok, f"super-diagonal adjacency {'exact' if adj_ok else 'WRONG'}")
        c.check(np.allclose(out_dims, [0.14, 0.43, 1.00], atol=0.01),
                f"dim features {np.round(out_dims, 3).tolist()} vs [0.14, 0.43, 1.0]")


# 2. gradient suite

def _p(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    return Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)


def _op_cases(rng):
    """(name, loss closure, params) for every differentiable op."""
    a, b, pos = _p(rng, 3, 4), _p(rng, 3, 4), _p(rng, 3, 4, positive=True)
    sq1, sq2 = _p(rng, 3, 3), _p(rng, 3, 3)
    relu_in = _p(rng, 3, 4)
    relu_in.data[np.abs(relu_in.data) < 1e-2] = 0.3
    x3, g, bb = _p(rng, 2, 5, 4), _p(rng, 4), _p(rng, 4)
    w3 = rng.normal(size=(2, 5, 4))
    table, proj = _p(rng, 7, 4), _p(rng, 4, 7)
    ids = np.array([[1, 2, 2, 0], [3, 6, 5, 0]])
    tgt = np.array([[2, 3, 1, 0], [0, 4, 2, 0]])
    cx, cw, cb, h = _p(rng, 2, 6, 3), _p(rng, 3, 3, 2), _p(rng, 2), _p(rng, 4, 3)
    ar, d = _p(rng, 2, 6, 3), _p(rng, 2, 6, 3)
    drop_seed = 7

    def weighted(fn, *args):
        w = rng.normal(size=fn(*[Tensor(t.data) for t in args]).shape)
        return lambda: (fn(*args) * w).sum()

    rm, rv = np.zeros(4), np.ones(4)
    return [
        ("add", weighted(ad.add, a, b), [a, b]), ("sub", weighted(ad.sub, a, b), [a, b]),
        ("mul", weighted(ad.mul, a, b), [a, b]), ("div", weighted(ad.div, a, pos), [a, pos]),
        ("power", weighted(lambda t: ad.power(t, 3.0), a), [a]),
        ("exp", weighted(ad.exp, a), [a]), ("log", weighted(ad.log, pos), [pos]),
        ("sqrt", weighted(ad.sqrt, pos), [pos]), ("relu", weighted(ad.relu, relu_in), [relu_in]),
        ("sigmoid", weighted(ad.sigmoid, a), [a]), ("tanh", weighted(ad.tanh, a), [a]),
        ("softplus", weighted(ad.softplus, a), [a]), ("silu", weighted(ad.silu, a), [a]),
        ("sin", weighted(ad.sin, a), [a]),
        ("dropout", lambda: (ad.dropout(a, 0.3, np.random.default_rng(drop_seed), True) * b.data).sum(), [a]),
        ("matmul", weighted(ad.matmul, sq1, sq2), [sq1, sq2]),
        ("reshape", weighted(lambda t: ad.reshape(t, (-1,)), a), [a]),
        ("transpose", weighted(lambda t: ad.transpose(t, (1, 0)), a), [a]),
        ("getitem", weighted(lambda t: t[1:, ::2], a), [a]),
        ("concat", weighted(lambda s, t: ad.concat([s, t], axis=0), a, b), [a, b]),
        ("stack", weighted(lambda s, t: ad.stack([s, t], axis=1), a, b), [a, b]),
        ("split", lambda: (ad.split(a, 2, axis=-1)[0] * ad.split(a, 2, axis=-1)[1]).sum(), [a]),
        ("pad", weighted(lambda t: ad.pad(t, ((1, 0), (0, 2))), a), [a]),
        ("tsum", weighted(lambda t: ad.tsum(t, axis=0), a), [a]),
        ("tmean", weighted(lambda t: ad.tmean(t, axis=1), a), [a]),
        ("softmax", weighted(lambda t: ad.softmax(t, axis=-1), a), [a]),
        ("log_softmax", weighted(lambda t: ad.log_softmax(t, axis=-1), a), [a]),
        ("layernorm", lambda: (ad.layernorm(x3, g, bb) * w3).sum(), [x3, g, bb]),
        ("batchnorm1d", lambda: (ad.batchnorm1d(x3, g, bb, rm.copy(), rv.copy(), True) * w3).sum(), [x3, g, bb]),
        ("embedding", weighted(lambda t: ad.embedding(t, ids), table), [table]),
        ("mean_pool", lambda: (ad.mean_pool(x3[:, :4], axis=1, mask=ids != 0) * w3[:, 0]).sum(), [x3]),
        ("cross_entropy", lambda: ad.cross_entropy(ad.embedding(table, ids) @ proj, tgt, weights=ids != 0),
         [table, proj]),
        ("mse", lambda: ad.mse(a, b.data), [a]),
        ("l2_normalize", weighted(ad.l2_normalize, a), [a]),
        ("cosine_similarity", weighted(ad.cosine_similarity, a, b), [a, b]),
        ("conv1d", lambda: (ad.conv1d(cx, cw, cb, (2, 0)) ** 2).sum(), [cx, cw, cb]),
        ("fft_conv", lambda: (ad.fft_conv(cx, h) ** 2).sum(), [cx, h]),
        ("linear_recurrence", lambda: (ad.linear_recurrence(ad.sigmoid(ar), d) ** 2).sum(), [ar, d]),
    ]


def _block_cases(rng):
    out = []
    for kind in BlockKind:
        spec = BlockSpec(kind, 3, 4, head_dim=2, state_dim=2, filter_hidden=3, filter_freqs=2, kernel=3,
                         max_len=16)
        block = build_block(spec, rng)
        x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
        w = rng.normal(size=(2, 5, 4))
        for train in (False, True):
            def loss(block=block, x=x, w=w, train=train):
                return (block(x, train=train, causal=False, rng=np.random.default_rng(0)) * w).sum()
            out.append((f"{kind.value}/{'train' if train else 'eval'}", loss, [x, *block.params.values()]))
    return out


def test_c02_gradient_suite(criterion):
    with criterion(2, "finite-difference gradients", limit=120) as c:
        rng = np.random.default_rng(2024)
        ops, blocks = _op_cases(rng), _block_cases(rng)
        errs = {name: gradcheck(fn, params, eps=1e-5) for name, fn, params in ops + blocks}
        bad = sorted(n for n, e in errs.items() if not e < TOL)
        c.check(not bad, f"{len(ops)} ops + {len(blocks)} block modes, max rel err "
                         f"{max(errs.values()):.1e} (< 1e-3){'; failing ' + ', '.join(bad) if bad else ''}")


# 3. space compilation

def _brute_valid(c):
    out = {}
    for d in c.depths:
        dims = [h for h in itertools.product(c.widths, repeat=d) if all(x <= y for x, y in zip((c.h0,) + h, h))]
        out[d] = {(h, m) for h in dims for m in itertools.product(c.modules, repeat=d)}
    return out


def test_c03_space_compilation(criterion):
    with criterion(3, "space compilation", limit=60) as c:
        paths = compose_space(SpaceConfig(depths=(3, 4, 5, 6), targets={3: 60, 4: 100, 5: 100, 6: 100}))
        counts = {d: sum(p.depth == d for p in paths) for d in (3, 4, 5, 6)}
        c.check(len(paths) == 360 and counts == {3: 60, 4: 100, 5: 100, 6: 100}, f"{len(paths)} paths {counts}")
        c.check(all(p.is_monotone(64) for p in paths), "all monotone")
        tiny = SpaceConfig(depths=(2,), widths=(32, 64), h0=32, modules=(CNN, TR), targets={2: 4})
        got = [(p.path_id, p.dims, p.types) for p in compose_space(tiny)]
        hand = [("d2-p0", (32, 32), (CNN, CNN)), ("d2-p1", (32, 64), (CNN, TR)),
                ("d2-p2", (64, 64), (TR, CNN)), ("d2-p3", (32, 32), (TR, TR))]
        c.check(got == hand, "tiny config matches hand-pruned oracle")
        ok = True
        for widths, k2, k3, seed in itertools.product([(32, 64), (32, 64, 128)], (1, 5), (3, 9), (0, 1)):
            cfg = SpaceConfig(depths=(2, 3), widths=widths, h0=widths[0], modules=(CNN, TR, LSTM),
                              targets={2: k2, 3: k3}, seed=seed)
            valid, ps = _brute_valid(cfg), compose_space(cfg)
            for d, k in ((2, k2), (3, k3)):
                mine = [(p.dims, p.types) for p in ps if p.depth == d]
                ok &= len(mine) == k == len(set(mine)) and set(mine) <= valid[d]
        c.check(ok, "16 small configs inside the brute-force enumeration")


# 4. weight sharing

def test_c04_weight_sharing(criterion):
    with criterion(4, "weight sharing", limit=30) as c:
        tok = KmerTokenizer(1)
        a, b = Path("a", (CNN, TR), (128, 128)), Path("b", (CNN, LSTM), (128, 128))
        net = Supernet([a, b], len(tok.vocab), 64, max_len=16)
        ids = encode_corpus(tok, repeat_corpus("AC", 64, 16, 0), 16)
        shared = BlockKey(CNN, 64, 128)
        c.check(len(net.registry) == 3 and shared in net.registry, f"{shared} registered once for both paths")
        probe = ids[:4]
        before_b = net.assemble(b).features(probe).data.copy()
        outside = {k: v.data.copy() for k, v in net.registry[BlockKey(LSTM, 128, 128)].params.items()}
        st = pretrain(net, [a], ids, PretrainConfig(steps=1, ssl=SslConfig(Objective.MM)))
        change = float(np.abs(net.assemble(b).features(probe).data - before_b).max())
        c.check(st.sampled == ["a"] and change > 1e-8, f"step through a moved b's output by {change:.2e}")
        same = all(np.array_equal(v.data, outside[k])
                   for k, v in net.registry[BlockKey(LSTM, 128, 128)].params.items())
        c.check(same, "LSTM block outside the path bit-identical")


# 5. SSL learnability

SSL_PATHS = [Path("a", (CNN, TR), (64, 64)), Path("b", (LSTM,), (64,)), Path("c", (HY, MB), (64, 64))]


def _eval_loss(net, objective, probe):
    vals = []
    for p in SSL_PATHS:
        m = net.assemble(p)
        if objective is Objective.MM:
            vals.append(mm_loss(m, probe, 0.15, np.random.default_rng(0), train=False).item())
        else:
            vals.append(ntp_loss(m, probe, train=False).item())
    return float(np.mean(vals))


def test_c05_ssl_learnability(criterion):
    with criterion(5, "SSL learnability", limit=600) as c:
        tok = KmerTokenizer(1)
        v = len(tok.vocab)
        ids = encode_corpus(tok, repeat_corpus("ACG", 256, 24, 0), 24)
        probe = ids[:32]
        for objective in (Objective.MM, Objective.NTP):
            net = Supernet(SSL_PATHS, v, 64, max_len=24)
            untrained = _eval_loss(net, objective, probe)
            c.check(abs(untrained - math.log(v)) <= 0.5,
                    f"{objective.value} untrained {untrained:.3f} vs ln|V| {math.log(v):.3f}")
            cfg = PretrainConfig(steps=2000, batch_size=16, ssl=SslConfig(objective))
            st, loss = None, untrained
            while loss >= 0.5 * math.log(v) and (st is None or st.step < cfg.steps):
                st = pretrain(net, SSL_PATHS, ids, cfg, state=st, until=(st.step if st else 0) + 100)
                loss = _eval_loss(net, objective, probe)
            c.check(loss < 0.5 * math.log(v), f"{objective.value} {loss:.3f} < {0.5 * math.log(v):.3f} "
                                              f"after {st.step} steps")
        worst = 0.0
        for batch in (2, 3, 8, 16):
            z = Tensor(np.random.default_rng(batch).normal(size=(1, 5)).repeat(batch, axis=0))
            worst = max(worst, abs(nt_xent(z, z, 0.1).item() - math.log(2 * batch - 1)))
        c.check(worst < 1e-12, f"CL identical embeddings = ln(2B-1) (max err {worst:.1e})")


# 6. rank-correlation analogue

@pytest.mark.slow
def test_c06_rank_correlation(criterion, tmp_path):
    with criterion(6, "inherited vs scratch rank correlation", limit=1800) as c:
        spec = importlib.util.spec_from_file_location("rank_correlation", ROOT / "scripts" / "rank_correlation.py")
        mod = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(mod)
        res = mod.rank_correlation(ROOT / "configs" / "rank_toy.toml", tmp_path)
        c.check(res["n_paths"] >= 12, f"{res['n_paths']} paths, 2 planted-motif tasks")
        c.check(res["rho"] >= 0.5, f"Spearman rho {res['rho']:.3f} (>= 0.5)")


# 7. ranking algebra

ACC = SimpleNamespace(task_id=0, direction=1)
ERR = SimpleNamespace(task_id=1, direction=-1)


def _recs(table):
    return [PerfRecord(f"a{i}", t, "only-ft", "kmer1", float(v), 0) for i, row in enumerate(table)
            for t, v in enumerate(row)]


def test_c07_ranking_algebra(criterion):
    with criterion(7, "ranking algebra", limit=1) as c:
        fx = zscore_rank(_recs([[0.9, 1.0], [0.8, 2.0], [0.7, 3.0]]), [ACC, ERR])
        want = {"a0": math.sqrt(1.5), "a1": 0.0, "a2": -math.sqrt(1.5)}
        c.check(all(abs(fx.scores[k] - v) < 1e-9 for k, v in want.items()), "3x2 fixture within 1e-9")
        rng = np.random.default_rng(7)
        affine_ok = flip_ok = True
        for _ in range(200):
            table = rng.normal(size=(int(rng.integers(2, 9)), 2))
            which, scale, shift = int(rng.integers(0, 2)), float(rng.uniform(0.01, 100)), float(rng.normal() * 50)
            base = zscore_rank(_recs(table), [ACC, ERR])
            moved = table.copy()
            moved[:, which] = scale * moved[:, which] + shift
            affine_ok &= zscore_rank(_recs(moved), [ACC, ERR]).order == base.order
            flipped = table.copy()
            flipped[:, which] *= -1
            tasks = [ACC, ERR]
            tasks[which] = SimpleNamespace(task_id=which, direction=-tasks[which].direction)
            f = zscore_rank(_recs(flipped), tasks)
            flip_ok &= f.scores == base.scores and f.order == base.order
        c.check(affine_ok, "order invariant under 200 positive affine maps")
        c.check(flip_ok, "joint metric/direction flip bit-identical")


# 8. predictor sanity

def _brute_metrics(pred, truth, k):
    hits = sum(p == g for p in pred[:k] for g in truth)
    return {"precision": hits / k, "recall": hits / len(truth), "hit_rate": 1.0 if hits else 0.0}


def test_c08_predictor_sanity(criterion):
    with criterion(8, "predictor on planted linear table", limit=300) as c:
        paths = compose_space(SpaceConfig())
        encs = {p.path_id: encode_arch(p) for p in paths}
        descs = ["promoter detection in human dna", "splice site donor classification",
                 "enhancer activity in mouse cells", "transcription factor binding sites"]
        embs = {t: embed_text(d) for t, d in enumerate(descs)}
        rng = np.random.default_rng(0)
        w0 = rng.normal(size=encs[paths[0].path_id].features.shape[1])
        ws = {t: w0 + 0.3 * rng.normal(size=w0.shape) for t in embs}

        def value(pid, t):
            return float(encs[pid].features.mean(axis=0) @ ws[t])

        ids = sorted(encs)
        held = sorted(ids[i] for i in np.random.default_rng(1).permutation(len(ids))[:72])
        train = [PerfRecord(pid, t, "only-ft", "kmer1", value(pid, t), 0) for pid in ids if pid not in held
                 for t in embs]
        model = train_predictor(train, encs, embs, cfg=PredictorConfig(epochs=50, lr=1e-3, weight_decay=1e-5,
                                                                       dropout=0.3))
        rhos = [spearman(model.predict([encs[p] for p in held], embs[t]), [value(p, t) for p in held])
                for t in embs]
        c.check(min(rhos) >= 0.8, f"held-out within-task Spearman {[round(r, 3) for r in rhos]} (>= 0.8)")
        universe = [f"d{d}-p{i}" for d in range(3, 7) for i in range(10)]
        mrng = np.random.default_rng(8)
        exact = 0
        for _ in range(100):
            pred = list(mrng.choice(universe, size=int(mrng.integers(1, 20)), replace=False))
            truth = set(mrng.choice(universe, size=int(mrng.integers(1, 10)), replace=False))
            k = int(mrng.integers(1, len(pred) + 1))
            exact += prediction_metrics(pred, truth, k) == _brute_metrics(pred, truth, k)
        c.check(exact == 100, f"{exact}/100 metric cases match the set oracle exactly")


# 9. agent pipeline

AGENT_TASKS = [TaskSpec(0, "promoter detection in human genomes"),
               TaskSpec(1, "splice site classification for donor sites"),
               TaskSpec(2, "enhancer activity prediction in mouse cells"),
               TaskSpec(3, "protein thermostability ranking", Alphabet.PROTEIN)]
AGENT_PATHS = [Path(f"d3-p{i}", (CNN,) * 3, (64, 64, 64)) for i in range(8)]
HEADERS = ("Task Analysis:", "Similar tasks identified:", "Architecture Recommendations:", "Reasoning:",
           "1. BEST CHOICE:", "Available Tasks in Knowledge Base:", "Performance Data:")
ANALYST = ("Task Summary:\n- promoter\n\nSearch Parameters:\n- Modality: DNA\n- Problem Type: binary\n"
           "- Task Description: promoter detection\n")
RETRIEVER = "Conclusion:\nTask Index: 2\n\nTop similar tasks:\n\n1. Task Index: 2\n"
FAKE = "1. Best\n- Architecture: d3-p1\n\n2. Next\n- Architecture: d9-p42\n\n3. Third\n- Architecture: d3-p2\n"


def test_c09_agent_pipeline(criterion):
    with criterion(9, "mock agent pipeline", limit=10) as c:
        rng = np.random.default_rng(0)
        recs = [PerfRecord(p.path_id, t.task_id, "only-ft", "kmer1", float(rng.uniform(0.5, 0.9)), 0)
                for t in AGENT_TASKS for p in AGENT_PATHS]
        kb = ag.KnowledgeBase.build(AGENT_TASKS, recs, AGENT_PATHS)
        query = TaskSpec(9, "splice site detection in donor regions")
        nearest = ag.retrieve_similar_tasks(kb, query, 1)[0][0]
        for m in (1, 3, 5):
            names, trace = ag.run_agent_pipeline(kb, query, ag.LlmClient(), m=m)
            c.check(len(names) == m and set(names) <= kb.path_ids and len(trace.roles) == 4,
                    f"m={m}: {len(names)} existing ids after {len(trace.roles)} roles")
            c.check(names[0] == kb.top_archs(nearest, 1)[0].path_id, f"m={m}: top-1 matches retrieval")
        client = ag.LlmClient(transport="mock", mock=ag.MockTransport(
            scripts={"analyst": [ANALYST], "task_retriever": [RETRIEVER], "predictor": [FAKE] * 3}))
        try:
            ag.run_agent_pipeline(kb, AGENT_TASKS[0], client, m=3)
            c.check(False, "fabricated id accepted")
        except ag.PipelineParseError as err:
            c.check(err.offenders == ["d9-p42"], f"fabricated id rejected ({err.offenders})")
        prompt = ag.build_rag_prompt(kb, query, n=2, k=3, m=3)
        missing = [h for h in HEADERS if h not in prompt]
        c.check(not missing, f"RAG prompt has all {len(HEADERS)} headers" + (f", missing {missing}" if missing else ""))


# 10. tokenizers

def test_c10_tokenizers(criterion):
    with criterion(10, "tokenizers", limit=30) as c:
        rng = np.random.default_rng(10)
        count_ok = 0
        for _ in range(1000):
            k = int(rng.integers(1, 7))
            s = "".join(rng.choice(list("ACGT"), int(rng.integers(k, 80))))
            count_ok += (len(KmerTokenizer(k).encode(s)) == len(s) - k + 1
                         and len(KmerTokenizer(k, False).encode(s)) == len(s) // k)
        c.check(count_ok == 1000, f"{count_ok}/1000 k-mer counts")
        corpus = ["".join(rng.choice(list("ACGT"), 60)) for _ in range(50)]
        tok = bpe_train(corpus, 60)
        trip = 0
        for _ in range(1000):
            s = "".join(rng.choice(list("ACGTN"), int(rng.integers(1, 120))))
            ids = tok.encode(s)
            trip += tok.decode(ids) == s and UNK not in ids
        c.check(trip == 1000, f"{trip}/1000 BPE round trips")
        merges = bpe_train(["ACACAC", "ACGT"], vocab_size=11).merges
        c.check(merges == [("A", "C"), ("AC", "AC")], f"toy merge order {merges}")


# 11. end-to-end determinism

def test_c11_end_to_end_determinism(criterion, tmp_path):
    with criterion(11, "toy run byte-identical twice", limit=300) as c:
        stores = []
        for run in ("first", "second"):
            cfg = load_config(ROOT / "configs" / "toy.toml", str(tmp_path / run))
            run_experiment(cfg)
            stores.append((tmp_path / run / "records.jsonl").read_bytes())
        c.check(stores[0] == stores[1] and stores[0], f"records.jsonl identical ({len(stores[0])} bytes)")
