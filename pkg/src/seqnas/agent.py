"""Knowledge-base retrieval, RAG prompting and the four-role recommendation pipeline.

LLM calls go through ``LlmClient``.  The http transport posts chat-completion
JSON; the mock transport replays fixtures keyed by prompt hash, per-role
scripts, or a deterministic echo that answers from the prompt content.
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from importlib import resources
from string import Template
from typing import Callable, Iterable, Mapping, Sequence as Seq

import numpy as np

from .data import TaskSpec
from .predictor import embed_task
from .ranking import PerfRecord
from .space import Path

ID_PATTERN = r"d\d+-p\d+"
ROLES = ("analyst", "task_retriever", "arch_retriever", "predictor")
ENV_ENDPOINT, ENV_KEY, ENV_MODEL = "SEQNAS_LLM_ENDPOINT", "SEQNAS_LLM_API_KEY", "SEQNAS_LLM_MODEL"


class EmptyContext(ValueError):
    pass


class PipelineParseError(ValueError):
    def __init__(self, message: str, trace: AgentTrace | None = None, offenders: Seq[str] = ()):
        super().__init__(message)
        self.trace = trace
        self.offenders = list(offenders)


class LlmTimeout(TimeoutError):
    pass


def load_prompt(name: str) -> Template:
    return Template(resources.files("seqnas").joinpath(f"prompts/{name}.txt").read_text())


# ------------------------------------------------------------------ knowledge base

@dataclass
class KnowledgeBase:
    tasks: dict[int, TaskSpec]
    embeddings: dict[int, np.ndarray]
    records: list[PerfRecord]
    paths: dict[str, Path] = field(default_factory=dict)

    def __post_init__(self):
        with_records = {r.task_id for r in self.records}
        lacking = sorted(with_records - set(self.embeddings))
        if lacking:
            raise ValueError(f"tasks with records but no embedding: {lacking}")
        unknown = sorted(with_records - set(self.tasks))
        if unknown:
            raise ValueError(f"records reference unknown tasks: {unknown}")
        if self.paths:
            stray = sorted({r.path_id for r in self.records} - set(self.paths))
            if stray:
                raise ValueError(f"records reference unknown paths: {stray[:5]}")

    @classmethod
    def build(cls, tasks: Iterable[TaskSpec], records: Iterable[PerfRecord],
              paths: Iterable[Path] = (), embed: Callable[[TaskSpec], np.ndarray] = embed_task) -> KnowledgeBase:
        tasks = {t.task_id: t for t in tasks}
        return cls(tasks, {i: embed(t) for i, t in tasks.items()}, list(records),
                   {p.path_id: p for p in paths})

    @property
    def path_ids(self) -> set[str]:
        return set(self.paths) if self.paths else {r.path_id for r in self.records}

    def top_archs(self, task_id: int, k: int) -> list[PerfRecord]:
        s = self.tasks[task_id].direction
        recs = [r for r in self.records if r.task_id == task_id]
        return sorted(recs, key=lambda r: (-s * r.metric_value, r.path_id))[:k]


def retrieve_similar_tasks(kb: KnowledgeBase, query: TaskSpec | np.ndarray, n: int,
                           embed: Callable[[TaskSpec], np.ndarray] = embed_task) -> list[tuple[int, float]]:
    """Top-n (task_id, cosine) pairs; equal cosines fall back to task_id order."""
    if not kb.embeddings:
        raise ValueError("knowledge base is empty")
    if n > len(kb.embeddings):
        raise ValueError(f"n={n} exceeds {len(kb.embeddings)} tasks in the knowledge base")
    q = query if isinstance(query, np.ndarray) else embed(query)
    qn = q / np.linalg.norm(q)
    sims = {t: float(qn @ (e / np.linalg.norm(e))) for t, e in kb.embeddings.items()}
    order = sorted(sims, key=lambda t: (-round(sims[t], 12), t))
    return [(t, sims[t]) for t in order[:n]]


def _task_line(t: TaskSpec) -> str:
    return (f"Task Index: {t.task_id} | {t.description} | modality {t.modality.value} | "
            f"{t.problem.value} | metric {t.metric.value}")


def _perf_lines(kb: KnowledgeBase, task_id: int, k: int) -> list[str]:
    metric = kb.tasks[task_id].metric.value
    out = [f"Task Index: {task_id} (metric {metric})"]
    for i, r in enumerate(kb.top_archs(task_id, k), 1):
        desc = f" [{kb.paths[r.path_id].describe()}]" if r.path_id in kb.paths else ""
        out.append(f"  {i}. {r.path_id}{desc}: {metric} = {r.metric_value:.4f}")
    return out


def _query_block(query: TaskSpec) -> str:
    return (f"Description: {query.description}\nModality: {query.modality.value}\n"
            f"Problem type: {query.problem.value}")


def build_rag_prompt(kb: KnowledgeBase, query: TaskSpec, n: int = 3, k: int = 5, m: int = 3) -> str:
    if n <= 0:
        raise EmptyContext("RAG prompt needs at least one retrieved task")
    similar = retrieve_similar_tasks(kb, query, n)
    tasks = "\n".join(f"- {_task_line(kb.tasks[t])} | similarity {s:.4f}" for t, s in similar)
    perf = "\n".join(line for t, _ in similar for line in _perf_lines(kb, t, k))
    return load_prompt("rag").substitute(query=_query_block(query), tasks=tasks, performance=perf, m=m)


# ------------------------------------------------------------------ parsing

_ARCH_LINE = re.compile(r"(?:Architecture|BEST CHOICE|SECOND BEST|THIRD BEST|CHOICE)\s*:\s*\[?\s*([A-Za-z0-9_.\-]+)")


def parse_recommendations(text: str, m: int, pattern: str = ID_PATTERN) -> list[str]:
    """First m distinct ids named on 'Architecture:' (or RAG 'BEST CHOICE:') lines."""
    if not text.strip():
        raise PipelineParseError("empty response")
    grammar = re.compile(pattern)
    out: list[str] = []
    for name in _ARCH_LINE.findall(text):
        if grammar.fullmatch(name) and name not in out:
            out.append(name)
    if len(out) < m:
        raise PipelineParseError(f"found {len(out)} architecture names, need {m}: {out}")
    return out[:m]


def parse_task_indices(text: str) -> list[int]:
    out: list[int] = []
    for s in re.findall(r"Task Index:\s*\[?(\d+)", text):
        if int(s) not in out:
            out.append(int(s))
    return out


def parse_analyst(text: str) -> dict[str, str]:
    if "Search Parameters:" not in text:
        raise PipelineParseError("analyst output lacks 'Search Parameters:'")
    fields = {}
    for key in ("Modality", "Problem Type", "Task Description"):
        hit = re.search(rf"-\s*{key}:\s*(.+)", text.split("Search Parameters:", 1)[1])
        if hit is None:
            raise PipelineParseError(f"analyst output lacks '{key}:'")
        fields[key] = hit.group(1).strip()
    return fields


# ------------------------------------------------------------------ LLM client

def prompt_hash(role: str, system: str, user: str) -> str:
    return hashlib.sha256(f"{role}\x00{system}\x00{user}".encode()).hexdigest()


def _echo(role: str, system: str, user: str) -> str:
    """Faithful answers derived only from the prompt text."""
    want = re.search(r"exactly (\d+)", system)
    count = int(want.group(1)) if want else 3
    if role == "analyst":
        get = {k: (re.search(rf"{k}:\s*(.+)", user) or [None, "unknown"])[1]
               for k in ("Description", "Modality", "Problem type")}
        return ("Task Summary:\n- echo\n\nSearch Parameters:\n"
                f"- Modality: {get['Modality']}\n- Problem Type: {get['Problem type']}\n"
                f"- Task Description: {get['Description']}\n\nContext:\n- none\n")
    if role == "task_retriever":
        listed = parse_task_indices(user.split("Knowledge base tasks:", 1)[-1])[:count]
        body = "\n".join(f"{i}. Task Index: {t}\n- Similarity Reasoning: listed" for i, t in enumerate(listed, 1))
        return f"Conclusion:\nTask Index: {listed[0] if listed else ''}\n\nTop similar tasks:\n\n{body}\n"
    ids: list[str] = []
    for s in re.findall(ID_PATTERN, user):
        if s not in ids:
            ids.append(s)
    ids = ids[:count]
    if role == "rag":
        labels = ["BEST CHOICE", "SECOND BEST", "THIRD BEST"]
        lines = [f"{i}. {labels[i - 1] if i <= 3 else 'CHOICE'}: {a} - listed" for i, a in enumerate(ids, 1)]
        return "Architecture Recommendations:\n" + "\n".join(lines) + "\n\nReasoning:\nEcho.\n"
    body = "\n\n".join(f"{i}. Pick\n- Architecture: {a}" for i, a in enumerate(ids, 1))
    return f"Top recommendations\n\n{body}\n\nAnalysis Complete - Ready for implementation!\n"


@dataclass
class MockTransport:
    """Lookup order: exact prompt-hash fixture, then the role's script, then echo (if enabled)."""
    fixtures: dict[str, str] = field(default_factory=dict)
    scripts: dict[str, list[str]] = field(default_factory=dict)
    echo: bool = False
    calls: list[tuple[str, str]] = field(default_factory=list)

    def __call__(self, role: str, system: str, user: str) -> str:
        h = prompt_hash(role, system, user)
        self.calls.append((role, h))
        if h in self.fixtures:
            return self.fixtures[h]
        script = self.scripts.get(role)
        if script:
            used = sum(1 for r, _ in self.calls if r == role) - 1
            return script[min(used, len(script) - 1)]
        if self.echo:
            return _echo(role, system, user)
        raise KeyError(f"mock transport has no response for role {role} (hash {h[:12]})")


@dataclass
class LlmClient:
    endpoint: str = ""
    model: str = ""
    timeout: float = 60.0
    transport: str = "mock"
    api_key: str | None = None
    mock: MockTransport | None = None

    def __post_init__(self):
        if self.transport not in ("http", "mock"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.transport == "mock" and self.mock is None:
            self.mock = MockTransport(echo=True)
        if self.transport == "http" and not self.endpoint:
            raise ValueError(f"http transport needs an endpoint (set {ENV_ENDPOINT})")

    @classmethod
    def from_env(cls, timeout: float = 60.0) -> LlmClient:
        return cls(endpoint=os.environ.get(ENV_ENDPOINT, ""), model=os.environ.get(ENV_MODEL, ""),
                   timeout=timeout, transport="http", api_key=os.environ.get(ENV_KEY))

    def complete(self, role: str, system: str, user: str) -> str:
        if self.transport == "mock":
            return self.mock(role, system, user)
        body = json.dumps({"model": self.model, "temperature": 0,
                           "messages": [{"role": "system", "content": system},
                                        {"role": "user", "content": user}]}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (socket.timeout, TimeoutError) as e:
            raise LlmTimeout(f"LLM request to {self.endpoint} timed out after {self.timeout}s") from e
        except urllib.error.URLError as e:
            if isinstance(e.reason, (socket.timeout, TimeoutError)):
                raise LlmTimeout(f"LLM request to {self.endpoint} timed out") from e
            raise
        return payload["choices"][0]["message"]["content"]


# ------------------------------------------------------------------ pipeline

@dataclass
class RoleStep:
    role: str
    system: str
    user: str
    output: str
    attempts: int


@dataclass
class AgentTrace:
    steps: list[RoleStep] = field(default_factory=list)

    @property
    def roles(self) -> list[str]:
        return [s.role for s in self.steps]

    def to_json(self) -> list[dict]:
        return [vars(s) for s in self.steps]


def architecture_retrieval_tool(kb: KnowledgeBase, text: str, k: int) -> str:
    """Local stand-in for the retrieval tool: top-k records for every task index named in ``text``."""
    known = [t for t in parse_task_indices(text) if t in kb.tasks]
    if not known:
        raise PipelineParseError("no known task index in task-retriever output")
    lines = []
    for t in known:
        lines.extend(_perf_lines(kb, t, k))
    return "\n".join(lines)


def _ask(client: LlmClient, trace: AgentTrace, role: str, system: str, user: str, parse, retries: int):
    last: Exception | None = None
    for attempt in range(1, retries + 2):
        out = client.complete(role, system, user)
        try:
            value = parse(out)
        except PipelineParseError as e:
            last = e
            continue
        trace.steps.append(RoleStep(role, system, user, out, attempt))
        return value
    trace.steps.append(RoleStep(role, system, user, out, retries + 1))
    raise PipelineParseError(f"{role}: unparseable after {retries + 1} attempts: {last}", trace,
                             getattr(last, "offenders", ()))


def run_agent_pipeline(kb: KnowledgeBase, query: TaskSpec, client: LlmClient, n: int = 3, k: int = 5,
                       m: int = 3, retries: int = 2) -> tuple[list[str], AgentTrace]:
    """Analyst, Task Retriever, Architecture Retriever (local tool), Predictor, in that order."""
    trace = AgentTrace()
    analysis_text: list[str] = []

    def keep_analysis(out: str):
        parse_analyst(out)
        analysis_text.append(out)
        return out

    _ask(client, trace, "analyst", load_prompt("analyst").substitute(), _query_block(query),
         keep_analysis, retries)

    ranked = retrieve_similar_tasks(kb, query, len(kb.tasks))
    listing = "\n".join(_task_line(kb.tasks[t]) for t, _ in ranked)
    user = f"{analysis_text[-1]}\n\nKnowledge base tasks:\n{listing}\n"

    def tasks_parse(out: str) -> list[int]:
        idx = [t for t in parse_task_indices(out) if t in kb.tasks]
        if not idx:
            raise PipelineParseError("no known task index in task-retriever output")
        return idx[:n]

    task_ids = _ask(client, trace, "task_retriever", load_prompt("task_retriever").substitute(top_k=n),
                    user, tasks_parse, retries)

    tool_in = "\n".join(f"Task Index: {t}" for t in task_ids)
    tool_out = architecture_retrieval_tool(kb, tool_in, k)
    trace.steps.append(RoleStep("arch_retriever", load_prompt("arch_retriever").substitute(), tool_in,
                                tool_out, 1))

    valid = kb.path_ids

    def recs_parse(out: str) -> list[str]:
        names = parse_recommendations(out, m)
        bad = [x for x in names if x not in valid]
        if bad:
            raise PipelineParseError(f"fabricated architecture ids: {bad}", offenders=bad)
        return names

    names = _ask(client, trace, "predictor", load_prompt("predictor").substitute(m=m), tool_out,
                 recs_parse, retries)
    return names, trace


def rag_recommend(kb: KnowledgeBase, query: TaskSpec, client: LlmClient, n: int = 3, k: int = 5,
                  m: int = 3, retries: int = 2) -> tuple[list[str], AgentTrace]:
    prompt = build_rag_prompt(kb, query, n, k, m)
    trace = AgentTrace()
    valid = kb.path_ids

    def parse(out: str) -> list[str]:
        names = parse_recommendations(out, m)
        bad = [x for x in names if x not in valid]
        if bad:
            raise PipelineParseError(f"fabricated architecture ids: {bad}", offenders=bad)
        return names

    return _ask(client, trace, "rag", "", prompt, parse, retries), trace


def load_mock(path) -> MockTransport:
    """Mock transport from a JSON file {"fixtures": {...}, "scripts": {...}, "echo": bool}."""
    from pathlib import Path as FsPath

    d = json.loads(FsPath(path).read_text())
    return MockTransport(dict(d.get("fixtures", {})), {k: list(v) for k, v in d.get("scripts", {}).items()},
                         bool(d.get("echo", False)))
