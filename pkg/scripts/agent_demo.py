"""Recommend architectures for a new task from a finished run, using the offline mock LLM.

    python3 scripts/agent_demo.py --run-dir runs/rank_toy \
        --description "find the TATA box in promoter reads"
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from seqnas import agent as ag
from seqnas.data import TaskSpec
from seqnas.experiment import ResultsStore, TaskSource
from seqnas.ranking import filter_records
from seqnas.space import load_space


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run-dir", required=True)
    ap.add_argument("--description", required=True)
    ap.add_argument("--protocol", default="only-ft")
    ap.add_argument("--m", type=int, default=3)
    ap.add_argument("--show-prompt", action="store_true")
    a = ap.parse_args()
    store = ResultsStore(a.run_dir)
    tasks = [TaskSource(**t).load()[0] for t in store.manifest["config"]["tasks"]]
    kb = ag.KnowledgeBase.build(tasks, filter_records(store.records(), a.protocol),
                                load_space(Path(a.run_dir) / "space.json"))
    query = TaskSpec(max(t.task_id for t in tasks) + 1, a.description)
    n = min(3, len(tasks))
    client = ag.LlmClient()
    names, trace = ag.run_agent_pipeline(kb, query, client, n=n, m=a.m)
    rag, _ = ag.rag_recommend(kb, query, client, n=n, m=a.m)
    if a.show_prompt:
        print(ag.build_rag_prompt(kb, query, n=n, m=a.m))
    print(json.dumps({"similar": ag.retrieve_similar_tasks(kb, query, n), "agent": names, "rag": rag,
                      "roles": trace.roles}, indent=1))


if __name__ == "__main__":
    main()
