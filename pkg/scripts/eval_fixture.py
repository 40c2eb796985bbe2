"""Evaluate every run mode on a QA file against the bundled fixture corpus.

    python3 scripts/eval_fixture.py --out runs/eval
"""

import argparse
from importlib import resources
from pathlib import Path

from hieragent import bench
from hieragent.clients import HeuristicPlanner, HeuristicToolcaller
from hieragent.config import EngineConfig
from hieragent.rollout import RunMode, ToolcallerConfig
from hieragent.search import FixtureCorpus

DATA = resources.files("hieragent") / "data"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--dataset", default=str(DATA / "mini.jsonl"))
    ap.add_argument("--corpus", default=str(DATA / "corpus.jsonl"))
    ap.add_argument("--max-rounds", type=int, default=10)
    ap.add_argument("--out", type=Path, default=Path("runs/eval"))
    args = ap.parse_args()

    args.out.mkdir(parents=True, exist_ok=True)
    data = bench.load_dataset(args.dataset)
    corpus = FixtureCorpus.from_jsonl(args.corpus)
    cfg = EngineConfig()
    cfg.limits.max_rounds = args.max_rounds
    tc = ToolcallerConfig(HeuristicToolcaller(), corpus, cfg.toolcaller)
    print(f"{'mode':<18} {'n':>3} {'EM':>6} {'CEM':>6} {'F1':>6}")
    for mode in RunMode:
        cfg.mode = mode.value
        rep = bench.evaluate(data, mode, HeuristicPlanner(), cfg, tc)
        rep.write(args.out / f"{mode.value}.json")
        rep.write_csv(args.out / f"{mode.value}.csv")
        print(f"{mode.value:<18} {rep.n:>3} {rep.em_pct:>6.1f} {rep.cem_pct:>6.1f} {rep.f1_mean:>6.3f}")


if __name__ == "__main__":
    main()
