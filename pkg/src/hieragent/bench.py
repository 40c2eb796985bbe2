"""Benchmark datasets, training mixtures, and evaluation reports."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .clients import PolicyClient
from .config import EngineConfig
from .grpo import GrpoGroup, RegexTokenizer, assemble_group, tokenize_rollout
from .metrics import GoldAnswerSet, score_trajectory
from .protocol import Trajectory
from .rollout import RolloutFailure, RunMode, ToolcallerConfig, run_batch

log = logging.getLogger(__name__)

class SourceDataset(str, enum.Enum):
    HOTPOTQA = "HotpotQA"
    TWOWIKI = "2WikiMultiHopQA"
    MUSIQUE = "MuSiQue"
    BAMBOOGLE = "Bamboogle"
    CUSTOM = "custom"


_DATASET_ALIASES = {
    "hotpotqa": SourceDataset.HOTPOTQA, "hotpot": SourceDataset.HOTPOTQA,
    "2wikimultihopqa": SourceDataset.TWOWIKI, "2wiki": SourceDataset.TWOWIKI,
    "twowiki": SourceDataset.TWOWIKI, "musique": SourceDataset.MUSIQUE,
    "bamboogle": SourceDataset.BAMBOOGLE, "custom": SourceDataset.CUSTOM,
}

# EM / CEM percentages of the full-scale runs, for side-by-side display only.
REFERENCE_RESULTS: dict[str, dict[str, tuple[float, float]]] = {
    "Bamboogle": {
        "Direct IO": (17.6, 26.4),
        "Direct IO + Web Search": (29.6, 42.4),
        "CAMEL": (36.8, 47.2),
        "CAMEL + Web Search": (51.2, 62.4),
        "Search-R1 + Web Search": (58.4, 72.0),
        "Hierarchical-Base + Web Search": (60.0, 71.2),
        "Hierarchical-Instruct + Web Search": (63.2, 75.2),
    },
    "HotpotQA": {
        "Direct IO": (20.0, 27.2),
        "Direct IO + Web Search": (32.6, 52.8),
        "CAMEL": (23.2, 44.2),
        "CAMEL + Web Search": (32.4, 59.4),
        "Search-R1 + Web Search": (47.2, 64.2),
        "Hierarchical-Base + Web Search": (35.0, 55.2),
        "Hierarchical-Instruct + Web Search": (37.2, 57.4),
    },
    "2WikiMultiHopQA": {
        "Direct IO": (22.6, 25.4),
        "Direct IO + Web Search": (27.2, 40.2),
        "CAMEL": (20.8, 34.6),
        "CAMEL + Web Search": (35.0, 69.4),
        "Search-R1 + Web Search": (52.4, 68.0),
        "Hierarchical-Base + Web Search": (42.8, 68.0),
        "Hierarchical-Instruct + Web Search": (44.6, 70.0),
    },
    "MuSiQue": {
        "Direct IO": (4.8, 9.0),
        "Direct IO + Web Search": (14.0, 18.0),
        "CAMEL": (9.2, 18.8),
        "CAMEL + Web Search": (16.0, 29.4),
        "Search-R1 + Web Search": (20.8, 28.6),
        "Hierarchical-Base + Web Search": (15.6, 28.8),
        "Hierarchical-Instruct + Web Search": (18.4, 29.8),
    },
}

_REFERENCE_ROWS = {
    RunMode.DIRECT_IO: ["Direct IO"],
    RunMode.DIRECT_IO_PLUS_SEARCH: ["Direct IO + Web Search"],
    RunMode.FLAT_RAW_SEARCH: ["Search-R1 + Web Search"],
    RunMode.HIERARCHICAL: ["Hierarchical-Base + Web Search", "Hierarchical-Instruct + Web Search"],
}


class FormatError(ValueError):
    def __init__(self, path: str, line: int, msg: str):
        self.path, self.line = path, line
        super().__init__(f"{path}:{line}: {msg}")


class InsufficientPool(ValueError):
    pass


@dataclass(frozen=True)
class QASample:
    id: str
    question: str
    golds: GoldAnswerSet
    source_dataset: SourceDataset = SourceDataset.CUSTOM

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError(f"sample {self.id!r} has an empty question")

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "question": self.question, "golden_answers": list(self.golds),
                "source_dataset": self.source_dataset.value}


def _infer_source(path: str | os.PathLike, hint: str | None) -> SourceDataset:
    if hint is not None:
        try:
            return _DATASET_ALIASES[hint.lower()]
        except KeyError:
            return SourceDataset(hint)
    stem = Path(path).stem.lower()
    for alias, source in _DATASET_ALIASES.items():
        if alias != "custom" and alias in stem:
            return source
    return SourceDataset.CUSTOM


def _first(rec: dict, *keys):
    for k in keys:
        if k in rec and rec[k] not in (None, ""):
            return rec[k]
    return None


def _parse_record(rec: Any, index: int, stem: str, source: SourceDataset) -> QASample:
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    question = _first(rec, "question", "Question", "query")
    if not isinstance(question, str) or not question.strip():
        raise ValueError("missing question")
    golds = _first(rec, "golden_answers", "answers", "answer", "Answer")
    if golds is None:
        raise ValueError("missing answer/answers/golden_answers")
    golds = [golds] if isinstance(golds, str) else list(golds)
    golds += [a for a in rec.get("answer_aliases", []) if a not in golds]
    if not golds or not all(isinstance(g, str) for g in golds):
        raise ValueError("answers must be strings")
    sample_id = _first(rec, "id", "_id", "qid", "ID")
    src = rec.get("source_dataset")
    return QASample(
        id=str(sample_id) if sample_id is not None else f"{stem}-{index}",
        question=question,
        golds=GoldAnswerSet(tuple(golds)),
        source_dataset=SourceDataset(src) if src else source,
    )


def load_dataset(path: str | os.PathLike, format_hint: str | None = None) -> list[QASample]:
    """Read a JSON-lines QA file. Any bad line rejects the whole file."""
    source = _infer_source(path, format_hint)
    stem = Path(path).stem
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                samples.append(_parse_record(json.loads(line), len(samples), stem, source))
            except (ValueError, TypeError) as exc:
                raise FormatError(str(path), lineno, str(exc)) from exc
    return samples


def write_dataset(samples: Sequence[QASample], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")


def sample_training_mixture(hotpot: Sequence[QASample], twowiki: Sequence[QASample], total: int,
                            ratio: float, seed: int) -> list[QASample]:
    """Draw ``round(total * ratio)`` HotpotQA samples and the rest from 2Wiki, then shuffle."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    n_hotpot = math.floor(total * ratio + 0.5)
    n_wiki = total - n_hotpot
    if n_hotpot > len(hotpot) or n_wiki > len(twowiki):
        raise InsufficientPool(
            f"need {n_hotpot} HotpotQA / {n_wiki} 2Wiki samples, have {len(hotpot)} / {len(twowiki)}"
        )
    rng = random.Random(seed)
    mixture = rng.sample(list(hotpot), n_hotpot) + rng.sample(list(twowiki), n_wiki)
    rng.shuffle(mixture)
    return mixture


@dataclass
class EvalReport:
    dataset: str
    mode: RunMode
    n: int
    em_pct: float
    cem_pct: float
    per_sample: list[dict[str, Any]]
    config_fingerprint: str
    cem_mode: str = "token"
    f1_mean: float = 0.0
    trajectories: list[dict[str, Any]] = field(default_factory=list, repr=False)

    def reference(self) -> dict[str, dict[str, float]]:
        table = REFERENCE_RESULTS.get(self.dataset, {})
        return {row: {"em_pct": table[row][0], "cem_pct": table[row][1]}
                for row in _REFERENCE_ROWS[self.mode] if row in table}

    def to_dict(self) -> dict[str, Any]:
        return {
            "meta": {
                "dataset": self.dataset,
                "mode": self.mode.value,
                "config_fingerprint": self.config_fingerprint,
                "cem_mode": self.cem_mode,
                "reference_results": self.reference(),
            },
            "aggregates": {"n": self.n, "em_pct": self.em_pct, "cem_pct": self.cem_pct,
                           "f1_mean": self.f1_mean},
            "per_sample": self.per_sample,
        }

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, ensure_ascii=False)
            fh.write("\n")

    def write_csv(self, path: str | os.PathLike) -> None:
        cols = ["id", "prediction", "em", "cem", "f1", "rounds_used", "terminal"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.per_sample)


def aggregate(rows: Sequence[dict[str, Any]]) -> dict[str, float]:
    n = len(rows)
    return {
        "n": n,
        "em_pct": round(100.0 * sum(bool(r["em"]) for r in rows) / n, 1),
        "cem_pct": round(100.0 * sum(bool(r["cem"]) for r in rows) / n, 1),
        "f1_mean": round(sum(r["f1"] for r in rows) / n, 4),
    }


def evaluate(dataset: Sequence[QASample], mode: RunMode, policy: PolicyClient, cfg: EngineConfig,
             toolcaller: ToolcallerConfig | None = None, dataset_name: str | None = None) -> EvalReport:
    """Roll out every sample, score it, and aggregate EM / CEM percentages.

    Failed rollouts count as wrong answers.
    """
    if not dataset:
        raise ValueError("empty dataset")
    mode = RunMode(mode)
    results = run_batch(
        [s.question for s in dataset], mode, policy, toolcaller, cfg.limits,
        concurrency_limit=cfg.concurrency, prompt_ids=[s.id for s in dataset],
        seeds=[cfg.seed + i for i in range(len(dataset))],
    )
    rows, dumps = [], []
    for sample, result in zip(dataset, results):
        if isinstance(result, RolloutFailure):
            rows.append({"id": sample.id, "prediction": None, "em": False, "cem": False,
                         "f1": 0.0, "rounds_used": 0, "terminal": "Failed",
                         "error": result.error})
            dumps.append(result.to_dict())
            continue
        assert isinstance(result, Trajectory)
        rec = score_trajectory(result, sample.golds, cfg.cem_mode)
        rows.append({"id": sample.id, "prediction": result.answer, "em": rec.em, "cem": rec.cem,
                     "f1": rec.f1, "rounds_used": result.rounds_used,
                     "terminal": result.terminal.value, "reward": rec.reward})
        dumps.append(result.to_dict())
    name = dataset_name or dataset[0].source_dataset.value
    agg = aggregate(rows)
    fingerprint = cfg.fingerprint(mode=mode.value, dataset=name,
                                  sample_ids=[s.id for s in dataset])
    return EvalReport(name, mode, agg["n"], agg["em_pct"], agg["cem_pct"], rows, fingerprint,
                      cfg.cem_mode, agg["f1_mean"], dumps)


def collect_training_groups(samples: Sequence[QASample], mode: RunMode, policy: PolicyClient,
                            cfg: EngineConfig, toolcaller: ToolcallerConfig | None = None,
                            tokenizer: Callable | None = None,
                            logprobs: Callable | None = None) -> list[GrpoGroup]:
    """Roll out ``cfg.grpo.group_size`` attempts per sample and build GRPO groups.

    Without a model behind the policy, ``logprobs`` defaults to the uniform
    log-probability over the tokenizer's vocabulary. Failed rollouts are
    dropped; groups left with fewer than two rollouts are skipped.
    """
    g = cfg.grpo.group_size
    tokenizer = tokenizer or RegexTokenizer()
    if logprobs is None:
        uniform = -math.log(tokenizer.vocab_size)
        logprobs = lambda ids: np.full(len(ids), uniform)  # noqa: E731
    groups = []
    for i, s in enumerate(samples):
        results = run_batch([s.question] * g, mode, policy, toolcaller, cfg.limits,
                            cfg.concurrency, prompt_ids=[s.id] * g,
                            seeds=[cfg.seed * 100_003 + i * 1_000 + j for j in range(g)])
        rollouts, rewards = [], []
        for t in results:
            if isinstance(t, RolloutFailure):
                rollouts.append(None)
                rewards.append(None)
                continue
            rollouts.append(tokenize_rollout(t, tokenizer, logprobs, cfg=cfg.grpo))
            rewards.append(score_trajectory(t, s.golds, cfg.cem_mode).reward)
        group = assemble_group(s.id, rollouts, rewards, cfg.grpo)
        if group is None:
            log.warning("skipping %s: fewer than two rollouts survived", s.id)
            continue
        groups.append(group)
    return groups
