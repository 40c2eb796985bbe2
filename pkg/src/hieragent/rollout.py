"""The Planner loop, the Toolcaller sub-agent, and batched rollouts."""

from __future__ import annotations

import enum
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .clients import InflightLimit, Message, PolicyClient
from .protocol import (
    ParseError,
    Segment,
    SegmentKind,
    Terminal,
    Trajectory,
    parse_planner_emission,
    scrub_tags,
)
from .search import SearchClient, SearchHit
from .transport import TransportError

NO_CONCLUSIVE_RESULT = "no conclusive result"
NO_RESULTS = "no results found"
PROMPT_VERSION = "v1"


class RunMode(str, enum.Enum):
    HIERARCHICAL = "hierarchical"
    FLAT_RAW_SEARCH = "flat-raw-search"
    DIRECT_IO = "direct-io"
    DIRECT_IO_PLUS_SEARCH = "direct-io-search"

    @property
    def uses_tools(self) -> bool:
        return self in (RunMode.HIERARCHICAL, RunMode.FLAT_RAW_SEARCH)


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    return (resources.files("hieragent") / "prompts" / f"{name}_{PROMPT_VERSION}.txt").read_text(
        encoding="utf-8"
    )


_PLANNER_PROMPT = {
    RunMode.HIERARCHICAL: "planner",
    RunMode.FLAT_RAW_SEARCH: "planner_flat",
    RunMode.DIRECT_IO: "planner_direct",
    RunMode.DIRECT_IO_PLUS_SEARCH: "planner_direct",
}


@dataclass
class RolloutLimits:
    max_rounds: int = 10

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass
class ToolcallerBudget:
    max_search_calls: int = 3
    top_k: int = 5


@dataclass
class ToolcallerConfig:
    agent: PolicyClient | None
    search: SearchClient
    budget: ToolcallerBudget = field(default_factory=ToolcallerBudget)


@dataclass
class ObservationPacket:
    subquery: str
    summary: str
    hits: list[SearchHit]
    search_calls_used: int
    exhausted: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RolloutFailure:
    prompt_id: str
    error: str

    def to_dict(self) -> dict:
        return {"prompt_id": self.prompt_id, "failed": True, "error": self.error}


_SEARCH_RE = re.compile(r"<search>(.*?)</search>", re.S)
_SUMMARY_RE = re.compile(r"<summary>(.*?)</summary>", re.S)


def format_hits(hits: Sequence[SearchHit]) -> str:
    if not hits:
        return "No results."
    return "\n\n".join(
        f"[{i}] {h.title}\n{h.snippet}\n(source: {h.source})" for i, h in enumerate(hits, 1)
    )


def toolcaller_answer(subquery: str, agent_policy: PolicyClient, search: SearchClient,
                      budget: ToolcallerBudget, seed: int | None = None) -> ObservationPacket:
    """Run the search sub-agent on one sub-query and package its findings.

    The agent replies ``<search>q</search>`` to search or ``<summary>..</summary>``
    to finish; any other reply is taken as its summary. Asking for more searches
    than the budget allows ends the loop with a sentinel summary.
    """
    if not subquery.strip():
        raise ValueError("empty sub-query")
    messages: list[Message] = [
        {"role": "system", "content": load_prompt("toolcaller")},
        {"role": "user", "content": subquery},
    ]
    hits: list[SearchHit] = []
    calls = 0
    while True:
        reply = agent_policy.generate(messages, seed=seed).text
        wanted = _SEARCH_RE.search(reply)
        if wanted:
            if calls >= budget.max_search_calls:
                return ObservationPacket(subquery, NO_CONCLUSIVE_RESULT, hits, calls, exhausted=True)
            results = search.search(wanted.group(1).strip(), budget.top_k)
            calls += 1
            hits.extend(results)
            messages.append({"role": "assistant", "content": reply})
            messages.append({"role": "user", "content": format_hits(results)})
            continue
        done = _SUMMARY_RE.search(reply)
        summary = scrub_tags(done.group(1) if done else reply).strip()
        return ObservationPacket(subquery, summary or NO_CONCLUSIVE_RESULT, hits, calls)


def raw_search_packet(query: str, search: SearchClient, top_k: int) -> ObservationPacket:
    hits = search.search(query, top_k)
    raw = scrub_tags("\n".join(h.snippet for h in hits)).strip()
    return ObservationPacket(query, raw or NO_RESULTS, hits, 1)


def _observe(mode: RunMode, query: str, toolcaller: ToolcallerConfig,
             seed: int | None) -> ObservationPacket:
    if mode is RunMode.HIERARCHICAL:
        return toolcaller_answer(query, toolcaller.agent, toolcaller.search, toolcaller.budget, seed)
    return raw_search_packet(query, toolcaller.search, toolcaller.budget.top_k)


def run_rollout(question: str, prompt_id: str, mode: RunMode, policy: PolicyClient,
                toolcaller: ToolcallerConfig | None = None, limits: RolloutLimits | None = None,
                seed: int | None = None) -> Trajectory:
    """Drive the Planner on one question until it answers, misbehaves, or runs out of rounds.

    Raises TransportError if an endpoint is unreachable; that is a failed
    rollout, not a malformed one.
    """
    if not question.strip():
        raise ValueError("empty question")
    limits = limits or RolloutLimits()
    mode = RunMode(mode)
    if mode is not RunMode.DIRECT_IO and toolcaller is None:
        raise ValueError(f"mode {mode.value} needs a toolcaller/search configuration")

    segments: list[Segment] = []
    packets: list[ObservationPacket] = []
    user_content = question
    if mode is RunMode.DIRECT_IO_PLUS_SEARCH:
        packet = raw_search_packet(question, toolcaller.search, toolcaller.budget.top_k)
        packets.append(packet)
        segments.append(Segment(SegmentKind.OBSERVATION, packet.summary))
        user_content = f"{question}\n\n<obs>{packet.summary}</obs>"
    messages: list[Message] = [
        {"role": "system", "content": load_prompt(_PLANNER_PROMPT[mode])},
        {"role": "user", "content": user_content},
    ]

    def finish(terminal: Terminal, failure: str | None = None, **extra) -> Trajectory:
        extras = {"mode": mode.value}
        if packets:
            extras["packets"] = [p.to_dict() for p in packets]
        extras.update(extra)
        return Trajectory(prompt_id, segments, terminal, failure, extras)

    rounds = 0
    while True:
        emission = policy.generate(messages, seed=seed).text
        try:
            # Spans from the emission text are meaningless inside the trajectory.
            emitted = [Segment(s.kind, s.text) for s in parse_planner_emission(emission)]
        except ParseError as exc:
            return finish(Terminal.MALFORMED_OUTPUT, exc.reason.value, raw_emission=emission)
        last = emitted[-1]
        if last.kind is SegmentKind.ANSWER:
            segments.extend(emitted)
            return finish(Terminal.ANSWERED)
        if not mode.uses_tools:
            return finish(Terminal.MALFORMED_OUTPUT, "ToolCallNotAllowed", raw_emission=emission)
        if rounds >= limits.max_rounds:
            segments.extend(emitted[:-1])
            return finish(Terminal.ROUND_LIMIT_EXCEEDED)
        rounds += 1
        packet = _observe(mode, last.text.strip(), toolcaller, seed)
        packets.append(packet)
        segments.extend(emitted)
        segments.append(Segment(SegmentKind.OBSERVATION, packet.summary))
        messages.append({"role": "assistant", "content": emission})
        messages.append({"role": "user", "content": f"<obs>{packet.summary}</obs>"})


def run_batch(questions: Sequence[str], mode: RunMode, policy: PolicyClient,
              toolcaller: ToolcallerConfig | None = None, limits: RolloutLimits | None = None,
              concurrency_limit: int = 1, prompt_ids: Sequence[str] | None = None,
              seeds: Sequence[int | None] | None = None) -> list[Trajectory | RolloutFailure]:
    """Run independent rollouts concurrently; results come back in input order.

    A failing item becomes a RolloutFailure in its slot and never aborts the batch.
    """
    if not questions:
        raise ValueError("no questions")
    n = len(questions)
    prompt_ids = list(prompt_ids) if prompt_ids is not None else [f"q{i}" for i in range(n)]
    seeds = list(seeds) if seeds is not None else list(range(n))
    limit = max(1, concurrency_limit)
    policy = InflightLimit(policy, limit)
    if toolcaller is not None:
        toolcaller = ToolcallerConfig(
            InflightLimit(toolcaller.agent, limit) if toolcaller.agent is not None else None,
            InflightLimit(toolcaller.search, limit),
            toolcaller.budget,
        )

    def one(i: int) -> Trajectory | RolloutFailure:
        try:
            return run_rollout(questions[i], prompt_ids[i], mode, policy, toolcaller, limits,
                               seeds[i])
        except (TransportError, ValueError, LookupError) as exc:
            return RolloutFailure(prompt_ids[i], f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=limit) as pool:
        return list(pool.map(one, range(n)))
