"""Policy endpoints: the HTTP chat-completions client and offline stand-ins."""

from __future__ import annotations

import hashlib
import math
import os
import random
import re
import threading
from dataclasses import dataclass
from typing import Any, Callable, Protocol, Sequence

from .transport import TransportError, with_retries

Message = dict[str, str]


@dataclass(frozen=True)
class Generation:
    text: str
    token_logprobs: tuple[tuple[int, float], ...] | None = None

    def __post_init__(self):
        for tok, lp in self.token_logprobs or ():
            if tok < 0:
                raise ValueError(f"negative token id {tok}")
            if not (math.isfinite(lp) and lp <= 0.0):
                raise ValueError(f"logprob {lp} is not the log of a probability")


class PolicyClient(Protocol):
    def generate(self, messages: list[Message], seed: int | None = None) -> Generation: ...


def assistant_turns(messages: Sequence[Message]) -> int:
    return sum(1 for m in messages if m["role"] == "assistant")


class ScriptedPolicy:
    """Replays a fixed script.

    ``script`` is either a list of emissions, indexed by how many assistant
    turns the conversation already holds, or a callable of the conversation.
    Being stateless, one instance can serve any number of concurrent rollouts.
    """

    def __init__(self, script: Sequence[str] | Callable[[list[Message]], str]):
        self.script = script

    def generate(self, messages: list[Message], seed: int | None = None) -> Generation:
        if callable(self.script):
            return Generation(self.script(messages))
        turn = assistant_turns(messages)
        if turn >= len(self.script):
            raise IndexError(f"script exhausted at turn {turn}")
        return Generation(self.script[turn])


class RandomChoicePolicy:
    """Picks uniformly among candidate emissions for each turn.

    The choice is a pure function of (seed, conversation), so rollouts with
    different seeds diverge while reruns reproduce exactly.
    """

    def __init__(self, choices: Sequence[Sequence[str]]):
        self.choices = [list(c) for c in choices]

    def generate(self, messages: list[Message], seed: int | None = None) -> Generation:
        turn = assistant_turns(messages)
        options = self.choices[min(turn, len(self.choices) - 1)]
        h = hashlib.sha256(repr((seed, [(m["role"], m["content"]) for m in messages])).encode())
        rng = random.Random(h.digest())
        return Generation(rng.choice(options))


_OBS_RE = re.compile(r"<obs>(.*?)</obs>", re.S)


class HeuristicPlanner:
    """Offline Planner that looks the question up once and answers from the observation.

    Used for hermetic CLI runs; it is not meant to be a strong model.
    """

    fallback = "unknown"

    def generate(self, messages: list[Message], seed: int | None = None) -> Generation:
        tools_allowed = "<tool_calling>" in messages[0]["content"]
        observations = [o for m in messages if m["role"] == "user" for o in _OBS_RE.findall(m["content"])]
        if observations:
            answer = _lead(observations[-1]) or self.fallback
            return Generation(f"<think>The observation answers it.</think><answer>{answer}</answer>")
        if tools_allowed:
            question = messages[1]["content"].strip()
            return Generation(f"<think>I should look this up.</think><tool_calling>{question}</tool_calling>")
        return Generation(f"<think>No tools are available.</think><answer>{self.fallback}</answer>")


def _lead(text: str) -> str:
    """First sentence of the first line, without its final period."""
    line = text.strip().split("\n", 1)[0]
    return re.split(r"(?<=[.!?])\s", line, maxsplit=1)[0].rstrip(".").strip()


class HeuristicToolcaller:
    """Offline Toolcaller: one search, then a summary naming the top hit."""

    def generate(self, messages: list[Message], seed: int | None = None) -> Generation:
        if assistant_turns(messages) == 0:
            return Generation(f"<search>{messages[1]['content'].strip()}</search>")
        results = messages[-1]["content"]
        m = re.search(r"^\[1\] (.*?)\n(.*?)$", results, re.M)
        if not m:
            return Generation("<summary>no conclusive result</summary>")
        title, snippet = m.group(1), m.group(2)
        return Generation(f"<summary>{title}. {snippet}</summary>")


class InflightLimit:
    """Caps concurrent in-flight calls to one wrapped endpoint."""

    def __init__(self, inner: Any, max_inflight: int):
        self.inner = inner
        self._slots = threading.BoundedSemaphore(max(1, max_inflight))

    def generate(self, messages, seed=None):
        with self._slots:
            return self.inner.generate(messages, seed=seed)

    def search(self, query, top_k):
        with self._slots:
            return self.inner.search(query, top_k)


def parse_completion(data: dict[str, Any]) -> Generation:
    """Accept either ``{text, token_logprobs}`` or the OpenAI-style ``choices`` shape."""
    if "text" in data:
        text = data["text"]
        raw = data.get("token_logprobs")
    else:
        choice = data["choices"][0]
        text = choice["message"]["content"]
        raw = (choice.get("logprobs") or {}).get("content")
    logprobs = None
    if raw:
        pairs = []
        for item in raw:
            if isinstance(item, dict):
                if "token_id" not in item:
                    pairs = None  # string tokens only; ids unknown
                    break
                pairs.append((int(item["token_id"]), float(item["logprob"])))
            else:
                pairs.append((int(item[0]), float(item[1])))
        logprobs = tuple(pairs) if pairs else None
    return Generation(text, logprobs)


class ChatCompletionsClient:
    """POSTs ``{model, messages, temperature, max_tokens, logprobs?}`` to a completions endpoint.

    URL and key fall back to ``POLICY_API_URL`` and ``POLICY_API_KEY``.
    """

    def __init__(self, model: str, url: str | None = None, api_key: str | None = None,
                 temperature: float = 1.0, max_tokens: int = 1024, logprobs: bool = False,
                 session=None, timeout: float = 120.0, attempts: int = 3, backoff: float = 1.0,
                 max_inflight: int = 8):
        import requests

        self.url = url or os.environ.get("POLICY_API_URL")
        if not self.url:
            raise ValueError("no policy endpoint configured (set POLICY_API_URL)")
        self.api_key = api_key if api_key is not None else os.environ.get("POLICY_API_KEY")
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.logprobs = logprobs
        self.session = session or requests.Session()
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_inflight)

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        with self._slots:
            resp = self.session.post(self.url, json=body, headers=headers, timeout=self.timeout)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"policy endpoint returned HTTP {resp.status_code}")
        resp.raise_for_status()
        return resp.json()

    def generate(self, messages: list[Message], seed: int | None = None) -> Generation:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.logprobs:
            body["logprobs"] = True
        if seed is not None:
            body["seed"] = seed
        data = with_retries(lambda: self._post(body), attempts=self.attempts, backoff=self.backoff)
        return parse_completion(data)


def question_of(messages: Sequence[Message]) -> str:
    """The original question, without any observation appended to it."""
    return messages[1]["content"].split("\n\n<obs>", 1)[0].strip()


class QuestionScriptPolicy:
    """Scripted emissions keyed by question, e.g. loaded from a JSON file.

    ``scripts`` maps question text to a list of emissions; the ``"*"`` entry,
    if present, covers every other question.
    """

    def __init__(self, scripts: dict[str, Sequence[str]]):
        self.scripts = {k.strip(): list(v) for k, v in scripts.items()}

    def generate(self, messages: list[Message], seed: int | None = None) -> Generation:
        script = self.scripts.get(question_of(messages), self.scripts.get("*"))
        if script is None:
            raise KeyError(f"no script for question {question_of(messages)!r}")
        return ScriptedPolicy(script).generate(messages, seed)


class NoisyPlanner:
    """HeuristicPlanner that sometimes guesses or breaks format, per seed.

    Gives GRPO groups non-trivial reward spread without a model.
    """

    guesses = ("Kellmar", "1700", "Rosa Lind", "Vossberg")

    def __init__(self, p_malformed: float = 0.2, p_guess: float = 0.3):
        self.base = HeuristicPlanner()
        self.p_malformed = p_malformed
        self.p_guess = p_guess

    def generate(self, messages: list[Message], seed: int | None = None) -> Generation:
        h = hashlib.sha256(repr((seed, [m["content"] for m in messages])).encode())
        rng = random.Random(h.digest())
        u = rng.random()
        if u < self.p_malformed:
            return Generation("<think>I am not sure</think>maybe the answer is unknown")
        if u < self.p_malformed + self.p_guess:
            return Generation(f"<think>A guess will do.</think><answer>{rng.choice(self.guesses)}</answer>")
        return self.base.generate(messages, seed)
