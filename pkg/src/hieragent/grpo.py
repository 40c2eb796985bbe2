"""Group-relative policy optimization: advantages, masking, clipped surrogate, KL.

Ratios are applied per token and averaged within each rollout; rollouts are
then averaged over the group. Tokens inside observation blocks (and prompt
tokens) carry ``loss_mask = False`` and never enter any arithmetic.
"""

from __future__ import annotations

import json
import os
import re
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .protocol import Span, Trajectory, observation_char_spans, serialize_trajectory

FORMAT_VERSION = 1


class GroupTooSmall(ValueError):
    pass


class SpanMismatch(ValueError):
    pass


class NoUnmaskedTokens(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class GrpoConfig:
    group_size: int = 12
    batch_prompts: int = 3
    clip_epsilon: float = 0.2
    kl_beta: float = 0.04
    advantage_std_floor: float = 1e-6
    # Stand-in for <|fim_pad|>; 151662 is its id in the Qwen2.5 vocabulary.
    mask_pad_token_id: int = 151662

    def __post_init__(self):
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")


@dataclass(eq=False)
class TokenizedRollout:
    token_ids: np.ndarray
    logprobs_new: np.ndarray
    logprobs_old: np.ndarray
    logprobs_ref: np.ndarray
    loss_mask: np.ndarray
    text: str = ""
    observation_spans: list[Span] = field(default_factory=list)

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.logprobs_new = np.asarray(self.logprobs_new, dtype=np.float64)
        self.logprobs_old = np.asarray(self.logprobs_old, dtype=np.float64)
        self.logprobs_ref = np.asarray(self.logprobs_ref, dtype=np.float64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        self.observation_spans = [tuple(s) for s in self.observation_spans]
        lengths = {len(a) for a in (self.token_ids, self.logprobs_new, self.logprobs_old,
                                    self.logprobs_ref, self.loss_mask)}
        if len(lengths) != 1:
            raise LengthMismatch(f"per-token arrays have lengths {sorted(lengths)}")

    def __len__(self):
        return len(self.token_ids)

    def __eq__(self, other):
        if not isinstance(other, TokenizedRollout):
            return NotImplemented
        return (
            np.array_equal(self.token_ids, other.token_ids)
            and np.array_equal(self.logprobs_new, other.logprobs_new)
            and np.array_equal(self.logprobs_old, other.logprobs_old)
            and np.array_equal(self.logprobs_ref, other.logprobs_ref)
            and np.array_equal(self.loss_mask, other.loss_mask)
            and self.text == other.text
            and self.observation_spans == other.observation_spans
        )


def compute_advantages(rewards: Sequence[float], cfg: GrpoConfig | None = None) -> np.ndarray:
    """Standardize rewards within a group (population std, floored)."""
    floor = (cfg or GrpoConfig()).advantage_std_floor
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmall(f"group of {r.size} rollouts; need at least 2")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / max(r.std(), floor)


@dataclass(eq=False)
class GrpoGroup:
    prompt_id: str
    rollouts: list[TokenizedRollout]
    rewards: np.ndarray
    advantages: np.ndarray

    @classmethod
    def build(cls, prompt_id: str, rollouts: Sequence[TokenizedRollout],
              rewards: Sequence[float], cfg: GrpoConfig | None = None) -> GrpoGroup:
        rewards = np.asarray(rewards, dtype=np.float64)
        if len(rollouts) != len(rewards):
            raise LengthMismatch(f"{len(rollouts)} rollouts but {len(rewards)} rewards")
        return cls(prompt_id, list(rollouts), rewards, compute_advantages(rewards, cfg))

    @property
    def size(self) -> int:
        return len(self.rollouts)

    def validate(self, cfg: GrpoConfig | None = None) -> None:
        g = len(self.rollouts)
        if g < 2:
            raise ValidationError(f"group {self.prompt_id!r} has {g} rollouts")
        if not (len(self.rewards) == len(self.advantages) == g):
            raise ValidationError(f"group {self.prompt_id!r}: rollouts/rewards/advantages differ in size")
        if not np.array_equal(self.advantages, compute_advantages(self.rewards, cfg)):
            raise ValidationError(f"group {self.prompt_id!r}: advantages are stale")
        for r in self.rollouts:
            if not r.loss_mask.any():
                raise ValidationError(f"group {self.prompt_id!r}: rollout with no unmasked tokens")

    def __eq__(self, other):
        if not isinstance(other, GrpoGroup):
            return NotImplemented
        return (
            self.prompt_id == other.prompt_id
            and self.rollouts == other.rollouts
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.advantages, other.advantages)
        )


def assemble_group(prompt_id: str, rollouts: Sequence[TokenizedRollout | None],
                   rewards: Sequence[float | None], cfg: GrpoConfig | None = None) -> GrpoGroup | None:
    """Drop failed rollouts (``None``); skip the group if fewer than two survive."""
    kept = [(r, w) for r, w in zip(rollouts, rewards) if r is not None and w is not None]
    if len(kept) < 2:
        return None
    return GrpoGroup.build(prompt_id, [r for r, _ in kept], [w for _, w in kept], cfg)


# --- masking ---------------------------------------------------------------

class RegexTokenizer:
    """Deterministic word/space/punctuation tokenizer with hashed ids.

    Stands in for a model tokenizer wherever exact character spans are needed.
    """

    _PIECE = re.compile(r"\s+|\w+|[^\w\s]")

    def __init__(self, vocab_size: int = 50_000):
        self.vocab_size = vocab_size

    def __call__(self, text: str) -> list[tuple[int, Span]]:
        return [
            (zlib.crc32(m.group(0).encode("utf-8")) % self.vocab_size, m.span())
            for m in self._PIECE.finditer(text)
        ]


def _check_tiling(tokenization: Sequence[tuple[int, Span]], length: int) -> None:
    pos = 0
    for i, (_, (start, end)) in enumerate(tokenization):
        if start != pos or end <= start:
            raise SpanMismatch(f"token {i} spans [{start}, {end}) but expected start {pos}")
        pos = end
    if pos != length:
        raise SpanMismatch(f"tokens cover {pos} characters of {length}")


def trajectory_text(t: Trajectory) -> str:
    """Serialized trajectory plus, for malformed ones, the unparsed final emission.

    The rejected emission was still produced by the policy, so its tokens are
    trained on (and carry the format penalty).
    """
    body = serialize_trajectory(t)
    raw = t.extras.get("raw_emission")
    if raw:
        body = f"{body}\n{raw}" if body else raw
    return body


def build_loss_mask(t: Trajectory, tokenization: Sequence[tuple[int, Span]],
                    prompt: str = "") -> list[bool]:
    """False for every token touching the prompt or an observation block.

    ``tokenization`` must tile ``prompt + trajectory_text(t)`` exactly.
    """
    text_len = len(prompt) + len(trajectory_text(t))
    _check_tiling(tokenization, text_len)
    offset = len(prompt)
    blocked = [(0, offset)] if offset else []
    blocked += [(s + offset, e + offset) for s, e in observation_char_spans(t)]
    mask = []
    for _, (start, end) in tokenization:
        mask.append(not any(start < be and bs < end for bs, be in blocked))
    return mask


def pad_masked(token_ids: Sequence[int], mask: Sequence[bool], pad_id: int) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    return np.where(np.asarray(mask, dtype=bool), ids, pad_id)


LogprobSource = Callable[[np.ndarray], np.ndarray] | Sequence[float] | np.ndarray


def tokenize_rollout(t: Trajectory, tokenizer: Callable[[str], list[tuple[int, Span]]],
                     logprobs_old: LogprobSource, logprobs_ref: LogprobSource | None = None,
                     logprobs_new: LogprobSource | None = None, prompt: str = "",
                     cfg: GrpoConfig | None = None) -> TokenizedRollout:
    """Tokenize a trajectory, build its loss mask, and pad masked ids.

    Logprob sources are arrays aligned with the tokens or callables of the
    raw token ids. ``ref`` and ``new`` default to ``old``.
    """
    cfg = cfg or GrpoConfig()
    body = trajectory_text(t)
    tokens = tokenizer(prompt + body)
    ids = np.array([tok for tok, _ in tokens], dtype=np.int64)
    mask = build_loss_mask(t, tokens, prompt)

    def resolve(src):
        return np.asarray(src(ids) if callable(src) else src, dtype=np.float64)

    old = resolve(logprobs_old)
    ref = old if logprobs_ref is None else resolve(logprobs_ref)
    new = old if logprobs_new is None else resolve(logprobs_new)
    return TokenizedRollout(
        token_ids=pad_masked(ids, mask, cfg.mask_pad_token_id),
        logprobs_new=new,
        logprobs_old=old,
        logprobs_ref=ref,
        loss_mask=mask,
        text=prompt + body,
        observation_spans=[(s + len(prompt), e + len(prompt)) for s, e in observation_char_spans(t)],
    )


# --- objective -------------------------------------------------------------

def kl_divergence_estimate(logprobs_new, logprobs_ref, loss_mask) -> float:
    """Mean of exp(ref - new) - (ref - new) - 1 over unmasked tokens."""
    new = np.asarray(logprobs_new, dtype=np.float64)
    ref = np.asarray(logprobs_ref, dtype=np.float64)
    mask = np.asarray(loss_mask, dtype=bool)
    if not (len(new) == len(ref) == len(mask)):
        raise LengthMismatch("logprob and mask lengths differ")
    if not mask.any():
        raise NoUnmaskedTokens("KL needs at least one unmasked token")
    d = ref[mask] - new[mask]
    return float(np.mean(np.maximum(np.expm1(d) - d, 0.0)))


@dataclass
class ObjectiveResult:
    objective: float
    surrogate: float
    kl: float
    clip_fraction: float
    per_token_ratios: list[np.ndarray]


def grpo_objective(group: GrpoGroup, cfg: GrpoConfig | None = None) -> ObjectiveResult:
    """Clipped surrogate minus beta * KL, token-level, averaged per rollout then per group.

    ``per_token_ratios`` holds the ratios of unmasked tokens only.
    """
    cfg = cfg or GrpoConfig()
    eps, beta = cfg.clip_epsilon, cfg.kl_beta
    if len(group.rollouts) != len(group.advantages):
        raise LengthMismatch("rollouts and advantages differ in size")
    surrogates, kls, ratios = [], [], []
    clipped_tokens = total_tokens = 0
    for r, adv in zip(group.rollouts, group.advantages):
        m = r.loss_mask
        if not m.any():
            raise NoUnmaskedTokens(f"rollout in group {group.prompt_id!r} is fully masked")
        new, old = r.logprobs_new[m], r.logprobs_old[m]
        ratio = np.exp(new - old)
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
        surrogates.append(np.mean(np.minimum(unclipped, clipped)))
        kls.append(kl_divergence_estimate(r.logprobs_new, r.logprobs_ref, m))
        clipped_tokens += int(np.count_nonzero(clipped < unclipped))
        total_tokens += int(m.sum())
        ratios.append(ratio)
    surrogate = float(np.mean(surrogates))
    kl = float(np.mean(kls))
    objective = float(np.mean(np.asarray(surrogates) - beta * np.asarray(kls)))
    return ObjectiveResult(objective, surrogate, kl, clipped_tokens / total_tokens, ratios)


# --- export ----------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def export_batch(groups: Iterable[GrpoGroup], path: str | os.PathLike,
                 cfg: GrpoConfig | None = None) -> int:
    """Write a header line then one JSON record per rollout. Returns the record count.

    Masked positions are written with ``mask_pad_token_id``.
    """
    cfg = cfg or GrpoConfig()
    groups = list(groups)
    for g in groups:
        g.validate(cfg)
    lines = [_dumps({
        "format_version": FORMAT_VERSION,
        "config": asdict(cfg),
        "n_groups": len(groups),
        "n_records": sum(g.size for g in groups),
    })]
    for gi, g in enumerate(groups):
        for ri, (r, reward, adv) in enumerate(zip(g.rollouts, g.rewards, g.advantages)):
            lines.append(_dumps({
                "group": gi,
                "prompt_id": g.prompt_id,
                "rollout": ri,
                "token_ids": pad_masked(r.token_ids, r.loss_mask, cfg.mask_pad_token_id).tolist(),
                "loss_mask": r.loss_mask.tolist(),
                "logprobs_old": r.logprobs_old.tolist(),
                "logprobs_new": r.logprobs_new.tolist(),
                "logprobs_ref": r.logprobs_ref.tolist(),
                "reward": float(reward),
                "advantage": float(adv),
                "text": r.text,
                "observation_spans": [list(s) for s in r.observation_spans],
            }))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return len(lines) - 1


def load_batch(path: str | os.PathLike) -> tuple[dict, list[GrpoGroup]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "format_version" not in lines[0]:
        raise ValidationError("missing header line with format_version")
    header = lines[0]
    if header["format_version"] != FORMAT_VERSION:
        raise ValidationError(f"unsupported format_version {header['format_version']}")
    by_group: dict[int, list[dict]] = {}
    for rec in lines[1:]:
        by_group.setdefault(rec["group"], []).append(rec)
    groups = []
    for gi in sorted(by_group):
        recs = sorted(by_group[gi], key=lambda r: r["rollout"])
        rollouts = [
            TokenizedRollout(
                token_ids=r["token_ids"],
                logprobs_new=r["logprobs_new"],
                logprobs_old=r["logprobs_old"],
                logprobs_ref=r["logprobs_ref"],
                loss_mask=r["loss_mask"],
                text=r["text"],
                observation_spans=[tuple(s) for s in r["observation_spans"]],
            )
            for r in recs
        ]
        groups.append(GrpoGroup(
            recs[0]["prompt_id"], rollouts,
            np.array([r["reward"] for r in recs], dtype=np.float64),
            np.array([r["advantage"] for r in recs], dtype=np.float64),
        ))
    if len(lines) - 1 != header.get("n_records", len(lines) - 1):
        raise ValidationError("record count disagrees with header")
    return header, groups
