"""A tabular softmax policy for checking the GRPO machinery end to end.

The policy emits a fixed-length word sequence per prompt; each position has
its own row of logits, so log-probabilities and gradients are exact.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .grpo import GrpoConfig, GrpoGroup, TokenizedRollout, compute_advantages, grpo_objective
from .metrics import score_trajectory
from .protocol import Segment, SegmentKind, Terminal, Trajectory


class DivergenceDetected(RuntimeError):
    pass


BAD_TOKEN = "<bad>"


@dataclass(frozen=True)
class TargetStringTask:
    """Each prompt asks for one target phrase. Emitting ``<bad>`` anywhere is a format violation."""

    vocab: tuple[str, ...] = ("paris", "rome", "berlin", "capital", "france", "italy",
                              "germany", "city", BAD_TOKEN)
    targets: tuple[str, ...] = ("paris capital france", "rome capital italy",
                                "berlin capital germany")
    seq_len: int = 3

    @property
    def n_prompts(self) -> int:
        return len(self.targets)

    def decode(self, seq) -> Trajectory:
        words = [self.vocab[i] for i in seq]
        if BAD_TOKEN in words:
            return Trajectory("toy", [], Terminal.MALFORMED_OUTPUT, "BadToken")
        return Trajectory("toy", [Segment(SegmentKind.ANSWER, " ".join(words))], Terminal.ANSWERED)

    def reward(self, prompt: int, seq) -> float:
        return score_trajectory(self.decode(seq), [self.targets[prompt]]).reward


def log_softmax(theta: np.ndarray) -> np.ndarray:
    z = theta - theta.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sequence_logprobs(theta_p: np.ndarray, seqs: np.ndarray) -> np.ndarray:
    """Per-token log-probabilities, shape (n, L), for one prompt's table (L, V)."""
    lp = log_softmax(theta_p)
    return lp[np.arange(seqs.shape[1])[None, :], seqs]


def sample(theta_p: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    probs = np.exp(log_softmax(theta_p))
    L, V = probs.shape
    out = np.empty((n, L), dtype=np.int64)
    for t in range(L):
        out[:, t] = rng.choice(V, size=n, p=probs[t])
    return out


@dataclass
class ToyGroup:
    prompt: int
    seqs: np.ndarray
    rewards: np.ndarray
    advantages: np.ndarray
    logprobs_old: np.ndarray
    logprobs_ref: np.ndarray


def make_grpo_group(theta: np.ndarray, g: ToyGroup) -> GrpoGroup:
    new = sequence_logprobs(theta[g.prompt], g.seqs)
    rollouts = [
        TokenizedRollout(g.seqs[i], new[i], g.logprobs_old[i], g.logprobs_ref[i],
                         np.ones(g.seqs.shape[1], dtype=bool))
        for i in range(len(g.seqs))
    ]
    return GrpoGroup(str(g.prompt), rollouts, g.rewards, g.advantages)


def batch_objective(theta: np.ndarray, batch: list[ToyGroup], cfg: GrpoConfig) -> float:
    """Mean over groups of the GRPO objective, evaluated through ``grpo_objective``."""
    return float(np.mean([grpo_objective(make_grpo_group(theta, g), cfg).objective for g in batch]))


def batch_gradient(theta: np.ndarray, batch: list[ToyGroup], cfg: GrpoConfig) -> np.ndarray:
    """Analytic gradient of ``batch_objective`` with respect to the logit table."""
    eps, beta = cfg.clip_epsilon, cfg.kl_beta
    grad = np.zeros_like(theta)
    for g in batch:
        G, L = g.seqs.shape
        lp = log_softmax(theta[g.prompt])
        probs = np.exp(lp)
        new = lp[np.arange(L)[None, :], g.seqs]
        ratio = np.exp(new - g.logprobs_old)
        adv = g.advantages[:, None]
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1 - eps, 1 + eps) * adv
        # min() picks the unclipped branch (the only one depending on theta) on ties too
        d_surr = np.where(unclipped <= clipped, ratio * adv, 0.0)
        d_kl = 1.0 - np.exp(g.logprobs_ref - new)
        coef = (d_surr - beta * d_kl) / (L * G * len(batch))
        for t in range(L):
            onehot = np.zeros((G, probs.shape[1]))
            onehot[np.arange(G), g.seqs[:, t]] = 1.0
            grad[g.prompt, t] += coef[:, t] @ (onehot - probs[t])
    return grad


def collect_batch(theta: np.ndarray, theta_ref: np.ndarray, task: TargetStringTask,
                  cfg: GrpoConfig, rng: np.random.Generator) -> list[ToyGroup]:
    batch = []
    for p in range(task.n_prompts):
        seqs = sample(theta[p], cfg.group_size, rng)
        rewards = np.array([task.reward(p, s) for s in seqs])
        batch.append(ToyGroup(
            prompt=p,
            seqs=seqs,
            rewards=rewards,
            advantages=compute_advantages(rewards, cfg),
            logprobs_old=sequence_logprobs(theta[p], seqs),
            logprobs_ref=sequence_logprobs(theta_ref[p], seqs),
        ))
    return batch


@dataclass
class TrainResult:
    curve: list[dict] = field(default_factory=list)
    theta_init: np.ndarray | None = None
    theta: np.ndarray | None = None

    @property
    def mean_rewards(self) -> np.ndarray:
        return np.array([row["mean_reward"] for row in self.curve])

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "mean_reward", "kl", "clip_fraction"])
            w.writeheader()
            w.writerows(self.curve)


def toy_policy_train(task: TargetStringTask | None = None, cfg: GrpoConfig | None = None,
                     steps: int = 200, seed: int = 0, lr: float = 2.0,
                     updates_per_batch: int = 1, init_scale: float = 0.1) -> TrainResult:
    """Sample from the current policy, score, then ascend the GRPO objective.

    The reference policy is the initial one. ``mean_reward`` at each step is
    the average reward of that step's samples, taken before the update.
    """
    task = task or TargetStringTask()
    cfg = cfg or GrpoConfig()
    rng = np.random.default_rng(seed)
    theta = rng.normal(0.0, init_scale, size=(task.n_prompts, task.seq_len, len(task.vocab)))
    result = TrainResult(theta_init=theta.copy())
    theta_ref = theta.copy()
    for step in range(steps):
        batch = collect_batch(theta, theta_ref, task, cfg, rng)
        mean_reward = float(np.mean([g.rewards for g in batch]))
        if not np.isfinite(mean_reward):
            raise DivergenceDetected(f"mean reward is {mean_reward} at step {step}")
        kl = clip = 0.0
        for _ in range(updates_per_batch):
            stats = [grpo_objective(make_grpo_group(theta, g), cfg) for g in batch]
            kl = float(np.mean([s.kl for s in stats]))
            clip = float(np.mean([s.clip_fraction for s in stats]))
            theta = theta + lr * batch_gradient(theta, batch, cfg)
        if not np.all(np.isfinite(theta)):
            raise DivergenceDetected(f"parameters became non-finite at step {step}")
        result.curve.append({"step": step, "mean_reward": mean_reward, "kl": kl,
                             "clip_fraction": clip})
    result.theta = theta
    return result
