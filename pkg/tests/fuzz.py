"""Random trajectory generators and grammar-breaking mutations."""

import random

from hypothesis import strategies as st

from hieragent.protocol import Segment, SegmentKind, Terminal, Trajectory, contains_tag

K = SegmentKind

# Includes '<', '>' and '/' so payloads can look tag-like without being tags.
_ALPHABET = "abcxyz ABC019 .,?!'-\n\t<>/é"


def _payload_ok(s):
    return bool(s.strip()) and not contains_tag(s)


payloads = st.text(alphabet=_ALPHABET, min_size=1, max_size=40).filter(_payload_ok)


def random_payload(rng: random.Random) -> str:
    while True:
        s = "".join(rng.choice(_ALPHABET) for _ in range(rng.randint(1, 30)))
        if _payload_ok(s):
            return s


def random_segments(rng: random.Random, max_rounds: int = 4, answered: bool | None = None) -> list:
    segs = []
    if rng.random() < 0.2:
        segs.append(Segment(K.OBSERVATION, random_payload(rng)))
    for _ in range(rng.randint(0, max_rounds)):
        segs += [Segment(K.THINK, random_payload(rng)) for _ in range(rng.randint(0, 2))]
        segs.append(Segment(K.TOOL_CALL, random_payload(rng)))
        segs.append(Segment(K.OBSERVATION, random_payload(rng)))
    segs += [Segment(K.THINK, random_payload(rng)) for _ in range(rng.randint(0, 2))]
    if answered is None:
        answered = rng.random() < 0.8
    if answered:
        segs.append(Segment(K.ANSWER, random_payload(rng)))
    if not segs:
        segs.append(Segment(K.THINK, random_payload(rng)))
    return segs


def random_trajectory(rng: random.Random, prompt_id: str = "p") -> Trajectory:
    segs = random_segments(rng)
    if segs[-1].kind is K.ANSWER:
        terminal = Terminal.ANSWERED
    else:
        terminal = rng.choice([Terminal.MALFORMED_OUTPUT, Terminal.ROUND_LIMIT_EXCEEDED])
    return Trajectory(prompt_id, segs, terminal)


@st.composite
def trajectories(draw):
    segs = []
    if draw(st.booleans()):
        segs.append(Segment(K.OBSERVATION, draw(payloads)))
    for _ in range(draw(st.integers(0, 3))):
        segs += [Segment(K.THINK, t) for t in draw(st.lists(payloads, max_size=2))]
        segs += [Segment(K.TOOL_CALL, draw(payloads)), Segment(K.OBSERVATION, draw(payloads))]
    segs += [Segment(K.THINK, t) for t in draw(st.lists(payloads, max_size=2))]
    if draw(st.booleans()) or not segs:
        segs.append(Segment(K.ANSWER, draw(payloads)))
        terminal = Terminal.ANSWERED
    else:
        terminal = draw(st.sampled_from([Terminal.MALFORMED_OUTPUT, Terminal.ROUND_LIMIT_EXCEEDED]))
    return Trajectory(draw(st.text(alphabet="abc123-", min_size=1, max_size=8)), segs, terminal)


_NAMES = {K.THINK: "think", K.TOOL_CALL: "tool_calling", K.OBSERVATION: "obs", K.ANSWER: "answer"}


def mutate_invalid(rng: random.Random, segs: list) -> str:
    """Render ``segs`` with one defect that the grammar must reject."""
    kinds = [s.kind for s in segs]
    options = ["unclosed", "unknown", "garbage", "empty", "stray_close", "after_answer"]
    if K.TOOL_CALL in kinds:
        options.append("drop_obs")
    if K.ANSWER in kinds:
        options.append("double_answer")
    if len(segs) >= 2 and kinds[0] is not K.OBSERVATION and K.OBSERVATION not in kinds:
        options.append("orphan_obs")
    choice = rng.choice(options)
    i = rng.randrange(len(segs))
    pieces = [f"<{_NAMES[s.kind]}>{s.text}</{_NAMES[s.kind]}>" for s in segs]
    if choice == "unclosed":
        name = _NAMES[segs[i].kind]
        pieces[i] = f"<{name}>{segs[i].text}"
    elif choice == "unknown":
        pieces.insert(i, f"<{rng.choice(['foo', 'search', 'Think', 'tool_call'])}>x</foo>")
    elif choice == "garbage":
        pieces.insert(rng.randint(0, len(pieces)), "stray words")
    elif choice == "empty":
        name = _NAMES[segs[i].kind]
        blank = rng.choice(["", " ", "\n"])
        pieces[i] = f"<{name}>{blank}</{name}>"
    elif choice == "stray_close":
        pieces.insert(rng.randint(0, len(pieces)), "</think>")
    elif choice == "after_answer":
        if K.ANSWER not in kinds:
            pieces.append(f"<answer>{random_payload(rng)}</answer>")
        pieces.append(f"<think>{random_payload(rng)}</think>")
    elif choice == "drop_obs":
        j = kinds.index(K.TOOL_CALL)
        del pieces[j + 1]
    elif choice == "double_answer":
        pieces.append(f"<answer>{random_payload(rng)}</answer>")
    elif choice == "orphan_obs":
        pieces.insert(rng.randint(1, len(pieces)), f"<obs>{random_payload(rng)}</obs>")
    return "\n".join(pieces)


# --- GRPO groups ---------------------------------------------------------

def random_rollout_arrays(rng: random.Random, n_tokens: int, spread: float = 0.3):
    """(new, old, ref, mask) lists with at least one unmasked token."""
    old = [-rng.uniform(0.01, 5.0) for _ in range(n_tokens)]
    new = [o + rng.gauss(0.0, spread) for o in old]
    ref = [o + rng.gauss(0.0, spread) for o in old]
    mask = [rng.random() < 0.7 for _ in range(n_tokens)]
    mask[rng.randrange(n_tokens)] = True
    return new, old, ref, mask


def random_rewards(rng: random.Random, g: int) -> list:
    style = rng.random()
    if style < 0.4:
        return [rng.choice([-2.0, 0.0, 0.5, 1.0]) for _ in range(g)]
    if style < 0.5:
        return [rng.choice([-2.0, 1.0])] * g
    return [rng.uniform(-2.0, 1.0) for _ in range(g)]


def random_group_arrays(rng: random.Random, max_g: int = 6, max_len: int = 12):
    g = rng.randint(2, max_g)
    rollouts = [random_rollout_arrays(rng, rng.randint(1, max_len), rng.choice([0.05, 0.3, 1.0]))
                for _ in range(g)]
    return rollouts, random_rewards(rng, g)
