"""Predicate grammar, parser and the truth-telling Oracle.

Grammar (one production, all terminals):

    sentence  ::= color object "is" attribute
    color     ::= red | green | blue | purple | yellow | grey
    object    ::= door | goal | wall
    attribute ::= direction | state
    direction ::= north | south | east | west
    state     ::= open | closed

Answers are a 2-bit code plus a question reward; see ``answer``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .gridworld import COLORS, DoorState, Kind, WorldState

SOS, EOS = "<sos>", "<eos>"
OBJECTS = ("door", "goal", "wall")
DIRECTIONS = ("north", "south", "east", "west")
STATES = ("open", "closed")
VOCAB: Tuple[str, ...] = (SOS, EOS) + COLORS + OBJECTS + ("is",) + DIRECTIONS + STATES
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
SOS_ID, EOS_ID = TOKEN_ID[SOS], TOKEN_ID[EOS]
VOCAB_SIZE = len(VOCAB)

OBJECT_KIND = {"door": Kind.DOOR, "goal": Kind.GOAL, "wall": Kind.WALL}

_COLOR_IDS = {TOKEN_ID[w] for w in COLORS}
_OBJECT_IDS = {TOKEN_ID[w] for w in OBJECTS}
_ATTR_IDS = {TOKEN_ID[w] for w in DIRECTIONS + STATES}
_IS_ID = TOKEN_ID["is"]


class Verdict(Enum):
    TRUE = "True"
    FALSE = "False"
    UNDEFINED = "Undefined"
    SYNTAX_ERROR = "SyntaxError"


ETA = {
    Verdict.TRUE: (1, 1),
    Verdict.FALSE: (0, 0),
    Verdict.UNDEFINED: (0, 1),
    Verdict.SYNTAX_ERROR: (1, 0),
}

QUESTION_REWARD = 0.2


class Mode(Enum):
    TRAIN = "train"
    TEST = "test"
    RANDOM = "random"


@dataclass(frozen=True)
class Predicate:
    color: str
    obj: str
    attribute: str

    @property
    def is_direction(self) -> bool:
        return self.attribute in DIRECTIONS

    def text(self) -> str:
        return f"{self.color} {self.obj} is {self.attribute}"


@dataclass(frozen=True)
class AnswerCode:
    eta: Tuple[int, int]
    reward: float
    verdict: Verdict


def encode(words: Union[str, Sequence[str]]) -> List[int]:
    if isinstance(words, str):
        words = words.split()
    return [TOKEN_ID[w] for w in words]


def decode(tokens: Iterable[int]) -> str:
    return " ".join(VOCAB[t] for t in tokens)


def parse(tokens: Sequence[int]) -> Union[Predicate, Verdict]:
    """Parse a token-id sequence; returns a Predicate or ``Verdict.SYNTAX_ERROR``."""
    toks = list(tokens)
    if len(toks) != 4:
        return Verdict.SYNTAX_ERROR
    c, o, is_, a = toks
    if c not in _COLOR_IDS or o not in _OBJECT_IDS or is_ != _IS_ID or a not in _ATTR_IDS:
        return Verdict.SYNTAX_ERROR
    return Predicate(VOCAB[c], VOCAB[o], VOCAB[a])


def enumerate_grammar() -> List[List[int]]:
    """Every grammatical sentence, wrapped in <sos> ... <eos>."""
    return [
        [SOS_ID, TOKEN_ID[c], TOKEN_ID[o], _IS_ID, TOKEN_ID[a], EOS_ID]
        for c, o, a in itertools.product(COLORS, OBJECTS, DIRECTIONS + STATES)
    ]


def evaluate(p: Predicate, s: WorldState) -> Verdict:
    """Truth value of a parsed predicate against the full world state."""
    match = (s.kind == OBJECT_KIND[p.obj]) & (s.color == COLORS.index(p.color))
    rows, cols = np.nonzero(match)
    if len(rows) != 1:
        return Verdict.UNDEFINED
    r, c = int(rows[0]), int(cols[0])
    if not p.is_direction:
        if p.obj != "door":
            return Verdict.UNDEFINED
        want = DoorState.OPEN if p.attribute == "open" else DoorState.CLOSED
        return Verdict.TRUE if s.door[r, c] == want else Verdict.FALSE
    ar, ac = s.agent
    holds = {
        "north": r < ar,
        "south": r > ar,
        "east": c > ac,
        "west": c < ac,
    }[p.attribute]
    return Verdict.TRUE if holds else Verdict.FALSE


def answer(tokens: Sequence[int], s: WorldState, mode: Mode = Mode.TRAIN,
           rng: Optional[np.random.Generator] = None) -> AnswerCode:
    """Oracle reply to a question.

    TRAIN rewards well-posed unique questions (+0.2), ignores undefined
    ones and penalises syntax errors (-0.2). TEST keeps only the penalty.
    RANDOM answers True/False uniformly for any parseable question while
    keeping the TEST reward computed from the real parse.
    """
    parsed = parse(tokens)
    if parsed is Verdict.SYNTAX_ERROR:
        return AnswerCode(ETA[Verdict.SYNTAX_ERROR], -QUESTION_REWARD, Verdict.SYNTAX_ERROR)
    if mode is Mode.RANDOM:
        if rng is None:
            raise ValueError("random oracle needs an rng")
        verdict = Verdict.TRUE if rng.random() < 0.5 else Verdict.FALSE
        return AnswerCode(ETA[verdict], 0.0, verdict)
    verdict = evaluate(parsed, s)
    reward = QUESTION_REWARD if (mode is Mode.TRAIN and verdict in (Verdict.TRUE, Verdict.FALSE)) else 0.0
    return AnswerCode(ETA[verdict], reward, verdict)
