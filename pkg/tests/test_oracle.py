import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abya import gridworld as gw
from abya import oracle as orc
from abya.oracle import Mode, Verdict
from _helpers import brute_force_verdict, grammar_set, mutate, random_world

E = orc.encode


def test_vocabulary_layout():
    assert orc.VOCAB[0] == "<sos>" and orc.VOCAB[1] == "<eos>"
    assert orc.SOS_ID == 0 and orc.EOS_ID == 1
    assert orc.VOCAB_SIZE == 18 and len(set(orc.VOCAB)) == 18


def test_parse_examples():
    assert orc.parse(E("red door is closed")) == orc.Predicate("red", "door", "closed")
    p = orc.parse(E("green goal is north"))
    assert p == orc.Predicate("green", "goal", "north") and p.is_direction
    assert orc.parse(E("door red closed is")) is Verdict.SYNTAX_ERROR
    assert orc.parse([]) is Verdict.SYNTAX_ERROR
    assert orc.parse(E("red door is closed") + [orc.EOS_ID]) is Verdict.SYNTAX_ERROR


def test_grammar_enumeration():
    corpus = orc.enumerate_grammar()
    assert len(corpus) == 108
    assert len({tuple(s) for s in corpus}) == 108
    for s in corpus:
        assert s[0] == orc.SOS_ID and s[-1] == orc.EOS_ID
        assert isinstance(orc.parse(s[1:-1]), orc.Predicate)
        assert orc.parse(s[1:-1]).text() == orc.decode(s[1:-1])


@given(st.lists(st.integers(0, orc.VOCAB_SIZE - 1), max_size=9))
def test_parse_accepts_exactly_the_grammar(tokens):
    ok = isinstance(orc.parse(tokens), orc.Predicate)
    assert ok == (tuple(tokens) in grammar_set())


def test_mutations_rejected():
    rng = np.random.default_rng(0)
    corpus = [s[1:-1] for s in orc.enumerate_grammar()]
    gset = grammar_set()
    checked = 0
    while checked < 2000:
        m = mutate(corpus[int(rng.integers(len(corpus)))], rng)
        if tuple(m) in gset:
            continue
        assert orc.parse(m) is Verdict.SYNTAX_ERROR
        checked += 1


def test_eta_mapping():
    assert orc.ETA == {Verdict.TRUE: (1, 1), Verdict.FALSE: (0, 0),
                       Verdict.UNDEFINED: (0, 1), Verdict.SYNTAX_ERROR: (1, 0)}


# -- evaluation ----------------------------------------------------------------


def _two_room(door_state=gw.DoorState.CLOSED, extra_yellow=False):
    size = 9
    kind = np.full((size, size), gw.Kind.EMPTY, dtype=np.int8)
    color = np.zeros_like(kind)
    door = np.zeros_like(kind)
    kind[0, :] = kind[-1, :] = kind[:, 0] = kind[:, -1] = kind[:, 4] = gw.Kind.WALL
    color[kind == gw.Kind.WALL] = gw.GREY
    kind[4, 4], color[4, 4], door[4, 4] = gw.Kind.DOOR, gw.RED, door_state
    if extra_yellow:
        for r in (2, 6):
            kind[r, 4], color[r, 4], door[r, 4] = gw.Kind.DOOR, gw.YELLOW, gw.DoorState.CLOSED
    kind[4, 7], color[4, 7] = gw.Kind.GOAL, gw.GREEN
    return gw.WorldState(kind, color, door, (4, 2), 0, 0, 80, (), (4, 7))


def test_evaluate_hand_built_grid():
    s = _two_room()
    assert orc.evaluate(orc.parse(E("red door is closed")), s) is Verdict.TRUE
    assert orc.evaluate(orc.parse(E("red door is open")), s) is Verdict.FALSE
    assert orc.evaluate(orc.parse(E("red door is east")), s) is Verdict.TRUE
    assert orc.evaluate(orc.parse(E("red door is north")), s) is Verdict.FALSE  # same row
    assert orc.evaluate(orc.parse(E("green goal is open")), s) is Verdict.UNDEFINED
    assert orc.evaluate(orc.parse(E("blue door is east")), s) is Verdict.UNDEFINED
    assert orc.evaluate(orc.parse(E("grey wall is north")), s) is Verdict.UNDEFINED


def test_duplicate_objects_are_undefined():
    s = _two_room(extra_yellow=True)
    assert orc.evaluate(orc.parse(E("yellow door is closed")), s) is Verdict.UNDEFINED


def test_off_view_object_still_answered():
    s = gw.generate(gw.EnvConfig(4, 5, 0))
    for seed in range(200):
        s = gw.generate(gw.EnvConfig(4, 5, seed))
        if not (gw.observe(s)[..., 0] == gw.Kind.GOAL).any():
            break
    else:
        pytest.fail("no layout with the goal out of view")
    v = orc.evaluate(orc.parse(E("green goal is north")), s)
    assert v in (Verdict.TRUE, Verdict.FALSE)


@settings(max_examples=300)
@given(st.integers(0, 2**31 - 1), st.sampled_from(sorted(grammar_set())))
def test_evaluate_matches_brute_force(seed, sentence):
    s = random_world(np.random.default_rng(seed))
    assert orc.evaluate(orc.parse(sentence), s).value == brute_force_verdict(orc.decode(sentence).split(), s)


# -- answers ---------------------------------------------------------------------


def test_answer_modes():
    s = _two_room()
    rng = np.random.default_rng(0)
    a = orc.answer(E("red door is closed"), s, Mode.TRAIN)
    assert (a.eta, a.reward, a.verdict) == ((1, 1), 0.2, Verdict.TRUE)
    a = orc.answer(E("red door is open"), s, Mode.TRAIN)
    assert (a.eta, a.reward) == ((0, 0), 0.2)
    a = orc.answer(E("blue goal is east"), s, Mode.TRAIN)
    assert (a.eta, a.reward) == ((0, 1), 0.0)
    a = orc.answer(E("door red closed is"), s, Mode.TEST)
    assert (a.eta, a.reward) == ((1, 0), -0.2)
    a = orc.answer(E("red door is closed"), s, Mode.TEST)
    assert (a.eta, a.reward) == ((1, 1), 0.0)
    a = orc.answer([], s, Mode.TRAIN, rng)
    assert a.verdict is Verdict.SYNTAX_ERROR and a.reward == -0.2


def test_random_mode_truthful_syntax_and_uniform_answers():
    s = _two_room()
    rng = np.random.default_rng(5)
    bad = orc.answer(E("is is is is"), s, Mode.RANDOM, rng)
    assert bad.verdict is Verdict.SYNTAX_ERROR and bad.reward == -0.2
    verdicts = [orc.answer(E("blue wall is open"), s, Mode.RANDOM, rng) for _ in range(4000)]
    assert {v.verdict for v in verdicts} == {Verdict.TRUE, Verdict.FALSE}
    assert all(v.reward == 0.0 for v in verdicts)
    frac = np.mean([v.verdict is Verdict.TRUE for v in verdicts])
    assert abs(frac - 0.5) < 0.03
    with pytest.raises(ValueError):
        orc.answer(E("red door is open"), s, Mode.RANDOM, None)


def test_random_mode_reproducible():
    s = _two_room()
    q = E("red door is open")
    a = [orc.answer(q, s, Mode.RANDOM, np.random.default_rng(9)).verdict for _ in range(2)]
    assert a[0] is a[1]
