import numpy as np
import pytest
import torch

from abya import autodiff as ad
from abya import gridworld as gw
from abya import oracle as orc
from abya.agent import (E_OBS, E_WORD, ETA, H_LM, H_MEM, H_POLICY, MEM_IN, QA_DIM, QUESTION_CAP, Agent,
                        AgentState, ModelKind, count_params, group_of)
from abya.fastpath import FastAgent
from _helpers import FD_RTOL, fd_directional_error


def _obs_batch(n=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        w = gw.generate(gw.EnvConfig(2, 4, seed + k), rng)
        out.append(gw.observe(w))
    return torch.from_numpy(np.stack(out))


@pytest.fixture(scope="module")
def agents():
    return {k: Agent(k, seed=1) for k in ModelKind}


def test_encode_shape_and_determinism(agents):
    a = agents[ModelKind.MAIN]
    obs = _obs_batch()
    e1, feat = a.encode(obs)
    e2, _ = a.encode(obs)
    assert e1.shape == (4, E_OBS) and torch.equal(e1, e2)
    assert a.encode_observation(obs[0].numpy()).shape == (1, E_OBS)
    with pytest.raises(ad.DimensionError):
        a.encode(obs[:, :5])


def test_init_episode_statistics():
    a = Agent("baseline")
    s1 = a.init_episode(np.random.default_rng(4))
    s2 = a.init_episode(np.random.default_rng(4))
    assert torch.equal(s1.h, s2.h) and not s1.c.any()
    rng = np.random.default_rng(0)
    h = torch.cat([a.init_episode(rng).h for _ in range(80)]).flatten()[:10_000]
    assert abs(float(h.mean())) < 0.05 and abs(float(h.var()) - 1) < 0.05


def test_memory_update_shapes_and_zero_weights():
    a = Agent("main")
    st = a.init_episode(np.random.default_rng(0))
    e_o, e_q, eta = torch.randn(1, E_OBS), torch.randn(1, E_WORD), torch.ones(1, ETA)
    nxt = a.memory_update(st, e_o, e_q, eta, 3)
    assert nxt.h.shape == (1, H_MEM)
    with torch.no_grad():
        for p in a.memory.parameters():
            p.zero_()
    assert not a.memory_update(st, e_o, e_q, eta, 3).h.any()
    with pytest.raises(ad.DimensionError):
        a.memory_update(st, e_o, e_q[:, :5], eta, 3)


def test_act_heads(agents):
    for kind, a in agents.items():
        obs = _obs_batch(3)
        e_o, feat = a.encode(obs)
        h_m = torch.randn(3, H_MEM)
        e_q, eta, h_q = torch.randn(3, E_WORD), torch.ones(3, ETA), torch.randn(3, H_LM)
        logits, v = a.act(e_o, e_q, eta, h_q, h_m, feat)
        p = torch.softmax(logits, -1)
        assert p.shape == (3, 7) and v.shape == (3,)
        assert torch.allclose(p.sum(-1), torch.ones(3), atol=1e-6) and (p >= 0).all()


def test_act_rejects_wrong_widths(agents):
    a = agents[ModelKind.MAIN]
    with pytest.raises(ad.DimensionError):
        a.act(torch.zeros(1, E_OBS), torch.zeros(1, E_WORD), torch.zeros(1, ETA), torch.zeros(1, 5),
              torch.zeros(1, H_MEM))


def test_parameter_count_difference():
    main, base, film = (count_params(Agent(k)) for k in ("main", "baseline", "film"))
    lm = count_params(Agent("main").lm)
    assert main - base == lm + (E_WORD + ETA + H_LM) * H_POLICY
    assert QA_DIM == E_WORD + ETA + H_LM
    assert not hasattr(Agent("baseline"), "lm")
    f = Agent("film")
    assert film - base == lm + count_params(f.film)


def test_every_parameter_has_one_group(agents):
    for a in agents.values():
        ps = a.param_set()
        assert set(ps.groups) == set(dict(a.named_parameters()))
        groups = set(ps.groups.values())
        assert (ad.QUESTION in groups) == a.asks
    assert group_of("film.blocks.0.K") == ad.ENCODER


def test_film_identity_affine_matches_plain_stack(agents):
    a = agents[ModelKind.FILM]
    _, feat = a.encode(_obs_batch(2))
    ones, zeros = torch.ones(2, 5, 32), torch.zeros(2, 5, 32)
    out = a.film_condition(feat, gammas=ones, betas=zeros)
    x = feat
    for block in a.film.blocks:
        x = x + torch.relu(block(x))
    plain = torch.relu(a.film.fc(x.flatten(1)))
    assert out.shape == (2, E_OBS) and torch.allclose(out, plain)
    # fresh generator weights are zero, so any QA input starts at the identity
    assert torch.allclose(a.film_condition(feat, torch.randn(2, QA_DIM)), plain)
    with pytest.raises(RuntimeError):
        agents[ModelKind.MAIN].film_condition(feat, torch.randn(2, QA_DIM))


def test_ask_rollout_contract():
    a = Agent("main", seed=3)
    rng = np.random.default_rng(0)
    e_o, h_m = torch.randn(1, E_OBS), torch.randn(1, H_MEM)
    for _ in range(30):
        ro = a.ask(e_o, h_m, rng)
        assert 1 <= len(ro.sampled) <= QUESTION_CAP
        assert orc.SOS_ID not in ro.sampled
        assert len(ro.logps) == len(ro.sampled) == len(ro.entropies)
        assert ro.sampled[-1] == orc.EOS_ID or len(ro.sampled) == QUESTION_CAP
        assert ro.h_q.shape == (1, H_LM) and ro.e_q.shape == (1, E_WORD)
    with pytest.raises(RuntimeError):
        Agent("baseline").ask(e_o, h_m, rng)


def test_question_embedding_mean_pooling():
    lm = Agent("main").lm
    assert not lm.embed_question([]).any()
    tok = orc.TOKEN_ID["door"]
    assert torch.equal(lm.embed_question([tok]), lm.embedding[tok])
    batch = lm.embed_questions([[tok], [], orc.encode("red door is open")])
    assert torch.allclose(batch[0], lm.embedding[tok]) and not batch[1].any()
    assert torch.allclose(batch[2], lm.embedding[orc.encode("red door is open")].mean(0))


def test_empty_question_is_a_syntax_error():
    s = gw.generate(gw.EnvConfig(2, 4, 0))
    assert orc.answer([], s, orc.Mode.TRAIN).verdict is orc.Verdict.SYNTAX_ERROR


def test_greedy_decoding_after_pretraining_is_grammatical(pretrained_main):
    a, _ = pretrained_main
    grammar = {tuple(s[1:-1]) for s in orc.enumerate_grammar()}
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(20):
            h, c = a.lm.initial(torch.randn(1, E_OBS + H_MEM, generator=g))
            tok, out = torch.tensor([orc.SOS_ID]), []
            for _ in range(QUESTION_CAP):
                logits, h, c = a.lm.step(tok, h, c)
                tok = logits.argmax(-1)
                if int(tok) == orc.EOS_ID:
                    break
                out.append(int(tok))
            assert tuple(out) in grammar


def test_replay_reproduces_recorded_logprobs():
    a = Agent("main", seed=2)
    rng = np.random.default_rng(1)
    e_o, h_m = torch.randn(5, E_OBS), torch.randn(5, H_MEM)
    rollouts = [a.ask(e_o[i:i + 1], h_m[i:i + 1], rng) for i in range(5)]
    with torch.no_grad():
        _, h_q, q_logp, q_ent = a.question_features(e_o, h_m, [r.sampled for r in rollouts])
    for i, r in enumerate(rollouts):
        assert float(q_logp[i]) == pytest.approx(r.logp, abs=1e-5)
        assert float(q_ent[i]) == pytest.approx(np.mean(r.entropies), abs=1e-5)
        assert torch.allclose(h_q[i], r.h_q[0], atol=1e-6)


# -- numpy fast path against the torch reference -------------------------------------


@pytest.mark.parametrize("kind", list(ModelKind))
def test_fastpath_matches_torch(kind):
    a = Agent(kind, seed=5)
    fast = FastAgent(a)
    obs = _obs_batch(3, seed=7)
    rng = np.random.default_rng(0)
    with torch.no_grad():
        e_o, feat = a.encode(obs)
        for i in range(3):
            fe, ff = fast.encode(obs[i].numpy())
            assert np.allclose(fe, e_o[i].numpy(), atol=1e-5)
            assert np.allclose(ff, feat[i].numpy(), atol=1e-5)
            h_m = rng.standard_normal(H_MEM).astype(np.float32)
            if a.asks:
                sampled, logps, ents, h_q, e_q = fast.ask(fe, h_m, np.random.default_rng(i))
                t_eq, t_hq, t_lp, t_ent = a.question_features(e_o[i:i + 1], torch.from_numpy(h_m)[None], [sampled])
                assert float(t_lp[0]) == pytest.approx(sum(logps), abs=1e-4)
                assert float(t_ent[0]) == pytest.approx(np.mean(ents), abs=1e-4)
                assert np.allclose(h_q, t_hq[0].numpy(), atol=1e-5)
                assert np.allclose(e_q, t_eq[0].numpy(), atol=1e-6)
                eta = np.array([1, 0], dtype=np.float32)
            else:
                e_q, eta, h_q = np.zeros(E_WORD, np.float32), np.zeros(ETA, np.float32), None
            logits, value = fast.act(fe, e_q, eta, h_q, h_m, ff)
            t_logits, t_v = a.act(e_o[i:i + 1], torch.from_numpy(e_q)[None], torch.from_numpy(eta)[None],
                                  None if h_q is None else torch.from_numpy(h_q)[None],
                                  torch.from_numpy(h_m)[None], feat[i:i + 1])
            assert np.allclose(logits, t_logits[0].numpy(), atol=1e-5)
            assert value == pytest.approx(float(t_v[0]), abs=1e-5)
            h2, c2 = fast.memory(h_m, np.zeros(H_MEM, np.float32), fe, e_q, eta, 4)
            st = a.memory_update(AgentState(torch.from_numpy(h_m)[None], torch.zeros(1, H_MEM)), e_o[i:i + 1],
                                 torch.from_numpy(e_q)[None], torch.from_numpy(eta)[None], 4)
            assert np.allclose(h2, st.h[0].numpy(), atol=1e-5)


# -- finite-difference checks through the networks ------------------------------------


def _double_agent(kind, seed=0):
    a = Agent(kind, seed=seed).double()
    return a


@pytest.mark.parametrize("seed", range(5))
def test_encoder_gradient_fd(seed):
    a = _double_agent("main", seed)
    obs = _obs_batch(2, seed)
    R = torch.randn(2, E_OBS, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    params = list(a.encoder.parameters())
    err = fd_directional_error(lambda: (a.encode(obs)[0] * R).sum(), params, seed)
    assert err < FD_RTOL


@pytest.mark.parametrize("seed", range(5))
def test_memory_gradient_fd(seed):
    a = _double_agent("main", seed)
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, MEM_IN, dtype=torch.float64, generator=g)
    h, c = torch.randn(1, H_MEM, dtype=torch.float64, generator=g), torch.zeros(1, H_MEM, dtype=torch.float64)
    R = torch.randn(1, H_MEM, dtype=torch.float64, generator=g)
    params = list(a.memory.parameters())
    err = fd_directional_error(lambda: (a.memory(x, h, c)[0] * R).sum(), params, seed)
    assert err < FD_RTOL


@pytest.mark.parametrize("kind", ["main", "film", "baseline"])
@pytest.mark.parametrize("seed", range(3))
def test_policy_heads_gradient_fd(kind, seed):
    a = _double_agent(kind, seed)
    if kind == "film":
        with torch.no_grad():  # move the FiLM generator off its zero init
            a.film.generator.W.normal_(0, 0.05, generator=torch.Generator().manual_seed(seed))
    g = torch.Generator().manual_seed(seed)
    obs = _obs_batch(2, seed)
    h_m = torch.randn(2, H_MEM, dtype=torch.float64, generator=g)
    e_q = torch.randn(2, E_WORD, dtype=torch.float64, generator=g)
    eta = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    h_q = torch.randn(2, H_LM, dtype=torch.float64, generator=g)

    def loss():
        e_o, feat = a.encode(obs)
        logits, v = a.act(e_o, e_q, eta, h_q, h_m, feat)
        return torch.log_softmax(logits, -1)[:, 2].sum() + (v ** 2).sum()

    params = [p for p in a.parameters() if p.requires_grad and not (a.asks and p is a.lm.embedding)]
    assert fd_directional_error(loss, params, seed) < FD_RTOL


@pytest.mark.parametrize("seed", range(3))
def test_whole_replay_gradient_fd(seed):
    a = _double_agent("main", seed)
    a.freeze_embedding(True)
    rng = np.random.default_rng(seed)
    T = 4
    obs = _obs_batch(T, seed)
    h0 = torch.randn(1, H_MEM, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    sampled = [list(rng.integers(2, orc.VOCAB_SIZE, size=int(rng.integers(1, 5)))) + [orc.EOS_ID] for _ in range(T)]
    eta = torch.tensor([[1, 1], [0, 1], [1, 0], [0, 0]], dtype=torch.float64)
    actions = torch.tensor([0, 2, 5, 1])

    def loss():
        rep = a.replay(obs, h0, sampled, eta, actions)
        return (torch.log_softmax(rep.action_logits, -1).gather(1, actions[:, None]).sum()
                + rep.values.sum() + rep.q_logp.sum() + rep.q_entropy.sum())

    params = [p for p in a.parameters() if p.requires_grad]
    assert fd_directional_error(loss, params, seed) < FD_RTOL
