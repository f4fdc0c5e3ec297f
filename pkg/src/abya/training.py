"""Episode collection, LM pretraining, GAE and the per-episode update."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import autodiff as ad
from . import gridworld as gw
from . import oracle as orc
from .agent import ETA, E_WORD, H_MEM, Agent, ModelKind, Replay
from .fastpath import FastAgent, log_softmax_np
from .mi import mi_augmented_loss, mi_for_episode

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    model: str = "main"
    env: str = "MultiRoom-N2-S4"
    oracle: str = "train"
    alpha: float = 0.0005
    eps_clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    c1: float = 1.0
    c2: float = 0.1
    c3: float = 0.25
    c4: float = 1.0
    c5: float = 0.2
    mi_enabled: bool = False
    mi_samples: int = 8
    mi_weight: float = 0.0
    episodes: int = 30_000
    seed: int = 0
    out_dir: str = "runs/out"
    update_epochs: int = 1
    transcript_every: int = 100
    # "until convergence": stop once ma100 moves < tol over `window` episodes
    converge_window: int = 500
    converge_tol: float = 0.01
    min_episodes: int = 2000

    @property
    def kind(self) -> ModelKind:
        return ModelKind(self.model)

    @property
    def mode(self) -> orc.Mode:
        return orc.Mode(self.oracle)


# Table of tuned hyperparameters per model kind
MODEL_DEFAULTS: Dict[str, dict] = {
    "main": dict(alpha=0.0005, eps_clip=0.2, gamma=0.99, lam=0.95, c1=1.0, c2=0.1, c3=0.25, c4=1.0, c5=0.2),
    "film": dict(alpha=0.0001, eps_clip=0.15, gamma=0.99, lam=0.95, c1=1.0, c2=0.1, c3=0.25, c4=1.0, c5=0.5),
    "baseline": dict(alpha=0.001, eps_clip=0.2, gamma=0.99, lam=0.95, c1=1.0, c2=0.1, c3=0.0, c4=0.0, c5=0.0),
}


def default_config(model: str = "main", **overrides) -> TrainConfig:
    if model not in MODEL_DEFAULTS:
        raise ValueError(f"unknown model {model!r}")
    return TrainConfig(model=model, **{**MODEL_DEFAULTS[model], **overrides})


# ---------------------------------------------------------------------------
# episode buffer


@dataclass
class EpisodeBuffer:
    h0: Optional[torch.Tensor] = None
    obs: List[np.ndarray] = field(default_factory=list)
    sampled: List[List[int]] = field(default_factory=list)
    q_logp: List[float] = field(default_factory=list)
    q_entropy: List[float] = field(default_factory=list)
    verdicts: List[Optional[orc.Verdict]] = field(default_factory=list)
    eta: List[tuple] = field(default_factory=list)
    r_q: List[float] = field(default_factory=list)
    actions: List[int] = field(default_factory=list)
    a_logp: List[float] = field(default_factory=list)
    a_entropy: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    r_e: List[float] = field(default_factory=list)
    states: List[gw.WorldState] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.actions)

    def clear(self):
        for name, value in vars(self).items():
            if isinstance(value, list):
                value.clear()
        self.h0 = None

    def check(self):
        n = len(self.actions)
        for name in ("obs", "eta", "r_q", "a_logp", "values", "r_e"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"buffer field {name} has {len(getattr(self, name))} entries, expected {n}")


# ---------------------------------------------------------------------------
# advantage and return estimation


def compute_gae(rewards: Sequence[float], values: Sequence[float], gamma: float, lam: float):
    """GAE by reverse scan, bootstrapping V = 0 past the last step.

    Returns (advantages, value targets) with target = advantage + value.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.size == 0:
        raise ValueError("compute_gae: empty episode")
    if r.shape != v.shape:
        raise ValueError(f"compute_gae: rewards dims {list(r.shape)} vs values dims {list(v.shape)}")
    v_next = np.append(v[1:], 0.0)
    delta = r + gamma * v_next - v
    adv = np.zeros_like(delta)
    acc = 0.0
    for t in range(len(delta) - 1, -1, -1):
        acc = delta[t] + gamma * lam * acc
        adv[t] = acc
    return adv, adv + v


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """G_t = sum_{j >= t} gamma^(j - t) r_j, where r_j follows the action at step j."""
    r = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


# ---------------------------------------------------------------------------
# losses (both are objectives to maximise)


def clipped_surrogate(ratio: torch.Tensor, adv: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.min(ratio * adv, torch.clamp(ratio, 1.0 - eps, 1.0 + eps) * adv)


def action_loss(logits, actions, old_logp, adv, values, targets, eps, c1, c2):
    """Mean over steps of clip - c1 * huber(V - target) + c2 * H[pi_a]."""
    logp = ad.log_softmax(logits).gather(1, actions[:, None]).squeeze(1)
    ratio = torch.exp(logp - old_logp)
    clip = clipped_surrogate(ratio, adv, eps)
    vf = ad.huber(values - targets)
    ent = ad.entropy(logits)
    total = (clip - c1 * vf + c2 * ent).mean()
    return total, {"clip": float(clip.mean().detach()), "vf": float(vf.mean().detach()), "entropy": float(ent.mean().detach())}


def question_loss(q_logp, q_entropy, r_q, returns, c3, c4, c5):
    """Mean over steps of (c3 r^q + c4 G) ln pi_q + c5 H[pi_q]."""
    weight = c3 * r_q + c4 * returns
    return (weight * q_logp + c5 * q_entropy).mean()


# ---------------------------------------------------------------------------
# collection


def collect_episode(agent: Agent, state: gw.WorldState, mode: orc.Mode,
                    rng_agent: np.random.Generator, rng_oracle: np.random.Generator,
                    keep_states: bool = False, fast: Optional[FastAgent] = None) -> EpisodeBuffer:
    """Run one episode with the current weights and record every step."""
    fast = fast if fast is not None else FastAgent(agent)
    buf = EpisodeBuffer()
    h = rng_agent.standard_normal(H_MEM).astype(np.float32)
    c = np.zeros(H_MEM, dtype=np.float32)
    buf.h0 = torch.from_numpy(h.copy()).unsqueeze(0)
    no_q, no_eta = np.zeros(E_WORD, dtype=np.float32), np.zeros(ETA, dtype=np.float32)
    done = False
    while not done:
        obs = gw.observe(state)
        e_o, feat = fast.encode(obs)
        if fast.asks:
            sampled, logps, ents, h_q, e_q = fast.ask(e_o, h, rng_agent)
            question = sampled[:-1] if sampled[-1] == orc.EOS_ID else sampled
            ans = orc.answer(question, state, mode, rng_oracle)
            eta = np.asarray(ans.eta, dtype=np.float32)
            logits, value = fast.act(e_o, e_q, eta, h_q, h, feat)
            buf.sampled.append(sampled)
            buf.q_logp.append(float(sum(logps)))
            buf.q_entropy.append(float(np.mean(ents)))
            buf.verdicts.append(ans.verdict)
            buf.eta.append(ans.eta)
            buf.r_q.append(ans.reward)
        else:
            e_q, eta = no_q, no_eta
            logits, value = fast.act(e_o, None, None, None, h, feat)
            buf.eta.append((0, 0))
            buf.r_q.append(0.0)
            buf.verdicts.append(None)
        logp = log_softmax_np(logits)
        p = np.exp(logp)
        cdf = np.cumsum(p)
        action = min(int(np.searchsorted(cdf, rng_agent.random() * cdf[-1], side="right")), len(p) - 1)
        if keep_states:
            buf.states.append(state)
        buf.obs.append(obs)
        buf.actions.append(action)
        buf.a_logp.append(float(logp[action]))
        buf.a_entropy.append(float(-(p * logp).sum()))
        buf.values.append(value)
        state, r, done = gw.step(state, action)
        buf.r_e.append(r)
        h, c = fast.memory(h, c, e_o, e_q, eta, action)
    return buf


def replay_buffer(agent: Agent, buf: EpisodeBuffer) -> Replay:
    obs = torch.from_numpy(np.stack(buf.obs))
    eta = torch.tensor(buf.eta, dtype=torch.float32)
    actions = torch.tensor(buf.actions, dtype=torch.long)
    return agent.replay(obs, buf.h0, buf.sampled, eta, actions)


# ---------------------------------------------------------------------------
# update


@dataclass
class UpdateResult:
    ok: bool
    loss_a: float = float("nan")
    loss_q: float = float("nan")
    mi: float = float("nan")
    parts: dict = field(default_factory=dict)


def episode_loss(agent: Agent, buf: EpisodeBuffer, cfg: TrainConfig, rep: Replay,
                 old_logp: torch.Tensor, adv: torch.Tensor, targets: torch.Tensor,
                 returns: torch.Tensor, rng: Optional[np.random.Generator] = None):
    actions = torch.tensor(buf.actions, dtype=torch.long)
    la, parts = action_loss(rep.action_logits, actions, old_logp, adv, rep.values, targets,
                            cfg.eps_clip, cfg.c1, cfg.c2)
    total = la
    lq = None
    mi_val = float("nan")
    if agent.asks:
        r_q = torch.tensor(buf.r_q, dtype=torch.float32)
        lq = question_loss(rep.q_logp, rep.q_entropy, r_q, returns, cfg.c3, cfg.c4, cfg.c5)
        total = total + lq
        if cfg.mi_enabled and cfg.mi_weight != 0.0:
            mi = mi_for_episode(agent, rep, buf, cfg.mi_samples, cfg.mode, rng)
            total = mi_augmented_loss(total, mi, cfg.mi_weight)
            mi_val = float(mi.detach())
    return total, la, lq, mi_val, parts


def episode_update(agent: Agent, params: ad.ParamSet, adam: ad.AdamState, buf: EpisodeBuffer,
                   cfg: TrainConfig, rng: Optional[np.random.Generator] = None) -> UpdateResult:
    """One gradient step on -(L^a + L^q) for the whole episode; empties the buffer."""
    if len(buf) == 0:
        raise ValueError("episode_update: empty buffer")
    buf.check()
    try:
        rep = replay_buffer(agent, buf)
        actions = torch.tensor(buf.actions, dtype=torch.long)
        values = rep.values.detach()
        # the first replay runs at the collection parameters: it *is* pi_old
        old_logp = ad.log_softmax(rep.action_logits.detach()).gather(1, actions[:, None]).squeeze(1)
        adv_np, tgt_np = compute_gae(buf.r_e, values.double().numpy(), cfg.gamma, cfg.lam)
        adv = torch.tensor(adv_np, dtype=torch.float32)
        targets = torch.tensor(tgt_np, dtype=torch.float32)
        returns = torch.tensor(discounted_returns(buf.r_e, cfg.gamma), dtype=torch.float32)
        result = UpdateResult(ok=True)
        for epoch in range(cfg.update_epochs):
            if epoch > 0:
                rep = replay_buffer(agent, buf)
            total, la, lq, mi_val, parts = episode_loss(agent, buf, cfg, rep, old_logp, adv, targets, returns, rng)
            grads = ad.gradients(-total, params.params)
            ad.adam_step(params, grads, adam, cfg.alpha)
            if epoch == 0:
                lq_val = float(lq.detach()) if lq is not None else float("nan")
                result = UpdateResult(True, float(la.detach()), lq_val, mi_val, parts)
        return result
    except ad.NonFiniteError as exc:
        log.warning("skipping update: %s", exc)
        return UpdateResult(ok=False)
    finally:
        buf.clear()


# ---------------------------------------------------------------------------
# language-model pretraining


def _lm_corpus_ce(agent: Agent, sentences: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
    """Mean per-token teacher-forced cross-entropy of the corpus (targets w_1..<eos>)."""
    lm = agent.lm
    h, c = lm.initial(ctx)
    losses = []
    for i in range(sentences.shape[1] - 1):
        logits, h, c = lm.step(sentences[:, i], h, c)
        losses.append(ad.log_softmax(logits).gather(1, sentences[:, i + 1:i + 2]).squeeze(1))
    return -torch.stack(losses, 1).mean()


@dataclass
class PretrainResult:
    history: List[float]
    epochs: int
    final_ce: float
    converged: bool


def pretrain_lm(agent: Agent, seed: int = 0, epochs: int = 200, target_ce: float = 0.3,
                batch_size: int = 12, lr: float = 0.005) -> PretrainResult:
    """Teacher-forced next-token training on every grammatical sentence.

    Each batch pairs sentences with random N(0, I) context vectors so the
    model learns to stay grammatical whatever the initial hidden state.
    Leaves the word embedding frozen afterwards.
    """
    if not agent.asks:
        raise ValueError("baseline agent has no language model")
    corpus = torch.tensor(orc.enumerate_grammar(), dtype=torch.long)
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    rng = np.random.default_rng(seed)
    ctx_dim = agent.lm.init.W.shape[1]
    eval_ctx = torch.from_numpy(rng.standard_normal((len(corpus), ctx_dim)).astype(np.float32))
    agent.freeze_embedding(False)
    names = [n for n, _ in agent.named_parameters() if n.startswith("lm.")]
    params = ad.ParamSet({n: dict(agent.named_parameters())[n] for n in names},
                         {n: ad.QUESTION for n in names})
    adam = ad.AdamState.zeros_like(params.params)
    history: List[float] = []
    converged = False
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(corpus), batch_size):
            idx = torch.from_numpy(order[start:start + batch_size])
            ctx = torch.from_numpy(rng.standard_normal((len(idx), ctx_dim)).astype(np.float32))
            loss = _lm_corpus_ce(agent, corpus[idx], ctx)
            ad.adam_step(params, ad.gradients(loss, params.params), adam, lr)
        with torch.no_grad():
            ce = float(_lm_corpus_ce(agent, corpus, eval_ctx))
        history.append(ce)
        if ce <= target_ce:
            converged = True
            break
    agent.freeze_embedding(True)
    if not converged:
        log.info("LM pretraining hit the epoch cap; final cross-entropy %.4f", history[-1])
    return PretrainResult(history, len(history), history[-1], converged)


def lm_corpus_ce(agent: Agent, seed: int = 0) -> float:
    corpus = torch.tensor(orc.enumerate_grammar(), dtype=torch.long)
    rng = np.random.default_rng(seed)
    ctx = torch.from_numpy(rng.standard_normal((len(corpus), agent.lm.init.W.shape[1])).astype(np.float32))
    with torch.no_grad():
        return float(_lm_corpus_ce(agent, corpus, ctx))
