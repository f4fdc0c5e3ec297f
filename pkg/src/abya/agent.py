"""Agent networks: observation CNN, memory LSTM, question LM, action policy.

Three model kinds share the encoder and memory:

* ``main``     - asks a question each step; the policy sees [e^o, e^q, eta, h^q, h^m].
* ``film``     - same questions, but the QA encoding modulates five residual
                 conv blocks (FiLM) and the policy sees [e^o_film, h^m].
* ``baseline`` - no question policy; the policy sees [e^o, h^m].

The step-wise methods (``encode``, ``ask``, ``act``, ``memory_update``) are
the torch reference for one step; collection itself runs on the numpy
mirror in ``fastpath``. The update re-runs the whole episode at once with
``replay``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .gridworld import N_ACTIONS, N_COLORS, N_KINDS, N_STATES, VIEW
from .oracle import EOS_ID, SOS_ID, VOCAB_SIZE

OBS_EMB = 8
CONV1, CONV2 = 16, 32
E_OBS = 64
E_WORD = 32
H_LM = 128
H_MEM = 128
H_POLICY = 128
ETA = 2
N_RESBLOCKS = 5
QUESTION_CAP = 8

MEM_IN = E_OBS + E_WORD + ETA + N_ACTIONS  # 105
QA_DIM = E_WORD + ETA + H_LM               # FiLM conditioning input
_NEG = -1e9                                # logit mask for <sos>


class ModelKind(str, Enum):
    MAIN = "main"
    FILM = "film"
    BASELINE = "baseline"


def _uniform(gen: torch.Generator, shape, fan_in: int) -> nn.Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(shape).uniform_(-bound, bound, generator=gen))


def _zeros(shape) -> nn.Parameter:
    return nn.Parameter(torch.zeros(shape))


class Linear(nn.Module):
    def __init__(self, gen, n_in: int, n_out: int, scale: float = 1.0):
        super().__init__()
        self.W = _uniform(gen, (n_out, n_in), n_in)
        with torch.no_grad():
            self.W.mul_(scale)
        self.b = _zeros(n_out)

    def forward(self, x):
        return ad.linear(x, self.W, self.b)


class LSTMCell(nn.Module):
    def __init__(self, gen, n_in: int, hidden: int):
        super().__init__()
        self.W_ih = _uniform(gen, (4 * hidden, n_in), hidden)
        self.W_hh = _uniform(gen, (4 * hidden, hidden), hidden)
        self.b = _uniform(gen, (4 * hidden,), hidden)

    def forward(self, x, h, c):
        return ad.lstm_cell(x, h, c, self.W_ih, self.W_hh, self.b)


class Conv(nn.Module):
    def __init__(self, gen, c_in: int, c_out: int, padding: int = 0):
        super().__init__()
        self.K = _uniform(gen, (c_out, c_in, 3, 3), c_in * 9)
        self.b = _zeros(c_out)
        self.padding = padding

    def forward(self, x):
        return ad.conv2d(x, self.K, self.b, stride=1, padding=self.padding)


class ObsEncoder(nn.Module):
    """Per-channel code embeddings -> two 3x3 convs -> linear to 64."""

    def __init__(self, gen):
        super().__init__()
        self.kind = nn.Parameter(torch.randn(N_KINDS, OBS_EMB, generator=gen))
        self.color = nn.Parameter(torch.randn(N_COLORS, OBS_EMB, generator=gen))
        self.state = nn.Parameter(torch.randn(N_STATES, OBS_EMB, generator=gen))
        self.conv1 = Conv(gen, 3 * OBS_EMB, CONV1)
        self.conv2 = Conv(gen, CONV1, CONV2)
        side = VIEW - 4
        self.fc = Linear(gen, CONV2 * side * side, E_OBS)

    def features(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.dim() != 4 or tuple(obs.shape[1:]) != (VIEW, VIEW, 3):
            raise ad.DimensionError(f"observation dims {list(obs.shape)} vs [N, {VIEW}, {VIEW}, 3]")
        x = torch.cat([
            ad.embedding_lookup(obs[..., 0], self.kind),
            ad.embedding_lookup(obs[..., 1], self.color),
            ad.embedding_lookup(obs[..., 2], self.state),
        ], dim=-1).permute(0, 3, 1, 2)
        x = torch.relu(self.conv1(x))
        return torch.relu(self.conv2(x))

    def head(self, feat: torch.Tensor) -> torch.Tensor:
        return torch.relu(self.fc(feat.flatten(1)))

    def forward(self, obs):
        return self.head(self.features(obs))


class FilmStack(nn.Module):
    """Five residual conv blocks whose activations are affinely modulated."""

    def __init__(self, gen):
        super().__init__()
        self.blocks = nn.ModuleList(Conv(gen, CONV2, CONV2, padding=1) for _ in range(N_RESBLOCKS))
        # zero-initialised so every block starts as the identity affine map
        self.generator = Linear(gen, QA_DIM, N_RESBLOCKS * 2 * CONV2, scale=0.0)
        side = VIEW - 4
        self.fc = Linear(gen, CONV2 * side * side, E_OBS)

    def affine(self, qa: torch.Tensor):
        out = self.generator(qa).view(-1, N_RESBLOCKS, 2, CONV2)
        return 1.0 + out[:, :, 0], out[:, :, 1]

    def forward(self, feat, qa=None, gammas=None, betas=None):
        if gammas is None:
            if qa is None or qa.shape[-1] != QA_DIM:
                raise ad.DimensionError(f"film qa dims {None if qa is None else list(qa.shape)} vs [N, {QA_DIM}]")
            gammas, betas = self.affine(qa)
        x = feat
        for k, block in enumerate(self.blocks):
            a = block(x)
            a = gammas[:, k, :, None, None] * a + betas[:, k, :, None, None]
            x = x + torch.relu(a)
        return torch.relu(self.fc(x.flatten(1)))


class QuestionLM(nn.Module):
    def __init__(self, gen):
        super().__init__()
        self.embedding = nn.Parameter(torch.randn(VOCAB_SIZE, E_WORD, generator=gen))
        self.init = Linear(gen, E_OBS + H_MEM, H_LM)
        self.cell = LSTMCell(gen, E_WORD, H_LM)
        self.out = Linear(gen, H_LM, VOCAB_SIZE)

    def initial(self, ctx: torch.Tensor):
        h = torch.tanh(self.init(ctx))
        return h, torch.zeros_like(h)

    def step(self, token_ids: torch.Tensor, h, c):
        x = ad.embedding_lookup(token_ids, self.embedding)
        h, c = self.cell(x, h, c)
        logits = self.out(h)
        logits = logits.index_fill(-1, torch.tensor([SOS_ID]), _NEG)
        return logits, h, c

    def embed_question(self, question: Sequence[int]) -> torch.Tensor:
        if not question:
            return torch.zeros(E_WORD)
        return ad.embedding_lookup(torch.as_tensor(list(question)), self.embedding).mean(0)

    def embed_questions(self, questions: Sequence[Sequence[int]]) -> torch.Tensor:
        """Mean-pooled word embeddings per question (zeros for empty), (B, E_WORD)."""
        B = len(questions)
        L = max((len(q) for q in questions), default=0)
        if L == 0:
            return torch.zeros(B, E_WORD)
        ids = torch.zeros(B, L, dtype=torch.long)
        mask = torch.zeros(B, L)
        for i, q in enumerate(questions):
            ids[i, :len(q)] = torch.as_tensor(list(q), dtype=torch.long)
            mask[i, :len(q)] = 1.0
        summed = (ad.embedding_lookup(ids, self.embedding) * mask[..., None]).sum(1)
        return summed / mask.sum(1, keepdim=True).clamp_min(1.0)


class Policy(nn.Module):
    def __init__(self, gen, n_in: int):
        super().__init__()
        self.fc1 = Linear(gen, n_in, H_POLICY)
        self.fc2 = Linear(gen, H_POLICY, H_POLICY)
        self.action = Linear(gen, H_POLICY, N_ACTIONS, scale=0.01)
        self.value = Linear(gen, H_POLICY, 1)

    def forward(self, x):
        z = torch.relu(self.fc2(torch.relu(self.fc1(x))))
        return self.action(z), self.value(z).squeeze(-1)


@dataclass
class AgentState:
    h: torch.Tensor          # (1, H_MEM)
    c: torch.Tensor          # (1, H_MEM)


@dataclass
class QuestionRollout:
    sampled: List[int]           # includes the terminating <eos> when sampled
    logps: List[float]
    entropies: List[float]
    h_q: torch.Tensor            # (1, H_LM) hidden that emitted the last token
    e_q: torch.Tensor            # (1, E_WORD)

    @property
    def question(self) -> List[int]:
        return self.sampled[:-1] if self.sampled and self.sampled[-1] == EOS_ID else list(self.sampled)

    @property
    def logp(self) -> float:
        return float(sum(self.logps))


@dataclass
class Replay:
    action_logits: torch.Tensor   # (T, 7)
    values: torch.Tensor          # (T,)
    q_logp: Optional[torch.Tensor]        # (T,) sum of token log-probs
    q_entropy: Optional[torch.Tensor]     # (T,) mean token entropy
    token_logps: Optional[torch.Tensor]   # (T, L) zero-padded
    e_o: torch.Tensor             # (T, E_OBS)
    feat: torch.Tensor            # (T, CONV2, 3, 3)
    h_prev: torch.Tensor          # (T, H_MEM) memory entering each step


def group_of(name: str) -> str:
    top = name.split(".", 1)[0]
    return {"encoder": ad.ENCODER, "film": ad.ENCODER, "memory": ad.MEMORY,
            "lm": ad.QUESTION, "policy": ad.ACTION}[top]


class Agent(nn.Module):
    def __init__(self, kind: ModelKind | str = ModelKind.MAIN, seed: int = 0):
        super().__init__()
        self.kind = ModelKind(kind)
        gen = torch.Generator().manual_seed(seed)
        self.encoder = ObsEncoder(gen)
        self.memory = LSTMCell(gen, MEM_IN, H_MEM)
        if self.kind is not ModelKind.BASELINE:
            self.lm = QuestionLM(gen)
        if self.kind is ModelKind.FILM:
            self.film = FilmStack(gen)
        n_in = E_OBS + H_MEM
        if self.kind is ModelKind.MAIN:
            n_in += E_WORD + ETA + H_LM
        self.policy = Policy(gen, n_in)

    @property
    def asks(self) -> bool:
        return self.kind is not ModelKind.BASELINE

    def param_set(self) -> ad.ParamSet:
        frozen = {"lm.embedding"} if self.asks and not self.lm.embedding.requires_grad else set()
        return ad.ParamSet.from_module(self, group_of, frozen)

    def freeze_embedding(self, frozen: bool = True):
        if self.asks:
            self.lm.embedding.requires_grad_(not frozen)

    # -- step-wise interface -------------------------------------------------

    def encode(self, obs: torch.Tensor):
        """Returns (e^o, conv features) for a batch of observations."""
        feat = self.encoder.features(obs)
        return self.encoder.head(feat), feat

    def encode_observation(self, obs) -> torch.Tensor:
        obs = torch.as_tensor(np.asarray(obs), dtype=torch.long)
        if obs.dim() == 3:
            obs = obs.unsqueeze(0)
        return self.encoder(obs)

    def init_episode(self, rng: np.random.Generator) -> AgentState:
        h = torch.from_numpy(rng.standard_normal((1, H_MEM)).astype(np.float32))
        return AgentState(h, torch.zeros(1, H_MEM))

    def memory_input(self, e_o, e_q, eta, action_onehot):
        return torch.cat([e_o, e_q, eta, action_onehot], dim=-1)

    def memory_update(self, state: AgentState, e_o, e_q, eta, action: int) -> AgentState:
        onehot = torch.zeros(1, N_ACTIONS)
        onehot[0, action] = 1.0
        x = self.memory_input(e_o, e_q, eta, onehot)
        if x.shape[-1] != MEM_IN:
            raise ad.DimensionError(f"memory input dims {list(x.shape)} vs [1, {MEM_IN}]")
        h, c = self.memory(x, state.h, state.c)
        return AgentState(h, c)

    @torch.no_grad()
    def ask(self, e_o, h_m, rng: np.random.Generator, cap: int = QUESTION_CAP) -> QuestionRollout:
        if not self.asks:
            raise RuntimeError("baseline agent has no question policy")
        h, c = self.lm.initial(torch.cat([e_o, h_m], dim=-1))
        tok = torch.tensor([SOS_ID])
        sampled, logps, ents = [], [], []
        h_q = h
        for _ in range(cap):
            logits, h, c = self.lm.step(tok, h, c)
            logp = ad.log_softmax(logits)[0]
            p = logp.exp()
            ents.append(float(-(p * logp).sum()))
            idx, _ = ad.sample_categorical(p.double().numpy() / p.double().sum().item(), rng)
            sampled.append(idx)
            logps.append(float(logp[idx]))
            h_q = h
            if idx == EOS_ID:
                break
            tok = torch.tensor([idx])
        ro = QuestionRollout(sampled, logps, ents, h_q, None)
        ro.e_q = self.lm.embed_question(ro.question).unsqueeze(0)
        return ro

    @torch.no_grad()
    def sample_questions(self, e_o, h_m, rng: np.random.Generator, cap: int = QUESTION_CAP) -> List[List[int]]:
        """Sample one question per row of the batched context, in parallel."""
        B = e_o.shape[0]
        h, c = self.lm.initial(torch.cat([e_o, h_m], dim=-1))
        tok = torch.full((B,), SOS_ID, dtype=torch.long)
        out: List[List[int]] = [[] for _ in range(B)]
        alive = np.ones(B, dtype=bool)
        for _ in range(cap):
            logits, h, c = self.lm.step(tok, h, c)
            p = ad.softmax(logits.double()).numpy()
            cdf = np.cumsum(p, axis=1)
            u = rng.random(B)[:, None] * cdf[:, -1:]
            idx = np.minimum((cdf <= u).sum(1), p.shape[1] - 1)
            for b in np.flatnonzero(alive):
                out[b].append(int(idx[b]))
            alive &= idx != EOS_ID
            if not alive.any():
                break
            tok = torch.from_numpy(idx)
        return out

    def question_features(self, e_o, h_m, sampled: Sequence[Sequence[int]]):
        """(e^q, h^q, sum log-prob, mean entropy) of given questions, with gradients."""
        q_logp, q_ent, _, h_q = self._replay_questions(e_o, h_m, sampled)
        e_q = self.lm.embed_questions([_strip_eos(s) for s in sampled])
        return e_q, h_q, q_logp, q_ent

    def act(self, e_o, e_q=None, eta=None, h_q=None, h_m=None, feat=None):
        """Returns (action logits, value)."""
        if self.kind is ModelKind.MAIN:
            x = torch.cat([e_o, e_q, eta, h_q, h_m], dim=-1)
        elif self.kind is ModelKind.FILM:
            x = torch.cat([self.film_condition(feat, torch.cat([e_q, eta, h_q], dim=-1)), h_m], dim=-1)
        else:
            x = torch.cat([e_o, h_m], dim=-1)
        if x.shape[-1] != self.policy.fc1.W.shape[1]:
            raise ad.DimensionError(f"policy input dims {list(x.shape)} vs [N, {self.policy.fc1.W.shape[1]}]")
        return self.policy(x)

    def film_condition(self, feat, qa=None, gammas=None, betas=None):
        if self.kind is not ModelKind.FILM:
            raise RuntimeError("film_condition needs a FiLM agent")
        return self.film(feat, qa, gammas, betas)

    # -- whole-episode replay ------------------------------------------------

    def replay(self, obs: torch.Tensor, h0: torch.Tensor, sampled: Sequence[Sequence[int]],
               eta: torch.Tensor, actions: torch.Tensor) -> Replay:
        """Teacher-forced re-run of an episode with gradients.

        obs (T, 7, 7, 3); h0 (1, H_MEM) initial memory; sampled[t] the LM's
        sampled tokens at step t; eta (T, 2); actions (T,).
        """
        T = obs.shape[0]
        e_o, feat = self.encode(obs)
        if self.asks:
            e_q = self.lm.embed_questions([_strip_eos(s) for s in sampled])
        else:
            e_q = torch.zeros(T, E_WORD)
            eta = torch.zeros(T, ETA)
        onehot = torch.nn.functional.one_hot(actions, N_ACTIONS).float()
        mem_in = self.memory_input(e_o, e_q, eta, onehot)
        m = self.memory
        hs = ad.lstm_sequence(mem_in, h0, torch.zeros_like(h0), m.W_ih, m.W_hh, m.b)
        h_prev = torch.cat([h0, hs[:-1]], dim=0)

        q_logp = q_ent = tok_logps = h_q = None
        if self.asks:
            q_logp, q_ent, tok_logps, h_q = self._replay_questions(e_o, h_prev, sampled)
        logits, values = self.act(e_o, e_q, eta, h_q, h_prev, feat)
        return Replay(logits, values, q_logp, q_ent, tok_logps, e_o, feat, h_prev)

    def _replay_questions(self, e_o, h_prev, sampled):
        T = e_o.shape[0]
        lengths = torch.tensor([len(s) for s in sampled])
        L = int(lengths.max())
        targets = torch.full((T, L), EOS_ID, dtype=torch.long)
        for t, s in enumerate(sampled):
            targets[t, :len(s)] = torch.tensor(s)
        inputs = torch.cat([torch.full((T, 1), SOS_ID, dtype=torch.long), targets[:, :-1]], dim=1)
        h, c = self.lm.initial(torch.cat([e_o, h_prev], dim=-1))
        logps, ents, hs = [], [], []
        for i in range(L):
            logits, h, c = self.lm.step(inputs[:, i], h, c)
            lp = ad.log_softmax(logits)
            logps.append(lp.gather(1, targets[:, i:i + 1]).squeeze(1))
            ents.append(-(lp.exp() * lp).sum(-1))
            hs.append(h)
        mask = (torch.arange(L)[None, :] < lengths[:, None]).float()
        tok_logps = torch.stack(logps, 1) * mask
        ent = (torch.stack(ents, 1) * mask).sum(1) / lengths
        h_q = torch.stack(hs, 1)[torch.arange(T), lengths - 1]
        return tok_logps.sum(1), ent, tok_logps, h_q


def _strip_eos(s: Sequence[int]) -> List[int]:
    s = list(s)
    return s[:-1] if s and s[-1] == EOS_ID else s


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
