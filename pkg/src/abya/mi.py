"""Monte-Carlo estimate of the mutual information between actions and questions.

I(a; q) = H(a) - H(a | q). Sampling N questions from the question policy
already weights them by p(q), so the marginal is the plain average

    p(a) ~= (1/N) sum_n p(a | q_n)

and the estimate is H(mean_n p(a|q_n)) - mean_n H(p(a|q_n)). By Jensen it is
never negative, and it is bounded by ln(#actions).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
import torch

from . import oracle as orc

if TYPE_CHECKING:
    from .agent import Agent, Replay

_TINY = 1e-12


@dataclass
class MiEstimate:
    value: torch.Tensor       # nats, differentiable w.r.t. the action policy
    n: int
    marginal: torch.Tensor    # p_hat(a)

    def __float__(self):
        return float(self.value.detach())


def _entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(_TINY))).sum(-1)


def mi_from_conditionals(cond: torch.Tensor) -> MiEstimate:
    """``cond`` is (N, A): p(a | q_n) for N sampled questions."""
    if cond.dim() != 2 or cond.shape[0] < 2:
        raise ValueError(f"need at least 2 conditionals, got dims {list(cond.shape)}")
    marginal = cond.mean(0)
    value = _entropy(marginal) - _entropy(cond).mean()
    return MiEstimate(value, cond.shape[0], marginal)


def _answers(sampled, state, mode: orc.Mode, rng) -> torch.Tensor:
    rows = []
    for s in sampled:
        q = s[:-1] if s and s[-1] == orc.EOS_ID else s
        rows.append(orc.answer(q, state, mode, rng).eta)
    return torch.tensor(rows, dtype=torch.float32)


def estimate_mi(agent: "Agent", e_o: torch.Tensor, h_m: torch.Tensor, state, n: int,
                rng: np.random.Generator, mode: orc.Mode = orc.Mode.TRAIN,
                feat: Optional[torch.Tensor] = None) -> MiEstimate:
    """Estimate I(a; q) at one step from ``n`` sampled questions and their answers.

    e_o (1, E_OBS) and h_m (1, H_MEM) are the step's observation embedding
    and incoming memory; ``state`` is the world state the Oracle consults.
    """
    if n < 2:
        raise ValueError(f"estimate_mi needs n >= 2, got {n}")
    e_o_n, h_m_n = e_o.expand(n, -1), h_m.expand(n, -1)
    sampled = agent.sample_questions(e_o_n, h_m_n, rng)
    eta = _answers(sampled, state, mode, rng)
    e_q, h_q, _, _ = agent.question_features(e_o_n, h_m_n, sampled)
    feat_n = None if feat is None else feat.expand(n, *feat.shape[1:])
    logits, _ = agent.act(e_o_n, e_q, eta, h_q, h_m_n, feat_n)
    return mi_from_conditionals(torch.softmax(logits, -1))


def mi_for_episode(agent: "Agent", rep: "Replay", buf, n: int, mode: orc.Mode,
                   rng: Optional[np.random.Generator]) -> torch.Tensor:
    """Mean per-step MI estimate over a replayed episode (states must be kept)."""
    if len(buf.states) != len(buf):
        raise ValueError("MI regularisation needs the episode's world states in the buffer")
    rng = rng if rng is not None else np.random.default_rng(0)
    vals = [
        estimate_mi(agent, rep.e_o[t:t + 1], rep.h_prev[t:t + 1], buf.states[t], n, rng, mode,
                    rep.feat[t:t + 1]).value
        for t in range(len(buf))
    ]
    return torch.stack(vals).mean()


def mi_augmented_loss(loss, mi, weight: float):
    """Objective plus ``weight`` times the MI estimate; identity when weight is 0."""
    if weight == 0.0:
        return loss
    return loss + weight * mi
