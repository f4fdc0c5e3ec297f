"""Differentiable substrate: layer primitives, gradients, Adam and sampling.

Everything sits on top of torch's reverse-mode autograd. The primitives
here are the only layer operations the agent uses; each validates its
input dims and fails with both dim lists when they disagree.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# parameter group labels
ACTION = "phi"      # action policy + value head
QUESTION = "theta"  # question policy (language model)
ENCODER = "nu"      # observation CNN (and FiLM blocks)
MEMORY = "mu"       # memory LSTM
GROUPS = (ACTION, QUESTION, ENCODER, MEMORY)


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _dims(t: torch.Tensor) -> list:
    return list(t.shape)


def _mismatch(op: str, a: torch.Tensor, b: torch.Tensor, what: str) -> DimensionError:
    return DimensionError(f"{op}: {what} mismatch, dims {_dims(a)} vs {_dims(b)}")


# ---------------------------------------------------------------------------
# layer primitives


def linear(x: torch.Tensor, W: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    """y = x W^T + b for x of shape (..., in) and W of shape (out, in)."""
    if W.dim() != 2 or x.shape[-1] != W.shape[1]:
        raise _mismatch("linear", x, W, "input/weight")
    if b is not None and (b.dim() != 1 or b.shape[0] != W.shape[0]):
        raise _mismatch("linear", W, b, "weight/bias")
    return F.linear(x, W, b)


def conv2d(
    x: torch.Tensor,
    kernels: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Batched 2-D convolution, x (N, C, H, W), kernels (K, C, kh, kw)."""
    if x.dim() != 4 or kernels.dim() != 4 or x.shape[1] != kernels.shape[1]:
        raise _mismatch("conv2d", x, kernels, "channel")
    if bias is not None and bias.shape != (kernels.shape[0],):
        raise _mismatch("conv2d", kernels, bias, "kernel/bias")
    return F.conv2d(x, kernels, bias, stride=stride, padding=padding)


def lstm_cell(
    x: torch.Tensor,
    h: torch.Tensor,
    c: torch.Tensor,
    W_ih: torch.Tensor,
    W_hh: torch.Tensor,
    b: torch.Tensor,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """One LSTM step. Gate order (input, forget, cell, output) along rows of W."""
    hidden = h.shape[-1]
    if W_ih.shape != (4 * hidden, x.shape[-1]):
        raise _mismatch("lstm_cell", x, W_ih, "input/W_ih")
    if W_hh.shape != (4 * hidden, hidden):
        raise _mismatch("lstm_cell", h, W_hh, "hidden/W_hh")
    if c.shape != h.shape:
        raise _mismatch("lstm_cell", h, c, "hidden/cell")
    if b.shape != (4 * hidden,):
        raise _mismatch("lstm_cell", W_hh, b, "W_hh/bias")
    gates = torch.addmm(b, x, W_ih.t()) if x.dim() == 2 else F.linear(x, W_ih, b)
    gates = gates + h @ W_hh.t()
    i, f, g, o = gates.chunk(4, dim=-1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


def lstm_sequence(
    xs: torch.Tensor,
    h0: torch.Tensor,
    c0: torch.Tensor,
    W_ih: torch.Tensor,
    W_hh: torch.Tensor,
    b: torch.Tensor,
) -> torch.Tensor:
    """Hidden states (T, H) of ``lstm_cell`` applied over a known input sequence xs (T, in).

    Runs torch's fused kernel; numerically the same recursion as looping
    ``lstm_cell``.
    """
    hidden = h0.shape[-1]
    if xs.dim() != 2 or W_ih.shape != (4 * hidden, xs.shape[-1]):
        raise _mismatch("lstm_sequence", xs, W_ih, "input/W_ih")
    if W_hh.shape != (4 * hidden, hidden):
        raise _mismatch("lstm_sequence", h0, W_hh, "hidden/W_hh")
    out, _, _ = torch.lstm(
        xs.unsqueeze(1), (h0.reshape(1, 1, hidden), c0.reshape(1, 1, hidden)),
        [W_ih, W_hh, b, torch.zeros_like(b)], True, 1, 0.0, False, False, False,
    )
    return out.squeeze(1)


def embedding_lookup(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise DimensionError(f"embedding_lookup: table must be 2-D, got dims {_dims(table)}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise DimensionError(
            f"embedding_lookup: ids outside [0, {table.shape[0]}), ids dims {_dims(ids)} "
            f"vs table dims {_dims(table)}"
        )
    return F.embedding(ids, table)


def softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.log_softmax(logits, dim=-1)


def entropy(logits: torch.Tensor) -> torch.Tensor:
    """Entropy (nats) of the categorical given by logits along the last axis."""
    logp = log_softmax(logits)
    return -(logp.exp() * logp).sum(-1)


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of integer targets under logits (..., V)."""
    if logits.shape[:-1] != target.shape:
        raise _mismatch("cross_entropy", logits, target, "logits/target")
    logp = log_softmax(logits)
    return -logp.gather(-1, target.unsqueeze(-1)).squeeze(-1).mean()


def huber(delta: torch.Tensor) -> torch.Tensor:
    """Elementwise smooth-L1: 0.5 d^2 for |d| <= 1, |d| - 0.5 beyond."""
    a = delta.abs()
    return torch.where(a <= 1.0, 0.5 * delta * delta, a - 0.5)


# ---------------------------------------------------------------------------
# parameters and gradients


@dataclass
class ParamSet:
    """Named parameter tensors, each owned by exactly one group."""

    params: Dict[str, torch.Tensor]
    groups: Dict[str, str]
    frozen: set = field(default_factory=set)

    def __post_init__(self):
        missing = set(self.params) ^ set(self.groups)
        if missing:
            raise ValueError(f"parameters without exactly one group: {sorted(missing)}")
        bad = {g for g in self.groups.values() if g not in GROUPS}
        if bad:
            raise ValueError(f"unknown groups {sorted(bad)}")

    def names(self, group: Optional[str] = None) -> list:
        return [n for n in self.params if group is None or self.groups[n] == group]

    def trainable(self) -> list:
        return [n for n in self.params if n not in self.frozen]

    @classmethod
    def from_module(cls, module: torch.nn.Module, group_of, frozen: Iterable[str] = ()) -> "ParamSet":
        params = dict(module.named_parameters())
        return cls(params, {n: group_of(n) for n in params}, set(frozen))


def gradients(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    """d loss / d p for every named parameter; zeros for parameters off the graph."""
    if loss.numel() != 1:
        raise DimensionError(f"gradients: loss must be scalar, got dims {_dims(loss)}")
    if not torch.isfinite(loss).all():
        raise NonFiniteError(f"gradients: loss is {loss.item()}")
    names = [n for n, p in params.items() if p.requires_grad]
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        g = torch.zeros_like(params[n]) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"gradients: non-finite gradient for parameter {n!r}")
        out[n] = g
    for n, p in params.items():
        if n not in out:
            out[n] = torch.zeros_like(p)
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: Dict[str, torch.Tensor]
    v: Dict[str, torch.Tensor]
    t: int = 0
    _warned: set = field(default_factory=set, repr=False)

    @classmethod
    def zeros_like(cls, params: Mapping[str, torch.Tensor]) -> "AdamState":
        return cls(
            {n: torch.zeros_like(p, memory_format=torch.contiguous_format).detach() for n, p in params.items()},
            {n: torch.zeros_like(p, memory_format=torch.contiguous_format).detach() for n, p in params.items()},
        )


@torch.no_grad()
def adam_step(params: ParamSet, grads: Mapping[str, torch.Tensor], state: AdamState, lr: float) -> AdamState:
    """One in-place Adam update that *descends* the given gradients.

    Frozen parameters are skipped. A parameter with no gradient entry is
    treated as having zero gradient (its moments still decay).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for name in params.trainable():
        p = params.params[name]
        g = grads.get(name)
        if g is None:
            if name not in state._warned:
                log.warning("adam_step: no gradient for %s, using zero", name)
                state._warned.add(name)
            g = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(ADAM_BETA1).add_(g, alpha=1 - ADAM_BETA1)
        v.mul_(ADAM_BETA2).addcmul_(g, g, value=1 - ADAM_BETA2)
        denom = (v / bc2).sqrt_().add_(ADAM_EPS)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


# ---------------------------------------------------------------------------
# sampling


def sample_categorical(probs, rng: np.random.Generator) -> Tuple[int, float]:
    """Draw an index from ``probs`` by inverse CDF; returns (index, log-prob)."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    if p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("sample_categorical: probabilities must be finite and non-negative")
    total = p.sum()
    if total <= 0:
        raise ValueError("sample_categorical: all-zero probabilities")
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"sample_categorical: probabilities sum to {total}, not 1")
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    if idx >= p.size:  # u rounded onto the top of the cdf
        idx = int(np.flatnonzero(p)[-1])
    return idx, math.log(p[idx])


def is_finite(tensors: Sequence[torch.Tensor]) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)
