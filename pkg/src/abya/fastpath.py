"""Numpy mirror of the agent's forward pass, used only to collect episodes.

Batch-1 torch calls cost several microseconds of dispatch each; an episode
step makes ~60 of them. Collection needs no gradients, so it runs on a
float32 numpy snapshot of the weights taken after every update. The torch
replay stays the reference; tests pin the two together.
"""
from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .agent import CONV2, E_WORD, N_RESBLOCKS, QUESTION_CAP, Agent, ModelKind
from .gridworld import N_ACTIONS, VIEW
from .oracle import EOS_ID, SOS_ID

_f32 = np.float32


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _im2col_index(side: int, pad: int) -> np.ndarray:
    """Flat indices into a (side + 2 pad)^2 map for every 3x3 patch."""
    full = side + 2 * pad
    out = side + 2 * pad - 2
    rows = []
    for r in range(out):
        for c in range(out):
            rows.append([(r + i) * full + (c + j) for i in range(3) for j in range(3)])
    return np.asarray(rows)


_IDX_7 = _im2col_index(VIEW, 0)       # 25 patches of a 7x7 map
_IDX_5 = _im2col_index(VIEW - 2, 0)   # 9 patches of a 5x5 map
_IDX_3P = _im2col_index(VIEW - 4, 1)  # 9 patches of a zero-padded 3x3 map


def _conv(x: np.ndarray, K: np.ndarray, b: np.ndarray, idx: np.ndarray, pad: int = 0) -> np.ndarray:
    """x (C, H, W) -> (K, H', W') via im2col; matches torch.conv2d (cross-correlation)."""
    C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    flat = x.reshape(C, -1)
    cols = flat[:, idx]                         # (C, P, 9)
    cols = cols.transpose(1, 0, 2).reshape(idx.shape[0], C * 9)
    out = cols @ K.reshape(K.shape[0], -1).T + b
    side = int(round(np.sqrt(idx.shape[0])))
    return out.T.reshape(K.shape[0], side, side)


class FastAgent:
    """Read-only float32 snapshot of an Agent's weights with step-wise forward."""

    def __init__(self, agent: Agent):
        self.kind = agent.kind
        self.asks = agent.asks
        self.w = {n: p.detach().numpy().astype(_f32, copy=True) for n, p in agent.named_parameters()}
        w = self.w
        self._mem_wi = w["memory.W_ih"].T.copy()
        self._mem_wh = w["memory.W_hh"].T.copy()
        if self.asks:
            self._lm_wi = w["lm.cell.W_ih"].T.copy()
            self._lm_wh = w["lm.cell.W_hh"].T.copy()
            self._lm_out = w["lm.out.W"].T.copy()
            # input projection of every vocabulary word, precomputed
            self._lm_xw = w["lm.embedding"] @ self._lm_wi + w["lm.cell.b"]

    # -- pieces -------------------------------------------------------------

    def encode(self, obs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        w = self.w
        x = np.concatenate([
            w["encoder.kind"][obs[..., 0]],
            w["encoder.color"][obs[..., 1]],
            w["encoder.state"][obs[..., 2]],
        ], axis=-1).transpose(2, 0, 1)
        x = np.maximum(_conv(x, w["encoder.conv1.K"], w["encoder.conv1.b"], _IDX_7), 0)
        feat = np.maximum(_conv(x, w["encoder.conv2.K"], w["encoder.conv2.b"], _IDX_5), 0)
        e_o = np.maximum(w["encoder.fc.W"] @ feat.ravel() + w["encoder.fc.b"], 0)
        return e_o, feat

    @staticmethod
    def _lstm(gates: np.ndarray, c: np.ndarray):
        H = c.shape[-1]
        i = _sigmoid(gates[:H])
        f = _sigmoid(gates[H:2 * H])
        g = np.tanh(gates[2 * H:3 * H])
        o = _sigmoid(gates[3 * H:])
        c = f * c + i * g
        return o * np.tanh(c), c

    def ask(self, e_o, h_m, rng: np.random.Generator, cap: int = QUESTION_CAP):
        """Returns (sampled ids, token log-probs, token entropies, h^q, e^q)."""
        w = self.w
        h = np.tanh(w["lm.init.W"] @ np.concatenate([e_o, h_m]) + w["lm.init.b"])
        c = np.zeros_like(h)
        tok = SOS_ID
        sampled: List[int] = []
        logps: List[float] = []
        ents: List[float] = []
        h_q = h
        for _ in range(cap):
            h, c = self._lstm(self._lm_xw[tok] + h @ self._lm_wh, c)
            logits = (h @ self._lm_out + w["lm.out.b"]).astype(np.float64)
            logits[SOS_ID] = -np.inf
            m = logits.max()
            z = np.exp(logits - m)
            s = z.sum()
            p = z / s
            logp = logits - m - np.log(s)
            ents.append(float(-(p[p > 0] * logp[p > 0]).sum()))
            cdf = np.cumsum(p)
            tok = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), p.size - 1)
            sampled.append(tok)
            logps.append(float(logp[tok]))
            h_q = h
            if tok == EOS_ID:
                break
        q = sampled[:-1] if sampled[-1] == EOS_ID else sampled
        e_q = w["lm.embedding"][q].mean(0) if q else np.zeros(E_WORD, dtype=_f32)
        return sampled, logps, ents, h_q, e_q

    def film(self, feat, qa):
        w = self.w
        out = (w["film.generator.W"] @ qa + w["film.generator.b"]).reshape(N_RESBLOCKS, 2, CONV2)
        gammas, betas = 1.0 + out[:, 0], out[:, 1]
        x = feat
        for k in range(N_RESBLOCKS):
            a = _conv(x, w[f"film.blocks.{k}.K"], w[f"film.blocks.{k}.b"], _IDX_3P, pad=1)
            a = gammas[k][:, None, None] * a + betas[k][:, None, None]
            x = x + np.maximum(a, 0)
        return np.maximum(w["film.fc.W"] @ x.ravel() + w["film.fc.b"], 0)

    def act(self, e_o, e_q, eta, h_q, h_m, feat):
        w = self.w
        if self.kind is ModelKind.MAIN:
            x = np.concatenate([e_o, e_q, eta, h_q, h_m])
        elif self.kind is ModelKind.FILM:
            x = np.concatenate([self.film(feat, np.concatenate([e_q, eta, h_q])), h_m])
        else:
            x = np.concatenate([e_o, h_m])
        z = np.maximum(w["policy.fc1.W"] @ x + w["policy.fc1.b"], 0)
        z = np.maximum(w["policy.fc2.W"] @ z + w["policy.fc2.b"], 0)
        logits = w["policy.action.W"] @ z + w["policy.action.b"]
        value = float((w["policy.value.W"] @ z + w["policy.value.b"])[0])
        return logits, value

    def memory(self, h, c, e_o, e_q, eta, action: int):
        x = np.concatenate([e_o, e_q, eta, np.eye(N_ACTIONS, dtype=_f32)[action]])
        return self._lstm(x @ self._mem_wi + h @ self._mem_wh + self.w["memory.b"], c)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    m = z.max()
    return z - m - np.log(np.exp(z - m).sum())

