"""Experiment protocols: training, transfer, random-Oracle ablation, seed aggregation."""
from __future__ import annotations

import logging
import math
import os
import time
import warnings
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import autodiff as ad
from . import gridworld as gw
from . import oracle as orc
from .agent import Agent, ModelKind
from .fastpath import FastAgent
from .persist import (MetricsWriter, TranscriptWriter, agent_entries, kind_of, load_checkpoint,
                      restore_agent, save_checkpoint)
from .training import (EpisodeBuffer, PretrainResult, TrainConfig, collect_episode, episode_update,
                       pretrain_lm)

log = logging.getLogger(__name__)

MA_WINDOW = 100
TRANSFER_ENV = "MultiRoom-N4-S5"
DEFAULT_SEEDS = 7

# stream tags so training and transfer never share random numbers
_PHASE_TRAIN = 0
_PHASE_TRANSFER = 1
_PHASE_EVAL = 2


class RunError(RuntimeError):
    """Failure inside a run, annotated with the run's model, env and seed."""


@dataclass
class RunResult:
    returns: List[float] = field(default_factory=list)
    ma100: List[float] = field(default_factory=list)
    syntax_err: List[float] = field(default_factory=list)
    questions: Counter = field(default_factory=Counter)
    skipped_updates: int = 0
    stopped: str = "budget"
    wall_seconds: float = 0.0
    pretrain: Optional[PretrainResult] = None

    @property
    def episodes(self) -> int:
        return len(self.returns)

    @property
    def final_ma(self) -> float:
        return self.ma100[-1] if self.ma100 else float("nan")


def moving_average(xs: Sequence[float], window: int = MA_WINDOW) -> List[float]:
    """Trailing mean over the last ``window`` values (fewer at the start)."""
    out, acc = [], 0.0
    for i, x in enumerate(xs):
        acc += x
        if i >= window:
            acc -= xs[i - window]
        out.append(acc / min(i + 1, window))
    return out


def aggregate(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (n - 1); std is 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("aggregate needs at least one value")
    if v.size == 1:
        warnings.warn("aggregate over a single seed: std reported as 0", stacklevel=2)
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))


def default_seeds(base: int, n: int = DEFAULT_SEEDS) -> List[int]:
    return list(range(base, base + n))


def _streams(seed: int, phase: int):
    env, agent, oracle, mi = np.random.SeedSequence([seed, phase]).spawn(4)
    return tuple(np.random.default_rng(s) for s in (env, agent, oracle, mi))


def _transcript(episode: int, buf: EpisodeBuffer) -> List[dict]:
    recs = []
    n = len(buf)
    for t in range(n):
        q = buf.sampled[t] if buf.sampled else None
        if q is not None and q and q[-1] == orc.EOS_ID:
            q = q[:-1]
        verdict = buf.verdicts[t]
        recs.append({
            "episode": episode,
            "t": t,
            "question": orc.decode(q) if q is not None else "",
            "verdict": verdict.value if verdict is not None else None,
            "eta": [int(e) for e in buf.eta[t]],
            "r_q": float(buf.r_q[t]),
            "action": int(buf.actions[t]),
            "r_e": float(buf.r_e[t]),
            "done": t == n - 1,
        })
    return recs


def _converged(ma: List[float], cfg: TrainConfig) -> bool:
    w = cfg.converge_window
    if w <= 0 or len(ma) < max(cfg.min_episodes, w + 1):
        return False
    return abs(ma[-1] - ma[-1 - w]) < cfg.converge_tol


def run_episodes(agent: Agent, adam: ad.AdamState, cfg: TrainConfig, env: gw.EnvConfig,
                 phase: int, out_dir: Optional[str], learn: bool = True,
                 stop_on_convergence: bool = True) -> RunResult:
    """Collect-and-update loop shared by every protocol."""
    torch.set_num_threads(1)
    rng_env, rng_agent, rng_oracle, rng_mi = _streams(cfg.seed, phase)
    params = agent.param_set()
    mode = cfg.mode
    keep_states = cfg.mi_enabled and cfg.mi_weight != 0.0 and agent.asks
    result = RunResult()
    window: deque = deque(maxlen=MA_WINDOW)
    metrics = transcripts = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics = MetricsWriter(os.path.join(out_dir, "metrics.csv"))
        transcripts = TranscriptWriter(os.path.join(out_dir, "transcripts.jsonl"))
    start = time.perf_counter()
    fast = FastAgent(agent)
    try:
        for ep in range(1, cfg.episodes + 1):
            state = gw.generate(env, rng_env)
            buf = collect_episode(agent, state, mode, rng_agent, rng_oracle, keep_states, fast)
            ret = float(sum(buf.r_e))
            length = len(buf)
            syn = (sum(v is orc.Verdict.SYNTAX_ERROR for v in buf.verdicts) / length) if agent.asks else None
            if agent.asks:
                for s in buf.sampled:
                    result.questions[tuple(s[:-1] if s[-1] == orc.EOS_ID else s)] += 1
            if transcripts is not None and cfg.transcript_every > 0 and ep % cfg.transcript_every == 0:
                transcripts.write_episode(_transcript(ep, buf))
            if learn:
                upd = episode_update(agent, params, adam, buf, cfg, rng_mi)
                if not upd.ok:
                    result.skipped_updates += 1
                fast = FastAgent(agent)
                loss_a, loss_q = upd.loss_a, (upd.loss_q if agent.asks else None)
            else:
                loss_a, loss_q = None, None
            window.append(ret)
            ma = sum(window) / len(window)
            result.returns.append(ret)
            result.ma100.append(ma)
            result.syntax_err.append(syn if syn is not None else float("nan"))
            if metrics is not None:
                metrics.write({"episode": ep, "return": ret, "length": length, "ma100": ma,
                               "loss_a": loss_a, "loss_q": loss_q, "syntax_err_rate": syn})
            if ep % 1000 == 0:
                log.info("%s %s seed %d: episode %d ma100 %.3f", cfg.model, env.name, cfg.seed, ep, ma)
            if stop_on_convergence and _converged(result.ma100, cfg):
                result.stopped = "converged"
                break
    finally:
        if metrics is not None:
            metrics.close()
            transcripts.close()
    result.wall_seconds = time.perf_counter() - start
    return result


def _context(cfg: TrainConfig, env: str) -> str:
    return f"[{cfg.model} on {env}, seed {cfg.seed}, oracle {cfg.oracle}]"


def prepare_agent(cfg: TrainConfig, lm_checkpoint: Optional[str] = None) -> Tuple[Agent, Optional[PretrainResult]]:
    """Fresh agent; Main/FiLM get a pretrained language model (loaded or trained now)."""
    agent = Agent(cfg.kind, seed=cfg.seed)
    pre = None
    if agent.asks:
        if lm_checkpoint is not None:
            restore_agent(agent, load_checkpoint(lm_checkpoint), partial=True)
            agent.freeze_embedding(True)
        else:
            pre = pretrain_lm(agent, seed=cfg.seed)
    return agent, pre


def run_training(cfg: TrainConfig, env: Optional[str] = None, lm_checkpoint: Optional[str] = None,
                 out_dir: Optional[str] = None) -> Tuple[RunResult, Agent, ad.AdamState]:
    """Train from scratch with the Oracle in Train mode; writes final.ckpt into out_dir."""
    env = env or cfg.env
    out_dir = out_dir if out_dir is not None else cfg.out_dir
    if cfg.mode is not orc.Mode.TRAIN:
        raise ValueError(f"training uses the train-mode Oracle, got {cfg.oracle!r}")
    try:
        agent, pre = prepare_agent(cfg, lm_checkpoint)
        adam = ad.AdamState.zeros_like(dict(agent.named_parameters()))
        result = run_episodes(agent, adam, cfg, gw.env_config(env, cfg.seed), _PHASE_TRAIN, out_dir)
        result.pretrain = pre
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "final.ckpt"), agent_entries(agent, adam))
    except Exception as exc:
        raise RunError(f"{_context(cfg, env)} {type(exc).__name__}: {exc}") from exc
    return result, agent, adam


def load_for(cfg: TrainConfig, checkpoint: str) -> Tuple[Agent, ad.AdamState]:
    entries = load_checkpoint(checkpoint)
    stored = kind_of(entries)
    if stored is not cfg.kind:
        raise ValueError(f"checkpoint {checkpoint} holds a {stored.value} model but the config asks "
                         f"for {cfg.kind.value}")
    agent = Agent(cfg.kind, seed=cfg.seed)
    if agent.asks:
        agent.freeze_embedding(True)
    adam = ad.AdamState.zeros_like(dict(agent.named_parameters()))
    restore_agent(agent, entries, adam)
    return agent, adam


def run_transfer(checkpoint: str, cfg: TrainConfig, env: str = TRANSFER_ENV,
                 out_dir: Optional[str] = None) -> Tuple[RunResult, Agent]:
    """Continue learning from ``checkpoint`` in a new environment (Test or Random Oracle)."""
    out_dir = out_dir if out_dir is not None else cfg.out_dir
    if cfg.mode is orc.Mode.TRAIN:
        raise ValueError("transfer runs use the test or random Oracle, never train mode")
    try:
        agent, adam = load_for(cfg, checkpoint)
        result = run_episodes(agent, adam, cfg, gw.env_config(env, cfg.seed), _PHASE_TRANSFER, out_dir,
                              stop_on_convergence=False)
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "final.ckpt"), agent_entries(agent, adam))
    except Exception as exc:
        raise RunError(f"{_context(cfg, env)} {type(exc).__name__}: {exc}") from exc
    return result, agent


def run_ablation(checkpoint: str, cfg: TrainConfig, env: str = TRANSFER_ENV,
                 out_dir: Optional[str] = None) -> Dict[str, RunResult]:
    """Transfer twice from the same checkpoint: true (test) Oracle and random Oracle."""
    out_dir = out_dir if out_dir is not None else cfg.out_dir
    out = {}
    for mode in ("test", "random"):
        sub = os.path.join(out_dir, mode) if out_dir is not None else None
        out[mode], _ = run_transfer(checkpoint, replace(cfg, oracle=mode), env, sub)
    return out


def run_eval(checkpoint: str, cfg: TrainConfig, env: Optional[str] = None,
             out_dir: Optional[str] = None) -> RunResult:
    """Roll out a checkpoint without updates."""
    env = env or cfg.env
    out_dir = out_dir if out_dir is not None else cfg.out_dir
    if cfg.mode is orc.Mode.TRAIN:
        cfg = replace(cfg, oracle="test")
    agent, adam = load_for(cfg, checkpoint)
    return run_episodes(agent, adam, cfg, gw.env_config(env, cfg.seed), _PHASE_EVAL, out_dir,
                        learn=False, stop_on_convergence=False)


def final_ma_from_csv(path: str) -> float:
    """Last ma100 value of a metrics.csv written by a (possibly finished) run."""
    last = None
    with open(path) as f:
        next(f)
        for line in f:
            if line.strip():
                last = line
    if last is None:
        return float("nan")
    return float(last.split(",")[3])


def top_questions(result: RunResult, k: int = 10) -> List[Tuple[str, int]]:
    return [(orc.decode(q), n) for q, n in result.questions.most_common(k)]
