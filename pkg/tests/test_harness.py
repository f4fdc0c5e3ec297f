import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from abya import harness
from abya.persist import lm_entries, read_metrics, save_checkpoint
from abya.training import default_config


@given(st.lists(st.floats(0, 1), min_size=1, max_size=300))
def test_moving_average_is_trailing_mean(xs):
    ma = harness.moving_average(xs)
    for i in (0, len(xs) // 2, len(xs) - 1):
        lo = max(0, i - 99)
        assert ma[i] == pytest.approx(np.mean(xs[lo:i + 1]), abs=1e-9)


def test_aggregate():
    mean, std = harness.aggregate([0.5, 0.7])
    assert mean == pytest.approx(0.6) and std == pytest.approx(0.1414, abs=1e-4)
    with pytest.warns(UserWarning, match="single seed"):
        assert harness.aggregate([0.4]) == (0.4, 0.0)
    with pytest.raises(ValueError):
        harness.aggregate([])


def test_default_seeds():
    assert harness.default_seeds(10) == list(range(10, 17))


@pytest.fixture(scope="module")
def lm_ckpt(pretrained_main, tmp_path_factory):
    path = tmp_path_factory.mktemp("lm") / "lm.ckpt"
    save_checkpoint(str(path), lm_entries(pretrained_main[0]))
    return str(path)


@pytest.mark.parametrize("model", ["baseline", "main"])
def test_fixed_seed_runs_are_byte_identical(tmp_path, lm_ckpt, model):
    cfg = default_config(model, episodes=12, seed=5, transcript_every=4)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        res, _, _ = harness.run_training(cfg, lm_checkpoint=lm_ckpt if model == "main" else None, out_dir=str(out))
        assert res.episodes == 12 and res.skipped_updates == 0
        outs.append(out)
    for name in ("metrics.csv", "transcripts.jsonl", "final.ckpt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    m = read_metrics(str(outs[0] / "metrics.csv"))
    assert len(m["episode"]) == 12
    if model == "baseline":
        assert set(m["loss_q"]) == {""} and set(m["syntax_err_rate"]) == {""}
    else:
        assert all(x != "" for x in m["loss_q"])
    assert len((outs[0] / "transcripts.jsonl").read_text().splitlines()) > 0


def test_transfer_continues_from_checkpoint(tmp_path):
    cfg = default_config("baseline", episodes=3, seed=1)
    harness.run_training(cfg, out_dir=str(tmp_path / "train"))
    ckpt = str(tmp_path / "train" / "final.ckpt")
    with pytest.raises(ValueError, match="train mode"):
        harness.run_transfer(ckpt, cfg, out_dir=str(tmp_path / "x"))
    tcfg = default_config("baseline", episodes=3, seed=1, oracle="test")
    res, agent = harness.run_transfer(ckpt, tcfg, out_dir=str(tmp_path / "transfer"))
    assert res.episodes == 3 and res.stopped == "budget"
    with pytest.raises(harness.RunError, match="baseline model"):
        harness.run_transfer(ckpt, default_config("main", episodes=1, oracle="test"), out_dir=str(tmp_path / "y"))


def test_ablation_and_eval(tmp_path, lm_ckpt):
    cfg = default_config("main", episodes=2, seed=0)
    harness.run_training(cfg, lm_checkpoint=lm_ckpt, out_dir=str(tmp_path / "train"))
    ckpt = str(tmp_path / "train" / "final.ckpt")
    out = harness.run_ablation(ckpt, default_config("main", episodes=2, oracle="test"), out_dir=str(tmp_path / "abl"))
    assert set(out) == {"test", "random"}
    assert (tmp_path / "abl" / "random" / "metrics.csv").exists()
    ev = harness.run_eval(ckpt, cfg, env="MultiRoom-N2-S4", out_dir=str(tmp_path / "eval"))
    assert ev.episodes == 2
    assert harness.final_ma_from_csv(str(tmp_path / "eval" / "metrics.csv")) == pytest.approx(ev.final_ma, abs=1e-6)
    assert math.isnan(harness.RunResult().final_ma)


def test_training_rejects_other_oracles():
    with pytest.raises(ValueError):
        harness.run_training(default_config("baseline", oracle="test", episodes=1), out_dir=None)


def test_convergence_rule():
    cfg = default_config("baseline", converge_window=5, converge_tol=0.01, min_episodes=10)
    assert not harness._converged([0.5] * 9, cfg)
    assert harness._converged([0.5] * 10, cfg)
    assert not harness._converged([0.0] * 5 + [0.5] * 5, cfg)
    assert not harness._converged([0.5] * 20, default_config("baseline", converge_window=0))
