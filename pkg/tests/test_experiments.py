"""Run caching and the comparison-study harnesses."""

from dataclasses import replace

import pytest

from cade.config import RunConfig
from cade.experiments import (cached_train, estimator_comparison,
                              final_window_mean, load_manifest, run_key,
                              safety_comparison)


def tiny(**overrides):
    base = dict(env="cliff-circular", level="medium", timeout=30,
                step_budget=40, hidden_dim=16, head_width=8,
                normalize_adv=False, checkpoint_every=1000)
    base.update(overrides)
    return RunConfig(**base)


def test_run_key_tracks_config_identity():
    a, b = tiny(), tiny()
    assert run_key(a) == run_key(b)
    assert run_key(a) != run_key(tiny(seed=1))
    assert run_key(a) != run_key(tiny(adv="td"))
    assert len(run_key(a)) == 16


def test_cached_train_reuses_completed_runs(tmp_path):
    cfg = tiny()
    first = cached_train(cfg, tmp_path)
    stamp = (first / "manifest.json").stat().st_mtime_ns
    second = cached_train(cfg, tmp_path)
    assert second == first
    assert (second / "manifest.json").stat().st_mtime_ns == stamp  # no retrain
    other = cached_train(replace(cfg, seed=1), tmp_path)
    assert other != first


def test_cached_train_discards_partial_directories(tmp_path):
    cfg = tiny()
    partial = tmp_path / run_key(cfg)
    partial.mkdir()
    (partial / "metrics.csv").write_text("stale")
    run_dir = cached_train(cfg, tmp_path)
    assert run_dir == partial
    assert (run_dir / "manifest.json").exists()
    assert (run_dir / "metrics.csv").read_text() != "stale"


def test_final_window_mean():
    rows = [{"ep_reward": float(i)} for i in range(1, 31)]
    assert final_window_mean(rows) == pytest.approx((28 + 29 + 30) / 3)
    assert final_window_mean(rows, fraction=1.0) == pytest.approx(15.5)
    assert final_window_mean(rows[:1]) == 1.0  # window never shrinks to zero
    with pytest.raises(ValueError):
        final_window_mean([])


def test_estimator_comparison_shape(tmp_path):
    results = estimator_comparison(tiny(), ["mgae", "td"], [0, 1], tmp_path)
    assert sorted(results) == ["mgae", "td"]
    for finals in results.values():
        assert len(finals) == 2
    # cached runs make the recomputation free and identical
    again = estimator_comparison(tiny(), ["mgae", "td"], [0, 1], tmp_path)
    assert again == results


def test_safety_comparison_shape(tmp_path):
    out = safety_comparison(tiny(normalize_adv=True), seeds=[0],
                            levels=["easy", "medium"], episodes=2,
                            cache_root=tmp_path)
    assert sorted(out) == ["lagrangian", "plain"]
    for variant in out.values():
        assert sorted(variant) == ["easy", "medium"]
        for summary in variant.values():
            assert set(summary) == {"reward_mean", "cost_mean",
                                    "reward_per_seed", "cost_per_seed"}
            assert len(summary["reward_per_seed"]) == 1
    # constrained and unconstrained runs landed in distinct cache slots
    assert len(list(tmp_path.iterdir())) >= 2


def test_manifest_records_the_config(tmp_path):
    cfg = tiny(adv="gae")
    run_dir = cached_train(cfg, tmp_path)
    manifest = load_manifest(run_dir)
    assert manifest["config"]["adv"] == "gae"
    assert manifest["seed"] == 0
    assert len(manifest["rows"]) >= 1
