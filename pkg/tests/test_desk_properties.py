"""Desk-scale solver properties that need a full training run."""
from pathlib import Path

from spectromix.cli import ExperimentConfig, build_setup, simulate, train_config
from spectromix.solver import Problem, train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_tv_noiseless_data_consistency():
    # noise-free desk-scale phantom A: the final data-consistency loss must fall below 1e-3
    cfg = ExperimentConfig.load(CONFIGS / "desk_a.yaml")
    cfg.noise["enabled"] = False
    setup = build_setup(cfg)
    _, _, sino = simulate(setup)
    tc = train_config(cfg, "tv", setup.spec.width)
    res = train(sino, setup.library, setup.mset, tc)
    prob = Problem(sino, setup.library, setup.mset, res.config)
    prob.params.data[:] = res.params.data
    loss = prob.full_loss()
    print(f"noiseless data-consistency loss {loss:.2e}")
    assert loss < 1e-3
