import numpy as np
import pytest

from plat.backbone import Backbone, BackboneConfig
from plat.data import Vocab, generate_corpus
from plat.model import ModelBundle, PlannerConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training experiments")


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    ran = any("test_acceptance" in r.nodeid for rs in terminalreporter.stats.values()
              for r in rs if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_report.lines():
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(0, 24, step_range=(1, 3), operand_range=(1, 20), max_value=20)


def tiny_backbone_cfg(vocab, n_planner_layers=1):
    return BackboneConfig(vocab_size=len(vocab), d_model=16, n_layers=1, n_planner_layers=n_planner_layers,
                          n_heads=2, max_seq_len=96)


def make_bundle(vocab, seed=0, **planner_kw):
    kw = dict(d_latent=8, n_latent=1, alpha_ema=0.9, noise_std=0.1, max_plan_steps=4)
    kw.update(planner_kw)
    return ModelBundle.create(tiny_backbone_cfg(vocab), PlannerConfig(**kw), vocab.special, seed=seed)


@pytest.fixture
def bundle(vocab):
    return make_bundle(vocab)


@pytest.fixture
def tiny_backbone(vocab):
    return Backbone(tiny_backbone_cfg(vocab, 0), seed=0)
