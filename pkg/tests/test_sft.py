import numpy as np
import pytest

from plat.backbone import Backbone
from plat.data import question_ids, render_plat
from plat.errors import ConfigError
from plat.training.optim import Adam
from plat.training.sft import (SftConfig, batch_indices, lr_at, plat_loss, total_steps, train_cot_sft,
                               train_plat_sft)

from conftest import make_bundle, tiny_backbone_cfg


def test_batches_are_pure_functions_of_step():
    a = batch_indices(50, 8, 3, 9)
    assert np.array_equal(a, batch_indices(50, 8, 3, 9))
    epoch = np.concatenate([batch_indices(50, 8, 3, s) for s in range(7)])
    assert sorted(epoch) == list(range(50))


def test_lr_schedule():
    assert lr_at(0, 100, 1.0, 10) == pytest.approx(0.1)
    assert lr_at(9, 100, 1.0, 10) == pytest.approx(1.0)
    assert lr_at(100, 100, 1.0, 10) == pytest.approx(0.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        SftConfig(lr=0)
    with pytest.raises(ConfigError):
        SftConfig(phase="rl")
    with pytest.raises(ConfigError):
        SftConfig(pos_jitter=-1)
    assert total_steps(SftConfig(epochs=3, batch_size=10, max_steps=5), 25) == 5


def test_cot_sft_reduces_loss(vocab, corpus):
    bb = Backbone(tiny_backbone_cfg(vocab, 0), seed=0)
    res, _ = train_cot_sft(bb, corpus, vocab, SftConfig(epochs=15, batch_size=8, lr=3e-3, warmup_steps=5))
    assert np.mean(res.losses[-3:]) < 0.8 * np.mean(res.losses[:3])


def test_interrupted_cot_run_resumes_exactly(vocab, corpus):
    cfg = SftConfig(epochs=2, batch_size=8, warmup_steps=2, pos_jitter=4)
    full = Backbone(tiny_backbone_cfg(vocab, 0), seed=0)
    ref, _ = train_cot_sft(full, corpus, vocab, cfg)

    part = Backbone(tiny_backbone_cfg(vocab, 0), seed=0)
    first, opt = train_cot_sft(part, corpus, vocab, cfg, stop_at=3)
    # round-trip the optimizer state as a checkpoint would
    state = {k: v.copy() for k, v in opt.state_dict().items()}
    opt2 = Adam({k: part.params[k] for k in part.base_parameter_names()}, lr=cfg.lr)
    opt2.load_state_dict(state)
    rest, _ = train_cot_sft(part, corpus, vocab, cfg, optimizer=opt2)
    assert first.losses + rest.losses == ref.losses
    for k in full.params:
        assert full.params[k].data.tobytes() == part.params[k].data.tobytes()


def test_plat_loss_counts_every_segment_token(vocab, corpus):
    b = make_bundle(vocab, n_latent=2)
    qs = [question_ids(s, vocab) for s in corpus[:4]]
    segs = [render_plat(s, vocab) for s in corpus[:4]]
    out = plat_loss(b, qs, segs, 0.0, np.random.default_rng(0))
    assert out.n_tokens == sum(len(x) for s in segs for x in s)
    assert out.mean.item() == pytest.approx(out.total / out.n_tokens)


def test_plat_sft_trains_every_parameter(vocab, corpus):
    b = make_bundle(vocab, n_latent=2)
    before = {k: v.data.copy() for k, v in b.parameters().items()}
    res, _ = train_plat_sft(b, corpus, vocab, SftConfig(phase="plat", epochs=1, batch_size=8))
    assert res.steps == 3
    moved = [k for k, v in b.parameters().items() if not np.array_equal(v.data, before[k])]
    assert set(moved) == set(before)


def test_plat_sft_rejects_samples_longer_than_the_plan(vocab, corpus):
    b = make_bundle(vocab, max_plan_steps=2)
    with pytest.raises(ConfigError):
        train_plat_sft(b, corpus, vocab, SftConfig(phase="plat", epochs=1))
