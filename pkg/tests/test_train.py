import numpy as np
import pytest
import torch

from misret.data import collate, sample_batch
from misret.model import batch_to_tensors, init_model
from misret.train import (TrainConfig, TrainingDiverged, action_loss, exact_expectile, expectile_loss,
                          expectile_penalty, fit_scalar_expectile, reward_loss, total_loss, train)

from conftest import TERMS, grad_check_errors


@pytest.mark.parametrize("term", TERMS)
def test_gradients_match_finite_differences(tiny_cfg, small_ds, term):
    errs = grad_check_errors(tiny_cfg, small_ds, term)
    assert max(errs) < 1e-3


def test_expectile_penalty_weights():
    assert expectile_penalty(2.0, 0.9) == pytest.approx(0.9 * 4)
    assert expectile_penalty(-2.0, 0.9) == pytest.approx(0.1 * 4)
    t = expectile_penalty(torch.tensor([2.0, -2.0]), 0.9)
    assert torch.allclose(t, torch.tensor([3.6, 0.4]))


def test_expectile_loss_length_mismatch():
    with pytest.raises(ValueError):
        expectile_loss(torch.zeros(3), torch.zeros(4), 0.9)


def test_scalar_fits_agree():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.normal(size=int(rng.integers(2, 30)))
        for a in (0.5, 0.9, 0.99):
            assert fit_scalar_expectile(x, a) == pytest.approx(exact_expectile(x, a), abs=1e-9)
    assert fit_scalar_expectile([1.0, 2.0, 6.0], 0.5) == pytest.approx(3.0)


def test_reward_and_action_losses():
    assert float(reward_loss(torch.tensor([1.0, 2.0]), torch.tensor([0.0, 0.0]))) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        reward_loss(torch.zeros(2), torch.zeros(3))
    logits = torch.zeros(2, 4)
    assert float(action_loss(logits, torch.tensor([0, 3]))) == pytest.approx(np.log(4))
    with pytest.raises(ValueError):
        action_loss(logits, torch.tensor([0, 4]))


def test_alpha_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)


def test_train_logs_terms_and_is_deterministic(tiny_cfg, small_ds):
    cfg = TrainConfig(steps=5, batch=4, aux_language=False, seed=3)
    logs = []
    for _ in range(2):
        model = init_model(tiny_cfg, seed=0)
        _, log = train(model, small_ds, None, cfg, freeze_mode="full")
        logs.append(log)
    assert logs[0] == logs[1]
    assert set(TERMS) <= set(logs[0][0])
    assert logs[0][0]["L_lang"] == 0.0


def test_no_max_variant_has_zero_term(tiny_cfg, small_ds):
    cfg = TrainConfig(steps=2, batch=4, aux_language=False, max_head=False)
    _, log = train(init_model(tiny_cfg), small_ds, None, cfg, freeze_mode="full")
    assert all(r["L_max"] == 0.0 for r in log)


def test_bin_head_does_not_shape_backbone(tiny_cfg, small_ds):
    model = init_model(tiny_cfg)
    rl = batch_to_tensors(collate(sample_batch(small_ds, 4, tiny_cfg.T_max, rng_seed=0)))
    _, terms = total_loss(model, rl, None, TrainConfig(aux_language=False), small_ds.return_bins)
    terms["L_bin"].backward()
    grads = [p.grad for n, p in model.named_parameters() if n.startswith("blocks")]
    assert all(g is None or float(g.abs().sum()) == 0.0 for g in grads)


def test_divergence_raises(tiny_cfg, small_ds):
    model = init_model(tiny_cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        train(model, small_ds, None, TrainConfig(steps=1, batch=4, aux_language=False), freeze_mode="full")


def test_empty_dataset_rejected(tiny_cfg, small_ds):
    small_ds.trajectories.clear()
    with pytest.raises(ValueError):
        train(init_model(tiny_cfg), small_ds, None, TrainConfig(steps=1), freeze_mode="full")
