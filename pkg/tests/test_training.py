import math

import numpy as np
import pytest

from estimator.errors import ConfigurationError, TrainingDivergedError
from estimator.neural import (NETWORK_NAMES, Architecture, DenseNet, LayerSpec, ModelWeights, build_model,
                              load_checkpoint)
from estimator.training import (PHASE_ADVERSARIAL, PHASE_ALL, PHASE_MAIN, LossValues, TrainConfig,
                                adversarial_phase_step, batch_losses, evaluate_losses, fit, history_to_frame,
                                loss_and_grads, main_phase_step, phase_for_epoch)


def _total(weights, batch, loss_weights):
    l1, l2, l3, l4, l5 = batch_losses(weights, batch)
    w1, w2, w3, w4, w5 = loss_weights
    return w1 * l1 + w2 * l2 + w3 * l3 - w4 * l4 + w5 * l5


def test_objective_gradients_match_finite_differences(tiny_weights, tiny_batch):
    loss_weights = (0.7, 1.3, 2.0, 0.6, 1.1)
    values, grads = loss_and_grads(tiny_weights, tiny_batch, loss_weights, PHASE_ALL)
    assert values.total == pytest.approx(_total(tiny_weights, tiny_batch, loss_weights), rel=0, abs=1e-12)
    assert set(grads) == set(NETWORK_NAMES)

    eps = 1e-6
    analytic, numeric = [], []
    for name in NETWORK_NAMES:
        for (w, b), (gw, gb) in zip(tiny_weights[name].params, grads[name]):
            for param, grad in ((w, gw), (b, gb)):
                flat, gflat = param.reshape(-1), grad.reshape(-1)
                for i in range(flat.size):
                    old = flat[i]
                    flat[i] = old + eps
                    up = _total(tiny_weights, tiny_batch, loss_weights)
                    flat[i] = old - eps
                    down = _total(tiny_weights, tiny_batch, loss_weights)
                    flat[i] = old
                    analytic.append(gflat[i])
                    numeric.append((up - down) / (2 * eps))
    analytic, numeric = np.array(analytic), np.array(numeric)
    rel = np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric))
    assert rel < 1e-4


def test_main_phase_gradients_skip_adversary(tiny_weights, tiny_batch):
    _, grads = loss_and_grads(tiny_weights, tiny_batch, phase=PHASE_MAIN)
    assert set(grads) == set(NETWORK_NAMES) - {"cl_adv"}


def test_adversarial_phase_gradient_minimises_l4(tiny_weights, tiny_batch):
    _, grads = loss_and_grads(tiny_weights, tiny_batch, phase=PHASE_ADVERSARIAL)
    assert set(grads) == {"cl_adv"}
    _, all_grads = loss_and_grads(tiny_weights, tiny_batch, loss_weights=(0, 0, 0, 1, 0), phase=PHASE_ALL)
    for (gw, gb), (aw, ab) in zip(grads["cl_adv"], all_grads["cl_adv"]):
        np.testing.assert_allclose(gw, -aw)
        np.testing.assert_allclose(gb, -ab)


def test_unknown_phase(tiny_weights, tiny_batch):
    with pytest.raises(ConfigurationError):
        loss_and_grads(tiny_weights, tiny_batch, phase="both")


def test_phase_schedule():
    phases = [phase_for_epoch(e, K=5, adversarial_epochs_per_phase=1) for e in range(12)]
    assert phases[:5] == [PHASE_MAIN] * 5
    assert phases[5] == PHASE_ADVERSARIAL
    assert phases[6:11] == [PHASE_MAIN] * 5
    assert phases[11] == PHASE_ADVERSARIAL
    assert all(phase_for_epoch(e, 3, 0) == PHASE_MAIN for e in range(10))


def test_main_step_freezes_adversary(tiny_weights, tiny_batch):
    cfg = TrainConfig(dtype="float64")
    before = tiny_weights.checksums()
    main_phase_step(tiny_weights, tiny_batch, cfg)
    after = tiny_weights.checksums()
    assert after["cl_adv"] == before["cl_adv"]
    assert all(after[n] != before[n] for n in NETWORK_NAMES if n != "cl_adv")
    assert tiny_weights.optimizer["cl_adv"].step == 0


def test_adversarial_step_touches_only_adversary(tiny_weights, tiny_batch):
    cfg = TrainConfig(dtype="float64", adversarial_lr=1e-2)
    before = tiny_weights.checksums()
    _, l4_before, _ = _adv_losses(tiny_weights, tiny_batch)
    for _ in range(20):
        adversarial_phase_step(tiny_weights, tiny_batch, cfg)
    after = tiny_weights.checksums()
    assert all(after[n] == before[n] for n in NETWORK_NAMES if n != "cl_adv")
    assert after["cl_adv"] != before["cl_adv"]
    _, l4_after, _ = _adv_losses(tiny_weights, tiny_batch)
    assert l4_after < l4_before


def _adv_losses(weights, batch):
    l1, l2, l3, l4, l5 = batch_losses(weights, batch)
    return l3, l4, l5


def _mini_config(**kwargs):
    base = dict(epochs=6, batch_size=4, K=2, adversarial_epochs_per_phase=1, encoder_hidden=(16,),
                decoder_hidden=(16,), classifier_hidden=(8,), d_r=4, d_v=3, n_classes=2, patience=None, seed=9)
    base.update(kwargs)
    return TrainConfig(**base)


def test_fit_records_history_and_checkpoint(tmp_path, mini_dataset):
    path = tmp_path / "model.ckpt"
    best, history = fit(mini_dataset, _mini_config(), checkpoint_path=path, manifest={"classes": mini_dataset.classes})
    assert len(history) == 6
    frame = history_to_frame(history)
    assert list(frame.columns) == ["epoch", "L1", "L2", "L3", "L4", "L5", "total", "cl_acc", "cladv_acc", "phase"]
    assert list(frame["phase"]) == ["main", "main", "adversarial", "main", "main", "adversarial"]
    assert frame["total"].iloc[history.best_epoch] == frame["total"].min()
    loaded, manifest = load_checkpoint(path)
    assert loaded.checksums() == best.checksums()
    assert manifest["classes"] == [1, 2]


def test_fit_is_deterministic(mini_dataset):
    a, _ = fit(mini_dataset, _mini_config(epochs=3))
    b, _ = fit(mini_dataset, _mini_config(epochs=3))
    assert a.checksums() == b.checksums()


def test_fit_requires_normalised_data(mini_raw_dataset):
    with pytest.raises(ConfigurationError):
        fit(mini_raw_dataset, _mini_config())


def test_fit_stops_early(mini_dataset, monkeypatch):
    import estimator.training as training

    def worsening(weights, batch, loss_weights=(1, 1, 1, 1, 1)):
        worsening.calls += 1
        return LossValues(1, 1, 1, 1, 1, float(worsening.calls), 0.5, 0.5)

    worsening.calls = 0
    monkeypatch.setattr(training, "evaluate_losses", worsening)
    _, history = fit(mini_dataset, _mini_config(epochs=20, patience=3))
    assert history.stopped_early
    assert len(history) == 4
    assert history.best_epoch == 0


def test_divergence_keeps_best_weights(mini_dataset, monkeypatch, tmp_path):
    import estimator.training as training
    real = training.evaluate_losses

    def diverging(weights, batch, loss_weights=(1, 1, 1, 1, 1)):
        diverging.calls += 1
        if diverging.calls == 3:
            return LossValues(math.nan, 1, 1, 1, 1, math.nan, 0.5, 0.5)
        return real(weights, batch, loss_weights)

    diverging.calls = 0
    monkeypatch.setattr(training, "evaluate_losses", diverging)
    with pytest.raises(TrainingDivergedError) as info:
        fit(mini_dataset, _mini_config(), checkpoint_path=tmp_path / "model.ckpt")
    assert info.value.epoch == 2
    assert info.value.best_weights is not None
    assert info.value.exit_code == 7
    assert (tmp_path / "model.ckpt").exists()


@pytest.mark.parametrize("kwargs", [{"K": 0}, {"batch_size": 0}, {"loss_weights": (1, 1, 1)}, {"dtype": "int8"}])
def test_invalid_train_config(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs).validate()


def test_train_config_dict_round_trip():
    cfg = _mini_config(loss_weights=(1.0, 2.0, 1.0, 0.5, 1.0))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"epochz": 3})


def test_untrained_losses_are_finite_and_positive(tiny_weights, tiny_batch):
    values = evaluate_losses(tiny_weights, tiny_batch)
    assert all(math.isfinite(v) and v > 0 for v in values.as_tuple())


def test_identity_autoencoders_reconstruct_exactly():
    length, d_v = 16, 3
    arch = Architecture(signal_length=length, encoder_hidden=(12,), decoder_hidden=(10,), d_r=length, d_v=d_v,
                        classifier_hidden=(6,), n_classes=2)
    networks = dict(build_model(arch, seed=1, dtype=np.float64).networks)

    def identity(name, rows):
        return DenseNet(name, [LayerSpec(rows, length, "identity")],
                        [(np.eye(rows, length), np.zeros(length))])

    networks.update(ec_r=identity("ec_r", length), dc_r=identity("dc_r", length),
                    r_ec_v=identity("r_ec_v", length), dc_v=identity("dc_v", length + d_v))
    weights = ModelWeights(architecture=arch, networks=networks)
    signal = np.random.default_rng(2).standard_normal((3, length))
    l1, l2, l3, _, _ = batch_losses(weights, {"road": signal, "cabin": signal.copy(), "labels": np.array([0, 1, 0])})
    assert (l1, l2, l3) == (0.0, 0.0, 0.0)


def test_adversary_untouched_by_many_main_steps(tiny_weights, tiny_batch):
    cfg = TrainConfig(dtype="float64")
    before = tiny_weights.checksums(["cl_adv"])
    for _ in range(100):
        main_phase_step(tiny_weights, tiny_batch, cfg)
    assert tiny_weights.checksums(["cl_adv"]) == before


def test_main_steps_overfit_one_batch(tiny_weights, tiny_batch):
    cfg = TrainConfig(dtype="float64", lr=1e-2, loss_weights=(1.0, 1.0, 1.0, 0.0, 1.0))
    totals = [main_phase_step(tiny_weights, tiny_batch, cfg).total for _ in range(50)]
    final = evaluate_losses(tiny_weights, tiny_batch, cfg.loss_weights).total
    assert final < 0.5 * totals[0]
    assert np.median(totals[-10:]) < np.median(totals[:10])


def test_adversary_learns_separable_latent(tiny_arch):
    weights = build_model(tiny_arch, seed=3, dtype=np.float64)
    labels = np.array([0, 1] * 4)
    rng = np.random.default_rng(4)
    cabin = (6.0 * labels - 3.0)[:, None] + 0.1 * rng.standard_normal((8, tiny_arch.signal_length))
    batch = {"road": rng.standard_normal((8, tiny_arch.signal_length)), "cabin": cabin, "labels": labels}
    cfg = TrainConfig(dtype="float64", adversarial_lr=1e-2)
    for _ in range(200):
        adversarial_phase_step(weights, batch, cfg)
    assert evaluate_losses(weights, batch).cladv_acc > 0.5
