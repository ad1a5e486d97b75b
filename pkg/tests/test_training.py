import csv

import numpy as np
import pytest

from eendss import tensor as T
from eendss.checkpoint import array_digest, load_checkpoint
from eendss.model import EENDSS, ModelConfig
from eendss.simulate import random_mixture
from eendss.training import (EpochStats, PlateauSchedule, TrainConfig, batch_losses, evaluate, finetune_flexible,
                             fit, make_batches, train_epoch)

MICRO = ModelConfig(n_filters=16, bottleneck=8, tcn_hidden=12, tcn_layers=3, tcn_repeats=1, d_model=8, heads=2,
                    transformer_layers=1, ff_dim=16, c_max=4)


def corpus(n, counts=(2,), seed=0, duration=1.0):
    rng = np.random.default_rng(seed)
    ratios = [0.0, 0.5, 1.0]
    return [random_mixture(rng, counts[i % len(counts)], ratios[i % 3], duration=duration) for i in range(n)]


def head_digests(model):
    return {k: array_digest(model.separation.heads[k - 1].state_dict()) for k in range(1, model.config.c_max + 1)}


def stub_epoch(model, train, config, optimizer, rng):
    return EpochStats(0.0, 0.0, 0.0, 0.0, batches=1)


def scripted_eval(losses):
    it = iter(losses)

    def eval_fn(model, dev, config):
        return EpochStats(0.0, 0.0, 0.0, next(it), batches=1)

    return eval_fn


@pytest.fixture(autouse=True)
def _clean_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()


class TestTrainConfig:
    @pytest.mark.parametrize("field,value", [("lambda2", -0.1), ("lr_halving_patience", 0),
                                             ("early_stop_patience", 0), ("batch_size", 0), ("lr", 0.0)])
    def test_invalid(self, field, value):
        with pytest.raises(ValueError):
            TrainConfig(**{field: value})

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.lr, cfg.lr_halving_patience, cfg.early_stop_patience) == (16, 1e-3, 3, 5)
        assert cfg.weights == (1.0, 0.2, 0.2)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 1.0})


class TestSchedule:
    def test_worsening_trace(self):
        result = fit(EENDSS(MICRO), corpus(2), corpus(1, seed=1), TrainConfig(max_epochs=20),
                     epoch_fn=stub_epoch, eval_fn=scripted_eval([1.0 + 0.1 * e for e in range(20)]))
        assert len(result.history) == 6 and result.stopped_early
        assert [row["lr"] for row in result.history] == [1e-3] * 4 + [5e-4] * 2
        assert result.events == ["epoch 4: lr halved to 0.0005", "epoch 6: early stop"]
        assert result.best_epoch == 1

    def test_improving_runs_to_max(self):
        result = fit(EENDSS(MICRO), corpus(2), corpus(1, seed=1), TrainConfig(max_epochs=7),
                     epoch_fn=stub_epoch, eval_fn=scripted_eval([1.0 - 0.1 * e for e in range(7)]))
        assert len(result.history) == 7 and not result.stopped_early
        assert all(row["lr"] == 1e-3 for row in result.history)
        assert result.best_epoch == 7

    def test_best_epoch_is_minimum(self):
        losses = [3.0, 2.0, 2.5, 1.0, 1.5, 1.2, 1.1, 1.3, 1.4, 1.6]
        result = fit(EENDSS(MICRO), corpus(2), corpus(1, seed=1), TrainConfig(max_epochs=10),
                     epoch_fn=stub_epoch, eval_fn=scripted_eval(losses))
        assert result.best_epoch == 4 and result.best_dev == 1.0

    def test_tolerance(self):
        s = PlateauSchedule(1e-3, 3, 5, min_delta=1e-4)
        assert s.step(1.0)["improved"]
        assert not s.step(1.0 - 5e-5)["improved"]
        assert s.step(1.0 - 2e-4)["improved"]

    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError):
            fit(EENDSS(MICRO), corpus(2), corpus(1), TrainConfig(max_epochs=0))

    def test_empty_dev_rejected(self):
        with pytest.raises(ValueError, match="dev"):
            fit(EENDSS(MICRO), corpus(2), [], TrainConfig(max_epochs=1))


class TestBatches:
    def test_grouped_by_count(self):
        samples = corpus(9, counts=(2, 3))
        for batch in make_batches(samples, 4, np.random.default_rng(0)):
            assert len({samples[i].num_speakers for i in batch}) == 1
            assert len(batch) <= 4

    def test_covers_everything(self):
        batches = make_batches(corpus(9, counts=(2, 3)), 4, np.random.default_rng(0))
        assert sorted(i for b in batches for i in b) == list(range(9))


class TestEpoch:
    def test_recombination(self):
        model = EENDSS(MICRO)
        samples = corpus(4)
        parts = batch_losses(model, samples, [0, 1], TrainConfig())
        assert abs(float(parts.total.data) - parts.recombined()) < 1e-6
        T.get_tape().clear()

    def test_lambda1_zero_freezes_separation(self):
        model = EENDSS(MICRO)
        names = model.separation_parameter_names()
        before = array_digest({n: a for n, a in model.state_dict().items() if n in names})
        cfg = TrainConfig(lambda1=0.0, batch_size=2)
        opt = T.Adam(model.parameters(), lr=cfg.lr)
        train_epoch(model, corpus(4), cfg, opt, np.random.default_rng(0))
        after = array_digest({n: a for n, a in model.state_dict().items() if n in names})
        assert before == after
        assert array_digest(model.state_dict(), "diarization.") != array_digest(EENDSS(MICRO).state_dict(),
                                                                               "diarization.")

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model = EENDSS(MICRO, seed=3)
            result = fit(model, corpus(6), corpus(2, seed=1), TrainConfig(max_epochs=2, batch_size=3, seed=5))
            runs.append([(r["total"], r["dev_total"]) for r in result.history])
        assert runs[0] == runs[1]

    def test_shuffle_draws_from_batch_rng(self):
        model = EENDSS(ModelConfig(**{**MICRO.to_dict(), "eda_shuffle": True}))
        samples = corpus(2)
        with T.no_grad():
            runs = [batch_losses(model, samples, [0, 1], TrainConfig(), rng=np.random.default_rng(s)).l_exist
                    for s in (0, 0, 1)]
        assert runs[0] == runs[1] != runs[2]

    def test_no_shuffle_ignores_rng(self):
        model = EENDSS(MICRO)
        samples = corpus(2)
        with T.no_grad():
            runs = [batch_losses(model, samples, [0, 1], TrainConfig(), rng=np.random.default_rng(s)).l_exist
                    for s in (0, 1)]
        assert runs[0] == runs[1]

    @pytest.mark.parametrize("c", [2, 3])
    def test_only_oracle_head_changes(self, c):
        model = EENDSS(MICRO)
        before = head_digests(model)
        cfg = TrainConfig(batch_size=2)
        train_epoch(model, corpus(4, counts=(c,)), cfg, T.Adam(model.parameters()), np.random.default_rng(0))
        after = head_digests(model)
        assert [k for k in before if before[k] != after[k]] == [c]

    def test_non_finite_aborts(self, monkeypatch):
        from eendss import training
        model = EENDSS(MICRO)
        real = training.batch_losses

        def poisoned(*args, **kwargs):
            parts = real(*args, **kwargs)
            parts.total = parts.total * float("nan")
            return parts

        monkeypatch.setattr(training, "batch_losses", poisoned)
        with pytest.raises(RuntimeError, match="non-finite"):
            train_epoch(model, corpus(4), TrainConfig(batch_size=2), T.Adam(model.parameters()),
                        np.random.default_rng(0))

    def test_history_and_checkpoint(self, tmp_path):
        model = EENDSS(MICRO)
        result = fit(model, corpus(4), corpus(2, seed=1), TrainConfig(max_epochs=2, batch_size=2), tmp_path)
        with open(tmp_path / "history.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["epoch", "lr", "l_sisdr", "l_diar", "l_exist", "total", "dev_total"]
        assert len(rows) == 2
        arrays, header = load_checkpoint(result.checkpoint)
        assert header["extra"]["epoch"] == result.best_epoch
        assert array_digest(arrays) == array_digest(model.state_dict())

    @pytest.mark.slow
    def test_smoke_loss_decreases(self):
        model = EENDSS(MICRO, seed=0)
        result = fit(model, corpus(200), corpus(20, seed=1), TrainConfig(max_epochs=50))
        dev = [r["dev_total"] for r in result.history]
        assert min(dev[1:]) < dev[0]


class TestFinetune:
    def test_heads_for_present_counts(self):
        model = EENDSS(MICRO)
        before = head_digests(model)
        finetune_flexible(model, corpus(8, counts=(2, 3)), corpus(2, counts=(2, 3), seed=1),
                          TrainConfig(max_epochs=1, batch_size=2))
        after = head_digests(model)
        assert before[2] != after[2] and before[3] != after[3]
        assert before[1] == after[1] and before[4] == after[4]

    def test_single_count_rejected(self):
        with pytest.raises(ValueError, match="two speaker counts"):
            finetune_flexible(EENDSS(MICRO), corpus(4), corpus(2), TrainConfig(max_epochs=1))

    def test_count_above_c_max_rejected(self):
        model = EENDSS(ModelConfig(**{**MICRO.to_dict(), "c_max": 2}))
        with pytest.raises(ValueError, match="c_max"):
            finetune_flexible(model, corpus(4, counts=(2, 3)), corpus(2), TrainConfig(max_epochs=1))

    def test_zero_epochs_copies(self, tmp_path):
        model = EENDSS(MICRO, seed=4)
        original = model.state_dict()
        assert finetune_flexible(model, corpus(4, counts=(2, 3)), corpus(2), TrainConfig(max_epochs=0),
                                 tmp_path) is None
        arrays, _ = load_checkpoint(tmp_path / "best.ckpt")
        assert array_digest(arrays) == array_digest(original)

    @pytest.mark.slow
    def test_pretrained_start_beats_scratch(self):
        mixed_train = corpus(48, counts=(2, 3), seed=10)
        mixed_dev = corpus(12, counts=(2, 3), seed=11)
        pretrained = EENDSS(MICRO, seed=0)
        fit(pretrained, corpus(96, seed=12), corpus(12, seed=13), TrainConfig(max_epochs=15, batch_size=8))
        cfg = TrainConfig(max_epochs=5, batch_size=8, early_stop_patience=10)
        scratch = fit(EENDSS(MICRO, seed=0), mixed_train, mixed_dev, cfg)
        tuned = finetune_flexible(pretrained, mixed_train, mixed_dev, cfg)
        target = scratch.history[4]["dev_total"]
        assert min(r["dev_total"] for r in tuned.history[:2]) <= target
