import math

import numpy as np
import pytest

from tryon_iqa import tensor as T
from tryon_iqa.curation import split_dataset
from tryon_iqa.errors import ConfigError, DataError, NumericError
from tryon_iqa.model import IcaModel
from tryon_iqa.train import AdamW, EarlyStopping, TrainConfig, evaluation_loss, predict, train


class TestAdamW:
    def test_first_step_is_sign_times_lr(self):
        p = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.array([0.5, -4.0, 1e-3])
        AdamW(lr=0.1, weight_decay=0.0).step({"p": p}, ["p"])
        np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], rtol=1e-6)

    def test_decay_is_decoupled(self):
        p = T.Tensor(np.array([2.0]), requires_grad=True)
        p.grad = np.zeros(1)
        AdamW(lr=0.1, weight_decay=0.5).step({"p": p}, ["p"])
        # zero gradient leaves only the multiplicative shrink
        np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)])

    def test_matches_reference_recursion(self, rng):
        p = T.Tensor(rng.normal(size=4), requires_grad=True)
        ref = p.data.copy()
        m = v = np.zeros(4)
        opt = AdamW(lr=0.01, weight_decay=0.01)
        for t in range(1, 6):
            g = rng.normal(size=4)
            p.grad = g
            opt.step({"p": p}, ["p"])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref * (1 - 0.01 * 0.01) - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)
        assert opt.state.step == 5

    def test_non_finite_gradient(self):
        p = T.Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(NumericError, match="p"):
            AdamW().step({"p": p}, ["p"])
        assert p.data[0] == 1.0


class TestEarlyStopping:
    def test_scripted_sequence(self):
        stop = EarlyStopping(patience=2)
        seen = []
        for epoch, loss in enumerate([1.0, 0.8, 0.9, 0.7, 0.75, 0.72, 0.6], start=1):
            seen.append(stop.update(epoch, loss))
            if stop.should_stop:
                break
        assert seen == [True, True, False, True, False, False]
        assert stop.best_epoch == 4 and stop.best_loss == 0.7

    def test_ties_do_not_improve(self):
        stop = EarlyStopping(patience=1)
        stop.update(1, 0.5)
        assert not stop.update(2, 0.5)
        assert stop.should_stop


class TestTrainConfig:
    @pytest.mark.parametrize("bad", [dict(tau=0.0), dict(patience=0), dict(batch_size=0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"lr": 1.0})


@pytest.fixture(scope="module")
def split_corpus(small_corpus):
    samples = split_dataset(small_corpus.samples, (0.6, 0.2, 0.2), seed=1)
    return {name: [s for s in samples if s.split == name] for name in ("train", "val", "test")}


class TestLoop:
    def run(self, tiny_config, corpus, split_corpus, **kw):
        model = IcaModel.init(tiny_config, seed=0)
        cfg = TrainConfig(**{"learning_rate": 3e-3, "max_epochs": 3, "patience": 5, **kw})
        return train(model, split_corpus["train"], split_corpus["val"], corpus.images, cfg)

    def test_log_and_best_snapshot(self, tiny_config, small_corpus, split_corpus):
        res = self.run(tiny_config, small_corpus, split_corpus)
        assert [r["epoch"] for r in res.log] == [1, 2, 3]
        assert set(res.log[0]) == {"epoch", "train_loss", "val_loss", "elapsed_ms"}
        best = min(res.log, key=lambda r: r["val_loss"])
        assert res.best_epoch == best["epoch"]
        again = evaluation_loss(res.model, split_corpus["val"], small_corpus.images, 0.5)
        assert again == pytest.approx(res.best_val_loss, rel=1e-12)

    def test_deterministic(self, tiny_config, small_corpus, split_corpus):
        strip = lambda log: [{k: v for k, v in r.items() if k != "elapsed_ms"} for r in log]
        a = self.run(tiny_config, small_corpus, split_corpus, max_epochs=2)
        b = self.run(tiny_config, small_corpus, split_corpus, max_epochs=2)
        assert strip(a.log) == strip(b.log)

    def test_loss_decreases(self, tiny_config, small_corpus, split_corpus):
        res = self.run(tiny_config, small_corpus, split_corpus, max_epochs=4)
        assert res.log[-1]["train_loss"] < res.log[0]["train_loss"]

    def test_patience_stops_early(self, tiny_config, small_corpus, split_corpus):
        # a zero learning rate never improves after epoch 1
        res = self.run(tiny_config, small_corpus, split_corpus, learning_rate=0.0, weight_decay=0.0,
                       patience=1, max_epochs=10)
        assert len(res.log) == 2 and res.best_epoch == 1

    def test_empty_split(self, tiny_config, small_corpus, split_corpus):
        with pytest.raises(DataError):
            train(IcaModel.init(tiny_config), split_corpus["train"], [], small_corpus.images, TrainConfig())

    def test_overlapping_splits(self, tiny_config, small_corpus, split_corpus):
        tr = split_corpus["train"]
        with pytest.raises(DataError, match="share"):
            train(IcaModel.init(tiny_config), tr, tr[:2], small_corpus.images, TrainConfig())

    def test_predict_order_and_chunking(self, tiny_model, small_corpus):
        samples = small_corpus.samples[:10]
        a = predict(tiny_model, samples, small_corpus.images, chunk=3)
        b = predict(tiny_model, samples, small_corpus.images, chunk=64)
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)
        assert predict(tiny_model, [], small_corpus.images).shape == (0,)
