import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from micacl.data import DatasetSpec, gen_dataset, write_dataset
from micacl.errors import ConfigError, FormatError, ShapeError
from micacl.mccl import ClassStats
from micacl.model import ModelConfig, ModelParams, RunConfig, forward_model, load_params, read_checkpoint
from micacl.optim import OptimState, adamw_step
from micacl.tensor import backward, zero_grad
from micacl.trainer import (
    CSV_COLUMNS,
    confusion_matrix,
    metrics_from_confusion,
    predict,
    step_loss,
    train,
)


def tiny_config(**train_kw):
    cfg = RunConfig()
    cfg.model = ModelConfig(enc_hidden=8, c=8, d=4, c_h=8, e=4, n_heads=2)
    for k, v in train_kw.items():
        setattr(cfg.train, k, v)
    return cfg


def tiny_data(**kw):
    base = dict(num_classes=3, instances=4, feat_dim=5, head_count=6, imbalance_ratio=3.0, seed=1)
    base.update(kw)
    return gen_dataset(DatasetSpec(**base))


class TestMetrics:
    def test_two_class_example(self):
        m = metrics_from_confusion(np.array([[8, 2], [1, 1]]))
        assert m.war == pytest.approx(0.75, abs=1e-15)
        assert m.uar == pytest.approx(0.65, abs=1e-15)

    def test_perfect(self):
        m = metrics_from_confusion(np.diag([3, 5, 1]))
        assert m.war == 1.0 and m.uar == 1.0

    def test_head_class_predictor(self):
        labels = np.array([0] * 9 + [1])
        m = metrics_from_confusion(confusion_matrix(labels, np.zeros(10, dtype=int), 2))
        assert m.war == pytest.approx(0.9) and m.uar == pytest.approx(0.5)

    def test_absent_class_excluded(self):
        m = metrics_from_confusion(np.array([[2, 0, 0], [0, 0, 0], [1, 0, 1]]))
        assert np.isnan(m.per_class_recall[1])
        assert m.uar == pytest.approx(0.75)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.int64, st.tuples(st.integers(2, 6)).map(lambda t: (t[0], t[0])), elements=st.integers(0, 20)))
    def test_identities(self, cm):
        if cm.sum() == 0:
            cm[0, 0] = 1
        m = metrics_from_confusion(cm)
        labels, preds = [], []
        for i in range(len(cm)):
            for j in range(len(cm)):
                labels += [i] * int(cm[i, j])
                preds += [j] * int(cm[i, j])
        labels, preds = np.array(labels), np.array(preds)
        assert m.war == pytest.approx(np.mean(labels == preds), abs=1e-12)
        recalls = [np.mean(preds[labels == c] == c) for c in range(len(cm)) if (labels == c).any()]
        assert m.uar == pytest.approx(np.mean(recalls), abs=1e-12)
        assert 0 <= m.war <= 1 and 0 <= m.uar <= 1
        np.testing.assert_array_equal(confusion_matrix(labels, preds, len(cm)), cm)

    def test_argmax_ties_go_low(self):
        assert predict(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])).tolist() == [0, 1]


class TestForward:
    def test_shapes(self):
        cfg = tiny_config()
        cfg.model.t, cfg.model.c_in, cfg.model.k = 4, 5, 3
        params = ModelParams.init(cfg.model, 0)
        for batch in (1, 3):
            logits, x_bag = forward_model(np.zeros((batch, 4, 5)) + 0.1, params, cfg.model)
            assert logits.shape == (batch, 3) and x_bag.shape == (batch, 8)

    def test_bad_input_shape(self):
        cfg = tiny_config()
        params = ModelParams.init(cfg.model, 0)
        with pytest.raises(ShapeError):
            forward_model(np.zeros((2, 3, 12)), params, cfg.model)

    def test_init_is_seeded(self):
        a = ModelParams.init(ModelConfig(), 4)
        b = ModelParams.init(ModelConfig(), 4)
        c = ModelParams.init(ModelConfig(), 5)
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
        assert not np.array_equal(a.enc_w1.data, c.enc_w1.data)


class TestTrain:
    def test_one_epoch_smoke(self, tmp_path):
        data = tiny_data(num_classes=2, head_count=4, imbalance_ratio=1.0)
        assert len(data) == 8
        write_dataset(data, tmp_path / "d.mibg")
        result = train(tiny_config(epochs=1, batch_size=4), tmp_path / "d.mibg", 3, out_dir=tmp_path / "run")
        with open(tmp_path / "run" / "metrics.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == list(CSV_COLUMNS)
        assert len(rows) == 2 and rows[1][0] == "1"
        assert len(result.history) == 1
        assert (tmp_path / "run" / "heldout.csv").exists()
        assert (tmp_path / "run" / "model.mick").exists()

    def test_deterministic_csv(self, tmp_path):
        data = tiny_data()
        for name in ("a", "b"):
            train(tiny_config(epochs=2, batch_size=4), data, 7, out_dir=tmp_path / name)
        for f in ("metrics.csv", "heldout.csv", "model.mick"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_split_covers_every_class(self):
        result = train(tiny_config(epochs=1, batch_size=4), tiny_data(), 0)
        assert sorted(result.train_idx + result.test_idx) == list(range(len(tiny_data())))
        assert result.stats.n_c.tolist() == [5, 2, 1]

    def test_loss_modes(self):
        data = tiny_data()
        cet = train(tiny_config(epochs=1, batch_size=4, loss_mode="cet-only"), data, 0)
        assert all(row["loss_mc"] == 0.0 for row in cet.history)
        mc = train(tiny_config(epochs=1, batch_size=4, loss_mode="mccl-only"), data, 0)
        assert all(s[0] == s[1] for s in mc.step_losses)

    def test_contradicting_config(self):
        cfg = tiny_config(epochs=1)
        cfg.model.c_in = 7
        with pytest.raises(ConfigError):
            train(cfg, tiny_data(), 0)

    def test_loss_decreases_on_fixed_batch(self):
        cfg = RunConfig()
        data = gen_dataset(DatasetSpec(seed=2))
        x, y = data.arrays(list(range(0, len(data), len(data) // 16))[:16])
        params = ModelParams.init(cfg.model, 0)
        stats = ClassStats(np.bincount(data.labels), cfg.model.tau0)
        opt = OptimState()
        losses = []
        for _ in range(21):
            loss, *_ = step_loss(params, cfg, stats, x, y, "full")
            losses.append(loss.item())
            zero_grad(params.parameters())
            backward(loss)
            adamw_step(params.named_parameters(), opt, opt.lr_max)
        drops = sum(b < a for a, b in zip(losses, losses[1:]))
        assert drops >= 18


class TestConfig:
    def test_parse(self):
        cfg = RunConfig.from_text("# comment\nc_h = 8\nn_heads=2\nscales=1,4,8\nlr_max=1e-3\n"
                                  "log_form=true\nepochs=3  # inline\nloss_mode=cet-only\n")
        assert cfg.model.c_h == 8 and cfg.model.scale_list() == (1, 4, 8)
        assert cfg.optim.lr_max == 1e-3 and cfg.model.log_form is True
        assert cfg.train.epochs == 3 and cfg.train.loss_mode == "cet-only"

    def test_round_trip(self):
        cfg = RunConfig.from_text("tau0=0.25\nweight_decay=0.01\nbypass_dwg=1\n")
        assert RunConfig.from_text(cfg.to_text()).to_text() == cfg.to_text()

    @pytest.mark.parametrize("text", ["learning_rate=1e-3", "c_h=abc", "log_form=maybe", "just a line"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)

    @pytest.mark.parametrize("text", ["c_h=10", "scales=2,1", "scales=1,32", "batch_size=1", "loss_mode=x"])
    def test_invalid_values(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text).validate()


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tmp_path):
        train(tiny_config(epochs=1, batch_size=4), tiny_data(), 0, out_dir=tmp_path)
        return tmp_path / "model.mick"

    def test_round_trip(self, saved, tmp_path):
        config, arrays, meta = read_checkpoint(saved)
        assert meta["n_c"] == "5,2,1" and meta["epochs_trained"] == "1"
        params = load_params(config.model, arrays)
        for name, p in params.named_parameters():
            np.testing.assert_array_equal(p.data, arrays[name])
        from micacl.model import write_checkpoint
        write_checkpoint(tmp_path / "again.mick", params, config, meta)
        assert (tmp_path / "again.mick").read_bytes() == saved.read_bytes()

    @pytest.mark.parametrize("mutate,offset", [
        (lambda b: b"MICX" + b[4:], 0),
        (lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:], 4),
        (lambda b: b[:6], 4),
        (lambda b: b"", 0),
    ])
    def test_corrupted(self, saved, tmp_path, mutate, offset):
        bad = tmp_path / "bad.mick"
        bad.write_bytes(mutate(saved.read_bytes()))
        with pytest.raises(FormatError) as info:
            read_checkpoint(bad)
        assert info.value.offset == offset

    def test_truncated_tail(self, saved, tmp_path):
        raw = saved.read_bytes()
        bad = tmp_path / "bad.mick"
        bad.write_bytes(raw[:-3])
        with pytest.raises(FormatError):
            read_checkpoint(bad)
        bad.write_bytes(raw + b"x")
        with pytest.raises(FormatError) as info:
            read_checkpoint(bad)
        assert info.value.offset == len(raw)

    def test_shape_mismatch(self, saved):
        config, arrays, _ = read_checkpoint(saved)
        config.model.c_h = 16
        config.model.c = 16
        config.model.n_heads = 4
        with pytest.raises(ShapeError):
            load_params(config.model, arrays)
