import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnsr.checkpoint import Checkpoint, CheckpointError
from attnsr.models import AttnSRModel, ModelConfig, zero_tail
from attnsr.synthetic import make_corpus, texture_image, write_corpus
from attnsr.tensor import Parameter, ShapeError, Tensor, grad_check
from attnsr.training import (
    Adam,
    EvalReport,
    TrainConfig,
    Trainer,
    augment,
    dihedral,
    evaluate,
    l1_loss,
    load_run_config,
    lr_schedule,
    make_batch,
    run_config_from_dict,
    sample_patch,
)

TINY = dict(base_channels=4, denseres_blocks=1, resblocks_per_block=1, attn_base_channels=4, attn_growth=2,
            attn_convs_per_dense_block=1)


def tiny_trainer(seed=0, steps=3, epochs=2, images=None, **kw):
    images = images if images is not None else make_corpus(4, 32, seed=1)
    cfg = TrainConfig(scale=2, patch_size=8, batch_size=2, steps_per_epoch=steps, max_epochs=epochs, seed=seed,
                      **kw)
    model = AttnSRModel(ModelConfig(scale=2, **TINY), seed=0)
    val = [(f"v{i}", img) for i, img in enumerate(images[:2])]
    return Trainer(cfg, model, log=lambda s: None, train_images=images, val_images=val)


def param_bytes(model):
    return b"".join(v.tobytes() for _, v in sorted(model.state_dict().items()))


def naive_rot90(a):
    """One counter-clockwise quarter turn of a 2-D array, by explicit indexing."""
    n, m = a.shape
    out = np.empty((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            out[i, j] = a[j, m - 1 - i]
    return out


class TestPatches:
    @pytest.mark.parametrize("r", [2, 3, 4])
    def test_shapes(self, r):
        hr = np.random.default_rng(0).uniform(size=(3, 50, 61))
        lr, ilr, hp = sample_patch(hr, r, np.random.default_rng(1), patch_size=8)
        assert lr.shape == (3, 8, 8) and ilr.shape == (3, 8 * r, 8 * r) and hp.shape == (3, 8 * r, 8 * r)

    def test_constant_image(self):
        lr, ilr, hp = sample_patch(np.full((3, 40, 40), 0.4), 2, np.random.default_rng(0), patch_size=8)
        q = np.floor(0.4 * 255 + 0.5) / 255
        np.testing.assert_allclose(lr, q, atol=1e-12)
        np.testing.assert_allclose(ilr, q, atol=1e-12)
        np.testing.assert_array_equal(hp, 0.4)

    @pytest.mark.parametrize("r", [2, 3])
    def test_origin_on_scale_grid(self, r):
        h, w = 10 * r + 5, 9 * r + 2
        # every pixel stores its own coordinates so the crop origin can be read back
        hr = np.stack([np.repeat(np.arange(h)[:, None], w, 1), np.repeat(np.arange(w)[None], h, 0),
                       np.zeros((h, w))]).astype(np.float64)
        rng = np.random.default_rng(3)
        for _ in range(20):
            _, _, hp = sample_patch(hr, r, rng, patch_size=4)
            y0, x0 = int(hp[0, 0, 0]), int(hp[1, 0, 0])
            assert y0 % r == 0 and x0 % r == 0
            assert y0 + 4 * r <= h - h % r and x0 + 4 * r <= w - w % r

    def test_too_small_is_skipped(self, caplog):
        assert sample_patch(np.zeros((3, 10, 10)), 2, np.random.default_rng(0), patch_size=8) is None
        assert "smaller than patch" in caplog.text

    def test_batch_fails_without_usable_images(self):
        cfg = TrainConfig(scale=2, patch_size=8, batch_size=2)
        with pytest.raises(ValueError):
            make_batch([np.zeros((3, 8, 8))], cfg, np.random.default_rng(0))

    def test_batch_dtype_and_shapes(self):
        cfg = TrainConfig(scale=2, patch_size=8, batch_size=3)
        lr, ilr, hr = make_batch(make_corpus(2, 32), cfg, np.random.default_rng(0))
        assert lr.dtype == np.float32 and lr.shape == (3, 3, 8, 8) and hr.shape == ilr.shape == (3, 3, 16, 16)


class TestAugment:
    def test_identity_element(self):
        a = np.random.default_rng(0).normal(size=(3, 4, 4))
        np.testing.assert_array_equal(dihedral(a, 0), a)

    @pytest.mark.parametrize("k", range(8))
    def test_matches_index_oracle(self, k):
        a = np.arange(20.0).reshape(4, 5)
        expected = a
        for _ in range(k % 4):
            expected = naive_rot90(expected)
        if k >= 4:
            expected = np.array([row[::-1] for row in expected])
        np.testing.assert_array_equal(dihedral(a, k), expected)

    @pytest.mark.parametrize("k,order", [(1, 4), (2, 2), (3, 4), (4, 2), (5, 2), (6, 2), (7, 2)])
    def test_element_orders(self, k, order):
        a = np.random.default_rng(k).normal(size=(2, 5, 5))
        out = a
        for _ in range(order):
            out = dihedral(out, k)
        np.testing.assert_array_equal(out, a)

    def test_eight_distinct_elements(self):
        a = np.arange(16.0).reshape(4, 4)
        assert len({dihedral(a, k).tobytes() for k in range(8)}) == 8

    def test_closed_under_composition(self):
        a = np.arange(16.0).reshape(4, 4)
        elements = {dihedral(a, k).tobytes() for k in range(8)}
        for i in range(8):
            for j in range(8):
                assert dihedral(dihedral(a, i), j).tobytes() in elements

    @settings(max_examples=25, deadline=None)
    @given(st.sampled_from([2, 3, 4]), st.integers(0, 10_000))
    def test_preserves_lr_hr_correspondence(self, r, seed):
        p = 4
        lr = np.arange(p * p, dtype=np.float64).reshape(1, p, p)
        hr = np.kron(lr, np.ones((1, r, r)))
        a_lr, a_ilr, a_hr = augment(lr, hr.copy(), hr, np.random.default_rng(seed))
        np.testing.assert_array_equal(a_hr, np.kron(a_lr, np.ones((1, r, r))))
        np.testing.assert_array_equal(a_ilr, a_hr)


class TestL1:
    def test_examples(self):
        assert l1_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
        assert l1_loss(Tensor([0.0, 0.0]), Tensor([1.0, -3.0])).item() == 2.0
        target = np.random.default_rng(0).normal(size=(2, 3))
        assert l1_loss(Tensor(target + 0.5), Tensor(target)).item() == pytest.approx(0.5, abs=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        target = Tensor(rng.normal(size=(2, 3, 4)))
        x = rng.normal(size=(2, 3, 4))
        assert grad_check(lambda t: l1_loss(t, target), x) <= 1e-5

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = Parameter(np.array([1.0, -2.0, 0.5]))
        p.grad = np.array([0.3, -7.0, 1e-3])
        Adam({"p": p}).step(0.01)
        # bias correction makes the first step lr * g / (|g| + eps)
        expected = np.array([1.0, -2.0, 0.5]) - 0.01 * np.sign(p.grad) * np.abs(p.grad) / (np.abs(p.grad) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_unit_gradient_step(self):
        p = Parameter(np.array([0.0]))
        p.grad = np.array([1.0])
        Adam({"p": p}).step(1e-4)
        assert p.data[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)

    def test_zero_gradient_leaves_parameters(self):
        p = Parameter(np.array([1.0, 2.0]))
        p.grad = np.zeros(2)
        opt = Adam({"p": p})
        opt.step(0.1)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        assert opt.t == 1

    def test_identical_states_stay_identical(self):
        rng = np.random.default_rng(1)
        x0 = rng.normal(size=4)
        a, b = Parameter(x0.copy()), Parameter(x0.copy())
        oa, ob = Adam({"p": a}), Adam({"p": b})
        for g in rng.normal(size=(5, 4)):
            a.grad, b.grad = g.copy(), g.copy()
            oa.step(1e-2)
            ob.step(1e-2)
        assert a.data.tobytes() == b.data.tobytes()

    def test_matches_reference_recurrence(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=5)
        grads = rng.normal(size=(6, 5))
        p = Parameter(x0.copy())
        opt = Adam({"p": p})
        x, m, v = x0.copy(), np.zeros(5), np.zeros(5)
        for t, g in enumerate(grads, start=1):
            p.grad = g
            opt.step(1e-3)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p.data, x, rtol=1e-12)

    def test_missing_gradient(self):
        p = Parameter(np.zeros(2))
        with pytest.raises(RuntimeError):
            Adam({"p": p}).step(0.1)


class TestSchedule:
    def test_examples(self):
        assert lr_schedule(0) == 1e-4
        assert lr_schedule(9) == 1e-4
        assert lr_schedule(10) == 5e-5
        assert lr_schedule(79) == pytest.approx(1e-4 * 0.5**7)

    def test_non_increasing_and_piecewise_constant(self):
        rates = [lr_schedule(e) for e in range(100)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        for e in range(100):
            assert rates[e] == rates[e - e % 10]


class TestRunConfig:
    def test_missing_field(self, tmp_path):
        with pytest.raises(ValueError, match="missing required field 'val_manifest'"):
            run_config_from_dict({"scale": 2, "train_manifest": "t.txt"})

    def test_unknown_field(self):
        with pytest.raises(ValueError, match="lr_zero"):
            run_config_from_dict({"scale": 2, "train_manifest": "a", "val_manifest": "b", "lr_zero": 1})

    def test_bad_json_reports_line(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{\n  "scale": 2,\n  "train_manifest": oops\n}\n')
        with pytest.raises(ValueError, match="line 3"):
            load_run_config(path)

    def test_scale_feeds_both_configs(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"scale": 4, "train_manifest": "a", "val_manifest": "b", "base_channels": 8,
                                    "patch_size": 12}))
        mcfg, tcfg = load_run_config(path)
        assert mcfg.scale == tcfg.scale == 4
        assert mcfg.base_channels == 8 and tcfg.patch_size == 12

    def test_patch_must_align_with_scale(self):
        with pytest.raises(ValueError, match="divisible by scale"):
            TrainConfig(scale=3, patch_size=16)

    def test_invalid_value(self):
        with pytest.raises(ValueError, match="scale"):
            run_config_from_dict({"scale": 5, "train_manifest": "a", "val_manifest": "b"})


class TestEvaluate:
    def test_constant_image_is_exact(self):
        report = evaluate("bicubic", [("flat", np.full((3, 24, 24), 0.5))], 2)
        assert report.rows[0][1] == math.inf and report.rows[0][2] == pytest.approx(1.0)
        assert report.n_infinite == 1

    def test_zero_tail_model_equals_bicubic(self):
        model = AttnSRModel(ModelConfig(scale=2, **TINY))
        zero_tail(model)
        images = [(f"t{i}", img) for i, img in enumerate(make_corpus(2, 32, seed=5))]
        a, b = evaluate(model, images, 2), evaluate("bicubic", images, 2)
        assert a.rows == b.rows

    def test_failures_are_collected(self, tmp_path):
        (tmp_path / "bad.png").write_text("nope")
        report = evaluate("bicubic", [("bad", tmp_path / "bad.png"), ("ok", np.random.default_rng(0).uniform(
            size=(3, 24, 24)))], 2)
        assert [n for n, _ in report.failures] == ["bad"] and len(report.rows) == 1

    def test_csv_layout_and_mean(self):
        report = EvalReport([("a", 30.0, 0.9), ("b", math.inf, 1.0), ("c", 20.0, 0.8)], [])
        lines = report.to_csv().splitlines()
        assert lines[0] == "name,psnr_db,ssim"
        assert lines[2] == "b,inf,1.000000"
        assert lines[-1] == "mean,25.0000,0.900000"
        assert len(lines) == 5


class TestCheckpoint:
    def test_bytes_round_trip(self):
        tr = tiny_trainer(steps=1, epochs=1)
        tr.run()
        blob = tr.checkpoint().to_bytes()
        assert blob[:4] == b"ATSR"
        assert Checkpoint.from_bytes(blob).to_bytes() == blob

    def test_file_round_trip_restores_model(self, tmp_path):
        tr = tiny_trainer(steps=2, epochs=1)
        tr.run()
        tr.checkpoint().save(tmp_path / "x.ckpt")
        model = Checkpoint.load(tmp_path / "x.ckpt").build_model()
        assert param_bytes(model) == param_bytes(tr.model)

    def test_corrupt_files(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOPE")
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "bad.ckpt")
        blob = tiny_trainer().checkpoint().to_bytes()
        (tmp_path / "cut.ckpt").write_bytes(blob[: len(blob) - 7])
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "cut.ckpt")
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "missing.ckpt")


class TestTrainer:
    def test_zero_steps_returns_initial_weights(self):
        tr = tiny_trainer(steps=0)
        before = param_bytes(tr.model)
        ckpt = tr.run()
        assert ckpt.epoch == 0 and not tr.step_losses
        assert param_bytes(ckpt.build_model()) == before

    def test_fixed_seed_is_deterministic(self):
        a, b = tiny_trainer(seed=7), tiny_trainer(seed=7)
        a.run()
        b.run()
        assert a.step_losses == b.step_losses
        assert a.checkpoint().to_bytes() == b.checkpoint().to_bytes()

    def test_different_seed_differs(self):
        a, b = tiny_trainer(seed=1, epochs=1), tiny_trainer(seed=2, epochs=1)
        a.run()
        b.run()
        assert a.step_losses != b.step_losses

    def test_resume_reproduces_trajectory(self):
        full = tiny_trainer(steps=3, epochs=2)
        full.run()
        first = tiny_trainer(steps=3, epochs=1)
        first.run()
        blob = first.checkpoint().to_bytes()
        resumed = tiny_trainer(steps=3, epochs=2)
        resumed.restore(Checkpoint.from_bytes(blob))
        resumed.run()
        assert first.step_losses + resumed.step_losses == full.step_losses
        assert param_bytes(resumed.model) == param_bytes(full.model)

    def test_early_stop(self):
        tr = tiny_trainer(steps=1, epochs=50, early_stop_patience=2)
        tr.validate = lambda: (10.0, 0.5)  # never improves after the first epoch
        tr.run()
        assert tr.epoch == 3 and tr.bad_epochs == 2

    def test_nan_loss_aborts(self, tmp_path):
        tr = tiny_trainer(steps=2)
        tr.out_dir = tmp_path
        tr.model.feature.tail.bias.data[:] = np.nan
        with pytest.raises(FloatingPointError):
            tr.run()
        assert json.loads((tmp_path / "nan_dump.json").read_text())["nonfinite_params"]

    def test_scale_mismatch(self):
        with pytest.raises(ValueError):
            Trainer(TrainConfig(scale=3, patch_size=12), AttnSRModel(ModelConfig(scale=2, **TINY)), train_images=[])

    def test_writes_checkpoints_and_mask_snapshots(self, tmp_path):
        tr = tiny_trainer(steps=1, epochs=2)
        tr.out_dir, tr.mask_snapshots = tmp_path, 1
        tr.run()
        assert (tmp_path / "last.ckpt").is_file() and (tmp_path / "best.ckpt").is_file()
        assert sorted(p.name for p in (tmp_path / "masks").iterdir()) == ["epoch_001.png", "epoch_002.png"]


class TestSynthetic:
    def test_corpus_is_deterministic_and_textured(self):
        a, b = make_corpus(3, 48, seed=4), make_corpus(3, 48, seed=4)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert all(x.shape == (3, 48, 48) and 0 <= x.min() and x.max() <= 1 and x.std() > 0.05 for x in a)

    def test_write_corpus(self, tmp_path):
        train, val = write_corpus(tmp_path, n=5, size=32, n_val=2)
        assert len(train.read_text().splitlines()) == 3 and len(val.read_text().splitlines()) == 2

    def test_texture_has_high_frequencies(self):
        img = texture_image(np.random.default_rng(0), 64)
        assert np.abs(np.diff(img, axis=2)).mean() > 0.01
