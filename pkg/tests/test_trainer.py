import math
import struct

import numpy as np
import pytest

from dfdnet.autodiff import Tensor, default_dtype
from dfdnet.errors import ContractError
from dfdnet.image import DatasetManifest, RainParams, write_toy_dataset
from dfdnet.losses import LossWeights, composite_loss
from dfdnet.net import DerainNet, ModelConfig
from dfdnet.trainer import (
    EVAL_COLUMNS,
    LOG_COLUMNS,
    MAGIC,
    Checkpoint,
    OptimState,
    TrainHyper,
    adam_step,
    evaluate,
    make_checkpoint,
    restore,
    smoothed,
    substream_seed,
    train,
    training_batch,
)

TINY = ModelConfig(stages=1, width=4)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return write_toy_dataset(root / "train", 4, seed=3, rain=RainParams(), size=32)


def hyper(**kw):
    base = dict(iters=4, batch=2, patch_size=16, log_every=1)
    base.update(kw)
    return TrainHyper(**base)


def scalar_adam(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on one scalar parameter starting at 0."""
    x, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return x


class TestAdam:
    def test_zero_gradient(self):
        p = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
        p.grad = np.zeros(3)
        state = OptimState()
        adam_step([("p", p)], state)
        assert state.step == 1
        np.testing.assert_array_equal(p.data, 1.0)

    def test_first_step_is_signed_lr(self):
        p = Tensor(np.zeros(2), requires_grad=True, dtype=np.float64)
        p.grad = np.array([0.3, -2.0])
        adam_step([("p", p)], OptimState(lr=1e-3))
        np.testing.assert_allclose(p.data, [-1e-3, 1e-3], rtol=1e-4)

    def test_matches_scalar_reference(self):
        grads = [0.5, -0.1, 0.25, 2.0, -1.0]
        p = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
        state = OptimState()
        for g in grads:
            p.grad = np.array([g])
            adam_step([("p", p)], state)
        assert p.data[0] == pytest.approx(scalar_adam(grads), rel=1e-12)

    def test_nan_gradient_names_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([np.nan, 0.0])
        with pytest.raises(FloatingPointError, match="stem.weight"):
            adam_step([("stem.weight", p)], OptimState())


class TestSchedule:
    def test_halving(self):
        h = TrainHyper(iters=100)
        assert [h.lr_at(i) for i in (1, 40, 41, 80, 81, 100)] == [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4, 2.5e-4]

    def test_explicit_interval(self):
        assert TrainHyper(iters=100, halve_lr_every=10).lr_at(25) == pytest.approx(2.5e-4)

    def test_substreams_independent(self):
        assert substream_seed(0, "crops", 1) != substream_seed(0, "crops", 2)
        assert substream_seed(0, "crops", 1) != substream_seed(0, "rain", 1)
        assert substream_seed(5, "init") == substream_seed(5, "init")

    def test_smoothed(self):
        s = smoothed(np.arange(1, 11, dtype=float), window=3)
        assert s[0] == 1 and s[1] == 1.5 and s[-1] == 9


class TestCheckpoint:
    @pytest.fixture
    def ckpt(self):
        model = DerainNet(TINY, seed=1)
        state = OptimState(step=3, m={"head_d.weight": np.ones((4, 3, 3, 3), np.float32)},
                           v={"head_d.weight": np.full((4, 3, 3, 3), 2.0, np.float32)})
        return make_checkpoint(model, state, iteration=3)

    def test_byte_round_trip(self, ckpt, tmp_path):
        blob = ckpt.to_bytes()
        assert blob[:4] == MAGIC and struct.unpack("<I", blob[4:8])[0] == 1
        assert Checkpoint.from_bytes(blob).to_bytes() == blob
        ckpt.save(tmp_path / "a.dfd")
        Checkpoint.load(tmp_path / "a.dfd").save(tmp_path / "b.dfd")
        assert (tmp_path / "a.dfd").read_bytes() == (tmp_path / "b.dfd").read_bytes() == blob

    def test_restore_reproduces_outputs(self, ckpt, rng):
        original = DerainNet(TINY, seed=1).eval()
        restored = restore(Checkpoint.from_bytes(ckpt.to_bytes())).eval()
        img = Tensor(rng.random((1, 3, 16, 16)))
        np.testing.assert_array_equal(original(img)[2].data, restored(img)[2].data)

    def test_names_match_registry(self, ckpt):
        model = DerainNet(TINY)
        names = {f"param/{n}" for n, _ in model.named_parameters()} | \
                {f"buffer/{n}" for n, _ in model.named_buffers()}
        assert names <= set(ckpt.records)
        assert ckpt.iteration == 3

    def test_config_mismatch_names_field(self, ckpt):
        with pytest.raises(ContractError, match="width"):
            restore(ckpt, DerainNet(ModelConfig(stages=1, width=8)))

    def test_bad_magic_and_trailing_bytes(self, ckpt):
        with pytest.raises(ContractError, match="magic"):
            Checkpoint.from_bytes(b"XXXX" + ckpt.to_bytes()[4:])
        with pytest.raises(ContractError, match="trailing"):
            Checkpoint.from_bytes(ckpt.to_bytes() + b"\0")


class TestTrain:
    def test_deterministic(self, toy):
        a = train(toy, TINY, hyper())
        b = train(toy, TINY, hyper())
        np.testing.assert_array_equal(a.losses, b.losses)
        assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()

    def test_zero_lr_leaves_parameters(self, toy):
        res = train(toy, TINY, hyper(lr=0.0, iters=2))
        init = DerainNet(TINY, seed=substream_seed(0, "init"))
        for (n, p), (_, q) in zip(res.model.named_parameters(), init.named_parameters()):
            np.testing.assert_array_equal(p.data, q.data, err_msg=n)

    def test_resume_matches_uninterrupted(self, toy, tmp_path):
        full = train(toy, TINY, hyper(iters=5, halve_lr_every=2))
        part = train(toy, TINY, hyper(iters=3, halve_lr_every=2), out_dir=tmp_path)
        resumed = train(toy, TINY, hyper(iters=5, halve_lr_every=2), resume=Checkpoint.load(tmp_path / "checkpoint.dfd"))
        assert resumed.losses[0] == full.losses[3]
        np.testing.assert_array_equal(resumed.losses, full.losses[3:])
        assert resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes()
        assert len(part.losses) == 3

    def test_log_csv(self, toy, tmp_path):
        train(toy, TINY, hyper(iters=3, val_every=3), val_manifest=toy, out_dir=tmp_path)
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0].split(",") == list(LOG_COLUMNS)
        assert len(lines) == 4
        assert lines[-1].split(",")[-1] != ""

    def test_batch_gradient_is_mean_of_samples(self, toy):
        rainy, clean, s_t, d_t = training_batch(toy, hyper(), 1)
        with default_dtype(np.float64):
            model = DerainNet(TINY, seed=2).eval()

            def grads(sl):
                model.zero_grad()
                d, s, p = model(Tensor(rainy[sl]))
                composite_loss(d, s, p, clean[sl], d_t[sl], s_t[sl], LossWeights(1, 1, 0)).backward()
                return [p.grad.copy() for p in model.parameters()]

        both = grads(slice(0, 2))
        one, two = grads(slice(0, 1)), grads(slice(1, 2))
        for g, a, b in zip(both, one, two):
            np.testing.assert_allclose(g, (a + b) / 2, rtol=1e-10, atol=1e-12)

    def test_batches_are_pure_functions_of_seed(self, toy):
        a, b = training_batch(toy, hyper(), 7), training_batch(toy, hyper(), 7)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert not np.array_equal(a[0], training_batch(toy, hyper(), 8)[0])

    def test_nan_loss_aborts_keeping_checkpoint(self, toy, tmp_path, monkeypatch):
        train(toy, TINY, hyper(iters=2, checkpoint_every=1), out_dir=tmp_path)
        before = (tmp_path / "checkpoint.dfd").read_bytes()
        import dfdnet.trainer as trainer_mod
        real = trainer_mod.composite_loss

        def poisoned(*args, **kw):
            terms = real(*args, **kw)
            terms.total.data = np.asarray(np.nan, dtype=terms.total.dtype)
            return terms

        monkeypatch.setattr(trainer_mod, "composite_loss", poisoned)
        with pytest.raises(FloatingPointError, match="non-finite"):
            train(toy, TINY, hyper(iters=2, checkpoint_every=1), out_dir=tmp_path)
        assert (tmp_path / "checkpoint.dfd").read_bytes() == before

    def test_empty_manifest(self):
        with pytest.raises(ContractError):
            train(DatasetManifest(entries=[]), TINY, hyper())


class TestEvaluate:
    def test_identical_pairs_report_inf(self, tmp_path, toy):
        ident = DatasetManifest(entries=[(c, c) for _, c in toy.entries])
        report = evaluate(DerainNet(TINY), ident)
        assert all(math.isinf(r["psnr_in"]) for r in report.rows)
        report.write_csv(tmp_path / "eval.csv")
        lines = (tmp_path / "eval.csv").read_text().splitlines()
        assert lines[0].split(",") == list(EVAL_COLUMNS)
        assert lines[-1].startswith("mean,inf")
        assert len(lines) == len(toy) + 2

    def test_from_checkpoint(self, toy):
        model = DerainNet(TINY, seed=4)
        a = evaluate(model, toy).mean
        b = evaluate(make_checkpoint(model), toy).mean
        assert a == b

    def test_missing_file(self, tmp_path):
        m = DatasetManifest(entries=[(tmp_path / "gone.png", tmp_path / "gone.png")])
        with pytest.raises(FileNotFoundError, match="gone.png"):
            evaluate(DerainNet(TINY), m)
