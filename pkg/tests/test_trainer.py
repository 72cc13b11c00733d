import json

import numpy as np
import pytest

import mrnadistill.tensor as T
from mrnadistill.errors import ConfigError, ContractError, TrainingDiverged
from mrnadistill.genbank import split_by_accession, synthetic_records
from mrnadistill.rng import SeededRng
from mrnadistill.student import StudentConfig, StudentModel
from mrnadistill.teacher import SyntheticTeacher, preset_spec
from mrnadistill.tokenizer import TokenizedDataset
from mrnadistill.trainer import (AdamW, METRIC_FIELDS, TrainConfig, adamw_step,
                                 clip_global_norm, lr_schedule, train,
                                 validation_pass)


def adamw_reference(theta, grads, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """Independent 64-bit scalar AdamW recurrence."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        theta = theta - lr * (mhat / (np.sqrt(vhat) + eps) + wd * theta)
    return theta


def tiny_setup(seed=5, mode="embedding", n_records=300, context=64):
    recs = synthetic_records(n_records, seed=seed, length_range=(32, 96),
                             composition_spread=0.5)
    train_recs, val_recs = split_by_accession(recs, 0.05, seed=seed)
    tr = TokenizedDataset.from_sequences([r.sequence for r in train_recs], context)
    va = TokenizedDataset.from_sequences([r.sequence for r in val_recs], context)
    tname = "desk-logit" if mode == "logit" else "desk"
    teacher = SyntheticTeacher(preset_spec(tname, seed=seed))
    student = StudentModel(StudentConfig(hidden_dim=16, n_blocks=3, tap_layers=(2, 3),
                                         proj_dims=(64, 64), logit_head=(mode == "logit")),
                           seed=seed)
    cfg = TrainConfig(batch_size=8, context_length=context, warmup_steps=20,
                      max_steps=40, eval_every=20, seed=seed, mode=mode)
    return cfg, tr, va, teacher, student


class TestLrSchedule:
    def test_published_values(self):
        assert lr_schedule(1000, 2e-4, 2000) == pytest.approx(1e-4)
        assert lr_schedule(2000, 2e-4, 2000) == pytest.approx(2e-4)
        assert lr_schedule(10**6, 2e-4, 2000) == pytest.approx(2e-4)

    def test_step_must_be_positive(self):
        with pytest.raises(ContractError):
            lr_schedule(0, 2e-4, 2000)

    def test_zero_warmup_is_constant(self):
        assert lr_schedule(1, 3e-4, 0) == 3e-4


class TestClip:
    def test_below_threshold_unchanged(self):
        g = [np.array([0.3, 0.4])]
        norm = clip_global_norm(g, 1.0)
        assert norm == pytest.approx(0.5)
        assert np.allclose(g[0], [0.3, 0.4])

    def test_above_threshold_scaled(self):
        g = [np.full(4, 2.0), np.full(4, 2.0)]
        pre = clip_global_norm(g, 1.0)
        assert pre == pytest.approx(np.sqrt(32.0))
        post = np.sqrt(sum(float((x * x).sum()) for x in g))
        assert post == pytest.approx(1.0, abs=1e-9)

    def test_zero_grads(self):
        g = [np.zeros(3)]
        assert clip_global_norm(g, 1.0) == 0.0
        assert np.all(g[0] == 0)

    def test_bad_max_norm(self):
        with pytest.raises(ContractError):
            clip_global_norm([np.ones(2)], 0.0)


class TestAdamW:
    def test_scalar_matches_reference_to_1e12(self):
        theta = np.array([1.0], dtype=np.float64)
        m = np.zeros(1); v = np.zeros(1)
        grads = [1.0, -0.5, 0.25, 2.0, -1.0]
        for t, g in enumerate(grads, start=1):
            adamw_step(theta, np.array([g]), m, v, t, lr=0.1, weight_decay=0.0)
        expected = adamw_reference(1.0, grads, lr=0.1, wd=0.0)
        assert abs(theta[0] - expected) <= 1e-12

    def test_with_weight_decay_matches_reference(self):
        theta = np.array([0.7], dtype=np.float64)
        m = np.zeros(1); v = np.zeros(1)
        grads = [0.3, 0.1, -0.2]
        for t, g in enumerate(grads, start=1):
            adamw_step(theta, np.array([g]), m, v, t, lr=0.05, weight_decay=0.01)
        expected = adamw_reference(0.7, grads, lr=0.05, wd=0.01)
        assert abs(theta[0] - expected) <= 1e-12

    def test_pure_decay_with_zero_gradient(self):
        p = T.Tensor(np.full(4, 2.0, dtype=np.float64), requires_grad=True)
        opt = AdamW({"p": p}, weight_decay=0.01)
        p.grad = np.zeros(4)
        opt.step(lr=0.1)
        assert np.allclose(p.data, 2.0 - 0.1 * 0.01 * 2.0, atol=1e-15)

    def test_deterministic_over_100_steps(self):
        def run():
            rng = SeededRng(3)
            p = T.Tensor(rng.normal((50,)), requires_grad=True, dtype=np.float64)
            opt = AdamW({"p": p}, weight_decay=0.01)
            grng = SeededRng(4)
            for step in range(1, 101):
                p.grad = grng.normal((50,))
                opt.step(lr=1e-3)
            return p.data.copy()

        assert np.array_equal(run(), run())


class TestConfig:
    def test_max_steps_required(self):
        with pytest.raises(ConfigError):
            TrainConfig()

    def test_mode_validated(self):
        with pytest.raises(ConfigError):
            TrainConfig(max_steps=10, mode="both")

    def test_logit_mode_requires_head(self, tmp_path):
        cfg, tr, va, teacher, _ = tiny_setup(mode="logit")
        headless = StudentModel(StudentConfig(hidden_dim=16, n_blocks=3, tap_layers=(2, 3),
                                              proj_dims=(64, 64)), seed=1)
        with pytest.raises(ConfigError):
            train(cfg, tr, va, teacher, headless, tmp_path / "run")

    def test_dim_mismatch_rejected(self, tmp_path):
        cfg, tr, va, teacher, _ = tiny_setup()
        student = StudentModel(StudentConfig(hidden_dim=16, n_blocks=3, tap_layers=(2, 3),
                                             proj_dims=(32, 32)), seed=1)
        with pytest.raises(ConfigError):
            train(cfg, tr, va, teacher, student, tmp_path / "run")


class TestTrainLoop:
    def test_metrics_file_structure(self, tmp_path):
        cfg, tr, va, teacher, student = tiny_setup()
        result = train(cfg, tr, va, teacher, student, tmp_path / "run")
        lines = [json.loads(l) for l in open(result.metrics_path)]
        train_recs = [r for r in lines if r["split"] == "train"]
        val_recs = [r for r in lines if r["split"] == "val"]
        assert len(train_recs) == cfg.max_steps
        assert len(val_recs) == 1 + cfg.max_steps // cfg.eval_every  # initial + evals
        for rec in lines:
            for field in METRIC_FIELDS:
                assert field in rec
        assert all(r["grad_norm"] is not None for r in train_recs)
        assert all(r["emb_var"] is not None for r in val_recs)
        assert all(r["cka_post_tap1"] is not None for r in val_recs)

    def test_checkpoints_written_and_loadable(self, tmp_path):
        cfg, tr, va, teacher, student = tiny_setup()
        result = train(cfg, tr, va, teacher, student, tmp_path / "run")
        assert len(result.checkpoint_paths) == cfg.max_steps // cfg.eval_every
        back = StudentModel.load(result.checkpoint_paths[-1])
        for name, p in student.parameters().items():
            assert np.allclose(back.parameters()[name].data, p.data, atol=1e-7), name

    def test_teacher_frozen_by_training(self, tmp_path):
        cfg, tr, va, teacher, student = tiny_setup()
        fp_before = teacher.fingerprint()
        tokens = tr.tokens[:4]
        mask = tr.masks[:4]
        targets_before = teacher.targets(tokens, mask)
        train(cfg, tr, va, teacher, student, tmp_path / "run")
        assert teacher.fingerprint() == fp_before
        targets_after = teacher.targets(tokens, mask)
        for a, b in zip(targets_before, targets_after):
            assert np.array_equal(a, b)

    def test_validation_repeatable(self, tmp_path):
        cfg, tr, va, teacher, student = tiny_setup()
        a = validation_pass(student, teacher, va, cfg)
        b = validation_pass(student, teacher, va, cfg)
        assert a == b

    def test_post_clip_norm_bounded_in_debug_mode(self, tmp_path):
        cfg, tr, va, teacher, student = tiny_setup()
        T.set_debug(True)
        try:
            train(cfg, tr, va, teacher, student, tmp_path / "run")
        finally:
            T.set_debug(False)

    def test_metrics_byte_identical_across_runs(self, tmp_path):
        cfg1, tr1, va1, teacher1, student1 = tiny_setup(seed=9)
        r1 = train(cfg1, tr1, va1, teacher1, student1, tmp_path / "a")
        cfg2, tr2, va2, teacher2, student2 = tiny_setup(seed=9)
        r2 = train(cfg2, tr2, va2, teacher2, student2, tmp_path / "b")
        assert r1.metrics_path.read_bytes() == r2.metrics_path.read_bytes()

    def test_nan_loss_aborts_with_diagnostics(self, tmp_path):
        cfg, tr, va, teacher, student = tiny_setup()

        class PoisonTeacher:
            layer_dims = teacher.layer_dims

            def targets(self, tokens, mask, indices=None, dtype=np.float32):
                out = teacher.targets(tokens, mask, indices, dtype)
                out[0] = out[0].copy()
                out[0][0, 0] = np.nan
                return out

        with pytest.raises(TrainingDiverged) as err:
            train(cfg, tr, va, PoisonTeacher(), student, tmp_path / "run")
        assert err.value.step == 1
        diag = json.loads((tmp_path / "run" / "divergence.json").read_text())
        assert diag["step"] == 1 and len(diag["batch_indices"]) == cfg.batch_size

    def test_logit_mode_records_kl_and_entropy(self, tmp_path):
        cfg, tr, va, teacher, student = tiny_setup(mode="logit")
        result = train(cfg, tr, va, teacher, student, tmp_path / "run")
        lines = [json.loads(l) for l in open(result.metrics_path)]
        train_recs = [r for r in lines if r["split"] == "train"]
        val_recs = [r for r in lines if r["split"] == "val"]
        assert all(r["kl"] is not None for r in train_recs)
        assert all(r["entropy_mean"] is not None for r in val_recs)
        assert all(r.get("entropy_profile") for r in val_recs)
        assert all(r["entropy_uniform"] == pytest.approx(np.log(6)) for r in val_recs)

    def test_empty_validation_handled(self, tmp_path):
        cfg, tr, _, teacher, student = tiny_setup()
        empty = TokenizedDataset.from_sequences([], cfg.context_length)
        result = train(cfg, tr, empty, teacher, student, tmp_path / "run")
        assert result.final_metrics == {}
        lines = [json.loads(l) for l in open(result.metrics_path)]
        assert all(r["split"] == "train" for r in lines)
