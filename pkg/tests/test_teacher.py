import numpy as np
import pytest

from mrnadistill.errors import ConfigError, ContractError, FormatError
from mrnadistill.losses import components_from_eigenvalues, pca_components
from mrnadistill.rng import SeededRng
from mrnadistill.teacher import (CALIBRATION_SIZE, FileTeacher, SyntheticTeacher,
                                 TeacherSpec, load_dump, preset_spec,
                                 singular_values, write_dump)


def desk_teacher(seed=11, **overrides):
    return SyntheticTeacher(preset_spec("desk", seed=seed, **overrides))


def random_tokens(n, L, seed=0):
    rng = SeededRng(seed)
    tokens = (rng.uniform((n, L)) * 5 + 1).astype(np.uint8)
    return tokens, np.ones((n, L), dtype=bool)


class TestSpecValidation:
    def test_rank_bounds(self):
        with pytest.raises(ConfigError):
            TeacherSpec(layer_dims=(64,), effective_rank=(0,))
        with pytest.raises(ConfigError):
            TeacherSpec(layer_dims=(32,), effective_rank=(33,))

    def test_rank_per_layer(self):
        with pytest.raises(ConfigError):
            TeacherSpec(layer_dims=(64, 64), effective_rank=(6,))

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset_spec("galaxy-brain")

    def test_spectra(self):
        geo = singular_values(TeacherSpec(layer_dims=(64,), effective_rank=(4,), decay=0.5), 0)
        assert np.allclose(geo, [1.0, 0.5, 0.25, 0.125])
        spiked = singular_values(TeacherSpec(layer_dims=(64,), effective_rank=(3,),
                                             spectrum="spiked", tail_mass=0.08), 0)
        assert spiked[0] == 1.0
        assert np.allclose(spiked[1:] ** 2, 0.04)


class TestFrozenness:
    def test_forwards_bit_identical(self):
        t = desk_teacher()
        tokens, mask = random_tokens(32, 64, seed=5)
        a = t.targets(tokens, mask)
        b = t.targets(tokens, mask)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_params_frozen_across_forwards(self):
        t = desk_teacher()
        fp = t.fingerprint()
        tokens, mask = random_tokens(64, 48, seed=6)
        t.targets(tokens, mask)
        assert t.fingerprint() == fp

    def test_masked_positions_ignored(self):
        t = desk_teacher()
        tokens, mask = random_tokens(8, 32, seed=7)
        mask[:, 20:] = False
        poked = tokens.copy()
        poked[:, 20:] = 1
        a = t.targets(tokens, mask)
        b = t.targets(poked, mask)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_seed_changes_teacher(self):
        tokens, mask = random_tokens(4, 32, seed=8)
        a = desk_teacher(seed=1).targets(tokens, mask)
        b = desk_teacher(seed=2).targets(tokens, mask)
        assert not np.array_equal(a[0], b[0])


class TestSpectrum:
    def test_rank1_needs_one_component_everywhere(self):
        t = SyntheticTeacher(preset_spec("rank1", seed=3))
        tokens, mask = t.reference_sample(1000, "pca-test")
        emb = t.targets(tokens, mask, dtype=np.float64)[0]
        counts = pca_components(emb).components_at
        assert all(v == 1 for v in counts.values())

    def test_exact_sigma_profile_on_calibration_sample(self):
        spec = preset_spec("desk", seed=11)
        t = SyntheticTeacher(spec)
        tokens, mask = t.reference_sample(CALIBRATION_SIZE, "calibration")
        emb = t.targets(tokens, mask, dtype=np.float64)[0]
        centered = emb - emb.mean(axis=0)
        eig = np.sort(np.linalg.eigvalsh(centered.T @ centered / emb.shape[0]))[::-1]
        sig2 = singular_values(spec, 0) ** 2
        np.testing.assert_allclose(eig[: len(sig2)], sig2, rtol=1e-9)
        assert eig[len(sig2)] < 1e-12

    def test_spectrum_contract_on_fresh_sample(self):
        # independent draws from the reference distribution: top-rank
        # covariance eigenvalues within 5% of the configured profile
        spec = preset_spec("desk", seed=11)
        t = SyntheticTeacher(spec)
        tokens, mask = t.reference_sample(16384, "fresh")
        emb = t.targets(tokens, mask, dtype=np.float64)[0]
        centered = emb - emb.mean(axis=0)
        eig = np.sort(np.linalg.eigvalsh(centered.T @ centered / emb.shape[0]))[::-1]
        sig2 = singular_values(spec, 0) ** 2
        rel = np.abs(eig[: len(sig2)] - sig2) / sig2
        assert rel.max() <= 0.05, rel

    def test_geometric_components_match_closed_form(self):
        # rank 6, decay 0.5: empirical counts at 95% equal the closed-form
        # cumulative arithmetic over sigma_k^2
        spec = preset_spec("desk", seed=4)
        t = SyntheticTeacher(spec)
        tokens, mask = t.reference_sample(4000, "components")
        emb = t.targets(tokens, mask, dtype=np.float64)[0]
        counts = pca_components(emb, thresholds=(0.95,)).components_at
        closed = components_from_eigenvalues(singular_values(spec, 0) ** 2, (0.95,))
        assert counts == closed == {0.95: 3}

    def test_block12_like_profile(self):
        # one dominant component at 95%, a long tail at 99%
        t = SyntheticTeacher(preset_spec("block12-like", seed=9))
        tokens, mask = t.reference_sample(CALIBRATION_SIZE, "calibration")
        emb = t.targets(tokens, mask, dtype=np.float64)[0]
        counts = pca_components(emb, thresholds=(0.95, 0.99)).components_at
        assert counts[0.95] == 1
        assert counts[0.99] >= 10


class TestLogits:
    def test_requires_emit_flag(self):
        t = desk_teacher()
        tokens, mask = random_tokens(2, 16, seed=1)
        with pytest.raises(ConfigError):
            t.logits(tokens, mask)

    def test_deterministic_and_content_keyed(self):
        t = SyntheticTeacher(preset_spec("desk-logit", seed=13))
        tokens, mask = random_tokens(4, 32, seed=2)
        a = t.logits(tokens, mask)
        b = t.logits(tokens, mask)
        assert np.array_equal(a, b)
        other = tokens.copy()
        other[0, 0] = other[0, 0] % 5 + 1
        c = t.logits(other, mask)
        assert not np.array_equal(a[0], c[0])

    def test_noise_free_spec_gives_pure_token_map(self):
        spec = preset_spec("desk", seed=13, emit_logits=True, logit_noise=0.0)
        t = SyntheticTeacher(spec)
        tokens, mask = random_tokens(3, 20, seed=3)
        logits = t.logits(tokens, mask)
        same = tokens[0] == tokens[1]
        assert np.array_equal(logits[0][same], logits[1][same])

    def test_heavy_rows_have_larger_noise(self):
        t = SyntheticTeacher(preset_spec("desk-logit", seed=13))
        tokens, mask = random_tokens(512, 64, seed=4)
        logits = t.logits(tokens, mask).astype(np.float64)
        spread = logits.std(axis=(1, 2))
        # heavy_fraction 0.03 at amplitude 25 vs base 0.5: clear bimodality
        assert spread.max() > 5 * np.median(spread)


class TestDump:
    def _outputs(self, n=10, with_logits=False):
        rng = SeededRng(21)
        embeddings = [np.ascontiguousarray(rng.normal((n, 8)), dtype=np.float32),
                      np.ascontiguousarray(rng.normal((n, 8)), dtype=np.float32)]
        logits = np.ascontiguousarray(rng.normal((n, 12, 4)), dtype=np.float32) if with_logits else None
        return embeddings, logits

    def test_round_trip_bit_identical(self, tmp_path):
        embeddings, _ = self._outputs()
        path = tmp_path / "t.tembdump"
        write_dump(path, embeddings)
        back = load_dump(path)
        for a, b in zip(embeddings, back.embeddings):
            assert np.array_equal(a, b)

    def test_logits_round_trip(self, tmp_path):
        embeddings, logits = self._outputs(with_logits=True)
        path = tmp_path / "tl.tembdump"
        write_dump(path, embeddings, logits)
        back = load_dump(path)
        assert np.array_equal(back.logit_table, logits)

    def test_dim_mismatch_rejected(self, tmp_path):
        embeddings, _ = self._outputs()
        path = tmp_path / "d.tembdump"
        write_dump(path, embeddings)
        with pytest.raises(FormatError):
            load_dump(path, expected_layer_dims=(256, 256))

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "e.tembdump"
        path.write_bytes(b"")
        with pytest.raises(FormatError):
            load_dump(path)

    def test_truncated_rejected(self, tmp_path):
        embeddings, _ = self._outputs()
        path = tmp_path / "trunc.tembdump"
        write_dump(path, embeddings)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_dump(path)

    def test_file_teacher_indexing(self, tmp_path):
        embeddings, logits = self._outputs(with_logits=True)
        path = tmp_path / "f.tembdump"
        write_dump(path, embeddings, logits)
        ft = FileTeacher(path, expected_layer_dims=(8, 8))
        idx = np.array([3, 1, 7])
        targets = ft.targets(None, None, indices=idx)
        assert np.array_equal(targets[0], embeddings[0][idx])
        assert np.array_equal(ft.logits(None, None, indices=idx), logits[idx])
        with pytest.raises(ContractError):
            ft.targets(None, None)
