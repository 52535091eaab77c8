"""Model construction, parameter accounting, tensorization, checkpoints."""

import hashlib
import json

import numpy as np
import pytest

from tcnn.model import (
    ModelSpec,
    RankConfig,
    build_model,
    count_params,
    load_checkpoint,
    predict_scores,
    reference_spec,
    save_checkpoint,
    tensorize_pretrained,
    tucker_param_count,
)
from tcnn.tensor import ShapeMismatchError, unfold

RANK_GRID = [(96, 96, 3, 3), (64, 64, 3, 3), (32, 32, 3, 3), (16, 16, 3, 3),
             (8, 8, 3, 3)]


def param_checksum(model):
    return hashlib.sha256(
        b"".join(arr.tobytes() for _, arr in model.named_params())
    ).hexdigest()


class TestBuild:
    def test_same_seed_same_parameters(self):
        spec = reference_spec(32)
        assert param_checksum(build_model(spec, 5)) == param_checksum(build_model(spec, 5))
        assert param_checksum(build_model(spec, 5)) != param_checksum(build_model(spec, 6))

    def test_forward_shape(self):
        model = build_model(reference_spec(64), 0)
        x = np.random.default_rng(0).standard_normal((4, 3, 64, 64)).astype(np.float32)
        assert model.forward(x).shape == (4, 2)

    def test_tucker_spec_same_logits_shape_different_storage(self):
        dense = build_model(reference_spec(32), 0)
        tucker = build_model(reference_spec(32, RankConfig(8, 8, 3, 3)), 0)
        x = np.random.default_rng(1).standard_normal((2, 3, 32, 32)).astype(np.float32)
        assert dense.forward(x).shape == tucker.forward(x).shape == (2, 2)
        assert count_params(tucker).n_tcnn < count_params(dense).n_cnn

    def test_invalid_spec_rejected(self):
        spec = reference_spec(32)
        spec.layers[-1].in_features += 1
        with pytest.raises(ShapeMismatchError, match="features"):
            build_model(spec, 0)

    def test_rank_bound_violation_rejected(self):
        spec = reference_spec(32, RankConfig(8, 8, 3, 3))
        spec.layers[0].ranks = (99, 3, 3, 3)
        with pytest.raises(ShapeMismatchError, match="rank"):
            build_model(spec, 0)


class TestParamCounting:
    def test_single_dense_conv_count(self):
        """64-channel 3x3 conv into 128 channels holds 73,728 weights."""
        assert 64 * 3 * 128 * 3 == 73728

    def test_factorized_layer_closed_form(self):
        """Ranks (32, 3, 32, 3) on a (64, 3, 128, 3) kernel store 15,378
        parameters, a layer compression near 4.79."""
        stored = tucker_param_count((64, 3, 128, 3), (32, 3, 32, 3))
        assert stored == 64 * 32 + 3 * 3 + 128 * 32 + 3 * 3 + 32 * 3 * 32 * 3
        assert stored == 15378
        assert abs(73728 / stored - 4.79) < 0.01

    def test_full_rank_factorization_stores_more(self):
        """At full ranks the factorization stores more than the dense kernel,
        so the layer ratio drops below 1."""
        dims = (16, 3, 16, 3)
        assert tucker_param_count(dims, dims) > int(np.prod(dims))

    def test_closed_form_equals_buffer_enumeration(self):
        for spec in [reference_spec(32), reference_spec(32, RankConfig(16, 16, 3, 3))]:
            model = build_model(spec, 3)
            report = count_params(model)  # raises internally on mismatch
            brute = sum(arr.size for _, arr in model.named_params())
            assert brute == report.n_tcnn
            assert report.n_cnn == report.n_c + report.n_b + report.n_r
            assert report.n_tcnn == report.n_c_f + report.n_b + report.n_r

    def test_compression_strictly_increases_along_rank_grid(self):
        ratios = []
        for ranks in RANK_GRID:
            model = build_model(reference_spec(64, RankConfig(*ranks)), 0)
            ratios.append(count_params(model).c_r)
        assert all(b > a for a, b in zip(ratios, ratios[1:]))

    def test_compression_monotone_in_each_rank_component(self):
        base = (16, 16, 3, 3)
        base_cr = count_params(build_model(reference_spec(64, RankConfig(*base)), 0)).c_r
        for i, bumped in enumerate([(32, 16, 3, 3), (16, 32, 3, 3),
                                    (16, 16, 2, 3), (16, 16, 3, 2)]):
            cr = count_params(build_model(reference_spec(64, RankConfig(*bumped)), 0)).c_r
            if i < 2:  # larger rank -> less compression
                assert cr < base_cr
            else:  # smaller rank -> more compression
                assert cr > base_cr

    def test_dense_model_ratio_is_one(self):
        report = count_params(build_model(reference_spec(32), 0))
        assert report.c_r == 1.0
        assert report.n_c == report.n_c_f


class TestRankConfig:
    def test_clamping(self):
        rc = RankConfig(96, 96, 3, 3)
        assert rc.clamp(3, 3, 32, 3) == (3, 3, 32, 3)
        assert rc.clamp(96, 3, 128, 3) == (96, 3, 96, 3)

    def test_positive_required(self):
        with pytest.raises(ValueError):
            RankConfig(0, 8, 3, 3)


class TestTensorize:
    def test_full_rank_preserves_logits_and_argmax(self):
        model = build_model(reference_spec(32), 7)
        tucker = tensorize_pretrained(model, RankConfig(128, 128, 3, 3))
        x = np.random.default_rng(2).standard_normal((16, 3, 32, 32)).astype(np.float32)
        a, b = model.forward(x), tucker.forward(x)
        assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-4
        assert (a.argmax(axis=1) == b.argmax(axis=1)).all()

    def test_small_ranks_change_outputs_and_compress_most(self):
        model = build_model(reference_spec(32), 7)
        tiny = tensorize_pretrained(model, RankConfig(1, 1, 1, 1))
        x = np.random.default_rng(3).standard_normal((4, 3, 32, 32)).astype(np.float32)
        assert not np.allclose(model.forward(x), tiny.forward(x), atol=1e-3)
        crs = [count_params(tensorize_pretrained(model, RankConfig(*r))).c_r
               for r in [(1, 1, 1, 1), (8, 8, 3, 3), (32, 32, 3, 3)]]
        assert crs[0] > crs[1] > crs[2]

    def test_kernels_obey_per_mode_spectrum_bound(self):
        """Each decompose-reconstruct kernel error is within the discarded
        per-mode squared singular values (numpy SVD as the oracle)."""
        model = build_model(reference_spec(32), 9)
        tucker = tensorize_pretrained(model, RankConfig(16, 16, 2, 2))
        for dense_l, tuck_l in zip(model.layers, tucker.layers):
            if not hasattr(tuck_l, "factors"):
                continue
            w = dense_l.weight.astype(np.float64)
            rec = tuck_l.assembled_kernel().astype(np.float64)
            ranks = tuck_l.factors.ranks
            bound = sum(
                float(np.sum(np.linalg.svd(unfold(w, i), compute_uv=False)[ranks[i]:] ** 2))
                for i in range(4)
            )
            err2 = np.linalg.norm(rec - w) ** 2
            # factors are stored in float32, allow that rounding on top
            assert err2 <= bound * (1 + 1e-5) + 1e-7

    def test_refuses_already_factorized_model(self):
        model = build_model(reference_spec(32, RankConfig(8, 8, 3, 3)), 0)
        with pytest.raises(ValueError, match="already"):
            tensorize_pretrained(model, RankConfig(8, 8, 3, 3))


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = build_model(reference_spec(32, RankConfig(16, 16, 3, 3)), 11)
        save_checkpoint(model, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert param_checksum(loaded) == param_checksum(model)
        x = np.random.default_rng(5).standard_normal((2, 3, 32, 32)).astype(np.float32)
        assert (model.forward(x) == loaded.forward(x)).all()

    def test_manifest_layout(self, tmp_path):
        model = build_model(reference_spec(32), 1)
        save_checkpoint(model, tmp_path / "ck")
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert manifest["format_version"] == 1
        assert manifest["seed"] == 1
        assert ModelSpec.from_dict(manifest["spec"]).to_dict() == model.spec.to_dict()
        blob_len = (tmp_path / "ck" / "weights.bin").stat().st_size
        offsets = [t["byte_offset"] for t in manifest["tensors"]]
        lengths = [t["byte_length"] for t in manifest["tensors"]]
        assert offsets == sorted(offsets)
        assert sum(lengths) == blob_len
        for entry in manifest["tensors"]:
            assert entry["dtype"] in ("f32", "f64")
            assert entry["byte_length"] == 4 * int(np.prod(entry["shape"]))

    def test_save_is_deterministic(self, tmp_path):
        model = build_model(reference_spec(32), 2)
        save_checkpoint(model, tmp_path / "a")
        save_checkpoint(model, tmp_path / "b")
        assert (tmp_path / "a" / "weights.bin").read_bytes() == \
               (tmp_path / "b" / "weights.bin").read_bytes()
        assert (tmp_path / "a" / "manifest.json").read_bytes() == \
               (tmp_path / "b" / "manifest.json").read_bytes()


class TestPredictScores:
    def test_scores_are_class1_probabilities(self):
        model = build_model(reference_spec(32), 0)
        x = np.random.default_rng(6).standard_normal((5, 3, 32, 32)).astype(np.float32)
        scores = predict_scores(model, x, batch_size=2)
        assert scores.shape == (5,)
        assert ((scores >= 0) & (scores <= 1)).all()
        logits = model.forward(x)
        expected = np.exp(logits[:, 1]) / np.exp(logits).sum(axis=1)
        np.testing.assert_allclose(scores, expected, atol=1e-6)
