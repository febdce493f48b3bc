"""Tests for the reconstruction branches, training and model files."""

import numpy as np
import pytest
from pydantic import ValidationError as PydanticValidationError

from stitchkit.align import compose_alignment
from stitchkit.exceptions import CheckpointError, ValidationError
from stitchkit.losses import FeatureExtractor, LossWeights, TapDepth, consistency_loss, reconstruction_objective
from stitchkit.reconstruct import (
    LR_FILTERS,
    BranchConfig,
    OptimizerConfig,
    TrainingTrace,
    TrainRecord,
    build_model,
    compute_objective,
    dump_feature_maps,
    effective_weights,
    fuse_weighted,
    load_model,
    lr_filter_counts,
    save_model,
    stitch_alignment,
    train,
)
from stitchkit.tensorcore.layers import resize_bilinear

SMALL = BranchConfig(lr_working_size=(32, 32), resblock_count=1)


@pytest.fixture
def alignment(shifted_pair):
    ref, target, truth = shifted_pair
    return compose_alignment(ref, target, truth)


@pytest.fixture
def model():
    return build_model(SMALL, seed=3)


class TestArchitecture:
    """Test branch construction."""

    def test_full_width_filters(self):
        """Test the unscaled LR filter counts."""
        assert lr_filter_counts(1.0) == list(LR_FILTERS)

    def test_scaled_filters(self):
        """Test that scaling keeps three output channels."""
        assert lr_filter_counts(0.125) == [8, 8, 16, 16, 32, 32, 64, 64, 32, 32, 16, 16, 8, 8, 3]
        assert lr_filter_counts(0.001)[-1] == 3

    def test_working_size_multiple_of_eight(self):
        """Test that the LR working size must survive three poolings."""
        with pytest.raises(PydanticValidationError):
            BranchConfig(lr_working_size=(30, 32))

    def test_unknown_variant(self):
        """Test that unknown variants are rejected."""
        with pytest.raises(PydanticValidationError):
            BranchConfig(variant="no_hr")

    def test_seeded_build(self):
        """Test that equal seeds give equal parameters."""
        a = build_model(SMALL, seed=1).parameters()
        b = build_model(SMALL, seed=1).parameters()
        c = build_model(SMALL, seed=2).parameters()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not all(np.array_equal(a[k], c[k]) for k in a)


class TestInference:
    """Test forward passes and variants."""

    def test_output_shapes(self, model, alignment):
        """Test S_LR at the working size and S_HR at the canvas size."""
        out = stitch_alignment(model, alignment)
        assert out.s_lr.shape == (1, 3, 32, 32)
        assert out.s_hr.shape == (1, 3, 64, 68)
        assert out.fused.shape == (1, 3, 64, 68)
        assert out.consistency == pytest.approx(consistency_loss(out.s_hr, out.s_lr).value)

    def test_lr_only_upsamples(self, alignment):
        """Test that the LR-only variant skips the HR branch."""
        model = build_model(SMALL.model_copy(update={"variant": "lr_only"}), seed=3)
        out = stitch_alignment(model, alignment)
        assert np.array_equal(out.s_hr.data, resize_bilinear(out.s_lr.data, (64, 68)))

    def test_lr_only_without_seam_upsamples(self, alignment):
        """Test that the seamless LR-only variant also skips the HR branch."""
        model = build_model(SMALL.model_copy(update={"variant": "lr_only_no_seam"}), seed=3)
        out = stitch_alignment(model, alignment)
        assert np.array_equal(out.s_hr.data, resize_bilinear(out.s_lr.data, (64, 68)))

    def test_hr_only_zero_lr(self, alignment):
        """Test that the HR-only variant feeds a zero LR image."""
        model = build_model(SMALL.model_copy(update={"variant": "hr_only"}), seed=3)
        out = stitch_alignment(model, alignment)
        assert not out.s_lr.data.any()

    def test_images_clamped(self, model, alignment):
        """Test that exported images are clamped to [0, 1]."""
        image = stitch_alignment(model, alignment).s_hr_image()
        assert image.min() >= 0.0 and image.max() <= 1.0

    def test_fuse_single_mask(self, rng):
        """Test that the fused image equals the only covering input."""
        a, b = rng.random((2, 1, 3, 4, 4))
        ones = np.ones((1, 1, 4, 4))
        zeros = np.zeros((1, 1, 4, 4))
        assert np.allclose(fuse_weighted(a, b, ones, zeros).data, a)
        assert not fuse_weighted(a, b, zeros, zeros).data.any()

    def test_fuse_prefers_brighter(self):
        """Test that the brighter input dominates the overlap."""
        a = np.full((1, 3, 2, 2), 0.9)
        b = np.full((1, 3, 2, 2), 0.1)
        ones = np.ones((1, 1, 2, 2))
        assert np.all(fuse_weighted(a, b, ones, ones).data > 0.5)

    def test_dump_feature_maps(self, model, alignment, tmp_path):
        """Test one PNG per LR layer."""
        paths = dump_feature_maps(model, alignment.warped_a, alignment.warped_b, tmp_path / "maps")
        assert len(paths) == len(model.lr_graph.nodes)
        assert paths[0].name == "layer_00.png"
        assert all(p.exists() for p in paths)


class TestObjective:
    """Test the reconstruction objective and its gradients."""

    def test_effective_weights(self):
        """Test the weight overrides of every variant."""
        w = LossWeights()
        assert effective_weights("full", w) == w
        lr_only = effective_weights("lr_only", w)
        assert (lr_only.omega_hr, lr_only.omega_cs, lr_only.omega_lr) == (0.0, 0.0, 100.0)
        hr_only = effective_weights("hr_only", w)
        assert (hr_only.omega_lr, hr_only.omega_cs) == (0.0, 0.0)
        assert effective_weights("no_seam", w).lambda_s == 0.0
        assert effective_weights("no_consistency", w).omega_cs == 0.0
        assert effective_weights("full", w, lr_only_phase=True).omega_hr == 0.0

    def test_combined_variant_weights(self):
        """Test the variants that drop the seam term together with another term."""
        w = LossWeights()
        lr_plain = effective_weights("lr_only_no_seam", w)
        assert (lr_plain.omega_hr, lr_plain.omega_cs, lr_plain.lambda_s) == (0.0, 0.0, 0.0)
        assert lr_plain.omega_lr == 100.0
        plain = effective_weights("no_seam_no_consistency", w)
        assert (plain.lambda_s, plain.omega_cs) == (0.0, 0.0)
        assert (plain.omega_lr, plain.omega_hr, plain.lambda_c) == (100.0, 1.0, w.lambda_c)

    def test_lr_only_phase_keeps_seam_choice(self):
        """Test that the warm-start phase does not undo a dropped seam term."""
        w = effective_weights("no_seam_no_consistency", LossWeights(), lr_only_phase=True)
        assert (w.omega_hr, w.omega_cs, w.lambda_s) == (0.0, 0.0, 0.0)

    def test_record_matches_parts(self, model, alignment):
        """Test that L_R combines the reported stage losses."""
        record, grads = compute_objective(model, alignment, LossWeights())
        assert record.l_r == pytest.approx(
            reconstruction_objective(record.l_lr, record.l_hr, record.l_cs, LossWeights())
        )
        out = stitch_alignment(model, alignment)
        assert record.l_cs == pytest.approx(out.consistency, rel=1e-12)
        assert set(grads) == set(model.parameters())

    def test_lr_only_phase(self, model, alignment):
        """Test that the warm-start phase trains the LR branch alone."""
        record, grads = compute_objective(model, alignment, LossWeights(), lr_only_phase=True)
        assert record.l_hr == 0.0 and record.l_cs == 0.0
        assert all(k.startswith("lr.") for k in grads)

    def test_bias_gradient(self, model, alignment):
        """Test the HR output bias gradient against central differences."""
        w = LossWeights()
        _, grads = compute_objective(model, alignment, w)
        bias = model.parameters()["hr.hr_out.bias"]
        eps = 1e-6
        for k in range(3):
            bias[k] += eps
            up = compute_objective(model, alignment, w)[0].l_r
            bias[k] -= 2 * eps
            down = compute_objective(model, alignment, w)[0].l_r
            bias[k] += eps
            assert grads["hr.hr_out.bias"][k] == pytest.approx((up - down) / (2 * eps), rel=1e-3, abs=1e-8)


class TestTraining:
    """Test the training loop."""

    def test_empty_dataset(self, model):
        """Test that training needs samples."""
        with pytest.raises(ValidationError):
            train(model, [])

    def test_few_iterations(self, model, alignment):
        """Test that parameters move and every iteration is recorded."""
        before = {k: v.copy() for k, v in model.parameters().items()}
        seen = []
        _, trace = train(model, [alignment], epochs=3, max_iterations=2, on_iteration=seen.append)
        assert [r.iteration for r in trace.records] == [0, 1]
        assert len(seen) == 2
        after = model.parameters()
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_deterministic(self, alignment):
        """Test that equal seeds train to identical parameters."""
        runs = []
        for _ in range(2):
            m = build_model(SMALL, seed=5)
            train(m, [alignment, alignment], epochs=1, seed=9)
            runs.append(m.parameters())
        assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])

    def test_trace_csv(self):
        """Test the CSV header and row layout."""
        trace = TrainingTrace([TrainRecord(0, 0.5, 0.25, 0.125, 50.375)])
        lines = trace.to_csv().splitlines()
        assert lines[0] == "iteration,l_lr,l_hr,l_cs,l_r"
        assert lines[1] == "0,0.5,0.25,0.125,50.375"
        assert trace.column("l_hr").tolist() == [0.25]

    @pytest.mark.slow
    def test_objective_decreases(self, alignment):
        """Test that repeated steps on one sample lower the objective."""
        m = build_model(SMALL, seed=0)
        _, trace = train(m, [alignment], epochs=40, optimizer=OptimizerConfig(learning_rate=1e-3, lr_decay=1.0))
        losses = trace.column("l_r")
        assert losses[-5:].mean() < losses[:5].mean()


class TestModelFiles:
    """Test model checkpoints."""

    def test_round_trip(self, model, alignment, tmp_path):
        """Test that a reloaded model reproduces the outputs bitwise."""
        path = tmp_path / "model.ckpt"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.cfg == model.cfg
        a = stitch_alignment(model, alignment)
        b = stitch_alignment(loaded, alignment)
        assert np.array_equal(a.s_hr.data, b.s_hr.data)
        assert np.array_equal(a.s_lr.data, b.s_lr.data)

    def test_not_a_model(self, tmp_path):
        """Test that a feature checkpoint is not accepted as a model."""
        path = tmp_path / "features.ckpt"
        FeatureExtractor.build(TapDepth.SHALLOW).save(path)
        with pytest.raises(CheckpointError):
            load_model(path)
