"""Tests for synthetic data, manifests and image files."""

import json

import numpy as np
import pytest

from stitchkit.datakit import (
    DatasetManifest,
    PairRecord,
    gen_synthetic_pair,
    generate_dataset,
    ingest_directory,
    jitter,
    load_dataset,
    load_image,
    procedural_texture,
    read_manifest,
    render_synthetic_pair,
    save_image,
    write_manifest,
)
from stitchkit.exceptions import DataError, FileOperationError, InputTooSmallError, ValidationError
from stitchkit.geometry import FourPointOffsets
from stitchkit.tensorcore.tensor import Tensor4
from stitchkit.utils.seeding import derive_seed


class TestSynthesis:
    """Test synthetic pair rendering."""

    def test_texture_range_and_determinism(self):
        """Test that textures are seeded and stay inside [0.05, 0.95]."""
        a = procedural_texture((40, 50), seed=1)
        assert a.shape == (40, 50, 3)
        assert a.min() >= 0.05 - 1e-12 and a.max() <= 0.95 + 1e-12
        assert np.array_equal(a, procedural_texture((40, 50), seed=1))
        assert not np.array_equal(a, procedural_texture((40, 50), seed=2))

    def test_zero_disturbance_is_exact(self, texture):
        """Test that no disturbance gives a target equal to the reference."""
        ref, target, truth = render_synthetic_pair(texture, 0.0, 48, np.random.default_rng(0))
        assert truth == FourPointOffsets.zeros()
        assert np.array_equal(ref, target)

    def test_truth_within_disturbance(self, texture):
        """Test that ground-truth offsets respect the disturbance bound."""
        _, _, truth = render_synthetic_pair(texture, 6.0, 64, np.random.default_rng(4))
        assert np.all(np.abs(truth.values) <= 6.0)

    def test_source_too_small(self, texture):
        """Test that the crop plus margin must fit in the source."""
        with pytest.raises(InputTooSmallError):
            render_synthetic_pair(texture, 16.0, 80, np.random.default_rng(0))

    def test_negative_disturbance(self, texture):
        """Test that a negative disturbance is rejected."""
        with pytest.raises(ValidationError):
            render_synthetic_pair(texture, -1.0, 32, np.random.default_rng(0))

    def test_jitter_stays_in_range(self, texture, rng):
        """Test that photometric jitter is clipped to [0, 1]."""
        out = jitter(texture, rng)
        assert out.shape == texture.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_files_are_deterministic(self, texture, tmp_path):
        """Test that equal seeds write byte-identical images."""
        first = gen_synthetic_pair(texture, 8.0, 64, 7, tmp_path / "a")
        second = gen_synthetic_pair(texture, 8.0, 64, 7, tmp_path / "b")
        assert first.ref_path.read_bytes() == second.ref_path.read_bytes()
        assert first.target_path.read_bytes() == second.target_path.read_bytes()
        assert first.truth_offsets == second.truth_offsets
        assert first.parallax_level == "SMALL"

    def test_generate_dataset(self, tmp_path):
        """Test the on-disk layout of a generated dataset."""
        manifest = generate_dataset(tmp_path, 3, 4.0, 32, seed=11)
        assert len(manifest) == 3
        assert sorted(p.name for p in (tmp_path / "reference").iterdir()) == [
            "pair_0000.png",
            "pair_0001.png",
            "pair_0002.png",
        ]
        assert len(list((tmp_path / "target").iterdir())) == 3
        data = json.loads((tmp_path / "manifest.json").read_text())
        assert data["params"]["source"] == "procedural"
        assert data["records"][0]["ref"] == "reference/pair_0000.png"

    def test_generate_needs_pairs(self, tmp_path):
        """Test that the pair count must be positive."""
        with pytest.raises(ValidationError):
            generate_dataset(tmp_path, 0, 4.0, 32, seed=0)

    def test_seed_streams_are_independent(self):
        """Test that labelled seed streams differ and are stable."""
        assert derive_seed(1, "synth", "pair_0000") == derive_seed(1, "synth", "pair_0000")
        assert derive_seed(1, "synth", "pair_0000") != derive_seed(1, "synth", "pair_0001")
        assert derive_seed(1, "synth") != derive_seed(2, "synth")


class TestManifest:
    """Test manifest files."""

    def test_round_trip(self, tmp_path):
        """Test that records survive a write and read."""
        records = [
            PairRecord("a", tmp_path / "reference/a.png", tmp_path / "target/a.png", FourPointOffsets.uniform(1.5, -2.0), "HIGH", "SMALL"),
            PairRecord("b", tmp_path / "reference/b.png", tmp_path / "target/b.png"),
        ]
        path = tmp_path / "manifest.json"
        write_manifest(DatasetManifest(records, seed=3, params={"count": 2}), path)
        restored = read_manifest(path)
        assert restored.records == records
        assert restored.seed == 3
        assert not restored.records[1].synthetic

    def test_duplicate_ids(self, tmp_path):
        """Test that record ids must be unique."""
        record = PairRecord("a", tmp_path / "a.png", tmp_path / "b.png")
        with pytest.raises(DataError, match=r"\[a\]"):
            DatasetManifest([record, record])

    def test_not_a_manifest(self, tmp_path):
        """Test that arbitrary JSON is rejected."""
        path = tmp_path / "manifest.json"
        path.write_text("[1, 2, 3]")
        with pytest.raises(FileOperationError):
            read_manifest(path)

    def test_unsupported_version(self, tmp_path):
        """Test that future manifest versions are rejected."""
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"version": 2, "records": []}))
        with pytest.raises(FileOperationError):
            read_manifest(path)

    def test_invalid_json(self, tmp_path):
        """Test that a corrupt manifest is a file error."""
        path = tmp_path / "manifest.json"
        path.write_text("{not json")
        with pytest.raises(FileOperationError):
            read_manifest(path)

    def test_empty_manifest(self, tmp_path):
        """Test that an empty manifest loads to no pairs."""
        path = tmp_path / "manifest.json"
        write_manifest(DatasetManifest(), path)
        assert load_dataset(path) == []


class TestImages:
    """Test image loading and dataset assembly."""

    def test_save_load_quantization(self, rng, tmp_path):
        """Test that a save and load differs by at most half a grey level."""
        data = rng.random((1, 3, 9, 7))
        save_image(data, tmp_path / "x.png")
        loaded = load_image(tmp_path / "x.png")
        assert loaded.shape == (1, 3, 9, 7)
        assert np.max(np.abs(loaded.data - data)) <= 0.5 / 255 + 1e-12

    def test_save_wrong_channels(self, tmp_path):
        """Test that only grey or RGB tensors can be saved."""
        with pytest.raises(ValidationError):
            save_image(np.zeros((1, 2, 4, 4)), tmp_path / "x.png")

    def test_missing_file_names_record(self, tmp_path):
        """Test that a missing image reports the record id."""
        with pytest.raises(DataError, match="pair_0042") as excinfo:
            load_image(tmp_path / "nope.png", "pair_0042")
        assert excinfo.value.record_id == "pair_0042"

    def test_undecodable_file(self, tmp_path):
        """Test that garbage bytes are a data error."""
        path = tmp_path / "broken.png"
        path.write_bytes(b"not an image")
        with pytest.raises(DataError):
            load_image(path, "broken")

    def test_size_mismatch(self, rng, tmp_path):
        """Test that a pair with different sizes is rejected."""
        save_image(rng.random((1, 3, 8, 8)), tmp_path / "reference/a.png")
        save_image(rng.random((1, 3, 8, 9)), tmp_path / "target/a.png")
        path = tmp_path / "manifest.json"
        write_manifest(DatasetManifest([PairRecord("a", tmp_path / "reference/a.png", tmp_path / "target/a.png")]), path)
        with pytest.raises(DataError, match=r"\[a\]"):
            load_dataset(path)

    def test_load_generated(self, tmp_path):
        """Test that generated pairs load with their ground truth."""
        generate_dataset(tmp_path, 2, 4.0, 32, seed=5)
        pairs = load_dataset(tmp_path / "manifest.json")
        assert [p.record.id for p in pairs] == ["pair_0000", "pair_0001"]
        assert isinstance(pairs[0].ref, Tensor4)
        assert pairs[0].record.synthetic


class TestIngest:
    """Test pairing real images from a directory."""

    def test_pairs_by_name(self, rng, tmp_path):
        """Test that same-named files are paired and other files skipped."""
        for name in ("b", "a"):
            save_image(rng.random((1, 3, 8, 8)), tmp_path / "reference" / f"{name}.png")
            save_image(rng.random((1, 3, 8, 8)), tmp_path / "target" / f"{name}.png")
        (tmp_path / "reference" / "notes.txt").write_text("skip me")
        manifest = ingest_directory(tmp_path)
        assert [r.id for r in manifest.records] == ["a", "b"]
        assert all(not r.synthetic for r in manifest.records)

    def test_missing_target(self, rng, tmp_path):
        """Test that an unpaired reference is a data error."""
        save_image(rng.random((1, 3, 8, 8)), tmp_path / "reference" / "a.png")
        (tmp_path / "target").mkdir()
        with pytest.raises(DataError, match=r"\[a\]"):
            ingest_directory(tmp_path)

    def test_missing_directories(self, tmp_path):
        """Test that both sub-directories are required."""
        with pytest.raises(FileOperationError):
            ingest_directory(tmp_path)
