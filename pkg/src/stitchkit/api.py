"""Core API class for stitchkit: file-level workflows over the library modules."""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from .align import AlignmentResult, align_pair, compose_alignment
from .datakit import (
    MANIFEST_NAME,
    DatasetManifest,
    LoadedPair,
    generate_dataset,
    load_dataset,
    load_image,
    save_image,
)
from .evalkit import EvalReport, SampleMetrics, build_report, evaluate_pair
from .exceptions import DataError
from .geometry import FourPointOffsets
from .losses import FeatureExtractor, TapDepth
from .reconstruct import (
    StitchModel,
    StitchOutput,
    TrainingTrace,
    build_model,
    dump_feature_maps,
    load_model,
    save_model,
    stitch_alignment,
    train,
)
from .utils.config import PipelineConfig
from .utils.io import ensure_directory_exists, read_json, safe_write_file, write_json
from .utils.images import read_rgb, to_uint8, write_png
from .warpmask import export_mask

logger = logging.getLogger(__name__)

Progress = Callable[[int, int], None]

OFFSETS_FILE = "offsets.json"
MODEL_FILE = "model.ckpt"
TRACE_FILE = "trace.csv"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"
SAMPLES_CSV = "samples.csv"
QUALITY_METRICS = ("psnr", "ssim")


def _tick(progress: Optional[Progress], done: int, total: int) -> None:
    if progress is not None:
        progress(done, total)


class StitchPipeline:
    """Main API: every CLI subcommand is one method here."""

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config or PipelineConfig()

    # ------------------------------------------------------------------ data

    def generate(
        self,
        out_dir: Path,
        source_path: Optional[Path] = None,
        count: Optional[int] = None,
        disturbance: Optional[float] = None,
    ) -> DatasetManifest:
        """Write a synthetic dataset (images + manifest.json) into ``out_dir``."""
        synth = self.config.synth
        source = None
        if source_path is not None:
            source = read_rgb(Path(source_path)).astype("float64") / 255.0
        return generate_dataset(
            Path(out_dir),
            count or synth.count,
            synth.disturbance if disturbance is None else disturbance,
            synth.crop_size,
            self.config.seed,
            source=source,
            photometric_jitter=synth.jitter,
        )

    def generate_sweep(
        self, out_dir: Path, source_path: Optional[Path] = None
    ) -> Dict[str, DatasetManifest]:
        """One dataset per entry of ``synth.disturbance_sweep``, in ``out_dir/d<px>/``."""
        manifests = {}
        for disturbance in self.config.synth.disturbance_sweep:
            name = f"d{disturbance:g}"
            manifests[name] = self.generate(Path(out_dir) / name, source_path, disturbance=disturbance)
        return manifests

    # ------------------------------------------------------------------ alignment

    def align_files(self, ref_path: Path, target_path: Path, out_dir: Path) -> AlignmentResult:
        """Align one pair and write offsets, warped images and masks."""
        ref = load_image(ref_path)
        target = load_image(target_path)
        result = align_pair(ref, target, self.config.pyramid)
        self.write_alignment(result, Path(out_dir))
        return result

    def write_alignment(self, result: AlignmentResult, out_dir: Path) -> None:
        out_dir = ensure_directory_exists(out_dir)
        write_json(out_dir / OFFSETS_FILE, result.to_dict())
        save_image(result.warped_a, out_dir / "warped_a.png")
        save_image(result.warped_b, out_dir / "warped_b.png")
        export_mask(result.masks.content_a, out_dir / "mask_content_a.png")
        export_mask(result.masks.content_b, out_dir / "mask_content_b.png")
        export_mask(result.masks.seam_a, out_dir / "mask_seam_a.png")
        export_mask(result.masks.seam_b, out_dir / "mask_seam_b.png")
        logger.info("Wrote alignment outputs to %s", out_dir)

    def align_manifest(
        self, manifest_path: Path, out_dir: Path, progress: Optional[Progress] = None
    ) -> Dict[str, AlignmentResult]:
        """Align every record; outputs go to ``out_dir/<id>/``."""
        pairs = load_dataset(manifest_path)
        results = {}
        for i, pair in enumerate(pairs):
            result = align_pair(pair.ref, pair.target, self.config.pyramid)
            self.write_alignment(result, Path(out_dir) / pair.record.id)
            results[pair.record.id] = result
            _tick(progress, i + 1, len(pairs))
        return results

    # ------------------------------------------------------------------ reconstruction

    def model(self, checkpoint: Optional[Path] = None) -> StitchModel:
        """Load ``checkpoint`` or build a freshly initialized model from the config seed."""
        if checkpoint is not None:
            model = load_model(Path(checkpoint))
        else:
            model = build_model(self.config.branch, self.config.seed)
        features = self.config.data.feature_checkpoint
        if features is not None:
            model.lr_features = FeatureExtractor.from_checkpoint(features, TapDepth.DEEP)
            model.hr_features = FeatureExtractor.from_checkpoint(features, TapDepth.SHALLOW)
        return model

    def stitch_files(
        self,
        ref_path: Path,
        target_path: Path,
        out_dir: Path,
        checkpoint: Optional[Path] = None,
    ) -> StitchOutput:
        """Align and reconstruct one pair; writes s_lr.png, s_hr.png, fused.png, offsets.json."""
        ref = load_image(ref_path)
        target = load_image(target_path)
        output = stitch_alignment(self.model(checkpoint), align_pair(ref, target, self.config.pyramid))
        out_dir = ensure_directory_exists(Path(out_dir))
        write_json(out_dir / OFFSETS_FILE, output.alignment.to_dict())
        write_png(out_dir / "s_lr.png", to_uint8(output.s_lr_image()))
        write_png(out_dir / "s_hr.png", to_uint8(output.s_hr_image()))
        save_image(output.fused, out_dir / "fused.png")
        logger.info("Wrote stitched outputs to %s", out_dir)
        return output

    def _training_alignments(self, pairs: List[LoadedPair]) -> List[AlignmentResult]:
        alignments = []
        for pair in pairs:
            truth = pair.record.truth_offsets
            if truth is not None:
                alignments.append(compose_alignment(pair.ref, pair.target, truth))
            else:
                alignments.append(align_pair(pair.ref, pair.target, self.config.pyramid))
        return alignments

    def train_manifest(
        self,
        manifest_path: Path,
        out_dir: Path,
        checkpoint: Optional[Path] = None,
        progress: Optional[Progress] = None,
    ) -> Tuple[StitchModel, TrainingTrace]:
        """Train on a manifest; writes model.ckpt and trace.csv into ``out_dir``.

        Synthetic records are composed at their ground-truth offsets, real ones are
        aligned first.
        """
        pairs = load_dataset(manifest_path)
        if not pairs:
            raise DataError(f"Manifest {manifest_path} has no records")
        alignments = self._training_alignments(pairs)
        model = self.model(checkpoint)
        train_cfg = self.config.train
        total = train_cfg.epochs * len(alignments)
        if train_cfg.max_iterations is not None:
            total = min(total, train_cfg.max_iterations)
        counter = {"done": 0}

        def on_iteration(_record) -> None:
            counter["done"] += 1
            _tick(progress, counter["done"], total)

        model, trace = train(
            model,
            alignments,
            self.config.loss,
            epochs=train_cfg.epochs,
            seed=self.config.seed,
            optimizer=self.config.optimizer,
            max_iterations=train_cfg.max_iterations,
            shuffle=train_cfg.shuffle,
            on_iteration=on_iteration,
        )
        out_dir = ensure_directory_exists(Path(out_dir))
        save_model(model, out_dir / MODEL_FILE)
        trace.write_csv(out_dir / TRACE_FILE)
        logger.info("Wrote %s and %s to %s", MODEL_FILE, TRACE_FILE, out_dir)
        return model, trace

    def dump_features(
        self,
        ref_path: Path,
        target_path: Path,
        out_dir: Path,
        checkpoint: Optional[Path] = None,
    ) -> List[Path]:
        ref = load_image(ref_path)
        target = load_image(target_path)
        alignment = align_pair(ref, target, self.config.pyramid)
        return dump_feature_maps(self.model(checkpoint), alignment.warped_a, alignment.warped_b, Path(out_dir))

    # ------------------------------------------------------------------ evaluation

    def _stored_offsets(self, results_dir: Path, record_id: str) -> FourPointOffsets:
        path = results_dir / record_id / OFFSETS_FILE
        if not path.exists():
            raise DataError(f"No alignment result at {path}", record_id)
        data = read_json(path)
        try:
            return FourPointOffsets.from_flat([v for row in data["offsets"] for v in row])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed {path}: {e}", record_id)

    def evaluate(
        self,
        manifest_path: Path,
        out_dir: Path,
        results_dir: Optional[Path] = None,
        progress: Optional[Progress] = None,
    ) -> EvalReport:
        """Score every record and write report.json, report.txt and samples.csv.

        Offsets come from ``results_dir/<id>/offsets.json`` when given, otherwise each
        pair is aligned on the fly.
        """
        pairs = load_dataset(manifest_path)
        samples: List[SampleMetrics] = []
        for i, pair in enumerate(pairs):
            if results_dir is not None:
                offsets = self._stored_offsets(Path(results_dir), pair.record.id)
            else:
                offsets = align_pair(pair.ref, pair.target, self.config.pyramid).offsets
            samples.append(
                evaluate_pair(pair.record.id, pair.ref, pair.target, offsets, pair.record.truth_offsets)
            )
            _tick(progress, i + 1, len(pairs))

        metric = self.config.eval.metric
        if metric == "rmse" and any(s.rmse is None for s in samples):
            logger.warning("Some records lack ground truth; reporting psnr instead of rmse")
            metric = "psnr"
        if metric == "ssim" and any(s.ssim is None for s in samples):
            logger.warning("Some overlaps are too small for SSIM; reporting psnr instead")
            metric = "psnr"
        report = build_report(samples, metric, higher_is_better=metric in QUALITY_METRICS)

        out_dir = ensure_directory_exists(Path(out_dir))
        write_json(out_dir / REPORT_JSON, report.to_dict())
        safe_write_file(out_dir / REPORT_TEXT, report.render_text())
        report.write_samples_csv(out_dir / SAMPLES_CSV)
        logger.info("Wrote evaluation report to %s", out_dir)
        return report


def default_manifest(directory: Path) -> Path:
    return Path(directory) / MANIFEST_NAME
