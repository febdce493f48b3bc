"""Reconstruction networks: the low-resolution deformation branch, the high-resolution
refined branch, their joint training and full-pipeline inference."""

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic import ValidationError as PydanticValidationError

from .align import AlignmentResult, PyramidConfig, align_pair
from .exceptions import CheckpointError, DivergenceError, ValidationError
from .losses import (
    FeatureExtractor,
    LossWeights,
    TapDepth,
    consistency_loss,
    content_loss,
    reconstruction_objective,
    seam_loss,
    stage_total,
)
from .tensorcore.checkpoint import copy_parameters, load_checkpoint, save_checkpoint
from .tensorcore.graph import Graph, run_backward, run_forward
from .tensorcore.layers import LayerKind, LayerSpec, resize_bilinear
from .tensorcore.optim import AdamState, adam_step, lr_at
from .tensorcore.tensor import Tensor4, as_array
from .utils.images import to_uint8, write_png
from .utils.io import ensure_directory_exists, safe_write_file
from .utils.seeding import rng_for
from .warpmask import MaskSet

logger = logging.getLogger(__name__)

LR_FILTERS = (64, 64, 128, 128, 256, 256, 512, 512, 256, 256, 128, 128, 64, 64, 3)
HR_FILTERS = 64
POOL_STAGES = 3
WARM_START_FRACTION = 0.2

Variant = Literal[
    "full",
    "lr_only",
    "hr_only",
    "no_seam",
    "no_consistency",
    "lr_only_no_seam",
    "no_seam_no_consistency",
]
LR_ONLY_VARIANTS = ("lr_only", "lr_only_no_seam")
NO_SEAM_VARIANTS = ("no_seam", "lr_only_no_seam", "no_seam_no_consistency")
NO_CONSISTENCY_VARIANTS = ("no_consistency", "no_seam_no_consistency")


class BranchConfig(BaseModel):
    """Network widths, working resolution and training variant."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    channel_scale: float = Field(0.125, gt=0.0, le=1.0)
    lr_working_size: Tuple[int, int] = (64, 64)
    resblock_count: int = Field(4, ge=1)
    variant: Variant = "full"
    warm_start: bool = False
    detach_lr: bool = False

    @field_validator("lr_working_size")
    @classmethod
    def _divisible(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        step = 2**POOL_STAGES
        if any(v < step or v % step for v in value):
            raise ValueError(f"lr_working_size must be positive multiples of {step}, got {value}")
        return value


class OptimizerConfig(BaseModel):
    """Adam settings; the learning rate decays by 0.96 per epoch."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(1e-4, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)
    lr_decay: float = Field(0.96, gt=0.0, le=1.0)


def scaled(channels: int, scale: float) -> int:
    return max(1, int(round(channels * scale)))


def lr_filter_counts(scale: float) -> List[int]:
    counts = [scaled(c, scale) for c in LR_FILTERS]
    counts[-1] = 3
    return counts


def build_lr_graph(cfg: BranchConfig) -> Graph:
    """Encoder-decoder with three pooling and three deconvolution stages.

    Encoder features are concatenated onto the equal-resolution decoder features.
    """
    f = lr_filter_counts(cfg.channel_scale)
    h, w = cfg.lr_working_size
    g = Graph("lr")
    g.add_input("warped_a", 3, h, w)
    g.add_input("warped_b", 3, h, w)
    prev = g.add("input", LayerSpec(LayerKind.CONCAT_CHANNELS, 6, 6), "warped_a", "warped_b")

    def conv_relu(name: str, src: str, cin: int, cout: int) -> str:
        node = g.add(name, LayerSpec(LayerKind.CONV3X3, cin, cout), src)
        return g.add(f"{name}_relu", LayerSpec(LayerKind.RELU, cout, cout), node)

    channels = 6
    skips: List[Tuple[str, int]] = []
    layer = 0
    for stage in range(1, POOL_STAGES + 2):
        prev = conv_relu(f"enc{stage}a", prev, channels, f[layer])
        prev = conv_relu(f"enc{stage}b", prev, f[layer], f[layer + 1])
        channels = f[layer + 1]
        layer += 2
        if stage <= POOL_STAGES:
            skips.append((prev, channels))
            prev = g.add(f"pool{stage}", LayerSpec(LayerKind.MAXPOOL2X2, channels, channels), prev)

    for stage in range(POOL_STAGES, 0, -1):
        skip, skip_channels = skips[stage - 1]
        prev = g.add(f"up{stage}", LayerSpec(LayerKind.DECONV2X2, channels, skip_channels), prev)
        prev = g.add(
            f"merge{stage}",
            LayerSpec(LayerKind.CONCAT_CHANNELS, 2 * skip_channels, 2 * skip_channels),
            prev,
            skip,
        )
        prev = conv_relu(f"dec{stage}a", prev, 2 * skip_channels, f[layer])
        prev = conv_relu(f"dec{stage}b", prev, f[layer], f[layer + 1])
        channels = f[layer + 1]
        layer += 2

    g.add("lr_out", LayerSpec(LayerKind.CONV3X3, channels, f[layer]), prev)
    return g


def build_hr_graph(cfg: BranchConfig) -> Graph:
    """Fully convolutional refinement: conv, resblocks, conv, skip add, conv."""
    f = scaled(HR_FILTERS, cfg.channel_scale)
    g = Graph("hr")
    g.add_input("s_lr", 3)
    g.add_input("warped_a", 3)
    g.add_input("warped_b", 3)
    up = g.add("s_lr_up", LayerSpec(LayerKind.RESIZE_BILINEAR, 3, 3), "s_lr", "warped_a")
    x = g.add("input", LayerSpec(LayerKind.CONCAT_CHANNELS, 9, 9), up, "warped_a", "warped_b")
    x = g.add("head", LayerSpec(LayerKind.CONV3X3, 9, f), x)
    head = g.add("head_relu", LayerSpec(LayerKind.RELU, f, f), x)
    prev = head
    for i in range(1, cfg.resblock_count + 1):
        y = g.add(f"res{i}a", LayerSpec(LayerKind.CONV3X3, f, f), prev)
        y = g.add(f"res{i}a_relu", LayerSpec(LayerKind.RELU, f, f), y)
        y = g.add(f"res{i}b", LayerSpec(LayerKind.CONV3X3, f, f), y)
        y = g.add(f"res{i}_sum", LayerSpec(LayerKind.ADD_SKIP, f, f), y, prev)
        prev = g.add(f"res{i}_relu", LayerSpec(LayerKind.RELU, f, f), y)
    x = g.add("penultimate", LayerSpec(LayerKind.CONV3X3, f, f), prev)
    x = g.add("head_skip", LayerSpec(LayerKind.ADD_SKIP, f, f), x, head)
    g.add("hr_out", LayerSpec(LayerKind.CONV3X3, f, 3), x)
    return g


@dataclass
class StitchModel:
    """Both branches, their optimizer state and the frozen perceptual extractors."""

    cfg: BranchConfig
    lr_graph: Graph
    hr_graph: Graph
    optimizer: AdamState = field(default_factory=AdamState)
    seed: int = 0
    lr_features: FeatureExtractor = field(default_factory=lambda: FeatureExtractor.build(TapDepth.DEEP))
    hr_features: FeatureExtractor = field(
        default_factory=lambda: FeatureExtractor.build(TapDepth.SHALLOW)
    )

    @property
    def lr_size(self) -> Tuple[int, int]:
        return self.cfg.lr_working_size

    def parameters(self) -> Dict[str, np.ndarray]:
        params = {f"lr.{k}": v for k, v in self.lr_graph.parameters().items()}
        params.update({f"hr.{k}": v for k, v in self.hr_graph.parameters().items()})
        return params

    def parameter_count(self) -> int:
        return self.lr_graph.parameter_count() + self.hr_graph.parameter_count()


def build_model(cfg: Optional[BranchConfig] = None, seed: int = 0) -> StitchModel:
    """Build both branches and He-initialize them from ``seed``."""
    cfg = cfg or BranchConfig()
    lr_graph = build_lr_graph(cfg)
    hr_graph = build_hr_graph(cfg)
    lr_graph.initialize(rng_for(seed, "reconstruct", "lr"))
    hr_graph.initialize(rng_for(seed, "reconstruct", "hr"))
    logger.debug(
        "built model: %d LR + %d HR parameters",
        lr_graph.parameter_count(),
        hr_graph.parameter_count(),
    )
    return StitchModel(cfg, lr_graph, hr_graph, seed=seed)


# ----------------------------------------------------------------------------- inference


def _to_lr(model: StitchModel, image: "Tensor4 | np.ndarray") -> np.ndarray:
    return resize_bilinear(as_array(image), model.lr_size)


def forward_lr(model: StitchModel, warped_a: "Tensor4 | np.ndarray", warped_b: "Tensor4 | np.ndarray") -> Tensor4:
    """S_LR at the working size; inputs of any other size are resized first."""
    acts = run_forward(
        model.lr_graph, {"warped_a": _to_lr(model, warped_a), "warped_b": _to_lr(model, warped_b)}
    )
    return Tensor4(acts["lr_out"])


def forward_hr(
    model: StitchModel,
    s_lr: "Tensor4 | np.ndarray",
    warped_a: "Tensor4 | np.ndarray",
    warped_b: "Tensor4 | np.ndarray",
) -> Tensor4:
    """S_HR at the resolution of the warped images."""
    acts = run_forward(
        model.hr_graph,
        {"s_lr": as_array(s_lr), "warped_a": as_array(warped_a), "warped_b": as_array(warped_b)},
    )
    return Tensor4(acts["hr_out"])


def fuse_weighted(
    warped_a: "Tensor4 | np.ndarray",
    warped_b: "Tensor4 | np.ndarray",
    mask_a: "Tensor4 | np.ndarray",
    mask_b: "Tensor4 | np.ndarray",
    eps: float = 1e-6,
) -> Tensor4:
    """Intensity-weighted average of the warped images; brighter pixels weigh more."""
    ia, ib = as_array(warped_a), as_array(warped_b)
    ma, mb = as_array(mask_a), as_array(mask_b)
    wa = ma * (ia.mean(axis=1, keepdims=True) + eps)
    wb = mb * (ib.mean(axis=1, keepdims=True) + eps)
    total = wa + wb
    safe = np.where(total > 0, total, 1.0)
    fused = np.where(total > 0, (wa * ia + wb * ib) / safe, 0.0)
    return Tensor4(fused)


@dataclass
class StitchOutput:
    """Raw network outputs (unclamped) plus the stage-one alignment."""

    s_hr: Tensor4
    s_lr: Tensor4
    alignment: AlignmentResult
    consistency: float
    fused: Tensor4

    def s_hr_image(self) -> np.ndarray:
        return np.clip(self.s_hr.to_image(), 0.0, 1.0)

    def s_lr_image(self) -> np.ndarray:
        return np.clip(self.s_lr.to_image(), 0.0, 1.0)


def stitch_alignment(model: StitchModel, alignment: AlignmentResult) -> StitchOutput:
    """Run both branches on an existing alignment."""
    wa, wb = alignment.warped_a, alignment.warped_b
    variant = model.cfg.variant
    if variant == "hr_only":
        s_lr = Tensor4(np.zeros((wa.shape[0], 3) + model.lr_size))
    else:
        s_lr = forward_lr(model, wa, wb)
    if variant in LR_ONLY_VARIANTS:
        s_hr = Tensor4(resize_bilinear(s_lr.data, wa.spatial))
    else:
        s_hr = forward_hr(model, s_lr, wa, wb)
    masks = alignment.masks
    return StitchOutput(
        s_hr=s_hr,
        s_lr=s_lr,
        alignment=alignment,
        consistency=consistency_loss(s_hr, s_lr).value,
        fused=fuse_weighted(wa, wb, masks.content_a, masks.content_b),
    )


def stitch(
    model: StitchModel,
    ref: "Tensor4 | np.ndarray",
    target: "Tensor4 | np.ndarray",
    pyr_cfg: Optional[PyramidConfig] = None,
) -> StitchOutput:
    """Align the pair, then reconstruct the stitched image."""
    return stitch_alignment(model, align_pair(ref, target, pyr_cfg))


def dump_feature_maps(
    model: StitchModel,
    warped_a: "Tensor4 | np.ndarray",
    warped_b: "Tensor4 | np.ndarray",
    out_dir: Path,
) -> List[Path]:
    """One grayscale PNG per LR-branch layer: channel-mean activation, normalized per layer."""
    out_dir = ensure_directory_exists(Path(out_dir))
    acts = run_forward(
        model.lr_graph, {"warped_a": _to_lr(model, warped_a), "warped_b": _to_lr(model, warped_b)}
    )
    paths: List[Path] = []
    for index, node in enumerate(model.lr_graph.nodes):
        fmap = acts[node.name][0].mean(axis=0)
        low, high = float(fmap.min()), float(fmap.max())
        norm = (fmap - low) / (high - low) if high > low else np.zeros_like(fmap)
        path = out_dir / f"layer_{index:02d}.png"
        write_png(path, to_uint8(norm))
        paths.append(path)
    logger.info("wrote %d feature maps to %s", len(paths), out_dir)
    return paths


# ----------------------------------------------------------------------------- training


@dataclass
class TrainRecord:
    iteration: int
    l_lr: float
    l_hr: float
    l_cs: float
    l_r: float


TRACE_FIELDS = ("iteration", "l_lr", "l_hr", "l_cs", "l_r")


def effective_weights(variant: str, w: LossWeights, lr_only_phase: bool = False) -> LossWeights:
    """Loss weights after applying the ablation variant (and the warm-start phase)."""
    updates: Dict[str, float] = {}
    if variant in LR_ONLY_VARIANTS or lr_only_phase:
        updates.update(omega_hr=0.0, omega_cs=0.0)
    elif variant == "hr_only":
        updates.update(omega_lr=0.0, omega_cs=0.0)
    elif variant in NO_CONSISTENCY_VARIANTS:
        updates.update(omega_cs=0.0)
    if variant in NO_SEAM_VARIANTS:
        updates.update(lambda_s=0.0)
    return w.model_copy(update=updates)


def _stage_grad(content_grad: np.ndarray, seam_grad: np.ndarray, w: LossWeights) -> np.ndarray:
    return w.lambda_c * content_grad + w.lambda_s * seam_grad


def compute_objective(
    model: StitchModel,
    sample: AlignmentResult,
    weights: LossWeights,
    lr_only_phase: bool = False,
) -> Tuple[TrainRecord, Dict[str, np.ndarray]]:
    """Reconstruction objective of one sample and its gradient for every parameter."""
    variant = model.cfg.variant
    w = effective_weights(variant, weights, lr_only_phase)
    masks: MaskSet = sample.masks
    wa, wb = sample.warped_a.data, sample.warped_b.data
    wa_lr, wb_lr = _to_lr(model, wa), _to_lr(model, wb)
    lr_masks = masks.resized(model.lr_size)

    run_lr = variant != "hr_only"
    run_hr = variant not in LR_ONLY_VARIANTS and not lr_only_phase

    lr_acts = None
    if run_lr:
        lr_acts = run_forward(model.lr_graph, {"warped_a": wa_lr, "warped_b": wb_lr})
        s_lr = lr_acts["lr_out"]
        c_lr = content_loss(
            s_lr, wa_lr, wb_lr, lr_masks.content_a, lr_masks.content_b, model.lr_features
        )
        m_lr = seam_loss(s_lr, wa_lr, wb_lr, lr_masks.seam_a, lr_masks.seam_b)
        l_lr = stage_total(c_lr, m_lr, w)
        d_s_lr = w.omega_lr * _stage_grad(c_lr.grads["stitched"], m_lr.grads["stitched"], w)
    else:
        s_lr = np.zeros((wa.shape[0], 3) + model.lr_size)
        l_lr = 0.0
        d_s_lr = np.zeros_like(s_lr)

    grads: Dict[str, np.ndarray] = {}
    l_hr = l_cs = 0.0
    if run_hr:
        hr_inputs = {"s_lr": s_lr, "warped_a": wa, "warped_b": wb}
        hr_acts = run_forward(model.hr_graph, hr_inputs)
        s_hr = hr_acts["hr_out"]
        c_hr = content_loss(s_hr, wa, wb, masks.content_a, masks.content_b, model.hr_features)
        m_hr = seam_loss(s_hr, wa, wb, masks.seam_a, masks.seam_b)
        l_hr = stage_total(c_hr, m_hr, w)
        d_s_hr = w.omega_hr * _stage_grad(c_hr.grads["stitched"], m_hr.grads["stitched"], w)
        if run_lr:
            cs = consistency_loss(s_hr, s_lr)
            l_cs = cs.value
            d_s_hr = d_s_hr + w.omega_cs * cs.grads["s_hr"]
            d_s_lr = d_s_lr + w.omega_cs * cs.grads["s_lr"]
        hr_grads = run_backward(model.hr_graph, hr_acts, {"hr_out": d_s_hr})
        grads.update({f"hr.{k}": v for k, v in hr_grads.params.items()})
        if run_lr and not model.cfg.detach_lr:
            d_s_lr = d_s_lr + hr_grads.inputs["s_lr"]

    if run_lr:
        assert lr_acts is not None
        lr_grads = run_backward(model.lr_graph, lr_acts, {"lr_out": d_s_lr})
        grads.update({f"lr.{k}": v for k, v in lr_grads.params.items()})

    l_r = reconstruction_objective(l_lr, l_hr, l_cs, w)
    record = TrainRecord(0, float(l_lr), float(l_hr), float(l_cs), float(l_r))
    return record, grads


@dataclass
class TrainingTrace:
    records: List[TrainRecord] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for r in self.records:
            writer.writerow([r.iteration] + [repr(getattr(r, k)) for k in TRACE_FIELDS[1:]])
        return buffer.getvalue()

    def write_csv(self, path: Path) -> None:
        safe_write_file(Path(path), self.to_csv())


def train(
    model: StitchModel,
    dataset: Sequence[AlignmentResult],
    weights: Optional[LossWeights] = None,
    epochs: int = 1,
    seed: int = 0,
    optimizer: Optional[OptimizerConfig] = None,
    max_iterations: Optional[int] = None,
    shuffle: bool = True,
    on_iteration: Optional[Callable[[TrainRecord], None]] = None,
) -> Tuple[StitchModel, TrainingTrace]:
    """Joint Adam training of both branches; one sample per iteration."""
    if not dataset:
        raise ValidationError("Training needs a non-empty dataset")
    if epochs < 1:
        raise ValidationError(f"epochs must be >= 1, got {epochs}")
    weights = weights or LossWeights()
    opt = optimizer or OptimizerConfig()
    total = epochs * len(dataset)
    if max_iterations is not None:
        total = min(total, max_iterations)
    warm_iterations = int(WARM_START_FRACTION * total) if model.cfg.warm_start else 0

    trace = TrainingTrace()
    params = model.parameters()
    iteration = 0
    for epoch in range(epochs):
        order = np.arange(len(dataset))
        if shuffle:
            order = rng_for(seed, "train", "order", epoch).permutation(len(dataset))
        lr = lr_at(epoch, opt.learning_rate, opt.lr_decay)
        epoch_losses: List[float] = []
        for index in order:
            if iteration >= total:
                break
            record, grads = compute_objective(
                model, dataset[int(index)], weights, lr_only_phase=iteration < warm_iterations
            )
            if not np.isfinite(record.l_r):
                raise DivergenceError(f"Objective became non-finite at iteration {iteration}")
            adam_step(params, grads, model.optimizer, lr, opt.beta1, opt.beta2, opt.eps)
            record.iteration = iteration
            trace.records.append(record)
            epoch_losses.append(record.l_r)
            if on_iteration is not None:
                on_iteration(record)
            iteration += 1
        if epoch_losses:
            logger.info(
                "epoch %d: mean L_R %.6f (lr %.3e, %d iterations)",
                epoch,
                float(np.mean(epoch_losses)),
                lr,
                len(epoch_losses),
            )
        if iteration >= total:
            break
    return model, trace


# ----------------------------------------------------------------------------- persistence


def save_model(model: StitchModel, path: Path) -> None:
    metadata = {"branch": model.cfg.model_dump(mode="json"), "seed": model.seed}
    save_checkpoint(Path(path), {"lr": model.lr_graph, "hr": model.hr_graph}, metadata)


def load_model(path: Path) -> StitchModel:
    """Rebuild a model from a checkpoint written by ``save_model``."""
    graphs, metadata = load_checkpoint(Path(path))
    if "lr" not in graphs or "hr" not in graphs:
        raise CheckpointError(f"{path} is not a stitch model checkpoint")
    try:
        cfg = BranchConfig(**metadata.get("branch", {}))
    except PydanticValidationError as e:
        raise CheckpointError(f"Invalid branch configuration in {path}: {e}")
    model = build_model(cfg, int(metadata.get("seed", 0)))
    copy_parameters(graphs["lr"], model.lr_graph)
    copy_parameters(graphs["hr"], model.hr_graph)
    return model
