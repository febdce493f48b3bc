"""Layer catalog: forward kernels, their adjoints and parameter initialization."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ShapeMismatchError, ValidationError


class LayerKind(str, Enum):
    """Supported node kinds."""

    CONV3X3 = "conv3x3"
    RELU = "relu"
    MAXPOOL2X2 = "maxpool2x2"
    DECONV2X2 = "deconv2x2"
    ADD_SKIP = "add_skip"
    RESIZE_BILINEAR = "resize_bilinear"
    CONCAT_CHANNELS = "concat_channels"
    # scalar loss heads
    SUM = "sum"
    MEAN = "mean"


PARAMETRIC_KINDS = (LayerKind.CONV3X3, LayerKind.DECONV2X2)
KERNEL_SIZE = {LayerKind.CONV3X3: 3, LayerKind.DECONV2X2: 2}


@dataclass
class LayerSpec:
    """One layer: kind, channel counts and (for conv/deconv) its parameters."""

    kind: LayerKind
    in_channels: int
    out_channels: int
    weight: Optional[np.ndarray] = field(default=None, repr=False)
    bias: Optional[np.ndarray] = field(default=None, repr=False)
    size: Optional[Tuple[int, int]] = None

    def __post_init__(self) -> None:
        """Validate channel counts and parameter buffer shapes."""
        self.kind = LayerKind(self.kind)
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError(
                f"{self.kind.value}: channel counts must be positive, "
                f"got in={self.in_channels} out={self.out_channels}"
            )
        if self.kind in PARAMETRIC_KINDS:
            k = KERNEL_SIZE[self.kind]
            expected = (self.out_channels, self.in_channels, k, k)
            if self.weight is None:
                self.weight = np.zeros(expected)
            if self.bias is None:
                self.bias = np.zeros(self.out_channels)
            self.weight = np.asarray(self.weight, dtype=np.float64)
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.weight.shape != expected:
                raise ShapeMismatchError(
                    f"{self.kind.value}: weight shape {self.weight.shape} != {expected}"
                )
            if self.bias.shape != (self.out_channels,):
                raise ShapeMismatchError(
                    f"{self.kind.value}: bias shape {self.bias.shape} != ({self.out_channels},)"
                )
        elif self.kind in (LayerKind.RELU, LayerKind.MAXPOOL2X2, LayerKind.RESIZE_BILINEAR):
            if self.in_channels != self.out_channels:
                raise ValidationError(f"{self.kind.value} must preserve the channel count")
        if self.size is not None:
            self.size = (int(self.size[0]), int(self.size[1]))

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC_KINDS

    def parameters(self) -> Dict[str, np.ndarray]:
        if not self.parametric:
            return {}
        assert self.weight is not None and self.bias is not None
        return {"weight": self.weight, "bias": self.bias}


def he_initialize(spec: LayerSpec, rng: np.random.Generator) -> None:
    """Fan-in scaled normal weights, zero bias."""
    if not spec.parametric:
        return
    k = KERNEL_SIZE[spec.kind]
    fan_in = spec.in_channels * k * k
    std = np.sqrt(2.0 / fan_in)
    spec.weight = rng.standard_normal((spec.out_channels, spec.in_channels, k, k)) * std
    spec.bias = np.zeros(spec.out_channels)


# ----------------------------------------------------------------------------- conv3x3


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    """(b, c, h, w) -> (b*h*w, c*9) patch matrix with zero padding 1."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def conv3x3_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, _, h, w = x.shape
    out_channels = weight.shape[0]
    out = _im2col3x3(x) @ weight.reshape(out_channels, -1).T + bias
    return np.ascontiguousarray(out.reshape(b, h, w, out_channels).transpose(0, 3, 1, 2))


def conv3x3_backward(
    x: np.ndarray, weight: np.ndarray, grad: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dx, dweight, dbias)."""
    b, c, h, w = x.shape
    out_channels = weight.shape[0]
    g = grad.transpose(0, 2, 3, 1).reshape(b * h * w, out_channels)
    dweight = (g.T @ _im2col3x3(x)).reshape(weight.shape)
    dcols = (g @ weight.reshape(out_channels, -1)).reshape(b, h, w, c, 3, 3)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + h, j : j + w] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dbias = grad.sum(axis=(0, 2, 3))
    return dxp[:, :, 1:-1, 1:-1], dweight, dbias


# ----------------------------------------------------------------------------- deconv2x2


def deconv2x2_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, _, h, w = x.shape
    out = np.einsum("ocij,bchw->bohiwj", weight, x).reshape(b, weight.shape[0], 2 * h, 2 * w)
    return out + bias[None, :, None, None]


def deconv2x2_backward(
    x: np.ndarray, weight: np.ndarray, grad: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    b, _, h, w = x.shape
    g = grad.reshape(b, weight.shape[0], h, 2, w, 2)
    dx = np.einsum("ocij,bohiwj->bchw", weight, g)
    dweight = np.einsum("bohiwj,bchw->ocij", g, x)
    dbias = grad.sum(axis=(0, 2, 3))
    return dx, dweight, dbias


# ----------------------------------------------------------------------------- maxpool2x2


def _pool_view(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2)


def maxpool2x2_forward(x: np.ndarray) -> np.ndarray:
    return _pool_view(x).max(axis=(3, 5))


def maxpool2x2_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Route each gradient to the first maximal element of its window."""
    b, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    windows = _pool_view(x).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    winner = windows.argmax(axis=-1)
    routed = np.zeros_like(windows)
    np.put_along_axis(routed, winner[..., None], grad[..., None], axis=-1)
    routed = routed.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros_like(x)
    dx[:, :, : 2 * h2, : 2 * w2] = routed.reshape(b, c, 2 * h2, 2 * w2)
    return dx


# ----------------------------------------------------------------------------- resize


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation matrix of shape (n_out, n_in), edge clamped."""
    if n_in < 1 or n_out < 1:
        raise ValidationError(f"Cannot resize between {n_in} and {n_out} samples")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear(x: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Resize (b, c, h, w) to (b, c, size[0], size[1])."""
    h, w = x.shape[2], x.shape[3]
    if (h, w) == tuple(size):
        return x.copy()
    ry = resize_matrix(h, size[0])
    rx = resize_matrix(w, size[1])
    return np.matmul(np.matmul(ry, x), rx.T)


def resize_bilinear_backward(grad: np.ndarray, in_size: Tuple[int, int]) -> np.ndarray:
    h, w = grad.shape[2], grad.shape[3]
    if (h, w) == tuple(in_size):
        return grad.copy()
    ry = resize_matrix(in_size[0], h)
    rx = resize_matrix(in_size[1], w)
    return np.matmul(np.matmul(ry.T, grad), rx)


# ----------------------------------------------------------------------------- dispatch


def layer_forward(spec: LayerSpec, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Evaluate one layer on already shape-checked inputs."""
    kind = spec.kind
    if kind is LayerKind.CONV3X3:
        assert spec.weight is not None and spec.bias is not None
        return conv3x3_forward(inputs[0], spec.weight, spec.bias)
    if kind is LayerKind.DECONV2X2:
        assert spec.weight is not None and spec.bias is not None
        return deconv2x2_forward(inputs[0], spec.weight, spec.bias)
    if kind is LayerKind.RELU:
        return np.maximum(inputs[0], 0.0)
    if kind is LayerKind.MAXPOOL2X2:
        return maxpool2x2_forward(inputs[0])
    if kind is LayerKind.ADD_SKIP:
        return inputs[0] + inputs[1]
    if kind is LayerKind.CONCAT_CHANNELS:
        return np.concatenate(list(inputs), axis=1)
    if kind is LayerKind.RESIZE_BILINEAR:
        return resize_bilinear(inputs[0], target_size(spec, inputs))
    if kind is LayerKind.SUM:
        return np.full((1, 1, 1, 1), inputs[0].sum())
    if kind is LayerKind.MEAN:
        return np.full((1, 1, 1, 1), inputs[0].mean())
    raise ValidationError(f"Unknown layer kind {kind}")


def layer_backward(
    spec: LayerSpec, inputs: Sequence[np.ndarray], grad: np.ndarray
) -> Tuple[List[Optional[np.ndarray]], Dict[str, np.ndarray]]:
    """Return per-input gradients and parameter gradients for one layer."""
    kind = spec.kind
    if kind is LayerKind.CONV3X3:
        assert spec.weight is not None
        dx, dw, db = conv3x3_backward(inputs[0], spec.weight, grad)
        return [dx], {"weight": dw, "bias": db}
    if kind is LayerKind.DECONV2X2:
        assert spec.weight is not None
        dx, dw, db = deconv2x2_backward(inputs[0], spec.weight, grad)
        return [dx], {"weight": dw, "bias": db}
    if kind is LayerKind.RELU:
        return [grad * (inputs[0] > 0.0)], {}
    if kind is LayerKind.MAXPOOL2X2:
        return [maxpool2x2_backward(inputs[0], grad)], {}
    if kind is LayerKind.ADD_SKIP:
        return [grad, grad], {}
    if kind is LayerKind.CONCAT_CHANNELS:
        splits = np.cumsum([x.shape[1] for x in inputs])[:-1]
        return list(np.split(grad, splits, axis=1)), {}
    if kind is LayerKind.RESIZE_BILINEAR:
        in_size = (inputs[0].shape[2], inputs[0].shape[3])
        grads: List[Optional[np.ndarray]] = [resize_bilinear_backward(grad, in_size)]
        if len(inputs) > 1:
            grads.append(None)
        return grads, {}
    if kind is LayerKind.SUM:
        return [np.full(inputs[0].shape, grad.item())], {}
    if kind is LayerKind.MEAN:
        return [np.full(inputs[0].shape, grad.item() / inputs[0].size)], {}
    raise ValidationError(f"Unknown layer kind {kind}")


def target_size(spec: LayerSpec, inputs: Sequence[np.ndarray]) -> Tuple[int, int]:
    if len(inputs) > 1:
        return inputs[1].shape[2], inputs[1].shape[3]
    if spec.size is None:
        raise ValidationError("resize_bilinear needs a size or a second 'like' input")
    return spec.size


def arity(kind: LayerKind) -> Tuple[int, Optional[int]]:
    """(minimum, maximum) number of inputs; None means unbounded."""
    if kind is LayerKind.ADD_SKIP:
        return 2, 2
    if kind is LayerKind.CONCAT_CHANNELS:
        return 2, None
    if kind is LayerKind.RESIZE_BILINEAR:
        return 1, 2
    return 1, 1
