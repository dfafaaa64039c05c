"""Small encoders, projection/prediction heads and the EMA teacher."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROJECTION = "projection"
PREDICTION = "projection+prediction"
DISTILLATION = "distillation_head"
BACKBONE = "backbone"
HEADS = (PROJECTION, PREDICTION, DISTILLATION, BACKBONE)


@dataclass(frozen=True)
class Topology:
    """Network shape. ``arch='cnn'``: 3x3 stride-1 stem (no pooling), then one
    stride-2 3x3 conv block per entry of ``widths[1:]``, then global average
    pooling. ``arch='mlp'``: ``len(widths)`` dense layers on flattened pixels."""

    arch: str = "cnn"
    in_channels: int = 3
    image_size: int = 32
    widths: tuple = (16, 32, 64, 64)
    proj_hidden: int = 128
    proj_dim: int = 64
    pred_hidden: int = 128
    out_dim: int = 256
    with_predictor: bool = True
    with_distill_head: bool = False

    def __post_init__(self):
        if self.arch not in ("cnn", "mlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if not self.widths:
            raise ValueError("widths must be non-empty")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


class EncoderParams:
    """Named parameter tensors plus the topology they instantiate."""

    def __init__(self, topology: Topology, tensors: dict[str, Tensor]):
        self.topology = topology
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def copy(self, requires_grad: bool | None = None, exclude_prefix: tuple = ()) -> "EncoderParams":
        out = {}
        for k, v in self.tensors.items():
            if k.startswith(exclude_prefix) and exclude_prefix:
                continue
            rg = v.requires_grad if requires_grad is None else requires_grad
            out[k] = Tensor(v.data.copy(), requires_grad=rg)
        return EncoderParams(self.topology, out)

    def astype(self, dtype) -> "EncoderParams":
        for t in self.tensors.values():
            t.data = t.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


class ForwardCounter:
    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(seed: int, topology: Topology, dtype=np.float64) -> EncoderParams:
    """Kaiming-uniform weights, zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    if topology.arch == "cnn":
        c_in = topology.in_channels
        for k, c_out in enumerate(topology.widths):
            fan_in = c_in * 9
            p[f"conv{k}.w"] = _kaiming_uniform(rng, (c_out, c_in, 3, 3), fan_in)
            p[f"conv{k}.b"] = np.zeros(c_out)
            c_in = c_out
    else:
        d_in = topology.in_channels * topology.image_size**2
        for k, d_out in enumerate(topology.widths):
            p[f"fc{k}.w"] = _kaiming_uniform(rng, (d_in, d_out), d_in)
            p[f"fc{k}.b"] = np.zeros(d_out)
            d_in = d_out

    def linear(name, d_in, d_out):
        p[f"{name}.w"] = _kaiming_uniform(rng, (d_in, d_out), d_in)
        p[f"{name}.b"] = np.zeros(d_out)

    linear("proj0", topology.feature_dim, topology.proj_hidden)
    linear("proj1", topology.proj_hidden, topology.proj_dim)
    if topology.with_predictor:
        linear("pred0", topology.proj_dim, topology.pred_hidden)
        linear("pred1", topology.pred_hidden, topology.proj_dim)
    if topology.with_distill_head:
        p["last.w"] = _kaiming_uniform(rng, (topology.proj_dim, topology.out_dim), topology.proj_dim)
    tensors = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in p.items()}
    return EncoderParams(topology, tensors)


def _linear(x: Tensor, params: EncoderParams, name: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def backbone_forward(params: EncoderParams, images) -> Tensor:
    topo = params.topology
    x = images if isinstance(images, Tensor) else Tensor(images)
    expected = (topo.in_channels, topo.image_size, topo.image_size)
    if x.ndim != 4 or x.shape[1] != topo.in_channels:
        raise T.ShapeError(f"encoder_forward: incompatible shapes {x.shape} and (n, {', '.join(map(str, expected))})")
    if topo.arch == "cnn":
        # channels-last internally; one input transpose per pass
        x = Tensor(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1))) if not x.requires_grad else T.transpose(x, (0, 2, 3, 1))
        for k in range(len(topo.widths)):
            stride = 1 if k == 0 else 2
            x = T.relu(T.conv2d_nhwc(x, params[f"conv{k}.w"], params[f"conv{k}.b"], stride=stride, padding=1))
        return T.mean(x, axis=(1, 2))
    if x.shape[1:] != expected:
        raise T.ShapeError(f"encoder_forward: incompatible shapes {x.shape} and (n, {', '.join(map(str, expected))})")
    h = T.reshape(x, (x.shape[0], -1))
    for k in range(len(topo.widths)):
        h = T.relu(_linear(h, params, f"fc{k}"))
    return h


def encoder_forward(params: EncoderParams, images, head: str = PROJECTION,
                    counter: ForwardCounter | None = None) -> Tensor:
    """Contrastive heads return unit-norm rows; the distillation head returns logits."""
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    if counter is not None:
        counter.count += 1
    h = backbone_forward(params, images)
    if head == BACKBONE:
        return h
    z = _linear(T.relu(_linear(h, params, "proj0")), params, "proj1")
    if head == PREDICTION:
        z = _linear(T.relu(_linear(z, params, "pred0")), params, "pred1")
    z = T.normalize_l2(z, axis=1)
    if head == DISTILLATION:
        return T.matmul(z, params["last.w"])
    return z


@dataclass
class TeacherState:
    params: EncoderParams
    momentum: float = 0.99
    center: np.ndarray | None = None


def make_teacher(student: EncoderParams, momentum: float = 0.99, center_dim: int | None = None) -> TeacherState:
    """Exact copy of the student (minus the predictor) that never requires grad."""
    params = student.copy(requires_grad=False, exclude_prefix=("pred",))
    center = None if center_dim is None else np.zeros(center_dim, dtype=np.float64)
    return TeacherState(params, momentum, center)


def ema_update(teacher: TeacherState, student: EncoderParams, m: float | None = None) -> TeacherState:
    """``theta_t <- m * theta_t + (1 - m) * theta_s`` for every teacher tensor."""
    m = teacher.momentum if m is None else float(m)
    for name, t in teacher.params:
        if name not in student.tensors:
            raise KeyError(f"ema_update: student has no parameter {name!r}")
        s = student[name].data
        if s.shape != t.shape:
            raise T.ShapeError(f"ema_update: incompatible shapes {t.shape} and {s.shape}")
        mm = t.dtype.type(m)
        t.data = mm * t.data + (t.dtype.type(1) - mm) * s.astype(t.dtype, copy=False)
    return teacher


def momentum_at(step: int, total_steps: int, base: float, schedule: str = "constant") -> float:
    """Teacher momentum, optionally raised to 1 along a half cosine."""
    if schedule == "constant" or total_steps <= 1:
        return base
    frac = min(step / (total_steps - 1), 1.0)
    return 1.0 - (1.0 - base) * (np.cos(np.pi * frac) + 1) / 2
