"""Small dense flow-map networks over a flat fp64 parameter vector.

A :class:`FlowModel` maps a state and a time to a predicted clean sample
``x1_hat``. Gradients come from reverse-mode differentiation (torch autograd
on CPU, fp64); :func:`finite_diff_gradient` is the independent check.

Two output heads exist:

``euclidean``
    The network output is the predicted point directly.
``se3``
    The network emits per-frame ``(s_update, b, c, d)``; the prediction is the
    input chain composed with those updates, so a zero output layer returns
    the input chain unchanged.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .exceptions import InvalidArgumentError, UnsupportedOperationError
from .geometry import FrameChain

DTYPE = torch.float64

_ACTIVATIONS = {
    "silu": torch.nn.functional.silu,
    "tanh": torch.tanh,
}

# grad_fn nodes whose derivative is zero almost everywhere or undefined.
_UNSUPPORTED_NODES = {
    "SignBackward0",
    "RoundBackward0",
    "RoundBackward1",
    "FloorBackward0",
    "CeilBackward0",
    "TruncBackward0",
    "FracBackward0",
    "SgnBackward0",
}

SE3_FEATURES_PER_FRAME = 15
# translation update (3) plus the rotation parameters of each scheme
ROTATION_PARAMS = {"bcd": 3, "abcd": 4, "gram_schmidt": 6}


@dataclass(frozen=True)
class NetConfig:
    """Architecture of a flow-map network.

    ``dim`` is the state dimension for the euclidean head and the number of
    frames for the se3 head. ``trans_scale`` divides translations on the way
    in and multiplies translation updates on the way out (se3 only).
    ``linear_skip`` adds a bias-free linear map from the input features
    straight to the output, initialised at zero.

    ``rotation_param`` selects how the se3 head encodes each rotation update:

    ``"bcd"``
        quaternion ``(1, b, c, d)``, normalized.
    ``"abcd"``
        quaternion ``(1 + a, b, c, d)``; the ``"bcd"`` update extended smoothly
        through half-turns.
    ``"gram_schmidt"``
        two vectors added to the first two identity columns and
        orthonormalized. Well conditioned for every rotation.

    All three give the identity update at zero output.
    """

    head: str = "euclidean"
    dim: int = 2
    hidden_dims: tuple = (64, 64)
    time_embed_dim: int = 8
    activation: str = "silu"
    trans_scale: float = 1.0
    linear_skip: bool = False
    rotation_param: str = "bcd"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.head not in ("euclidean", "se3"):
            raise InvalidArgumentError(f"unknown head {self.head!r}")
        if self.dim < 1:
            raise InvalidArgumentError("dim must be positive")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise InvalidArgumentError("hidden_dims must be a non-empty list of positive sizes")
        if self.time_embed_dim < 0 or self.time_embed_dim % 2:
            raise InvalidArgumentError("time_embed_dim must be a non-negative even integer")
        if self.activation not in _ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if not self.trans_scale > 0:
            raise InvalidArgumentError("trans_scale must be positive")
        if self.rotation_param not in ROTATION_PARAMS:
            raise InvalidArgumentError(f"unknown rotation_param {self.rotation_param!r}")

    @property
    def input_dim(self) -> int:
        per_state = self.dim if self.head == "euclidean" else SE3_FEATURES_PER_FRAME * self.dim
        return per_state + self.time_embed_dim

    @property
    def output_dim(self) -> int:
        return self.dim if self.head == "euclidean" else self.se3_outputs_per_frame * self.dim

    @property
    def se3_outputs_per_frame(self) -> int:
        return 3 + ROTATION_PARAMS[self.rotation_param]

    @property
    def layer_sizes(self) -> list:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise InvalidArgumentError(f"unknown net config keys: {sorted(unknown)}")
        return cls(**known)


def param_layout(config: NetConfig) -> list:
    """``[(weight_shape, bias_shape), ...]`` for every dense layer, in order."""
    sizes = config.layer_sizes
    layout = [((n_out, n_in), (n_out,)) for n_in, n_out in zip(sizes[:-1], sizes[1:])]
    if config.linear_skip:
        layout.append(((config.output_dim, config.input_dim), (0,)))
    return layout


def n_params(config: NetConfig) -> int:
    return sum(w[0] * w[1] + b[0] for w, b in param_layout(config))


def init_params(config: NetConfig, seed: int = 0) -> np.ndarray:
    """Kaiming-uniform hidden layers, zero biases, zero output layer and skip."""
    rng = np.random.default_rng(seed)
    chunks = []
    layout = param_layout(config)
    n_dense = len(config.layer_sizes) - 1
    for i, (wshape, bshape) in enumerate(layout):
        if i >= n_dense - 1:
            chunks.append(np.zeros(wshape[0] * wshape[1]))
        else:
            bound = math.sqrt(6.0 / wshape[1])
            chunks.append(rng.uniform(-bound, bound, size=wshape).reshape(-1))
        chunks.append(np.zeros(bshape))
    return np.concatenate(chunks)


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal features ``[sin(2^j pi t), cos(2^j pi t)]`` for ``j < dim/2``."""
    if dim % 2:
        raise InvalidArgumentError("time embedding dimension must be even")
    t = np.asarray(t, dtype=float)
    freqs = np.pi * 2.0 ** np.arange(dim // 2)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _time_embed_t(t: torch.Tensor, dim: int) -> torch.Tensor:
    freqs = math.pi * 2.0 ** torch.arange(dim // 2, dtype=DTYPE)
    ang = t[..., None] * freqs
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(t.shape + (dim,))


def quat_bcd_to_matrix_t(bcd: torch.Tensor) -> torch.Tensor:
    """Rotation matrices of quaternions ``(1, b, c, d)`` (differentiable)."""
    ones = torch.ones(bcd.shape[:-1] + (1,), dtype=bcd.dtype)
    return quat_to_matrix_t(torch.cat([ones, bcd], dim=-1))


def quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices of non-zero quaternions ``(a, b, c, d)``, normalized first."""
    q = q / torch.sqrt((q * q).sum(-1, keepdim=True))
    a, b, c, d = q.unbind(-1)
    rows = [
        torch.stack([a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c], -1),
        torch.stack([2 * b * c + 2 * a * d, a * a - b * b + c * c - d * d, 2 * c * d - 2 * a * b], -1),
        torch.stack([2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a - b * b - c * c + d * d], -1),
    ]
    return torch.stack(rows, dim=-2)


def gram_schmidt_t(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Rotation with first column along ``u`` and second in the ``(u, v)`` plane."""
    e1 = u / torch.sqrt((u * u).sum(-1, keepdim=True))
    w = v - (e1 * v).sum(-1, keepdim=True) * e1
    e2 = w / torch.sqrt((w * w).sum(-1, keepdim=True))
    e3 = torch.cross(e1, e2, dim=-1)
    return torch.stack([e1, e2, e3], dim=-1)


def _as_time_tensor(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(t, dtype=float) if not torch.is_tensor(t) else t, dtype=DTYPE)
    if t.ndim == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise InvalidArgumentError(f"t must be a scalar or shape ({batch},), got {tuple(t.shape)}")
    return t


class FlowModel:
    """Flow map ``f(x, t)`` with its parameters held as one flat fp64 vector.

    Calling the model on numpy input returns a numpy prediction with gradients
    disabled; :meth:`predict_t` is the differentiable path used by losses.
    """

    def __init__(self, config: NetConfig, params: Optional[np.ndarray] = None, seed: int = 0):
        self.config = config
        if params is None:
            params = init_params(config, seed)
        params = np.asarray(params, dtype=float)
        if params.shape != (n_params(config),):
            raise InvalidArgumentError(
                f"parameter vector has length {params.size}, layout needs {n_params(config)}"
            )
        if not np.all(np.isfinite(params)):
            raise InvalidArgumentError("parameters contain non-finite entries")
        self.params = params.copy()

    @property
    def head(self) -> str:
        return self.config.head

    def theta(self, requires_grad: bool = False) -> torch.Tensor:
        return torch.tensor(self.params, dtype=DTYPE, requires_grad=requires_grad)

    def copy(self) -> "FlowModel":
        return FlowModel(self.config, self.params)

    # -- differentiable path --------------------------------------------------

    def _mlp(self, theta: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        act = _ACTIVATIONS[self.config.activation]
        layout = param_layout(self.config)
        n_dense = len(self.config.layer_sizes) - 1
        x, offset = h, 0
        for i, (wshape, bshape) in enumerate(layout):
            nw = wshape[0] * wshape[1]
            W = theta[offset:offset + nw].view(wshape)
            offset += nw
            b = theta[offset:offset + bshape[0]]
            offset += bshape[0]
            if i == n_dense:
                h = h + x @ W.T
                continue
            h = h @ W.T + b
            if i < n_dense - 1:
                h = act(h)
        return h

    def _features(self, x, t: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if cfg.head == "euclidean":
            feats = x
        else:
            rots, trans = x
            s = trans / cfg.trans_scale
            local = torch.einsum("...nji,...nj->...ni", rots, s)  # r^T s
            feats = torch.cat([rots.flatten(-2), s, local], dim=-1).flatten(-2)
        if cfg.time_embed_dim:
            feats = torch.cat([feats, _time_embed_t(t, cfg.time_embed_dim)], dim=-1)
        return feats

    def raw_forward_t(self, theta: torch.Tensor, x, t) -> torch.Tensor:
        """Network output before any head conversion.

        ``x`` is a ``(B, n)`` tensor for the euclidean head and a
        ``(rots (B, N, 3, 3), trans (B, N, 3))`` pair for the se3 head. For se3
        the output has shape ``(B, N, 6)`` laid out as ``(s_update, b, c, d)``,
        with ``rotation_param="bcd"``; the other encodings widen the last axis.
        """
        cfg = self.config
        if cfg.head == "euclidean":
            if x.ndim != 2 or x.shape[1] != cfg.dim:
                raise InvalidArgumentError(f"expected state shape (B, {cfg.dim}), got {tuple(x.shape)}")
            batch = x.shape[0]
        else:
            rots, trans = x
            if rots.ndim != 4 or rots.shape[1:] != (cfg.dim, 3, 3) or trans.shape != rots.shape[:-1]:
                raise InvalidArgumentError(
                    f"expected chains of shape (B, {cfg.dim}, 3, 3) / (B, {cfg.dim}, 3)"
                )
            batch = rots.shape[0]
        t = _as_time_tensor(t, batch)
        out = self._mlp(theta, self._features(x, t))
        if cfg.head == "se3":
            out = out.view(batch, cfg.dim, cfg.se3_outputs_per_frame)
        return out

    def predict_t(self, theta: torch.Tensor, x, t):
        """Differentiable prediction of ``x1``; se3 returns ``(rots, trans)``."""
        out = self.raw_forward_t(theta, x, t)
        if self.config.head == "euclidean":
            return out
        rots, trans = x
        s_update = out[..., :3] * self.config.trans_scale
        rot_out = out[..., 3:]
        if self.config.rotation_param == "bcd":
            r_update = quat_bcd_to_matrix_t(rot_out)
        elif self.config.rotation_param == "abcd":
            r_update = quat_to_matrix_t(rot_out + torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE))
        else:
            eye = torch.eye(3, dtype=DTYPE)
            r_update = gram_schmidt_t(rot_out[..., :3] + eye[0], rot_out[..., 3:] + eye[1])
        new_rots = rots @ r_update
        new_trans = torch.einsum("...ij,...j->...i", rots, s_update) + trans
        return new_rots, new_trans

    # -- numpy convenience --------------------------------------------------

    def _to_tensor_state(self, x):
        if self.config.head == "euclidean":
            arr = np.asarray(x, dtype=float)
            squeeze = arr.ndim == 1
            arr = arr[None] if squeeze else arr
            return torch.as_tensor(arr, dtype=DTYPE), squeeze
        if not isinstance(x, FrameChain):
            raise InvalidArgumentError("the se3 head expects a FrameChain input")
        squeeze = not x.batch_shape
        rots = x.rots[None] if squeeze else x.rots
        trans = x.trans[None] if squeeze else x.trans
        return (torch.as_tensor(rots, dtype=DTYPE), torch.as_tensor(trans, dtype=DTYPE)), squeeze

    def raw_forward(self, x, t) -> np.ndarray:
        xt, squeeze = self._to_tensor_state(x)
        with torch.no_grad():
            out = self.raw_forward_t(self.theta(), xt, t).numpy()
        return out[0] if squeeze else out

    def __call__(self, x, t):
        xt, squeeze = self._to_tensor_state(x)
        with torch.no_grad():
            pred = self.predict_t(self.theta(), xt, t)
        if self.config.head == "euclidean":
            out = pred.numpy()
            return out[0] if squeeze else out
        rots, trans = (p.numpy() for p in pred)
        if squeeze:
            rots, trans = rots[0], trans[0]
        return FrameChain(rots, trans)


def _check_graph(loss: torch.Tensor) -> None:
    seen, stack = set(), [loss.grad_fn]
    while stack:
        node = stack.pop()
        if node is None or node in seen:
            continue
        seen.add(node)
        name = type(node).__name__
        if name in _UNSUPPORTED_NODES:
            raise UnsupportedOperationError(f"loss graph contains unsupported primitive {name}")
        stack.extend(fn for fn, _ in node.next_functions)


LossFn = Callable[[torch.Tensor], torch.Tensor]


def loss_gradient(model: FlowModel, loss: LossFn, return_loss: bool = False):
    """Exact gradient of ``loss(theta)`` with respect to the flat parameters.

    ``loss`` receives the parameter tensor and must return a scalar built from
    differentiable torch operations (typically via ``model.predict_t``).
    """
    theta = model.theta(requires_grad=True)
    value = loss(theta)
    if not torch.is_tensor(value):
        value = torch.as_tensor(float(value), dtype=DTYPE)
    if value.numel() != 1:
        raise InvalidArgumentError("loss must be a scalar")
    if value.grad_fn is None:
        grad = np.zeros_like(model.params)
    else:
        _check_graph(value)
        (g,) = torch.autograd.grad(value.reshape(()), theta, allow_unused=True)
        grad = np.zeros_like(model.params) if g is None else g.detach().numpy().copy()
    if return_loss:
        return grad, float(value.detach())
    return grad


def finite_diff_gradient(model: FlowModel, loss: LossFn, h: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time.

    ``order=2`` is the three-point stencil; ``order=4`` the five-point one,
    whose smaller truncation error allows a larger ``h`` and so less rounding
    noise on tiny gradient entries.
    """
    if not h > 0:
        raise InvalidArgumentError("h must be positive")
    if order == 2:
        stencil = ((1.0, 0.5), (-1.0, -0.5))
    elif order == 4:
        stencil = ((2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0))
    else:
        raise InvalidArgumentError("order must be 2 or 4")
    base = model.params
    grad = np.empty_like(base)
    with torch.no_grad():
        for i in range(base.size):
            acc = 0.0
            for offset, weight in stencil:
                p = base.copy()
                p[i] += offset * h
                acc += weight * float(loss(torch.tensor(p, dtype=DTYPE)))
            grad[i] = acc / h
    return grad


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, hyper: AdamConfig = AdamConfig()):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise InvalidArgumentError("params, grad and moments must share one shape")
    step = state.step + 1
    m = hyper.beta1 * state.m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * state.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1**step)
    v_hat = v / (1.0 - hyper.beta2**step)
    new = params - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new, AdamState(m, v, step)


# Checkpoint layout (little-endian):
#   4 bytes magic "IDFC" | 1 byte version | uint32 header length |
#   UTF-8 JSON header | float64 parameter array
CHECKPOINT_MAGIC = b"IDFC"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: FlowModel, metadata: Optional[dict] = None) -> bytes:
    header = {"net": model.config.to_dict(), "n_params": int(model.params.size)}
    if metadata:
        header["metadata"] = metadata
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BI", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    buf.write(model.params.astype("<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, model: FlowModel, metadata: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, metadata))


def load_checkpoint_bytes(data: bytes):
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidArgumentError("not a flow-model checkpoint (bad magic)")
    version, hlen = struct.unpack("<BI", data[4:9])
    if version != CHECKPOINT_VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint version {version}")
    header = json.loads(data[9:9 + hlen].decode("utf-8"))
    params = np.frombuffer(data[9 + hlen:], dtype="<f8").astype(float)
    if params.size != header["n_params"]:
        raise InvalidArgumentError("checkpoint parameter count does not match its header")
    model = FlowModel(NetConfig.from_dict(header["net"]), params)
    return model, header.get("metadata", {})


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
