"""Small differentiable layer library the world model and policy are built from.

Layers are described by a :class:`LayerSpec` and evaluated with
:func:`forward_layer`, a pure function of ``(spec, params, input)``.  PyTorch
autograd provides the gradients; :func:`gradient_check` compares them with
central finite differences.  :func:`save_params` / :func:`load_params` write a
flat, ordered, self-describing binary container of named arrays.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

LAYER_KINDS = (
    "conv2d",
    "conv2d_transpose",
    "dense",
    "lstm_cell",
    "layer_norm",
    "dropout",
    "relu",
    "softmax",
    "embedding",
)


class ShapeError(ValueError):
    """Input shape is incompatible with the layer it was fed to."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_features: int = 0
    out_features: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int | None = None  # None: "same"-style, (kernel - stride) // 2
    rate: float = 0.0
    axis: int = -1
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel <= 0 or self.stride <= 0:
            raise ValueError(f"{self.label}: kernel and stride must be positive")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"{self.label}: dropout rate must lie in [0, 1)")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def pad(self) -> int:
        if self.padding is not None:
            return self.padding
        return max(self.kernel - self.stride, 0) // 2


def init_params(spec: LayerSpec, generator: torch.Generator | None = None,
                dtype: torch.dtype = torch.float32) -> dict[str, Tensor]:
    """Fan-in scaled uniform initialisation; seedable through ``generator``."""

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        return (torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1) * bound

    k, cin, cout = spec.kernel, spec.in_features, spec.out_features
    if spec.kind == "conv2d":
        return {"weight": uniform((cout, cin, k, k), cin * k * k),
                "bias": torch.zeros(cout, dtype=dtype)}
    if spec.kind == "conv2d_transpose":
        return {"weight": uniform((cin, cout, k, k), cin * k * k),
                "bias": torch.zeros(cout, dtype=dtype)}
    if spec.kind == "dense":
        return {"weight": uniform((cout, cin), cin),
                "bias": torch.zeros(cout, dtype=dtype)}
    if spec.kind == "lstm_cell":
        return {"weight_x": uniform((4 * cout, cin), cin),
                "weight_h": uniform((4 * cout, cout), cout),
                "bias": torch.zeros(4 * cout, dtype=dtype)}
    if spec.kind == "layer_norm":
        return {"gain": torch.ones(cin, dtype=dtype),
                "bias": torch.zeros(cin, dtype=dtype)}
    if spec.kind == "embedding":
        return {"table": torch.randn((cin, cout), generator=generator, dtype=dtype)}
    return {}


def _check(cond: bool, spec: LayerSpec, msg):
    """Raise ShapeError unless ``cond``; ``msg`` is a thunk so passing checks stay cheap."""
    if not cond:
        raise ShapeError(f"layer {spec.label!r} ({spec.kind}): {msg()}")


def forward_layer(spec: LayerSpec, params: Mapping[str, Tensor], x,
                  training: bool = False, rng: torch.Generator | None = None):
    """Apply one layer.

    ``x`` is a tensor for every kind except ``lstm_cell``, which takes and
    returns ``(input, (h, c))`` / ``(h, c)``.  Dropout draws its mask from
    ``rng`` and is only active when ``training`` is set.
    """
    kind = spec.kind
    if kind == "conv2d":
        _check(x.dim() == 4 and x.shape[1] == spec.in_features, spec,
               lambda: f"expected [B, {spec.in_features}, H, W], got {list(x.shape)}")
        return F.conv2d(x, params["weight"], params["bias"], stride=spec.stride, padding=spec.pad)
    if kind == "conv2d_transpose":
        _check(x.dim() == 4 and x.shape[1] == spec.in_features, spec,
               lambda: f"expected [B, {spec.in_features}, H, W], got {list(x.shape)}")
        return F.conv_transpose2d(x, params["weight"], params["bias"], stride=spec.stride,
                                  padding=spec.pad)
    if kind == "dense":
        _check(x.shape[-1] == spec.in_features, spec,
               lambda: f"expected last dim {spec.in_features}, got {list(x.shape)}")
        return F.linear(x, params["weight"], params["bias"])
    if kind == "lstm_cell":
        inp, (h, c) = x
        _check(inp.shape[-1] == spec.in_features and h.shape[-1] == spec.out_features, spec,
               lambda: f"expected input dim {spec.in_features} and state dim {spec.out_features}")
        gates = F.linear(inp, params["weight_x"], params["bias"]) + F.linear(h, params["weight_h"])
        i, f, g, o = gates.chunk(4, dim=-1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c
    if kind == "layer_norm":
        axis = spec.axis % x.dim()
        _check(x.shape[axis] == spec.in_features, spec,
               lambda: f"expected size {spec.in_features} on axis {spec.axis}, got {list(x.shape)}")
        mean = x.mean(dim=axis, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=axis, keepdim=True)
        y = (x - mean) / torch.sqrt(var + 1e-5)
        bshape = [1] * x.dim()
        bshape[axis] = spec.in_features
        return y * params["gain"].view(bshape) + params["bias"].view(bshape)
    if kind == "dropout":
        if not training or spec.rate == 0.0:
            return x
        keep = 1.0 - spec.rate
        mask = torch.rand(x.shape, generator=rng, dtype=x.dtype) < keep
        return x * mask / keep
    if kind == "relu":
        return torch.relu(x)
    if kind == "softmax":
        return torch.softmax(x, dim=spec.axis)
    if kind == "embedding":
        _check(not x.is_floating_point(), spec, lambda: "embedding expects integer indices")
        _check(bool(((x >= 0) & (x < spec.in_features)).all()), spec,
               lambda: f"index out of range [0, {spec.in_features})")
        return params["table"][x]
    raise AssertionError(kind)


class Layer(nn.Module):
    """A :class:`LayerSpec` with its parameters registered on a module."""

    def __init__(self, spec: LayerSpec, generator: torch.Generator | None = None):
        super().__init__()
        self.spec = spec
        self.params = nn.ParameterDict(
            {k: nn.Parameter(v) for k, v in init_params(spec, generator).items()})

    def forward(self, x, rng: torch.Generator | None = None):
        return forward_layer(self.spec, self.params, x, self.training, rng)

    def extra_repr(self):
        return repr(self.spec)


def softmax_cross_entropy(logits: Tensor, target_index) -> Tensor:
    """-log softmax(logits)[target] along the last axis, elementwise over leading dims."""
    n = logits.shape[-1]
    target = torch.as_tensor(target_index, dtype=torch.long)
    if bool(((target < 0) | (target >= n)).any()):
        raise IndexError(f"target index out of range for {n} classes")
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, target.expand(logits.shape[:-1]).unsqueeze(-1)).squeeze(-1)


def gradient_check(fn: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5,
                   atol: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    Raises ``FloatingPointError`` naming every coordinate at which ``fn``
    was not finite.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = torch.as_tensor(point, dtype=torch.float64).detach().clone().requires_grad_(True)
    y = fn(x)
    if not torch.isfinite(y):
        raise FloatingPointError("fn is not finite at the check point")
    analytic = torch.autograd.grad(y, x, allow_unused=True)[0] if y.requires_grad else None
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)
    flat = x.detach().reshape(-1)
    numeric = torch.empty_like(flat)
    bad = []
    with torch.no_grad():
        for i in range(flat.numel()):
            hi, lo = flat.clone(), flat.clone()
            hi[i] += epsilon
            lo[i] -= epsilon
            fp, fm = fn(hi.view_as(x)), fn(lo.view_as(x))
            if not (torch.isfinite(fp) and torch.isfinite(fm)):
                bad.append(i)
                continue
            numeric[i] = (fp - fm) / (2 * epsilon)
    if bad:
        raise FloatingPointError(f"non-finite outputs at coordinates {bad}")
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.tensor(atol, dtype=torch.float64))
    return float(((analytic - numeric).abs() / denom).max()) if flat.numel() else 0.0


# --- parameter container -------------------------------------------------

MAGIC = b"SIMPLEP1"


class CorruptFileError(IOError):
    """Container content does not match its stored checksum."""


def encode_params(arrays: Sequence[tuple[str, np.ndarray]] | Mapping[str, np.ndarray]) -> bytes:
    items = list(arrays.items()) if isinstance(arrays, Mapping) else list(arrays)
    body = io.BytesIO()
    body.write(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw_name = name.encode("utf-8")
        dtype = arr.dtype.str.encode("ascii")
        body.write(struct.pack("<H", len(raw_name)) + raw_name)
        body.write(struct.pack("<B", len(dtype)) + dtype)
        body.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        data = arr.tobytes(order="C")
        body.write(struct.pack("<Q", len(data)) + data)
    payload = body.getvalue()
    return MAGIC + payload + hashlib.sha256(payload).digest()


def decode_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:len(MAGIC)] != MAGIC:
        raise CorruptFileError("not a parameter container (bad magic)")
    payload, digest = blob[len(MAGIC):-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptFileError("parameter container checksum mismatch")
    buf = io.BytesIO(payload)

    def read(fmt):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, buf.read(size))

    out: dict[str, np.ndarray] = {}
    (count,) = read("<I")
    for _ in range(count):
        (n,) = read("<H")
        name = buf.read(n).decode("utf-8")
        (n,) = read("<B")
        dtype = np.dtype(buf.read(n).decode("ascii"))
        (ndim,) = read("<B")
        shape = read(f"<{ndim}Q") if ndim else ()
        (nbytes,) = read("<Q")
        out[name] = np.frombuffer(buf.read(nbytes), dtype=dtype).reshape(shape).copy()
    return out


def save_params(path, arrays) -> None:
    Path(path).write_bytes(encode_params(arrays))


def load_params(path) -> dict[str, np.ndarray]:
    return decode_params(Path(path).read_bytes())


def module_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = ""):
    state = {k[len(prefix):]: torch.from_numpy(np.array(v))
             for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state)


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str = "optim/") -> dict[str, np.ndarray]:
    out = {}
    for idx, st in sorted(opt.state_dict()["state"].items()):
        for key, val in sorted(st.items()):
            out[f"{prefix}{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    return out


def load_optimizer_arrays(opt: torch.optim.Optimizer, arrays: Mapping[str, np.ndarray],
                          prefix: str = "optim/"):
    sd = opt.state_dict()
    state: dict[int, dict[str, Tensor]] = {}
    for name, val in arrays.items():
        if not name.startswith(prefix):
            continue
        idx, key = name[len(prefix):].split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(val))
    sd["state"] = state
    opt.load_state_dict(sd)


def text_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def array_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")


@dataclass
class Seeds:
    """Paired numpy / torch random streams derived from one integer seed."""

    seed: int
    np_rng: np.random.Generator = field(init=False)
    torch_rng: torch.Generator = field(init=False)

    def __post_init__(self):
        self.np_rng = np.random.default_rng(self.seed)
        self.torch_rng = torch.Generator().manual_seed(int(self.seed) % (2**63))
