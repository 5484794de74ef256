"""Sequential and residual networks built from declarative layer specs.

Layers are stored input to output.  A network with L layers has L + 1 noise
sites: site i (0-based) is the tensor entering layer i, and site L is the tensor
entering the loss.  In the composite-function notation that counts from the
loss outward, implementation unit i (1-based, the loss being unit L + 1)
corresponds to function index ``L + 2 - i``; see :func:`paper_index`.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, TapeGraph
from .data import Dataset

LAYER_KINDS = ("dense", "conv", "relu", "residual_block", "global_avg_pool", "flatten")
LOSS_KINDS = ("softmax_cross_entropy", "mse")

Perturb = Callable[[int, Tensor], Tensor]


class ShapeMismatch(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dims: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv", "residual_block")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": dict(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], dict(d.get("dims", {})))


def dense(n_in: int, n_out: int, bias: bool = True) -> LayerSpec:
    return LayerSpec("dense", {"in": n_in, "out": n_out, "bias": bias})


def conv(c_in: int, c_out: int, kernel: int = 3, stride: int = 1, pad: int | None = None) -> LayerSpec:
    pad = (kernel - 1) // 2 if pad is None else pad
    return LayerSpec("conv", {"in": c_in, "out": c_out, "kernel": kernel, "stride": stride, "pad": pad})


def relu() -> LayerSpec:
    return LayerSpec("relu")


def residual_block(width: int | None = None, channels: int | None = None) -> LayerSpec:
    if (width is None) == (channels is None):
        raise ValueError("residual_block takes exactly one of width= or channels=")
    return LayerSpec("residual_block", {"width": width} if width is not None else {"channels": channels})


def global_avg_pool() -> LayerSpec:
    return LayerSpec("global_avg_pool")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


# ---------------------------------------------------------------------------
# shapes and parameters


def _out_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape, or raise ShapeMismatch with the reason."""
    d, k = spec.dims, spec.kind
    if k == "dense":
        if shape != (d["in"],):
            raise ShapeMismatch(f"dense expects ({d['in']},), gets {shape}")
        return (d["out"],)
    if k == "conv":
        if len(shape) != 3 or shape[0] != d["in"]:
            raise ShapeMismatch(f"conv expects ({d['in']}, H, W), gets {shape}")
        ho = (shape[1] + 2 * d["pad"] - d["kernel"]) // d["stride"] + 1
        wo = (shape[2] + 2 * d["pad"] - d["kernel"]) // d["stride"] + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatch(f"conv kernel does not fit {shape}")
        return (d["out"], ho, wo)
    if k == "residual_block":
        if "width" in d:
            if shape != (d["width"],):
                raise ShapeMismatch(f"residual_block expects ({d['width']},), gets {shape}")
        elif len(shape) != 3 or shape[0] != d["channels"]:
            raise ShapeMismatch(f"residual_block expects ({d['channels']}, H, W), gets {shape}")
        return shape
    if k == "global_avg_pool":
        if len(shape) != 3:
            raise ShapeMismatch(f"global_avg_pool expects (C, H, W), gets {shape}")
        return (shape[0],)
    if k == "flatten":
        return (int(np.prod(shape)),)
    return shape


def _param_shapes(spec: LayerSpec) -> list[tuple[int, ...]]:
    d = spec.dims
    if spec.kind == "dense":
        return [(d["in"], d["out"])] + ([(d["out"],)] if d.get("bias", True) else [])
    if spec.kind == "conv":
        return [(d["out"], d["in"], d["kernel"], d["kernel"])] + ([(d["out"],)] if d.get("bias", True) else [])
    if spec.kind == "residual_block":
        if "width" in d:
            w = d["width"]
            return [(w, w), (w,), (w, w), (w,)]
        c = d["channels"]
        return [(c, c, 3, 3), (c,), (c, c, 3, 3), (c,)]
    return []


def _init_params(spec: LayerSpec, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for shape in _param_shapes(spec):
        if len(shape) == 1:
            out.append(np.zeros(shape))
            continue
        fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        out.append(rng.uniform(-bound, bound, size=shape))
    if spec.kind == "residual_block":
        # shrink the branch so a stack of blocks starts near the identity
        out[2] *= 0.25
    return out


def _apply(spec: LayerSpec, h: Tensor, p: Sequence[Tensor]) -> Tensor:
    k, d = spec.kind, spec.dims
    if k == "dense":
        z = ad.matmul(h, p[0])
        return ad.bias_add(z, p[1]) if len(p) > 1 else z
    if k == "conv":
        z = ad.conv2d(h, p[0], d["stride"], d["pad"])
        return ad.bias_add(z, p[1]) if len(p) > 1 else z
    if k == "relu":
        return ad.relu(h)
    if k == "residual_block":
        if "width" in d:
            inner = ad.relu(ad.bias_add(ad.matmul(h, p[0]), p[1]))
            branch = ad.bias_add(ad.matmul(inner, p[2]), p[3])
        else:
            inner = ad.relu(ad.bias_add(ad.conv2d(h, p[0], 1, 1), p[1]))
            branch = ad.bias_add(ad.conv2d(inner, p[2], 1, 1), p[3])
        return ad.add(h, branch)
    if k == "global_avg_pool":
        return ad.global_avg_pool(h)
    if k == "flatten":
        return ad.flatten(h)
    raise AssertionError(k)


# ---------------------------------------------------------------------------


@dataclass
class Network:
    layers: list[LayerSpec]
    params: list[list[np.ndarray]]
    loss_kind: str
    input_shape: tuple[int, ...]
    meta: dict = field(default_factory=dict)
    loss_scale: float = 1.0

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def n_units(self) -> int:
        """Assignable units: every layer plus the loss."""
        return len(self.layers) + 1

    @property
    def param_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.has_params]

    @property
    def param_count(self) -> int:
        return sum(p.size for ps in self.params for p in ps)

    def layer_param_count(self, i: int) -> int:
        return sum(p.size for p in self.params[i]) if i < self.n_layers else 0

    def site_shapes(self) -> list[tuple[int, ...]]:
        shapes = [tuple(self.input_shape)]
        for s in self.layers:
            shapes.append(_out_shape(s, shapes[-1]))
        return shapes

    def spec_dict(self) -> dict:
        d = {
            "input_shape": list(self.input_shape),
            "layers": [s.to_dict() for s in self.layers],
            "loss_kind": self.loss_kind,
        }
        if self.loss_scale != 1.0:
            d["loss_scale"] = self.loss_scale
        return d

    def copy(self) -> "Network":
        return Network(list(self.layers), [[p.copy() for p in ps] for ps in self.params],
                       self.loss_kind, tuple(self.input_shape), dict(self.meta), self.loss_scale)

    # flat views ------------------------------------------------------------

    def flat_params(self, layer: int | None = None) -> np.ndarray:
        groups = self.params if layer is None else [self.params[layer]]
        parts = [p.ravel() for ps in groups for p in ps]
        return np.concatenate(parts) if parts else np.zeros(0)

    def unflatten(self, flat: np.ndarray, layer: int | None = None) -> list[list[np.ndarray]]:
        """Parameter lists with ``flat`` substituted (for one layer or all)."""
        out = [list(ps) for ps in self.params]
        targets = range(self.n_layers) if layer is None else [layer]
        pos = 0
        for i in targets:
            new = []
            for p in self.params[i]:
                new.append(flat[pos:pos + p.size].reshape(p.shape))
                pos += p.size
            out[i] = new
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {pos}")
        return out

    # evaluation ------------------------------------------------------------

    def tape_graph(self, perturb: Perturb | None = None, reduction: str = "mean") -> TapeGraph:
        """Composite loss as a tape graph over bindings ``x``, ``y``, ``p{i}_{j}``.

        Site tensors are marked ``site{i}``; ``perturb(i, h)`` may replace the
        tensor entering site i.
        """
        layers, loss_kind, scale = self.layers, self.loss_kind, self.loss_scale
        counts = [len(ps) for ps in self.params]

        def fn(x, y, **p):
            h = x
            for i, spec in enumerate(layers):
                if perturb is not None:
                    h = perturb(i, h)
                ad.mark(f"site{i}", h)
                h = _apply(spec, h, [p[f"p{i}_{j}"] for j in range(counts[i])])
            if perturb is not None:
                h = perturb(len(layers), h)
            ad.mark(f"site{len(layers)}", h)
            if loss_kind == "softmax_cross_entropy":
                loss = ad.softmax_cross_entropy(h, y.data, reduction)
            else:
                loss = ad.mse(h, y.data, reduction)
            return loss if scale == 1.0 else ad.mul(loss, Tensor(scale))

        return TapeGraph(fn)

    def bindings(self, x: np.ndarray, y: np.ndarray, params=None) -> dict:
        params = self.params if params is None else params
        b = {"x": Tensor._wrap(np.asarray(x, dtype=np.float64)),
             "y": Tensor._wrap(np.asarray(y, dtype=np.float64))}
        for i, ps in enumerate(params):
            for j, p in enumerate(ps):
                b[f"p{i}_{j}"] = Tensor._wrap(p)
        return b

    def _check_batch(self, x: np.ndarray) -> None:
        if x.ndim < 1 or x.shape[0] < 1:
            raise ShapeMismatch("batch must be non-empty")
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ShapeMismatch(f"samples have shape {x.shape[1:]}, network expects {tuple(self.input_shape)}")

    def run(self, x, y, params=None, perturb: Perturb | None = None,
            reduction: str = "mean") -> tuple[TapeGraph, float]:
        x = np.asarray(x, dtype=np.float64)
        self._check_batch(x)
        g = self.tape_graph(perturb, reduction)
        loss = g.evaluate(self.bindings(x, y, params)).item()
        return g, loss

    def loss(self, data: Dataset, params=None, perturb: Perturb | None = None) -> float:
        return self.run(data.inputs, data.labels, params, perturb)[1]

    def gradients(self, data: Dataset, params=None, reduction: str = "mean"):
        """Loss plus gradients w.r.t. every parameter and every site tensor."""
        g, loss = self.run(data.inputs, data.labels, params, reduction=reduction)
        grads = g.backward()
        pg = [[grads[f"p{i}_{j}"] for j in range(len(ps))] for i, ps in enumerate(self.params)]
        sg = [grads[f"site{i}"] for i in range(self.n_units)]
        return loss, pg, sg

    def flat_grad(self, data: Dataset, flat: np.ndarray | None = None, layer: int | None = None) -> np.ndarray:
        """Gradient of the mean loss w.r.t. the flat parameters of ``layer`` (or all)."""
        params = None if flat is None else self.unflatten(flat, layer)
        _, pg, _ = self.gradients(data, params)
        groups = pg if layer is None else [pg[layer]]
        parts = [g.ravel() for gs in groups for g in gs]
        return np.concatenate(parts) if parts else np.zeros(0)


def paper_index(unit: int, n_units: int) -> int:
    """Composite-function index (loss = 1, first layer = n) of 1-based unit ``unit``."""
    if not 1 <= unit <= n_units:
        raise IndexError(unit)
    return n_units - unit + 1


def build_network(layers: Sequence[LayerSpec], loss_kind: str = "softmax_cross_entropy",
                  init_seed: int = 0, input_shape: Sequence[int] | None = None) -> Network:
    """Check that shapes compose and draw initial parameters from ``init_seed``."""
    layers = list(layers)
    if not layers:
        raise ValueError("network needs at least one layer")
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss {loss_kind!r}")
    if input_shape is None:
        first = layers[0]
        if first.kind == "dense":
            input_shape = (first.dims["in"],)
        elif first.kind == "residual_block" and "width" in first.dims:
            input_shape = (first.dims["width"],)
        else:
            raise ValueError(f"input_shape is required when the first layer is {first.kind}")
    shape = tuple(int(s) for s in input_shape)
    for i, spec in enumerate(layers):
        try:
            shape = _out_shape(spec, shape)
        except ShapeMismatch as e:
            prev = f"layer {i} ({layers[i - 1].kind})" if i else "input"
            raise ShapeMismatch(f"{prev} -> layer {i + 1} ({spec.kind}): {e}") from None
    rng = np.random.default_rng(init_seed)
    params = [_init_params(s, rng) for s in layers]
    return Network(layers, params, loss_kind, tuple(int(s) for s in input_shape), {"init_seed": init_seed})


def forward_capture(net: Network, batch: Dataset) -> tuple[float, list[np.ndarray]]:
    """Mean loss and the tensor entering each site, input to output."""
    g, loss = net.run(batch.inputs, batch.labels)
    return loss, [g.marks[f"site{i}"].data for i in range(net.n_units)]


# ---------------------------------------------------------------------------
# training


@dataclass
class Checkpoint:
    network: Network
    meta: dict


def grad_norm(net: Network, data: Dataset) -> tuple[float, float]:
    """(‖∇f‖₂ / parameter count, ‖∇f‖₂) of the mean loss over ``data``."""
    g = net.flat_grad(data)
    raw = float(np.linalg.norm(g))
    return raw / max(net.param_count, 1), raw


def train(net: Network, data: Dataset, opt: str = "sgd", lr: float = 0.1, epochs: int = 100,
          grad_norm_target: float = 1e-3, batch_size: int | None = None,
          momentum: float = 0.9, seed: int = 0) -> Checkpoint:
    """Mini-batch descent, stopping once the normalized full-data gradient norm
    drops to ``grad_norm_target``.  Updates ``net`` in place."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if epochs < 1:
        raise ValueError("epochs must be at least 1")
    if opt not in ("sgd", "momentum"):
        raise ValueError(f"unknown optimizer {opt!r}")
    m = data.m
    bs = m if batch_size is None else min(batch_size, m)
    velocity = [[np.zeros_like(p) for p in ps] for ps in net.params]
    rng = np.random.default_rng(seed)
    epochs_run = 0
    for epoch in range(epochs):
        norm, _ = grad_norm(net, data)
        if norm <= grad_norm_target:
            break
        order = rng.permutation(m) if bs < m else np.arange(m)
        for start in range(0, m, bs):
            batch = data.subset(order[start:start + bs])
            loss, pg, _ = net.gradients(batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            for i, gs in enumerate(pg):
                for j, g in enumerate(gs):
                    if opt == "momentum":
                        velocity[i][j] = momentum * velocity[i][j] + g
                        step = velocity[i][j]
                    else:
                        step = g
                    net.params[i][j] = net.params[i][j] - lr * step
        epochs_run = epoch + 1
    final_loss = net.loss(data)
    if not math.isfinite(final_loss):
        raise TrainingDiverged(epochs_run, final_loss)
    norm, raw = grad_norm(net, data)
    meta = {
        "final_loss": final_loss,
        "grad_norm": norm,
        "grad_norm_raw": raw,
        "grad_norm_target": grad_norm_target,
        "seed": seed,
        "init_seed": net.meta.get("init_seed"),
        "dataset_id": data.id,
        "epochs_run": epochs_run,
        "opt": opt,
        "lr": lr,
    }
    net.meta.update(meta)
    return Checkpoint(net, meta)


# ---------------------------------------------------------------------------
# checkpoint files

MAGIC = b"PRCL"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    code = "checkpoint"


class BadMagic(CheckpointError):
    code = "bad_magic"


class VersionMismatch(CheckpointError):
    code = "version_mismatch"


class TruncatedPayload(CheckpointError):
    code = "truncated_payload"


class ChecksumMismatch(CheckpointError):
    code = "checksum_mismatch"


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(net: Network, meta: dict | None = None) -> bytes:
    meta = net.meta if meta is None else meta
    header = _canonical({"network": net.spec_dict(), "meta": meta})
    flat = net.flat_params().astype("<f8")
    body = b"".join([
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<I", len(header)), header,
        struct.pack("<Q", flat.size), flat.tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net: Network, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(net, meta))
    return path


def parse_checkpoint(raw: bytes) -> Network:
    if raw[:4] != MAGIC:
        raise BadMagic("not a PRCL checkpoint")
    if len(raw) < 10 or struct.unpack("<I", raw[-4:])[0] != zlib.crc32(raw[:-4]):
        raise ChecksumMismatch("CRC32 does not match contents")
    (version,) = struct.unpack("<H", raw[4:6])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, this build reads {FORMAT_VERSION}")
    body = raw[:-4]
    try:
        (hlen,) = struct.unpack_from("<I", body, 6)
        header = json.loads(body[10:10 + hlen])
        (count,) = struct.unpack_from("<Q", body, 10 + hlen)
    except (struct.error, ValueError) as e:
        raise TruncatedPayload(str(e)) from None
    start = 18 + hlen
    if len(body) - start != 8 * count:
        raise TruncatedPayload(f"payload holds {(len(body) - start) // 8} floats, header says {count}")
    flat = np.frombuffer(body, dtype="<f8", offset=start, count=count).astype(np.float64)
    spec = header["network"]
    net = build_network([LayerSpec.from_dict(d) for d in spec["layers"]], spec["loss_kind"],
                        0, tuple(spec["input_shape"]))
    if net.param_count != count:
        raise TruncatedPayload(f"network needs {net.param_count} parameters, payload has {count}")
    net.params = net.unflatten(flat)
    net.params = [[p.copy() for p in ps] for ps in net.params]
    net.meta = dict(header.get("meta", {}))
    net.loss_scale = float(spec.get("loss_scale", 1.0))
    return net


def load_checkpoint(path) -> Network:
    return parse_checkpoint(Path(path).read_bytes())
