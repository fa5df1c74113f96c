"""The three architectures (srcnn, sronn, ssronn), exact parameter counting,
and binary checkpoint serialization.

All three share the same 3-layer trunk with kernel sizes (9, 3, 5):

    conv/opconv C->f1 -> act -> [norm] -> conv/opconv f1->f2 -> act ->
    [norm] -> conv/opconv f2->C

plus an optional input->output skip connection. srcnn uses plain
convolutions (q=1) with ReLU activations; sronn and ssronn use operational
layers with tanh (which also keeps inter-layer data in [-1, 1], the
operational layers' intended operating range). Filter counts are (128, 64)
for srcnn/sronn and (32, 16) for ssronn. No activation follows the output
layer; predictions are not clamped (clamping happens only at image export).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .tensor_ops import Rng

KERNELS = ((9, 9), (3, 3), (5, 5))
FILTERS = {"srcnn": (128, 64), "sronn": (128, 64), "ssronn": (32, 16)}
ARCHS = ("srcnn", "sronn", "ssronn")

CHECKPOINT_MAGIC = b"OPSR"
CHECKPOINT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised for corrupt or incompatible checkpoint files."""


@dataclass
class ModelSpec:
    arch: str
    channels: int
    q: int = None
    residual: bool = False
    norm_kind: str = "none"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.q is None:
            self.q = 1 if self.arch == "srcnn" else 3
        if self.arch == "srcnn" and self.q != 1:
            raise ValueError("srcnn is a plain CNN; q must be 1")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        if self.norm_kind not in L.NORM_KINDS:
            raise ValueError(
                f"unknown normalization kind {self.norm_kind!r}; "
                f"expected one of {L.NORM_KINDS}"
            )

    @property
    def filters(self):
        return FILTERS[self.arch]

    def layer_channels(self):
        """(in, out) channel pairs of the three conv layers."""
        f1, f2 = self.filters
        c = self.channels
        return [(c, f1), (f1, f2), (f2, c)]


def count_params(spec):
    """Exact learnable parameter count: sum over conv layers of
    (Kh*Kw*f_in*Q + 1)*f_out, plus 2*channels per batch-norm layer."""
    total = 0
    for (kh, kw), (fin, fout) in zip(KERNELS, spec.layer_channels()):
        total += (kh * kw * fin * spec.q + 1) * fout
    if spec.norm_kind == "batch":
        f1, f2 = spec.filters
        total += 2 * (f1 + f2)
    return total


class Model:
    """A built network: ordered layer list plus the residual flag."""

    def __init__(self, spec, layer_list):
        self.spec = spec
        self.layers = layer_list

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def num_params(self):
        return sum(layer.num_params() for layer in self.layers)

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[1] != self.spec.channels:
            raise ValueError(
                f"model expects [B,{self.spec.channels},H,W] input, got shape {x.shape}"
            )
        y = x
        for layer in self.layers:
            y = layer.forward(y, training=training)
        if self.spec.residual:
            y = y + x
        return y

    def backward(self, grad_output, need_input_grad=True):
        """Propagate the loss gradient; parameter grads land on the Params.
        Returns the gradient wrt the model input, or None when the caller
        does not need it (saves the first layer's input-gradient work)."""
        g = grad_output
        for layer in reversed(self.layers[1:]):
            g = layer.backward(g)
        g = self.layers[0].backward(g, need_input_grad=need_input_grad)
        if not need_input_grad:
            return None
        if self.spec.residual:
            g = g + grad_output
        return g

    def state_tensors(self):
        """All persistent tensors in declared layer order (learnable params
        plus batch-norm running statistics); the checkpoint tensor order."""
        out = []
        for layer in self.layers:
            for p in layer.params():
                out.append(p.value)
            if isinstance(layer, L.BatchNorm):
                out.append(layer.running_mean)
                out.append(layer.running_var)
        return out

    def load_state_tensors(self, tensors):
        expected = self.state_tensors()
        if len(tensors) != len(expected):
            raise CheckpointFormatError(
                f"checkpoint holds {len(tensors)} tensors, model needs {len(expected)}"
            )
        i = 0
        for layer in self.layers:
            for p in layer.params():
                if tensors[i].shape != p.value.shape:
                    raise CheckpointFormatError(
                        f"tensor {i} shape {tensors[i].shape} != expected {p.value.shape}"
                    )
                p.value = tensors[i]
                i += 1
            if isinstance(layer, L.BatchNorm):
                layer.running_mean = tensors[i]
                layer.running_var = tensors[i + 1]
                i += 2

    def copy_state(self):
        return [t.copy() for t in self.state_tensors()]

    def astype(self, dtype):
        """Cast all persistent tensors in place (used by gradient audits)."""
        for layer in self.layers:
            for p in layer.params():
                p.value = p.value.astype(dtype)
            if isinstance(layer, L.BatchNorm):
                layer.running_mean = layer.running_mean.astype(dtype)
                layer.running_var = layer.running_var.astype(dtype)
        return self


def build_model(spec, rng=None):
    """Instantiate a model; weights ~ Normal(0, 0.02^2), biases zero.
    With rng=None all weights are zero (used by checkpoint loading)."""
    if rng is None:
        pass
    elif isinstance(rng, int):
        rng = Rng(rng)
    act = L.Relu if spec.arch == "srcnn" else L.Tanh
    layer_list = []
    chans = spec.layer_channels()
    for i, ((kh, kw), (fin, fout)) in enumerate(zip(KERNELS, chans)):
        layer_list.append(L.OpConv2d(fin, fout, (kh, kw), q=spec.q, gain=0.02, rng=rng))
        if i < 2:
            layer_list.append(act())
            norm = L.make_norm(spec.norm_kind, fout)
            if norm is not None:
                layer_list.append(norm)
    model = Model(spec, layer_list)
    assert model.num_params() == count_params(spec)
    return model


def _spec_to_lines(spec, epoch, val_ssim):
    return (
        f"arch={spec.arch}\n"
        f"channels={spec.channels}\n"
        f"q={spec.q}\n"
        f"residual={int(spec.residual)}\n"
        f"norm={spec.norm_kind}\n"
        f"epoch={epoch}\n"
        f"val_ssim={val_ssim!r}\n"
    )


def _lines_to_meta(text):
    meta = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointFormatError(f"malformed header line {line!r}")
        k, v = line.split("=", 1)
        meta[k] = v
    try:
        spec = ModelSpec(
            arch=meta["arch"],
            channels=int(meta["channels"]),
            q=int(meta["q"]),
            residual=bool(int(meta["residual"])),
            norm_kind=meta["norm"],
        )
        epoch = int(meta["epoch"])
        val_ssim = float(meta["val_ssim"])
    except (KeyError, ValueError) as e:
        raise CheckpointFormatError(f"bad checkpoint header: {e}") from e
    return spec, epoch, val_ssim


def save_checkpoint(model, path, epoch=0, val_ssim=float("nan")):
    """Binary format: magic 'OPSR', u16 version, u32-length-prefixed UTF-8
    key=value header, then each tensor as (u32 rank, u32 dims..., raw
    little-endian float32 data) in declared layer order."""
    header = _spec_to_lines(model.spec, epoch, val_ssim).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<H", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for t in model.state_tensors():
            t32 = np.ascontiguousarray(t, dtype="<f4")
            f.write(struct.pack("<I", t32.ndim))
            f.write(struct.pack(f"<{t32.ndim}I", *t32.shape))
            f.write(t32.tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Returns (model, epoch, val_ssim); validates magic, version, and
    every tensor size against the declared spec."""
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointFormatError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        if hlen > 1 << 20:
            raise CheckpointFormatError(f"implausible header length {hlen}")
        spec, epoch, val_ssim = _lines_to_meta(
            _read_exact(f, hlen, "header").decode("utf-8"))
        model = build_model(spec, rng=None)
        tensors = []
        for i, _ in enumerate(model.state_tensors()):
            (rank,) = struct.unpack("<I", _read_exact(f, 4, f"tensor {i} rank"))
            if rank > 8:
                raise CheckpointFormatError(f"implausible tensor rank {rank}")
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"tensor {i} dims"))
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if n > 1 << 28:
                raise CheckpointFormatError(f"implausible tensor size {n}")
            raw = _read_exact(f, 4 * n, f"tensor {i} data")
            tensors.append(np.frombuffer(raw, dtype="<f4").reshape(dims).copy())
        if f.read(1):
            raise CheckpointFormatError("trailing bytes after last tensor")
    model.load_state_tensors(tensors)
    return model, epoch, val_ssim
