"""Split batch normalization with tag routing, a small conv classifier built
from it, BN-similarity analytics, and the named-tensor checkpoint archive.

A DualBN2d layer owns two complete parameter/statistics sets ("base" and
"aux"). The view tag picks which set normalizes a forward pass according to
the configured variant:

    split_both        separate statistics, separate affine
    split_stats_only  separate statistics, shared affine
    split_affine_only shared statistics, separate affine
    single            everything shared

Shared fields always resolve to the base set. Inference uses the base tag, so
complex-set values can never leak into deployed predictions. Both sets are
allocated and serialized regardless of variant so checkpoints have one shape.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .core_config import BN_VARIANTS

TAGS = ("base", "complex")


class RoutingError(ValueError):
    """Unknown view tag or a request a variant cannot serve."""


class ArchiveError(ValueError):
    """Corrupt, truncated, or version-mismatched tensor archive."""


class DualBN2d(nn.Module):
    """Batch norm with two routed (statistics, affine) sets.

    Normalization uses batch statistics (biased variance) in training mode and
    the selected running statistics in eval mode; running updates use unbiased
    variance, mirroring standard batch-norm semantics.
    """

    def __init__(self, num_features: int, variant: str = "split_both",
                 momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        if variant not in BN_VARIANTS:
            raise RoutingError(f"unknown bn variant {variant!r}")
        self.num_features = num_features
        self.variant = variant
        self.momentum = momentum
        self.eps = eps
        self.weight_base = nn.Parameter(torch.ones(num_features))
        self.bias_base = nn.Parameter(torch.zeros(num_features))
        self.weight_aux = nn.Parameter(torch.ones(num_features))
        self.bias_aux = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean_base", torch.zeros(num_features))
        self.register_buffer("running_var_base", torch.ones(num_features))
        self.register_buffer("running_mean_aux", torch.zeros(num_features))
        self.register_buffer("running_var_aux", torch.ones(num_features))

    def route(self, tag: str) -> tuple:
        """(stats_index, affine_index) for this tag under the variant."""
        if tag not in TAGS:
            raise RoutingError(f"unknown view tag {tag!r}")
        idx = TAGS.index(tag)
        stats = idx if self.variant in ("split_both", "split_stats_only") else 0
        affine = idx if self.variant in ("split_both", "split_affine_only") else 0
        return stats, affine

    def _stats(self, index: int):
        if index == 0:
            return self.running_mean_base, self.running_var_base
        return self.running_mean_aux, self.running_var_aux

    def _affine(self, index: int):
        if index == 0:
            return self.weight_base, self.bias_base
        return self.weight_aux, self.bias_aux

    def forward(self, x: torch.Tensor, tag: str = "base") -> torch.Tensor:
        stats_idx, affine_idx = self.route(tag)
        running_mean, running_var = self._stats(stats_idx)
        weight, bias = self._affine(affine_idx)
        if self.training:
            dims = (0, 2, 3)
            mean = x.mean(dim=dims)
            var = x.var(dim=dims, unbiased=False)
            count = x.numel() / x.shape[1]
            with torch.no_grad():
                unbiased = var.detach() * (count / max(count - 1.0, 1.0))
                running_mean.mul_(1.0 - self.momentum).add_(mean.detach(), alpha=self.momentum)
                running_var.mul_(1.0 - self.momentum).add_(unbiased, alpha=self.momentum)
        else:
            mean, var = running_mean, running_var
        shape = (1, self.num_features, 1, 1)
        x_hat = (x - mean.reshape(shape)) / torch.sqrt(var.reshape(shape) + self.eps)
        return x_hat * weight.reshape(shape) + bias.reshape(shape)

    def routed_tensors(self) -> dict:
        """Name -> tensor for every set the current variant can actually touch."""
        names = ["weight_base", "bias_base", "running_mean_base", "running_var_base"]
        if self.variant in ("split_both", "split_stats_only"):
            names += ["running_mean_aux", "running_var_aux"]
        if self.variant in ("split_both", "split_affine_only"):
            names += ["weight_aux", "bias_aux"]
        return {n: getattr(self, n) for n in names}


@dataclass(frozen=True)
class ModelSpec:
    """Widths and wiring for the conv classifier."""

    conv_channels: tuple = (16, 32, 64, 64)
    num_classes: int = 10
    bn_variant: str = "split_both"
    in_channels: int = 3

    def __post_init__(self):
        if self.bn_variant not in BN_VARIANTS:
            raise RoutingError(f"unknown bn variant {self.bn_variant!r}")
        if not self.conv_channels or self.num_classes < 2:
            raise ValueError("need at least one conv block and two classes")


class DualBNConvNet(nn.Module):
    """conv3x3 -> DualBN -> ReLU blocks with 2x pooling, then a dense head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        in_ch = spec.in_channels
        for ch in spec.conv_channels:
            self.convs.append(nn.Conv2d(in_ch, ch, 3, padding=1, bias=False))
            self.bns.append(DualBN2d(ch, spec.bn_variant))
            in_ch = ch
        self.pool = nn.AvgPool2d(2)
        self.head = nn.Linear(in_ch, spec.num_classes)

    @property
    def bn_variant(self) -> str:
        return self.spec.bn_variant

    def forward(self, x: torch.Tensor, tag: str = "base") -> torch.Tensor:
        blocks = len(self.convs)
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            x = torch.relu(bn(conv(x), tag=tag))
            if i < blocks - 1 and min(x.shape[2], x.shape[3]) >= 2:
                x = self.pool(x)
        x = x.mean(dim=(2, 3))
        return self.head(x)

    def bn_layers(self):
        return [(f"bns.{i}", bn) for i, bn in enumerate(self.bns)]


def build_model(spec: ModelSpec, seed: int) -> DualBNConvNet:
    """Deterministic initialization from a numpy stream (He-style for convs)."""
    model = DualBNConvNet(spec)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, param in sorted(model.named_parameters()):
            if param.ndim >= 2:
                fan_in = int(np.prod(param.shape[1:]))
                scale = float(np.sqrt(2.0 / fan_in))
                values = rng.standard_normal(tuple(param.shape)) * scale
                param.copy_(torch.from_numpy(values.astype(np.float32)))
            elif "weight" in name.rsplit(".", 1)[-1]:
                param.fill_(1.0)
            else:
                param.zero_()
    return model


def as_model_input(batch) -> torch.Tensor:
    """ImageBatch / NHWC numpy / tensor -> float32 NCHW tensor."""
    if isinstance(batch, torch.Tensor):
        return batch
    pixels = batch.pixels if hasattr(batch, "pixels") else batch
    if pixels.ndim == 3:
        pixels = pixels[None]
    tensor = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))
    return tensor.permute(0, 3, 1, 2).contiguous()


def as_label_tensor(batch) -> torch.Tensor:
    labels = batch.labels if hasattr(batch, "labels") else batch
    return torch.from_numpy(np.ascontiguousarray(labels, dtype=np.int64))


def inference_forward(model, batch) -> torch.Tensor:
    """Eval-mode logits with the base tag at every BN site; never mutates state."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(as_model_input(batch), tag="base")
    finally:
        model.train(was_training)
    return logits.detach()


def _cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    na, nb = float(a.norm()), float(b.norm())
    if na == 0.0 and nb == 0.0:
        return 1.0  # identical zero vectors
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float((a @ b) / (na * nb))


def bn_cosine_similarity(model) -> list:
    """Per BN layer: cosine between the base and aux sets, per field."""
    if model.bn_variant == "single":
        raise RoutingError("single-BN model holds one routed set; nothing to compare")
    rows = []
    for name, bn in model.bn_layers():
        with torch.no_grad():
            rows.append({
                "layer": name,
                "mean": _cosine(bn.running_mean_base, bn.running_mean_aux),
                "var": _cosine(bn.running_var_base, bn.running_var_aux),
                "scale": _cosine(bn.weight_base, bn.weight_aux),
                "shift": _cosine(bn.bias_base, bn.bias_aux),
            })
    return rows


# ---------------------------------------------------------------------------
# named-tensor archive: 8-byte little-endian manifest length, JSON manifest,
# then raw little-endian payloads at the offsets the manifest declares.

ARCHIVE_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}


def write_tensor_archive(path, tensors: dict, meta: dict | None = None) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, array in tensors.items():
        arr = np.ascontiguousarray(array)
        if arr.dtype.name not in _DTYPES:
            raise ArchiveError(f"unsupported dtype {arr.dtype} for {name!r}")
        arr = arr.astype(_DTYPES[arr.dtype.name])  # force little-endian
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.name, "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({"format_version": ARCHIVE_VERSION,
                           "meta": meta or {}, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in payloads:
            fh.write(raw)


def read_tensor_archive(path) -> tuple:
    """-> (tensors dict, meta dict); validates sizes before returning anything."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise ArchiveError(f"{path}: too short for a header")
    (mlen,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + mlen:
        raise ArchiveError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(blob[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable manifest") from exc
    if manifest.get("format_version") != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: format version {manifest.get('format_version')} "
                           f"(expected {ARCHIVE_VERSION})")
    base = 8 + mlen
    expected = sum(entry["nbytes"] for entry in manifest["tensors"])
    if len(blob) != base + expected:
        raise ArchiveError(f"{path}: payload length {len(blob) - base}, manifest "
                           f"declares {expected}")
    tensors = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return tensors, manifest["meta"]


def named_state(model) -> dict:
    """All parameters and buffers as float32 numpy arrays, in a stable order."""
    out = {}
    for name, param in model.named_parameters():
        out[name] = param.detach().cpu().numpy().astype(np.float32)
    for name, buf in model.named_buffers():
        out[name] = buf.detach().cpu().numpy().astype(np.float32)
    return out


def load_named_state(model, state: dict) -> None:
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name not in state:
                raise ArchiveError(f"missing parameter {name!r} in archive")
            param.copy_(torch.from_numpy(state[name].copy()))
        for name, buf in model.named_buffers():
            if name not in state:
                raise ArchiveError(f"missing buffer {name!r} in archive")
            buf.copy_(torch.from_numpy(state[name].copy()))
