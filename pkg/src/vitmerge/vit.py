"""Desk-scale Vision Transformer: parameter taxonomy, init, forward and backward.

Linear weights are stored ``(in, out)`` so a layer computes ``x @ W + b``.
That is the orientation RegMean's closed form is written in, so grams of
layer inputs line up with weight rows without transposes.

Block indices are 1-based everywhere (names, groups, merge plans).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np

from vitmerge import ConfigError, DimensionError
from vitmerge.numkit import STORAGE_DTYPE, softmax

LN_EPS = 1e-6
INIT_STD = 0.02
# GELU, tanh approximation: 0.5 u (1 + tanh(sqrt(2/pi) (u + 0.044715 u^3)))
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

GROUP_KINDS = ("embedding", "norm", "attention", "mlp", "classifier")
ATTN_LINEARS = ("q", "k", "v", "o")
MLP_LINEARS = ("fc1", "fc2")


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 4

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"ViTConfig.{f.name} must be a positive integer, got {v!r}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio

    def with_classes(self, num_classes: int) -> "ViTConfig":
        return dataclasses.replace(self, num_classes=num_classes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ViTConfig":
        return cls(**d)


def param_shapes(config: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical name -> shape, in canonical order."""
    D, P, T, H = config.dim, config.patch_dim, config.seq_len, config.hidden
    shapes: Dict[str, Tuple[int, ...]] = {
        "embed.patch.weight": (P, D),
        "embed.patch.bias": (D,),
        "embed.cls_token": (D,),
        "embed.pos": (T, D),
    }
    for b in range(1, config.depth + 1):
        pre = f"blocks.{b}."
        shapes[pre + "norm1.scale"] = (D,)
        shapes[pre + "norm1.shift"] = (D,)
        for lin in ATTN_LINEARS:
            shapes[pre + f"attn.{lin}.weight"] = (D, D)
            shapes[pre + f"attn.{lin}.bias"] = (D,)
        shapes[pre + "norm2.scale"] = (D,)
        shapes[pre + "norm2.shift"] = (D,)
        shapes[pre + "mlp.fc1.weight"] = (D, H)
        shapes[pre + "mlp.fc1.bias"] = (H,)
        shapes[pre + "mlp.fc2.weight"] = (H, D)
        shapes[pre + "mlp.fc2.bias"] = (D,)
    shapes["norm.scale"] = (D,)
    shapes["norm.shift"] = (D,)
    shapes["head.weight"] = (D, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def group_of(name: str) -> str:
    """Merge group tag of a parameter.

    One of ``embedding``, ``norm``, ``attention.<b>``, ``mlp.<b>``,
    ``classifier``.  Biases belong to the group of their layer.
    """
    parts = name.split(".")
    if parts[0] == "embed":
        return "embedding"
    if parts[0] == "head":
        return "classifier"
    if parts[0] == "norm":
        return "norm"
    if parts[0] == "blocks" and len(parts) >= 4:
        b = int(parts[1])
        if parts[2] in ("norm1", "norm2"):
            return "norm"
        if parts[2] == "attn":
            return f"attention.{b}"
        if parts[2] == "mlp":
            return f"mlp.{b}"
    raise KeyError(f"not a ViT parameter name: {name!r}")


def group_kind(group: str) -> str:
    return group.split(".")[0]


def is_classifier(name: str) -> bool:
    return name.startswith("head.")


def linear_weight_names(config: ViTConfig) -> list:
    """Attention and MLP linear weights, the layers RegMean solves for."""
    names = []
    for b in range(1, config.depth + 1):
        names += [f"blocks.{b}.attn.{lin}.weight" for lin in ATTN_LINEARS]
        names += [f"blocks.{b}.mlp.{lin}.weight" for lin in MLP_LINEARS]
    return names


class ViTParams(Mapping):
    """Immutable, audited set of named ViT tensors.

    Behaves as a read-only mapping ``name -> ndarray`` in canonical order.
    Arrays are flagged non-writeable; use :meth:`replace` to derive a new set.
    """

    __slots__ = ("config", "_tensors")
    __eq__ = object.__eq__
    __hash__ = object.__hash__

    def __init__(self, config: ViTConfig, tensors: Mapping[str, np.ndarray], *, dtype=None):
        shapes = param_shapes(config)
        missing = [n for n in shapes if n not in tensors]
        extra = [n for n in tensors if n not in shapes]
        if missing or extra:
            raise DimensionError(f"parameter names do not match config: missing={missing[:4]} extra={extra[:4]}")
        store = {}
        for name, shape in shapes.items():
            arr = np.asarray(tensors[name])
            if dtype is not None:
                arr = arr.astype(dtype)
            elif arr.dtype.kind != "f":
                arr = arr.astype(STORAGE_DTYPE)
            if arr.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
            arr = np.array(arr, order="C", copy=True)
            arr.flags.writeable = False
            store[name] = arr
        self.config = config
        self._tensors = store

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        return f"ViTParams({self.config}, {self.param_count()} params)"

    @property
    def dtype(self):
        return self._tensors["embed.pos"].dtype

    def replace(self, updates: Mapping[str, np.ndarray], config: Optional[ViTConfig] = None) -> "ViTParams":
        merged = dict(self._tensors)
        merged.update(updates)
        return ViTParams(config or self.config, merged)

    def astype(self, dtype) -> "ViTParams":
        return ViTParams(self.config, self._tensors, dtype=dtype)

    def group(self, tag: str) -> Dict[str, np.ndarray]:
        return {n: a for n, a in self._tensors.items() if group_of(n) == tag}

    def groups(self) -> Dict[str, list]:
        out: Dict[str, list] = {}
        for n in self._tensors:
            out.setdefault(group_of(n), []).append(n)
        return out

    def classifier(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._tensors["head.weight"], self._tensors["head.bias"]

    def with_classifier(self, weight: np.ndarray, bias: np.ndarray) -> "ViTParams":
        cfg = self.config.with_classes(int(np.shape(bias)[0]))
        return self.replace({"head.weight": weight, "head.bias": bias}, config=cfg)

    def param_count(self) -> int:
        return int(sum(a.size for a in self._tensors.values()))

    def equal(self, other: "ViTParams", *, skip_classifier: bool = False) -> bool:
        """Bitwise equality of every tensor (optionally ignoring the head)."""
        for n, a in self._tensors.items():
            if skip_classifier and is_classifier(n):
                continue
            if n not in other or other[n].shape != a.shape or other[n].dtype != a.dtype:
                return False
            if a.tobytes() != other[n].tobytes():
                return False
        return True


def audit(params: ViTParams) -> None:
    """Re-check names, shapes, group partition and finiteness."""
    shapes = param_shapes(params.config)
    if list(params) != list(shapes):
        raise DimensionError("parameter order/names differ from the canonical taxonomy")
    for n, a in params.items():
        if a.shape != shapes[n]:
            raise DimensionError(f"{n}: shape {a.shape} != {shapes[n]}")
        if not np.all(np.isfinite(a)):
            raise DimensionError(f"{n}: non-finite values")
        group_of(n)


def _is_random_init(name: str) -> bool:
    return name.endswith(".weight") or name in ("embed.cls_token", "embed.pos")


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(STORAGE_DTYPE)


def init(config: ViTConfig, seed: int) -> ViTParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if _is_random_init(name):
            tensors[name] = truncated_normal(rng, shape)
        elif name.endswith(".scale"):
            tensors[name] = np.ones(shape, STORAGE_DTYPE)
        else:
            tensors[name] = np.zeros(shape, STORAGE_DTYPE)
    return ViTParams(config, tensors)


def init_classifier(config: ViTConfig, num_classes: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return truncated_normal(rng, (config.dim, num_classes)), np.zeros(num_classes, STORAGE_DTYPE)


def param_count(params: ViTParams) -> int:
    return params.param_count()


def flops_estimate(config: ViTConfig) -> int:
    """2 x multiply-accumulates of every matrix product, batch 1."""
    D, T, n, H = config.dim, config.seq_len, config.num_patches, config.hidden
    patch = n * config.patch_dim * D
    attn_proj = 4 * T * D * D
    attn_scores = T * T * D  # summed over heads: heads * T * T * head_dim
    attn_values = T * T * D
    mlp = 2 * T * D * H
    head = D * config.num_classes
    return 2 * (patch + config.depth * (attn_proj + attn_scores + attn_values + mlp) + head)


# ---------------------------------------------------------------- layers


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, n_patches, C*p*p), patches in row-major grid order."""
    B, C, H, W = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(B, C, g_h, patch, g_w, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g_h * g_w, C * patch * patch)


def unpatchify(patches: np.ndarray, shape) -> np.ndarray:
    B, C, H, W = shape
    p = int(round(math.sqrt(patches.shape[-1] // C)))
    x = patches.reshape(B, H // p, W // p, C, p, p)
    return x.transpose(0, 3, 1, 4, 2, 5).reshape(shape)


def layer_norm(x, scale, shift):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * scale + shift, (xhat, rstd)


def layer_norm_backward(dy, cache, scale):
    xhat, rstd = cache
    dxhat = dy * scale
    dscale = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dshift = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dscale, dshift


def gelu(u):
    t = np.tanh(GELU_C * (u + GELU_A * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def gelu_backward(dg, u, t):
    du = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
    return dg * du


def _split_heads(x, heads):
    B, T, D = x.shape
    return x.reshape(B, T, heads, D // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


def _linear_backward(dy, x, w):
    """Gradients of y = x @ w + b for x of shape (..., in)."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


# ---------------------------------------------------------------- forward


def _forward(params: Mapping[str, np.ndarray], config: ViTConfig, images: np.ndarray,
             keep: bool, record: Optional[dict] = None):
    images = np.asarray(images)
    expected = (config.channels, config.image_size, config.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(f"images must be (batch, {expected}), got {images.shape}")
    dtype = params["embed.pos"].dtype
    images = images.astype(dtype, copy=False)
    B = images.shape[0]
    cache = {} if keep else None

    patches = patchify(images, config.patch_size)
    emb = patches @ params["embed.patch.weight"] + params["embed.patch.bias"]
    cls = np.broadcast_to(params["embed.cls_token"], (B, 1, config.dim))
    x = np.concatenate([cls, emb], axis=1) + params["embed.pos"]
    if keep:
        cache["patches"] = patches

    scale = 1.0 / math.sqrt(config.head_dim)
    for b in range(1, config.depth + 1):
        pre = f"blocks.{b}."
        h, ln1 = layer_norm(x, params[pre + "norm1.scale"], params[pre + "norm1.shift"])
        q = h @ params[pre + "attn.q.weight"] + params[pre + "attn.q.bias"]
        k = h @ params[pre + "attn.k.weight"] + params[pre + "attn.k.bias"]
        v = h @ params[pre + "attn.v.weight"] + params[pre + "attn.v.bias"]
        qh, kh, vh = (_split_heads(t, config.heads) for t in (q, k, v))
        probs = softmax((qh @ kh.transpose(0, 1, 3, 2)) * scale, axis=-1)
        ctx = _merge_heads(probs @ vh)
        x = x + ctx @ params[pre + "attn.o.weight"] + params[pre + "attn.o.bias"]
        h2, ln2 = layer_norm(x, params[pre + "norm2.scale"], params[pre + "norm2.shift"])
        u = h2 @ params[pre + "mlp.fc1.weight"] + params[pre + "mlp.fc1.bias"]
        g, t = gelu(u)
        x = x + g @ params[pre + "mlp.fc2.weight"] + params[pre + "mlp.fc2.bias"]
        if keep:
            cache[b] = dict(ln1=ln1, h=h, qh=qh, kh=kh, vh=vh, probs=probs, ctx=ctx,
                            ln2=ln2, h2=h2, u=u, t=t, g=g)
        if record is not None:
            record[pre + "attn.probs"] = probs
            record[pre + "norm1.normalized"] = ln1[0]
            record[pre + "norm2.normalized"] = ln2[0]
            for lin in ("q", "k", "v"):
                record[pre + f"attn.{lin}.input"] = h
            record[pre + "attn.o.input"] = ctx
            record[pre + "mlp.fc1.input"] = h2
            record[pre + "mlp.fc2.input"] = g

    xf, lnf = layer_norm(x, params["norm.scale"], params["norm.shift"])
    feat = xf[:, 0]
    logits = feat @ params["head.weight"] + params["head.bias"]
    if keep:
        cache["lnf"] = lnf
        cache["feat"] = feat
    if record is not None:
        record["features"] = feat
    return logits, cache


def forward(params: ViTParams, images: np.ndarray, *, record: Optional[dict] = None) -> np.ndarray:
    """Logits ``(batch, num_classes)`` for images ``(batch, C, H, W)``.

    If ``record`` is a dict it is filled with intermediates: every linear
    layer input (``<layer>.input``), attention probabilities and normalized
    LayerNorm outputs.
    """
    logits, _ = _forward(params, params.config, images, keep=False, record=record)
    return logits


def backward(params: ViTParams, images: np.ndarray, dlogits: np.ndarray, cache=None) -> Dict[str, np.ndarray]:
    """Gradient of ``sum(dlogits * logits)`` w.r.t. every parameter."""
    config = params.config
    if cache is None:
        _, cache = _forward(params, config, images, keep=True)
    grads: Dict[str, np.ndarray] = {}
    B = dlogits.shape[0]
    D = config.dim

    feat = cache["feat"]
    grads["head.weight"] = feat.T @ dlogits
    grads["head.bias"] = dlogits.sum(axis=0)
    dxf = np.zeros((B, config.seq_len, D), dtype=dlogits.dtype)
    dxf[:, 0] = dlogits @ params["head.weight"].T
    dx, grads["norm.scale"], grads["norm.shift"] = layer_norm_backward(dxf, cache["lnf"], params["norm.scale"])

    scale = 1.0 / math.sqrt(config.head_dim)
    for b in range(config.depth, 0, -1):
        pre = f"blocks.{b}."
        c = cache[b]
        # MLP branch
        dg, grads[pre + "mlp.fc2.weight"], grads[pre + "mlp.fc2.bias"] = _linear_backward(
            dx, c["g"], params[pre + "mlp.fc2.weight"])
        du = gelu_backward(dg, c["u"], c["t"])
        dh2, grads[pre + "mlp.fc1.weight"], grads[pre + "mlp.fc1.bias"] = _linear_backward(
            du, c["h2"], params[pre + "mlp.fc1.weight"])
        dln, grads[pre + "norm2.scale"], grads[pre + "norm2.shift"] = layer_norm_backward(
            dh2, c["ln2"], params[pre + "norm2.scale"])
        dx = dx + dln
        # attention branch
        dctx, grads[pre + "attn.o.weight"], grads[pre + "attn.o.bias"] = _linear_backward(
            dx, c["ctx"], params[pre + "attn.o.weight"])
        dctx_h = _split_heads(dctx, config.heads)
        probs = c["probs"]
        dprobs = dctx_h @ c["vh"].transpose(0, 1, 3, 2)
        dvh = probs.transpose(0, 1, 3, 2) @ dctx_h
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * scale
        dqh = dscores @ c["kh"]
        dkh = dscores.transpose(0, 1, 3, 2) @ c["qh"]
        dh = np.zeros_like(c["h"])
        for lin, dpart in (("q", dqh), ("k", dkh), ("v", dvh)):
            dpart = _merge_heads(dpart)
            dinp, grads[pre + f"attn.{lin}.weight"], grads[pre + f"attn.{lin}.bias"] = _linear_backward(
                dpart, c["h"], params[pre + f"attn.{lin}.weight"])
            dh += dinp
        dln, grads[pre + "norm1.scale"], grads[pre + "norm1.shift"] = layer_norm_backward(
            dh, c["ln1"], params[pre + "norm1.scale"])
        dx = dx + dln

    grads["embed.pos"] = dx.sum(axis=0)
    grads["embed.cls_token"] = dx[:, 0].sum(axis=0)
    demb = dx[:, 1:]
    patches = cache["patches"]
    grads["embed.patch.weight"] = patches.reshape(-1, patches.shape[-1]).T @ demb.reshape(-1, D)
    grads["embed.patch.bias"] = demb.reshape(-1, D).sum(axis=0)
    return {n: grads[n] for n in param_shapes(config)}


def predict(params: ViTParams, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Argmax class per image, evaluated in fixed-size chunks."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(np.argmax(forward(params, images[i:i + batch_size]), axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
