"""Forward graph: shared CNN backbone, shared spatial self-attention block,
per-segment attention weights, aggregation, and a linear classifier.

One parameter set processes all four dynamic images of a sample. The spatial
block computes embedded-Gaussian attention over all H'*W' positions of a
feature map and adds the result back onto its input (residual), so zeroing the
output projection makes it an exact identity. Per-segment weights come from a
softmax over sigmoid-squashed linear scores of the pooled features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .io_utils import atomic_write_bytes


@dataclass
class BackboneConfig:
    """Toy CNN: per stage, 3x3 conv (stride 1, pad 1) -> relu -> 2x2 avg pool."""

    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    in_channels: int = 1

    def out_channels(self) -> int:
        return self.channels[-1]

    def feature_extent(self, input_extent: int) -> int:
        extent = input_extent
        for _ in self.channels:
            if extent % 2 != 0:
                raise ValueError(f"extent underflow: {extent} not divisible by 2")
            extent //= 2
        if extent < 2:
            raise ValueError(f"extent underflow: final map {extent}x{extent} smaller than 2x2")
        return extent


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 3
    num_segments: int = 4

    def attention_channels(self) -> int:
        c = self.backbone.out_channels()
        if c % 2 != 0:
            raise ValueError("backbone output channels must be even")
        return c // 2


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Value]:
    """Centered-uniform 1/sqrt(fan_in) init for conv/linear weights.

    The attention vector and the spatial block's output projection start at
    zero: attention begins uniform and the spatial block begins as identity.
    """
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return Value(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    params: dict[str, Value] = {}
    cin = cfg.backbone.in_channels
    for i, cout in enumerate(cfg.backbone.channels):
        params[f"backbone.{i}.w"] = uniform((cout, cin, 3, 3), cin * 9)
        params[f"backbone.{i}.b"] = Value(np.zeros(cout), requires_grad=True)
        cin = cout
    c = cfg.backbone.out_channels()
    ch = cfg.attention_channels()
    params["attn.w_xi"] = uniform((ch, c), c)
    params["attn.w_psi"] = uniform((ch, c), c)
    params["attn.w_g"] = uniform((ch, c), c)
    params["attn.w_y"] = Value(np.zeros((c, ch)), requires_grad=True)
    params["attn.q"] = Value(np.zeros(c), requires_grad=True)
    params["cls.w"] = uniform((cfg.num_classes, c), c)
    params["cls.b"] = Value(np.zeros(cfg.num_classes), requires_grad=True)
    return params


def param_count(params: dict[str, Value]) -> int:
    return int(sum(v.data.size for v in params.values()))


def backbone_forward(x: Value, params: dict[str, Value], cfg: BackboneConfig) -> Value:
    """[C_in,H,W] -> [C,H',W'] with one shared parameter set per model."""
    h = x
    for i in range(len(cfg.channels)):
        h = ad.conv2d(h, params[f"backbone.{i}.w"], stride=1, pad=1)
        h = ad.add_channel_bias(h, params[f"backbone.{i}.b"])
        h = ad.relu(h)
        h = ad.avg_pool2x2(h)
    return h


def non_local(x: Value, params: dict[str, Value]) -> Value:
    """Spatial self-attention with residual: softmax((xi X)^T (psi X)) routes
    projected features between all positions, then the output projection maps
    back to C channels and is added onto the input."""
    c, hh, ww = x.shape
    n = hh * ww
    xf = ad.reshape(x, (c, n))
    xi = ad.matmul(params["attn.w_xi"], xf)    # C' x N
    psi = ad.matmul(params["attn.w_psi"], xf)  # C' x N
    att = ad.softmax(ad.matmul(ad.transpose(xi), psi), axis=1)  # N x N, rows sum to 1
    g = ad.matmul(params["attn.w_g"], xf)      # C' x N
    mixed = ad.matmul(g, ad.transpose(att))    # position i gets sum_j att[i,j] g_j
    y = ad.matmul(params["attn.w_y"], mixed)   # C x N
    return ad.add(ad.reshape(y, (c, hh, ww)), x)


def pool_feature(fmap: Value) -> Value:
    """[C,H',W'] -> [C] by global spatial averaging."""
    return ad.global_avg_pool(fmap)


def segment_attention(features: list[Value], q: Value) -> Value:
    """Softmax over sigmoid(F_i . q): positive weights summing to 1.

    Since sigmoid keeps every logit inside (0,1), no weight can exceed e times
    another.
    """
    logits = [ad.sigmoid(ad.dot(f, q)) for f in features]
    return ad.softmax(ad.stack_scalars(logits), axis=0)


def aggregate_features(features: list[Value], alpha: Value) -> Value:
    """Convex combination sum_i alpha_i F_i."""
    out = ad.scale_by(features[0], ad.pick(alpha, 0))
    for i in range(1, len(features)):
        out = ad.add(out, ad.scale_by(features[i], ad.pick(alpha, i)))
    return out


@dataclass
class ForwardResult:
    logits: Value
    alpha: Value
    features: list[Value]
    aggregated: Value


def forward(images: list[Value], params: dict[str, Value], cfg: ModelConfig,
            enable_attention: bool = True) -> ForwardResult:
    """Run the four standardized descriptor images through the full graph.

    With ``enable_attention`` off, the spatial block is skipped and the
    segment weights are fixed uniform (the ablation baseline).
    """
    feats = []
    for img in images:
        fmap = backbone_forward(img, params, cfg.backbone)
        if enable_attention:
            fmap = non_local(fmap, params)
        feats.append(pool_feature(fmap))
    if enable_attention:
        alpha = segment_attention(feats, params["attn.q"])
    else:
        alpha = Value(np.full(len(feats), 1.0 / len(feats)))
    agg = aggregate_features(feats, alpha)
    logits = ad.linear(agg, params["cls.w"], params["cls.b"])
    return ForwardResult(logits=logits, alpha=alpha, features=feats, aggregated=agg)


def static_forward(image: Value, params: dict[str, Value], cfg: ModelConfig) -> Value:
    """Single-image baseline: backbone -> pool -> classifier, no attention."""
    fmap = backbone_forward(image, params, cfg.backbone)
    pooled = pool_feature(fmap)
    return ad.linear(pooled, params["cls.w"], params["cls.b"])


# ---------------------------------------------------------------------------
# checkpoints

SMAS_MAGIC = b"SMAS"
SMAS_VERSION = 1


def save_checkpoint(params: dict[str, Value], path) -> None:
    """Binary checkpoint; round-trips bit-exactly.

    Layout: magic, version u32 LE, tensor count u32 LE, then per tensor
    {name_len u16, UTF-8 name, rank u8, dims u32 x rank, float64 LE data}.
    """
    chunks = [SMAS_MAGIC, struct.pack("<II", SMAS_VERSION, len(params))]
    for name in sorted(params):
        data = params[name].data
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path) -> dict[str, Value]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SMAS_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack("<II", blob[4:12])
    if version != SMAS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 12
    params: dict[str, Value] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(dims)) * 8
        data = np.frombuffer(blob[off : off + size], dtype="<f8").reshape(dims)
        off += size
        params[name] = Value(data.copy(), requires_grad=True)
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params
