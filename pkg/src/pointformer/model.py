"""Point-cloud classifier built from vector self-attention layers.

The attention layer computes, per point i and neighbor j, a relative
position encoding from p_i - p_j, adds it to the difference of projected
center/neighbor features, and pushes the result through a small MLP to get
one attention logit *per channel*. A channelwise softmax across the k
neighbors then mixes the (value-projected + position-encoded) neighbor
features. A residual connection wraps the layer.

The classifier stacks [attention layer -> transition down] stages: each
transition picks farthest-point-sample centers, lifts the features of each
center's k nearest points through a linear+relu, and max-pools them. A
final attention layer, global mean pool, and a two-layer head produce the
class logits.

A permutation-invariant MLP baseline over pooled cloud statistics is
included for comparison runs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as tc
from .geometry import canonical_start, farthest_point_sample, knn
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"PTCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint payload is malformed or incompatible with the config."""


# ---------------------------------------------------------------------------
# Configurations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for the attention classifier.

    ``widths`` gives the channel width of each stage's attention layer; the
    transition block of stage s lifts to the next stage's width (the last
    stage keeps its width). ``ratio`` is the per-transition point survival
    fraction. ``attention`` selects per-channel ("vector") or per-neighbor
    ("scalar") softmax weights.
    """

    stages: int = 2
    widths: tuple[int, ...] = (32, 64)
    k: int = 16
    ratio: float = 0.25
    num_classes: int = 10
    head_hidden: int = 64
    attention: str = "vector"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.stages < 1 or len(self.widths) != self.stages:
            raise ValueError(f"need one width per stage, got {self.widths} for {self.stages}")
        if any(w < 1 for w in self.widths) or self.head_hidden < 1:
            raise ValueError("channel widths must be >= 1")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.attention not in ("vector", "scalar"):
            raise ValueError(f"attention must be 'vector' or 'scalar', got {self.attention!r}")

    @property
    def kind(self) -> str:
        return "transformer"


@dataclass(frozen=True)
class MlpConfig:
    """Baseline: four hidden relu layers over pooled cloud statistics."""

    num_classes: int = 10
    hidden: int = 64
    head_hidden: int = 64
    bins: int = 16

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if min(self.hidden, self.head_hidden, self.bins) < 1:
            raise ValueError("widths must be >= 1")

    @property
    def kind(self) -> str:
        return "mlp"

    @property
    def embed_dim(self) -> int:
        return 6 + self.bins  # centroid + per-axis variance + radial histogram


@dataclass
class LayerParams:
    """Parameter tensors of one attention layer at channel width C."""

    w_query: Tensor
    b_query: Tensor
    w_key: Tensor
    b_key: Tensor
    w_value: Tensor
    b_value: Tensor
    pos_w1: Tensor
    pos_b1: Tensor
    pos_w2: Tensor
    pos_b2: Tensor
    attn_w1: Tensor
    attn_b1: Tensor
    attn_w2: Tensor
    attn_b2: Tensor

    FIELDS = ("w_query", "b_query", "w_key", "b_key", "w_value", "b_value",
              "pos_w1", "pos_b1", "pos_w2", "pos_b2",
              "attn_w1", "attn_b1", "attn_w2", "attn_b2")

    @classmethod
    def from_params(cls, params: dict[str, Tensor], prefix: str) -> "LayerParams":
        return cls(**{f: params[prefix + f] for f in cls.FIELDS})


def _layer_specs(prefix: str, c: int) -> list[tuple[str, tuple[int, ...], str]]:
    shapes = {
        "w_query": (c, c), "b_query": (1, c),
        "w_key": (c, c), "b_key": (1, c),
        "w_value": (c, c), "b_value": (1, c),
        "pos_w1": (3, c), "pos_b1": (1, c),
        "pos_w2": (c, c), "pos_b2": (1, c),
        "attn_w1": (c, c), "attn_b1": (1, c),
        "attn_w2": (c, c), "attn_b2": (1, c),
    }
    return [(prefix + f, shapes[f], "bias" if f.startswith("b") or "_b" in f else "weight")
            for f in LayerParams.FIELDS]


def param_specs(config) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, kind) records for every parameter tensor."""
    specs: list[tuple[str, tuple[int, ...], str]] = []
    if isinstance(config, ModelConfig):
        w0 = config.widths[0]
        specs += [("embed.w", (3, w0), "weight"), ("embed.b", (1, w0), "bias")]
        for s in range(config.stages):
            w_in = config.widths[s]
            w_out = config.widths[s + 1] if s + 1 < config.stages else config.widths[-1]
            specs += _layer_specs(f"stage{s}.attn.", w_in)
            specs += [(f"stage{s}.down.w", (w_in, w_out), "weight"),
                      (f"stage{s}.down.b", (1, w_out), "bias")]
        specs += _layer_specs("final.attn.", config.widths[-1])
        last = config.widths[-1]
    elif isinstance(config, MlpConfig):
        dims = [config.embed_dim] + [config.hidden] * 4
        for i in range(4):
            specs += [(f"mlp.w{i + 1}", (dims[i], dims[i + 1]), "weight"),
                      (f"mlp.b{i + 1}", (1, dims[i + 1]), "bias")]
        last = config.hidden
    else:
        raise TypeError(f"unknown config type {type(config)!r}")
    specs += [("head.w1", (last, config.head_hidden), "weight"),
              ("head.b1", (1, config.head_hidden), "bias"),
              ("head.w2", (config.head_hidden, config.num_classes), "weight"),
              ("head.b2", (1, config.num_classes), "bias")]
    return specs


def init_params(config, seed: int) -> dict[str, Tensor]:
    """Fan-in-scaled uniform init, deterministic in ``seed``; biases zero.

    Weights are drawn from U(-a, a) with a = sqrt(3 / fan_in), which has
    variance exactly 1 / fan_in.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_specs(config):
        if kind == "weight":
            bound = math.sqrt(3.0 / shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def head_names(config) -> list[str]:
    return [n for n, _, _ in param_specs(config) if n.startswith("head.")]


def backbone_names(config) -> list[str]:
    return [n for n, _, _ in param_specs(config) if not n.startswith("head.")]


def reinit_head(params: dict[str, Tensor], config, new_num_classes: int, seed: int):
    """Replace the classification head for a new class count.

    Backbone tensors are carried over by reference, bitwise untouched. The
    fresh head depends only on (config, new_num_classes, seed).

    Returns:
        (new_config, new_params)
    """
    new_config = replace(config, num_classes=new_num_classes)
    rng = np.random.default_rng([seed, 7919])
    out: dict[str, Tensor] = {}
    for name, shape, kind in param_specs(new_config):
        if name.startswith("head."):
            if kind == "weight":
                bound = math.sqrt(3.0 / shape[0])
                out[name] = Tensor(rng.uniform(-bound, bound, size=shape),
                                   requires_grad=True, name=name)
            else:
                out[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)
        else:
            out[name] = params[name]
    return new_config, out


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return tc.add(tc.matmul(x, w), b)


def _linear_lastdim(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply a linear map to the last axis of an arbitrary-rank tensor."""
    if x.ndim == 2:
        return _linear(x, w, b)
    lead = x.shape[:-1]
    flat = tc.reshape(x, (int(np.prod(lead)), x.shape[-1]))
    return tc.reshape(_linear(flat, w, b), lead + (w.shape[1],))


def point_transformer_layer(features, positions, nbr, params: LayerParams,
                            attention: str = "vector", return_attention: bool = False):
    """One vector self-attention layer over fixed neighborhoods.

    Args:
        features: (N, C) tensor of point features.
        positions: (N, 3) tensor or array of point coordinates.
        nbr: (N, k) integer neighbor table; row i lists the points attended
            to by point i (normally including i itself).
        params: layer parameter bundle.
        attention: "vector" for per-channel weights, "scalar" for one weight
            per neighbor.
        return_attention: also return the (N, k, C) or (N, k, 1) softmax
            weights.

    Returns:
        (N, C) output features (residual included), optionally with the
        attention weights.
    """
    features = tc.as_tensor(features)
    positions = tc.as_tensor(positions)
    nbr = np.asarray(nbr)
    if features.ndim != 2:
        raise ShapeError(f"features must be (N, C), got {features.shape}")
    n, c = features.shape
    if nbr.ndim != 2 or nbr.shape[0] != n:
        raise ShapeError(f"neighbor table must be (N, k), got {nbr.shape} for N={n}")

    xj = tc.gather_rows(features, nbr)                      # (n, k, c)
    pj = tc.gather_rows(positions, nbr)                     # (n, k, 3)
    pi = tc.reshape(positions, (n, 1, 3))
    rel = tc.sub(pi, pj)
    pos_enc = _linear_lastdim(tc.relu(_linear_lastdim(rel, params.pos_w1, params.pos_b1)),
                              params.pos_w2, params.pos_b2)  # (n, k, c)

    query = tc.reshape(_linear(features, params.w_query, params.b_query), (n, 1, c))
    key = _linear_lastdim(xj, params.w_key, params.b_key)
    pre = tc.add(tc.sub(query, key), pos_enc)
    hidden = tc.relu(_linear_lastdim(pre, params.attn_w1, params.attn_b1))
    logits = _linear_lastdim(hidden, params.attn_w2, params.attn_b2)  # (n, k, c)
    if attention == "scalar":
        logits = tc.reduce(logits, axis=2, kind="sum", keepdims=True)
    elif attention != "vector":
        raise ValueError(f"attention must be 'vector' or 'scalar', got {attention!r}")

    # softmax across the k neighbors, independently per channel
    weights = tc.swapaxes(tc.softmax_lastdim(tc.swapaxes(logits, 1, 2)), 1, 2)
    value = tc.add(_linear_lastdim(xj, params.w_value, params.b_value), pos_enc)
    pooled = tc.reduce(tc.mul(weights, value), axis=1, kind="sum")
    out = tc.add(pooled, features)
    return (out, weights) if return_attention else out


def transition_down(features, positions, ratio: float, k: int,
                    weight: Tensor, bias: Tensor, start: int = 0):
    """Downsample a point set to ceil(ratio * N) farthest-point centers.

    Each center gathers its k nearest original points, lifts their features
    through linear+relu, and keeps the channelwise max.

    Returns:
        (pooled features (M, C_out), center positions (M, 3), center indices)
    """
    features = tc.as_tensor(features)
    pos = np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if features.shape[0] != n:
        raise ShapeError(f"features rows {features.shape[0]} != points {n}")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    m = max(1, math.ceil(ratio * n))
    centers = farthest_point_sample(pos, m, start=start)
    nbr = knn(pos, pos[centers], k, self_index=centers)
    gathered = tc.gather_rows(features, nbr)
    lifted = tc.relu(_linear_lastdim(gathered, weight, bias))
    pooled = tc.reduce(lifted, axis=1, kind="max")
    return pooled, pos[centers], centers


def _self_neighbors_flat(clouds: np.ndarray, k: int) -> np.ndarray:
    """Per-cloud self-kNN tables, offset into the flattened (B*M) row space."""
    b, m, _ = clouds.shape
    own = np.arange(m)
    return np.concatenate(
        [knn(clouds[i], clouds[i], k, self_index=own) + i * m for i in range(b)], axis=0)


def forward_classifier(positions, config: ModelConfig, params: dict[str, Tensor],
                       rng: np.random.Generator | None = None) -> Tensor:
    """Logits for a batch of clouds, shape (B, num_classes).

    ``positions`` is (B, P, 3) or (P, 3). With ``rng`` unset, farthest point
    sampling starts from the lexicographically smallest point of each cloud,
    which makes evaluation permutation-invariant; passing a generator
    randomizes the starts (training-time augmentation). Neighborhood size is
    clamped to the current point count in the late, heavily downsampled
    stages.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 2:
        pos = pos[None]
    if pos.ndim != 3 or pos.shape[2] != 3:
        raise ShapeError(f"positions must be (B, P, 3), got {pos.shape}")
    b, p, _ = pos.shape
    if p < config.k:
        raise ValueError(f"clouds have {p} points but config.k={config.k} (need P >= k)")

    feats = tc.relu(_linear(Tensor(pos.reshape(b * p, 3)), params["embed.w"], params["embed.b"]))
    cur = pos
    m = p
    for s in range(config.stages):
        k_eff = min(config.k, m)
        nbr = _self_neighbors_flat(cur, k_eff)
        lp = LayerParams.from_params(params, f"stage{s}.attn.")
        feats = point_transformer_layer(feats, Tensor(cur.reshape(b * m, 3)), nbr, lp,
                                        attention=config.attention)

        m_out = max(1, math.ceil(config.ratio * m))
        k_td = min(config.k, m)
        nbr_rows = []
        new_pos = np.empty((b, m_out, 3))
        for i in range(b):
            start = int(rng.integers(m)) if rng is not None else canonical_start(cur[i])
            centers = farthest_point_sample(cur[i], m_out, start=start)
            nbr_rows.append(knn(cur[i], cur[i][centers], k_td, self_index=centers) + i * m)
            new_pos[i] = cur[i][centers]
        gathered = tc.gather_rows(feats, np.concatenate(nbr_rows, axis=0))
        lifted = tc.relu(_linear_lastdim(gathered, params[f"stage{s}.down.w"],
                                         params[f"stage{s}.down.b"]))
        feats = tc.reduce(lifted, axis=1, kind="max")
        cur, m = new_pos, m_out

    k_eff = min(config.k, m)
    nbr = _self_neighbors_flat(cur, k_eff)
    lp = LayerParams.from_params(params, "final.attn.")
    feats = point_transformer_layer(feats, Tensor(cur.reshape(b * m, 3)), nbr, lp,
                                    attention=config.attention)

    pooled = tc.reduce(tc.reshape(feats, (b, m, config.widths[-1])), axis=1, kind="mean")
    hidden = tc.relu(_linear(pooled, params["head.w1"], params["head.b1"]))
    return _linear(hidden, params["head.w2"], params["head.b2"])


def pooled_embedding(positions: np.ndarray, bins: int = 16) -> np.ndarray:
    """Permutation-invariant cloud statistics: centroid, per-axis variance,
    and a radial histogram of ``bins`` bins (normalized counts)."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 2:
        pos = pos[None]
    b, p, _ = pos.shape
    centroid = pos.mean(axis=1)
    var = pos.var(axis=1)
    centered = pos - centroid[:, None, :]
    radii = np.linalg.norm(centered, axis=2)
    rmax = radii.max(axis=1, keepdims=True)
    radii = radii / np.where(rmax > 0.0, rmax, 1.0)
    hist = np.empty((b, bins))
    for i in range(b):
        hist[i] = np.histogram(radii[i], bins=bins, range=(0.0, 1.0))[0] / p
    return np.concatenate([centroid, var, hist], axis=1)


def mlp_baseline_forward(positions, config: MlpConfig, params: dict[str, Tensor]) -> Tensor:
    """Logits of the pooled-statistics MLP baseline, shape (B, num_classes)."""
    x = Tensor(pooled_embedding(positions, bins=config.bins))
    for i in range(1, 5):
        x = tc.relu(_linear(x, params[f"mlp.w{i}"], params[f"mlp.b{i}"]))
    hidden = tc.relu(_linear(x, params["head.w1"], params["head.b1"]))
    return _linear(hidden, params["head.w2"], params["head.b2"])


def forward(model_kind: str, positions, config, params,
            rng: np.random.Generator | None = None) -> Tensor:
    if model_kind == "transformer":
        return forward_classifier(positions, config, params, rng=rng)
    if model_kind == "mlp":
        return mlp_baseline_forward(positions, config, params)
    raise ValueError(f"unknown model kind {model_kind!r}")


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def _config_to_lines(config, meta: dict[str, str]) -> str:
    if isinstance(config, ModelConfig):
        lines = [
            "kind=transformer",
            f"stages={config.stages}",
            "widths=" + ",".join(str(w) for w in config.widths),
            f"k={config.k}",
            f"ratio={config.ratio!r}",
            f"num_classes={config.num_classes}",
            f"head_hidden={config.head_hidden}",
            f"attention={config.attention}",
        ]
    else:
        lines = [
            "kind=mlp",
            f"num_classes={config.num_classes}",
            f"hidden={config.hidden}",
            f"head_hidden={config.head_hidden}",
            f"bins={config.bins}",
        ]
    for key in sorted(meta):
        lines.append(f"meta.{key}={meta[key]}")
    return "\n".join(lines) + "\n"


def _config_from_lines(text: str):
    fields: dict[str, str] = {}
    meta: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise CheckpointError(f"malformed config line {line!r}")
        key, value = line.split("=", 1)
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            fields[key] = value
    kind = fields.pop("kind", None)
    try:
        if kind == "transformer":
            config = ModelConfig(
                stages=int(fields.pop("stages")),
                widths=tuple(int(w) for w in fields.pop("widths").split(",")),
                k=int(fields.pop("k")),
                ratio=float(fields.pop("ratio")),
                num_classes=int(fields.pop("num_classes")),
                head_hidden=int(fields.pop("head_hidden")),
                attention=fields.pop("attention"),
            )
        elif kind == "mlp":
            config = MlpConfig(
                num_classes=int(fields.pop("num_classes")),
                hidden=int(fields.pop("hidden")),
                head_hidden=int(fields.pop("head_hidden")),
                bins=int(fields.pop("bins")),
            )
        else:
            raise CheckpointError(f"unknown model kind {kind!r} in checkpoint")
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"bad checkpoint config: {e}") from None
    if fields:
        raise CheckpointError(f"unknown checkpoint config keys {sorted(fields)}")
    return config, meta


def save_checkpoint(path, config, params: dict[str, Tensor],
                    meta: dict[str, str] | None = None) -> None:
    """Write a versioned parameter container; bit-exact on round trip.

    Tensors are written in the canonical param_specs order regardless of the
    dict's insertion order.
    """
    specs = param_specs(config)
    cfg = _config_to_lines(config, meta or {}).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(specs))]
    for name, shape, _ in specs:
        if name not in params:
            raise CheckpointError(f"cannot save: parameter {name!r} missing")
        t = params[name]
        if t.shape != shape:
            raise CheckpointError(f"cannot save: {name!r} has shape {t.shape}, expected {shape}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(t.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Read a checkpoint; returns (config, params, meta).

    Validates magic, version, tensor-name coverage against the stored
    config, per-tensor shapes, and payload length.
    """
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        piece = raw[off:off + n]
        off += n
        return piece

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config, meta = _config_from_lines(take(cfg_len, "config").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))

    found: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "tensor name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        n_vals = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(8 * n_vals, f"data of {name}"), dtype="<f8")
        found[name] = data.reshape(shape).copy()
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")

    specs = param_specs(config)
    expected = [n for n, _, _ in specs]
    missing = [n for n in expected if n not in found]
    if missing:
        raise CheckpointError(f"{path}: checkpoint missing tensors {missing}")
    extra = sorted(set(found) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected tensors {extra}")
    params: dict[str, Tensor] = {}
    for name, shape, _ in specs:
        if found[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {found[name].shape}, expected {shape}")
        params[name] = Tensor(found[name], requires_grad=True, name=name)
    return config, params, meta


def ensure_compatible(source, target, allow_head_mismatch: bool = False) -> None:
    """Check that a checkpoint's config matches a requested config.

    Backbone fields must agree exactly. Class counts may differ only when
    ``allow_head_mismatch`` is set (head reinitialization requested).
    """
    if type(source) is not type(target):
        raise CheckpointError(
            f"model kind mismatch: checkpoint is {source.kind}, requested {target.kind}")
    if isinstance(source, ModelConfig):
        backbone = ("stages", "widths", "k", "ratio", "head_hidden", "attention")
    else:
        backbone = ("hidden", "head_hidden", "bins")
    for f in backbone:
        a, b = getattr(source, f), getattr(target, f)
        if a != b:
            raise CheckpointError(f"config mismatch on {f}: checkpoint has {a}, requested {b}")
    if source.num_classes != target.num_classes and not allow_head_mismatch:
        raise CheckpointError(
            f"class count mismatch: checkpoint has {source.num_classes}, requested "
            f"{target.num_classes}; request head reinitialization to adapt")
