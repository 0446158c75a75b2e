"""Cross-modal grounding network with a shrinking attention window per layer.

A video is encoded by a linear projection plus a small full-attention stack,
the query by a token embedding plus the same kind of stack. The two sequences
are then concatenated and pushed through M cross-modal layers, where visual
tokens attend inside a per-layer window whose radius follows a schedule
derived from the anchor scales (widest window first by default). Every layer
also produces a fused view of its visual tokens through one shared
cross-attention block, giving the detection heads a T x 2D input per layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from collections.abc import Mapping, Sequence

import numpy as np

from .attention import AttentionParams, _masked_attention, build_mask
from .errors import FormatError
from .numerics import (
    Tensor,
    add,
    concat_cols,
    concat_rows,
    gather_rows,
    layer_norm,
    masked_softmax,
    matmul,
    mul,
    relu,
    slice_rows,
    transpose,
)

SCHEDULE_TYPES = ("fixed", "increase", "decrease")

CHECKPOINT_MAGIC = b"NFTVG1"


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    cross_layers: int = 4
    anchor_scales: tuple[int, ...] = (4, 8, 16, 32)
    window_radii: tuple[int, ...] | None = None
    schedule_type: str = "decrease"
    vocab_size: int = 64
    feature_dim: int = 32
    max_video_len: int = 128
    max_text_len: int = 32

    def __post_init__(self):
        self.anchor_scales = tuple(int(s) for s in self.anchor_scales)
        if self.window_radii is not None:
            self.window_radii = tuple(int(r) for r in self.window_radii)
        if self.d_model < 1 or self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.enc_layers < 0 or self.cross_layers < 1:
            raise ValueError("need enc_layers >= 0 and cross_layers >= 1")
        if not self.anchor_scales or any(s < 1 for s in self.anchor_scales):
            raise ValueError(f"anchor scales must be positive, got {self.anchor_scales}")
        if any(a >= b for a, b in zip(self.anchor_scales, self.anchor_scales[1:])):
            raise ValueError(f"anchor scales must be strictly increasing, got {self.anchor_scales}")
        if self.schedule_type not in SCHEDULE_TYPES:
            raise ValueError(f"schedule_type {self.schedule_type!r} not in {SCHEDULE_TYPES}")
        if self.window_radii is not None and len(self.window_radii) != self.cross_layers:
            raise ValueError(
                f"window_radii has {len(self.window_radii)} entries for {self.cross_layers} layers"
            )
        if min(self.vocab_size, self.feature_dim, self.max_video_len, self.max_text_len) < 1:
            raise ValueError("vocab_size, feature_dim, max_video_len, max_text_len must be >= 1")


@dataclass
class RadiusSchedule:
    """Per-layer window radii and the anchor scales each layer predicts."""

    radii: list[int]
    per_layer_scales: list[list[int]]
    schedule_type: str

    def __post_init__(self):
        if len(self.radii) != len(self.per_layer_scales):
            raise ValueError("radii and per_layer_scales must have one entry per layer")
        if any(r < 0 for r in self.radii):
            raise ValueError(f"window radii must be >= 0, got {self.radii}")

    @property
    def layers(self) -> int:
        return len(self.radii)

    def owning_layer(self, scale: int) -> int:
        """Deepest layer whose subset holds the scale; that layer predicts it."""
        owner = -1
        for j, scales in enumerate(self.per_layer_scales):
            if scale in scales:
                owner = j
        if owner < 0:
            raise ValueError(f"scale {scale} not assigned to any layer")
        return owner

    def owned_scales(self, layer: int) -> list[int]:
        """Scales layer ``layer`` actually predicts, ascending."""
        return [s for s in self.per_layer_scales[layer] if self.owning_layer(s) == layer]

    def head_slots(self) -> int:
        """Output width of the shared stage-1 heads (scores per frame)."""
        return max(len(s) for s in self.per_layer_scales)


def derive_schedule(config: ModelConfig) -> RadiusSchedule:
    """Allocate anchor scales to layers and pick each layer's window radius.

    Without an override the scales are split into M equal contiguous groups,
    largest scales to the earliest layers, and each layer's radius is the
    largest scale it owns. The increase schedule reverses that allocation and
    the fixed schedule keeps the allocation but uses one constant radius. An
    explicit window_radii list wins over the derived radii; scales are then
    spread as evenly as possible, repeating scales when there are fewer
    scales than layers.
    """
    m = config.cross_layers
    desc = sorted(config.anchor_scales, reverse=True)
    h = len(desc)

    if config.window_radii is not None:
        radii = list(config.window_radii)
        _check_radii_match_type(radii, config.schedule_type)
        if h >= m:
            groups = [list(chunk) for chunk in np.array_split(desc, m)]
        else:
            groups = [[desc[(j * h) // m]] for j in range(m)]
        return RadiusSchedule(radii, [sorted(g) for g in groups], config.schedule_type)

    if h < m or h % m != 0:
        raise ValueError(
            f"cannot evenly allocate {h} anchor scales to {m} layers; give window_radii"
        )
    size = h // m
    groups = [desc[j * size : (j + 1) * size] for j in range(m)]
    if config.schedule_type == "increase":
        groups = groups[::-1]
    radii = [max(g) for g in groups]
    if config.schedule_type == "fixed":
        radii = [max(config.anchor_scales)] * m
    return RadiusSchedule(radii, [sorted(g) for g in groups], config.schedule_type)


def _check_radii_match_type(radii: list[int], schedule_type: str) -> None:
    if schedule_type == "fixed" and len(set(radii)) != 1:
        raise ValueError(f"fixed schedule needs one constant radius, got {radii}")
    if schedule_type == "increase" and any(a > b for a, b in zip(radii, radii[1:])):
        raise ValueError(f"increase schedule needs non-decreasing radii, got {radii}")
    if schedule_type == "decrease" and any(a < b for a, b in zip(radii, radii[1:])):
        raise ValueError(f"decrease schedule needs non-increasing radii, got {radii}")


@dataclass
class MLPParams:
    """Two-layer perceptron: relu(x w1 + b1) w2 + b2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def mlp_forward(x: Tensor, p: MLPParams) -> Tensor:
    return add(matmul(relu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2)


@dataclass
class TransformerLayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    ffn: MLPParams

    def tensors(self) -> list[Tensor]:
        return [self.ln1_g, self.ln1_b, *self.attn.tensors(), self.ln2_g, self.ln2_b] + (
            self.ffn.tensors()
        )


def transformer_layer(x: Tensor, p: TransformerLayerParams, mask: np.ndarray) -> Tensor:
    """Pre-norm residual block: attention then feed-forward."""
    x = add(x, _masked_attention(layer_norm(x, p.ln1_g, p.ln1_b), p.attn, mask))
    return add(x, mlp_forward(layer_norm(x, p.ln2_g, p.ln2_b), p.ffn))


@dataclass
class LayerOutput:
    """Per cross-modal layer: split tokens plus the fused detection input."""

    v: Tensor
    q: Tensor
    v_tilde: Tensor
    v_hat: Tensor


class _ParamFactory:
    """Registers parameters under stable names with the shared init scheme."""

    def __init__(self, rng: np.random.Generator, store: dict[str, Tensor]):
        self.rng = rng
        self.store = store

    def proj(self, name: str, rows: int, cols: int) -> Tensor:
        bound = 1.0 / np.sqrt(rows)
        return self._put(name, self.rng.uniform(-bound, bound, size=(rows, cols)))

    def embed(self, name: str, rows: int, cols: int) -> Tensor:
        return self._put(name, self.rng.normal(0.0, 0.02, size=(rows, cols)))

    def zeros(self, name: str, *shape: int) -> Tensor:
        return self._put(name, np.zeros(shape))

    def ones(self, name: str, *shape: int) -> Tensor:
        return self._put(name, np.ones(shape))

    def _put(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.store:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self.store[name] = t
        return t

    def attention(self, prefix: str, d_model: int, heads: int) -> AttentionParams:
        dh = d_model // heads
        return AttentionParams(
            w_q=[self.proj(f"{prefix}.wq{h}", d_model, dh) for h in range(heads)],
            w_k=[self.proj(f"{prefix}.wk{h}", d_model, dh) for h in range(heads)],
            w_v=[self.proj(f"{prefix}.wv{h}", d_model, dh) for h in range(heads)],
            w_o=self.proj(f"{prefix}.wo", d_model, d_model),
        )

    def mlp(self, prefix: str, d_in: int, d_hidden: int, d_out: int) -> MLPParams:
        return MLPParams(
            w1=self.proj(f"{prefix}.w1", d_in, d_hidden),
            b1=self.zeros(f"{prefix}.b1", d_hidden),
            w2=self.proj(f"{prefix}.w2", d_hidden, d_out),
            b2=self.zeros(f"{prefix}.b2", d_out),
        )

    def layer(self, prefix: str, d_model: int, heads: int) -> TransformerLayerParams:
        return TransformerLayerParams(
            ln1_g=self.ones(f"{prefix}.ln1.g", d_model),
            ln1_b=self.zeros(f"{prefix}.ln1.b", d_model),
            attn=self.attention(f"{prefix}.attn", d_model, heads),
            ln2_g=self.ones(f"{prefix}.ln2.g", d_model),
            ln2_b=self.zeros(f"{prefix}.ln2.b", d_model),
            ffn=self.mlp(f"{prefix}.ffn", d_model, 4 * d_model, d_model),
        )


class GroundingModel:
    """Holds all parameters and runs the encoding plus cross-modal stack."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.schedule = derive_schedule(config)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        f = _ParamFactory(rng, self.params)
        d = config.d_model

        self.video_in_w = f.proj("video_in.w", config.feature_dim, d)
        self.video_in_b = f.zeros("video_in.b", d)
        self.video_pos = f.embed("video_pos", config.max_video_len, d)
        self.venc = [f.layer(f"venc{j}", d, config.heads) for j in range(config.enc_layers)]
        self.text_embed = f.embed("text_embed", config.vocab_size, d)
        self.text_pos = f.embed("text_pos", config.max_text_len, d)
        self.tenc = [f.layer(f"tenc{j}", d, config.heads) for j in range(config.enc_layers)]
        self.xm = [f.layer(f"xm{j}", d, config.heads) for j in range(config.cross_layers)]
        # one integration block and one pair of stage-1 heads, shared by all layers
        self.integ = f.attention("integ.attn", d, config.heads)
        slots = self.schedule.head_slots()
        self.head1_cls = f.mlp("head1.cls", 2 * d, d, slots)
        self.head1_reg = f.mlp("head1.reg", 2 * d, d, 2 * slots)
        self.head2_cls = f.mlp("head2.cls", 6 * d, d, 1)
        self.head2_reg = f.mlp("head2.reg", 6 * d, d, 2)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def encode_video(self, features: np.ndarray) -> Tensor:
        """Project frame features (T, F) to width D and run the visual stack."""
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.config.feature_dim:
            raise ValueError(
                f"features of shape {feats.shape} do not match feature_dim {self.config.feature_dim}"
            )
        t = feats.shape[0]
        if t < 1:
            raise ValueError("need at least one frame")
        if t > self.config.max_video_len:
            raise ValueError(f"video length {t} exceeds capacity {self.config.max_video_len}")
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite values")
        x = add(add(matmul(Tensor(feats), self.video_in_w), self.video_in_b),
                slice_rows(self.video_pos, 0, t))
        mask = np.ones((t, t), dtype=bool)
        for layer in self.venc:
            x = transformer_layer(x, layer, mask)
        return x

    def encode_text(self, token_ids: Sequence[int]) -> Tensor:
        """Embed token ids and run the text stack."""
        ids = [int(i) for i in token_ids]
        if not ids:
            raise ValueError("need at least one query token")
        if len(ids) > self.config.max_text_len:
            raise ValueError(f"query length {len(ids)} exceeds capacity {self.config.max_text_len}")
        for i in ids:
            if not 0 <= i < self.config.vocab_size:
                raise ValueError(f"token id {i} outside vocabulary of size {self.config.vocab_size}")
        x = add(gather_rows(self.text_embed, ids), slice_rows(self.text_pos, 0, len(ids)))
        mask = np.ones((len(ids), len(ids)), dtype=bool)
        for layer in self.tenc:
            x = transformer_layer(x, layer, mask)
        return x

    def integrate(self, v: Tensor, q: Tensor) -> tuple[Tensor, Tensor]:
        """Fuse text into the visual tokens: cross-attention then channel concat."""
        fused = cross_attention(v, q, self.integ)
        return fused, concat_cols([fused, v])

    def cross_modal(self, v: Tensor, q: Tensor) -> list[LayerOutput]:
        """Run the M windowed layers over the joint sequence, fusing per layer."""
        t, l = v.shape[0], q.shape[0]
        x = concat_rows([v, q])
        outputs = []
        for layer, radius in zip(self.xm, self.schedule.radii):
            x = transformer_layer(x, layer, build_mask(t, l, radius))
            v_j = slice_rows(x, 0, t)
            q_j = slice_rows(x, t, t + l)
            v_tilde, v_hat = self.integrate(v_j, q_j)
            outputs.append(LayerOutput(v=v_j, q=q_j, v_tilde=v_tilde, v_hat=v_hat))
        return outputs

    def forward(self, features: np.ndarray, token_ids: Sequence[int]) -> list[LayerOutput]:
        return self.cross_modal(self.encode_video(features), self.encode_text(token_ids))


def cross_attention(query: Tensor, keyvalue: Tensor, params: AttentionParams) -> Tensor:
    """Multi-head attention with distinct query and key/value sequences."""
    dh = params.d_model // params.heads
    scale = 1.0 / np.sqrt(dh)
    mask = np.ones((query.shape[0], keyvalue.shape[0]), dtype=bool)
    heads = []
    for w_q, w_k, w_v in zip(params.w_q, params.w_k, params.w_v):
        qh = matmul(query, w_q)
        kh = matmul(keyvalue, w_k)
        vh = matmul(keyvalue, w_v)
        weights = masked_softmax(mul(matmul(qh, transpose(kh)), scale), mask)
        heads.append(matmul(weights, vh))
    return matmul(concat_cols(heads), params.w_o)


def save_checkpoint(path: str, params: Mapping[str, Tensor]) -> None:
    """Write parameters as magic + JSON manifest + raw little-endian blocks."""
    entries = []
    blocks = []
    offset = 0
    for name, tensor in params.items():
        arr = np.ascontiguousarray(tensor.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blocks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"params": entries}, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for b in blocks:
            fh.write(b)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read a checkpoint back into name -> float64 array, bit exact."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    at = len(CHECKPOINT_MAGIC)
    if len(blob) < at + 4:
        raise FormatError("truncated checkpoint header", len(blob))
    (manifest_len,) = struct.unpack_from("<I", blob, at)
    at += 4
    if len(blob) < at + manifest_len:
        raise FormatError("truncated checkpoint manifest", len(blob))
    try:
        manifest = json.loads(blob[at : at + manifest_len].decode("utf-8"))
        entries = manifest["params"]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise FormatError(f"unreadable checkpoint manifest: {e}", at) from e
    data_start = at + manifest_len
    out: dict[str, np.ndarray] = {}
    end = data_start
    for entry in entries:
        name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = data_start + off
        stop = start + 8 * size
        if stop > len(blob):
            raise FormatError(f"truncated block for parameter {name!r}", len(blob))
        out[name] = np.frombuffer(blob[start:stop], dtype="<f8").reshape(shape).copy()
        end = max(end, stop)
    if end != len(blob):
        raise FormatError("trailing bytes after parameter blocks", end)
    return out


def apply_checkpoint(model: GroundingModel, loaded: Mapping[str, np.ndarray]) -> None:
    """Install loaded arrays into the model, checking names and shapes."""
    missing = set(model.params) - set(loaded)
    extra = set(loaded) - set(model.params)
    if missing or extra:
        raise ValueError(
            f"checkpoint does not match model: missing {sorted(missing)}, extra {sorted(extra)}"
        )
    for name, tensor in model.params.items():
        arr = loaded[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"parameter {name!r}: checkpoint shape {arr.shape} vs model shape {tensor.data.shape}"
            )
    for name, tensor in model.params.items():
        tensor.data = np.asarray(loaded[name], dtype=np.float64)
