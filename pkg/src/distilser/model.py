"""Teacher/student architecture: strided conv feature encoder over raw
waveforms, transformer context network exposing every block's hidden
states, and a linear classifier head over pooled frames.

The teacher and student share the same layer geometry; the student has
half the transformer blocks and is initialized from the teacher's
even-numbered blocks before distillation.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ShapeError
from .rng import substream
from .tensor import Tensor

DESK_CONV = ((32, 10, 5), (32, 3, 2), (32, 3, 2), (32, 3, 2), (32, 3, 2), (32, 2, 2), (32, 2, 2))
FULL_CONV = ((512, 10, 5), (512, 3, 2), (512, 3, 2), (512, 3, 2), (512, 3, 2), (512, 2, 2), (512, 2, 2))

CHECKPOINT_MAGIC = b"DSCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    conv_layers: 7 (out_channels, kernel, stride) stages over the raw wave.
    pos_conv: optional (kernel, groups) grouped conv positional layer before
    block 1; None disables it (the desk default, which makes the context
    network permutation-equivariant over frames).
    encoder_norm: 'channel' normalizes each conv channel over time,
    'layer' normalizes each frame over channels.
    """

    conv_layers: tuple = DESK_CONV
    hidden_dim: int = 32
    n_blocks: int = 4
    n_heads: int = 4
    ffn_dim: int = 64
    n_classes: int = 4
    dropout: float = 0.0
    encoder_norm: str = "channel"
    pooling: str = "mean"
    pos_conv: tuple | None = None

    def __post_init__(self):
        self.conv_layers = tuple(tuple(layer) for layer in self.conv_layers)
        if self.pos_conv is not None:
            self.pos_conv = tuple(self.pos_conv)
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.encoder_norm not in ("channel", "layer"):
            raise ConfigError(f"encoder_norm must be 'channel' or 'layer', got {self.encoder_norm!r}")
        if self.pooling not in ("mean", "last"):
            raise ConfigError(f"pooling must be 'mean' or 'last', got {self.pooling!r}")
        if not self.conv_layers:
            raise ConfigError("conv_layers must be non-empty")

    @classmethod
    def desk(cls, n_blocks: int = 4, **kw) -> "ModelConfig":
        return cls(n_blocks=n_blocks, **kw)

    @classmethod
    def full(cls, n_blocks: int = 12, **kw) -> "ModelConfig":
        """Production-scale geometry: 768-dim, 12 heads, FFN 3072."""
        kw.setdefault("conv_layers", FULL_CONV)
        kw.setdefault("hidden_dim", 768)
        kw.setdefault("n_heads", 12)
        kw.setdefault("ffn_dim", 3072)
        kw.setdefault("pos_conv", (128, 16))
        return cls(n_blocks=n_blocks, **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        return cls(**raw)


def conv_output_length(n_samples: int, conv_layers) -> int:
    """Frame count after the strided conv stack (floor chain)."""
    t = n_samples
    for _, k, s in conv_layers:
        if t < k:
            raise ShapeError(f"input of {n_samples} samples is shorter than the encoder receptive field")
        t = (t - k) // s + 1
    return t


def min_input_length(conv_layers) -> int:
    """Smallest sample count for which every conv stage yields >= 1 frame."""
    need = 1
    for _, k, s in reversed(conv_layers):
        need = k + s * (need - 1)
    return need


class Model:
    """Parameter container plus forward passes. Parameters live in an
    insertion-ordered name -> Tensor dict (the checkpoint order)."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @property
    def n_blocks(self) -> int:
        return self.config.n_blocks

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def _uniform(rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(config: ModelConfig, seed: int) -> Model:
    """Fan-in scaled uniform weights, zero biases, unit norm scales;
    deterministic in (config, seed)."""
    rng = substream(seed, "init")
    p: dict[str, Tensor] = {}

    def param(name, arr):
        p[name] = Tensor(arr, requires_grad=True)

    c_in = 1
    for i, (c_out, k, _) in enumerate(config.conv_layers):
        param(f"encoder.conv{i}.weight", _uniform(rng, (c_out, c_in, k), c_in * k))
        param(f"encoder.conv{i}.bias", np.zeros(c_out))
        param(f"encoder.conv{i}.norm_scale", np.ones(c_out))
        param(f"encoder.conv{i}.norm_bias", np.zeros(c_out))
        c_in = c_out

    d = config.hidden_dim
    param("proj.weight", _uniform(rng, (c_in, d), c_in))
    param("proj.bias", np.zeros(d))

    if config.pos_conv is not None:
        k, groups = config.pos_conv
        if d % groups:
            raise ConfigError(f"pos_conv groups {groups} do not divide hidden_dim {d}")
        param("pos_conv.weight", _uniform(rng, (d, d // groups, k), (d // groups) * k))
        param("pos_conv.bias", np.zeros(d))

    for b in range(config.n_blocks):
        pre = f"block{b}"
        param(f"{pre}.ln1.scale", np.ones(d))
        param(f"{pre}.ln1.bias", np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            param(f"{pre}.attn.{name}", _uniform(rng, (d, d), d))
            param(f"{pre}.attn.{name}_bias", np.zeros(d))
        param(f"{pre}.ln2.scale", np.ones(d))
        param(f"{pre}.ln2.bias", np.zeros(d))
        param(f"{pre}.ffn.w1", _uniform(rng, (d, config.ffn_dim), d))
        param(f"{pre}.ffn.b1", np.zeros(config.ffn_dim))
        param(f"{pre}.ffn.w2", _uniform(rng, (config.ffn_dim, d), config.ffn_dim))
        param(f"{pre}.ffn.b2", np.zeros(d))

    param("head.weight", _uniform(rng, (d, config.n_classes), d))
    param("head.bias", np.zeros(config.n_classes))
    return Model(config, p)


@dataclass
class ModelOutput:
    hidden_states: list  # per block, Tensor [batch, frames, hidden]
    z: Tensor            # last block output
    logits: Tensor       # [batch, n_classes]
    frame_counts: np.ndarray
    frame_mask: np.ndarray  # [batch, frames] 1.0 on valid frames


# ---------------------------------------------------------------------------
# forward passes


def feature_encoder_forward(model: Model, waveform) -> Tensor:
    """Raw mono waveform [time] -> conv features [channels, frames].

    Each stage: strided conv, per-channel (or per-frame) normalization with
    learned affine, GELU.
    """
    cfg = model.config
    x = waveform if isinstance(waveform, Tensor) else Tensor(waveform)
    if x.ndim != 1:
        raise ShapeError(f"feature_encoder_forward: expected 1-D waveform, got {x.shape}")
    if x.shape[0] < min_input_length(cfg.conv_layers):
        raise ShapeError(
            f"input of {x.shape[0]} samples is shorter than the encoder receptive field "
            f"({min_input_length(cfg.conv_layers)} samples)"
        )
    h = T.reshape(x, (1, x.shape[0]))
    for i, (c_out, _, s) in enumerate(cfg.conv_layers):
        h = T.conv1d(h, model[f"encoder.conv{i}.weight"], stride=s)
        h = h + T.reshape(model[f"encoder.conv{i}.bias"], (c_out, 1))
        if cfg.encoder_norm == "channel":
            h = T.group_norm(h)  # each channel over its time extent
        else:
            h = T.normalize(h, axis=-2)  # each frame over channels
        h = h * T.reshape(model[f"encoder.conv{i}.norm_scale"], (c_out, 1))
        h = h + T.reshape(model[f"encoder.conv{i}.norm_bias"], (c_out, 1))
        h = T.gelu(h)
    return h


def _project_frames(model: Model, feats: Tensor) -> Tensor:
    """[channels, frames] conv features -> [frames, hidden] block input."""
    cfg = model.config
    x = T.transpose(feats) @ model["proj.weight"] + model["proj.bias"]
    if cfg.pos_conv is not None:
        k, groups = cfg.pos_conv
        n_frames = x.shape[0]
        c = T.conv1d(T.transpose(x), model["pos_conv.weight"], stride=1, pad=k // 2, groups=groups)
        c = c + T.reshape(model["pos_conv.bias"], (cfg.hidden_dim, 1))
        if k % 2 == 0:  # even kernel overshoots by one frame
            c = T.narrow(c, 1, 0, n_frames)
        x = x + T.gelu(T.transpose(c))
    return x


def _affine_ln(model: Model, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x) * model[f"{name}.scale"] + model[f"{name}.bias"]


def _block_forward(model: Model, b: int, h: Tensor, mask_bias: Tensor | None) -> Tensor:
    """Pre-norm transformer block on [batch, frames, hidden]."""
    cfg = model.config
    bsz, frames, d = h.shape
    heads, dh = cfg.n_heads, d // cfg.n_heads
    pre = f"block{b}"

    x = _affine_ln(model, f"{pre}.ln1", h)

    def split(t):  # [B, T, D] -> [B, H, T, dh]
        return T.transpose(T.reshape(t, (bsz, frames, heads, dh)), (0, 2, 1, 3))

    q = split(x @ model[f"{pre}.attn.wq"] + model[f"{pre}.attn.wq_bias"])
    kk = split(x @ model[f"{pre}.attn.wk"] + model[f"{pre}.attn.wk_bias"])
    v = split(x @ model[f"{pre}.attn.wv"] + model[f"{pre}.attn.wv_bias"])
    att = T.scaled_dot_attention(q, kk, v, mask_bias)
    att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (bsz, frames, d))
    h = h + (att @ model[f"{pre}.attn.wo"] + model[f"{pre}.attn.wo_bias"])

    x2 = _affine_ln(model, f"{pre}.ln2", h)
    ffn = T.gelu(x2 @ model[f"{pre}.ffn.w1"] + model[f"{pre}.ffn.b1"]) @ model[f"{pre}.ffn.w2"]
    return h + (ffn + model[f"{pre}.ffn.b2"])


def _context_batch(model: Model, stacked: Tensor, frame_mask: np.ndarray) -> list[Tensor]:
    """Run all blocks on [batch, frames, hidden]; returns every block output."""
    if frame_mask.all():
        mask_bias = None
    else:
        bias = np.where(frame_mask[:, None, None, :] > 0.0, 0.0, -1e9)
        mask_bias = Tensor(bias)
    states = []
    h = stacked
    for b in range(model.config.n_blocks):
        h = _block_forward(model, b, h, mask_bias)
        states.append(h)
    return states


def _pool(model: Model, h: Tensor, frame_mask: np.ndarray) -> Tensor:
    """[batch, frames, hidden] -> [batch, hidden] over valid frames."""
    if model.config.pooling == "mean":
        weights = frame_mask / frame_mask.sum(axis=1, keepdims=True)
    else:  # last valid frame
        weights = np.zeros_like(frame_mask)
        last = frame_mask.sum(axis=1).astype(int) - 1
        weights[np.arange(frame_mask.shape[0]), last] = 1.0
    return T.sum_(h * Tensor(weights[:, :, None]), axis=1)


def forward_batch(model: Model, waveforms: list) -> ModelOutput:
    """Full forward over a batch of raw waveforms (may have unequal
    lengths; shorter ones are zero-padded and masked out downstream)."""
    feats = [feature_encoder_forward(model, w) for w in waveforms]
    frames = [_project_frames(model, f) for f in feats]
    counts = np.array([f.shape[0] for f in frames])
    t_max = int(counts.max())
    stacked = T.stack([T.pad_end(f, 0, t_max) for f in frames])
    frame_mask = (np.arange(t_max)[None, :] < counts[:, None]).astype(np.float64)

    states = _context_batch(model, stacked, frame_mask)
    z = states[-1]
    pooled = _pool(model, z, frame_mask)
    logits = pooled @ model["head.weight"] + model["head.bias"]
    return ModelOutput(states, z, logits, counts, frame_mask)


def context_forward(model: Model, feats: Tensor) -> tuple[list[Tensor], Tensor]:
    """Single-utterance context pass: conv features [channels, frames] ->
    (per-block hidden states [frames, hidden], final state z)."""
    x = _project_frames(model, feats)
    mask = np.ones((1, x.shape[0]))
    states3 = _context_batch(model, T.reshape(x, (1,) + x.shape), mask)
    states = [T.reshape(s, s.shape[1:]) for s in states3]
    return states, states[-1]


def classify(model: Model, z: Tensor) -> Tensor:
    """Pool a single utterance's final hidden states to class logits."""
    if z.ndim != 2:
        raise ShapeError(f"classify: expected [frames, hidden], got {z.shape}")
    mask = np.ones((1, z.shape[0]))
    pooled = _pool(model, T.reshape(z, (1,) + z.shape), mask)
    logits = pooled @ model["head.weight"] + model["head.bias"]
    return T.reshape(logits, (model.config.n_classes,))


def forward_utterance(model: Model, waveform) -> Tensor:
    """Raw waveform -> logits [n_classes] (the single-utterance pipeline)."""
    feats = feature_encoder_forward(model, waveform)
    _, z = context_forward(model, feats)
    return classify(model, z)


# ---------------------------------------------------------------------------
# student init and parameter accounting


def _compatible_for_init(teacher: ModelConfig, student: ModelConfig) -> str | None:
    if student.n_blocks * 2 != teacher.n_blocks:
        return f"student blocks {student.n_blocks} must be half of teacher blocks {teacher.n_blocks}"
    for attr in ("conv_layers", "hidden_dim", "n_heads", "ffn_dim", "n_classes", "pos_conv", "encoder_norm"):
        if getattr(teacher, attr) != getattr(student, attr):
            return f"teacher and student differ on {attr}"
    return None


def init_student_from_teacher(teacher: Model, student: Model) -> None:
    """Copy the teacher's encoder, projection and head into the student,
    and teacher block 2j into student block j (1-based). Bit-exact and
    idempotent; the student stays fully trainable."""
    problem = _compatible_for_init(teacher.config, student.config)
    if problem:
        raise ConfigError(f"init_student_from_teacher: {problem}")
    for name, p in student.params.items():
        if name.startswith("block"):
            b, rest = name.split(".", 1)
            j = int(b[len("block"):])
            src = f"block{2 * j + 1}.{rest}"  # 0-based: student j <- teacher 2j+1
        else:
            src = name
        p.data = teacher.params[src].data.copy()


def param_count(model: Model) -> int:
    return sum(p.data.size for p in model.params.values())


def param_count_analytic(config: ModelConfig) -> int:
    """Closed-form parameter count (no instantiation; usable at full scale)."""
    total = 0
    c_in = 1
    for c_out, k, _ in config.conv_layers:
        total += c_out * c_in * k + 3 * c_out  # weight + bias + norm affine
        c_in = c_out
    d = config.hidden_dim
    total += c_in * d + d
    if config.pos_conv is not None:
        k, groups = config.pos_conv
        total += d * (d // groups) * k + d
    per_block = 4 * d + 4 * (d * d + d) + (d * config.ffn_dim + config.ffn_dim) + (config.ffn_dim * d + d)
    total += config.n_blocks * per_block
    total += d * config.n_classes + config.n_classes
    return total


def transformer_param_count(config: ModelConfig) -> int:
    d = config.hidden_dim
    per_block = 4 * d + 4 * (d * d + d) + (d * config.ffn_dim + config.ffn_dim) + (config.ffn_dim * d + d)
    return config.n_blocks * per_block


# ---------------------------------------------------------------------------
# checkpoints: versioned binary container, little-endian f64 arrays
# (layout documented in docs/checkpoint_format.md)


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION
    optimizer: dict | None = None


def checkpoint_of(model: Model) -> Checkpoint:
    return Checkpoint(model.config, {k: v.data.copy() for k, v in model.params.items()})


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    model = build_model(ckpt.config, seed=0)
    if set(model.params) != set(ckpt.arrays):
        raise CheckpointError("checkpoint arrays do not match the declared config")
    for name, arr in ckpt.arrays.items():
        if model.params[name].data.shape != arr.shape:
            raise CheckpointError(f"checkpoint array {name} has shape {arr.shape}, expected "
                                  f"{model.params[name].data.shape}")
        model.params[name].data = arr.copy()
    return model


def _write_array(buf, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint truncated")
    return data


def _read_array(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = tuple(struct.unpack("<I", _read_exact(f, 4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return name, arr


def save_checkpoint(model_or_ckpt, path, optimizer_state: dict | None = None) -> None:
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else checkpoint_of(model_or_ckpt)
    opt = optimizer_state if optimizer_state is not None else ckpt.optimizer
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    cfg = ckpt.config.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name, arr in ckpt.arrays.items():
        _write_array(buf, name, arr)
    if opt is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        meta = json.dumps({"step": opt["step"]}, sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        moments = list(opt["m"].items()) + [(f"v::{k}", v) for k, v in opt["v"].items()]
        buf.write(struct.pack("<I", len(moments)))
        for name, arr in moments:
            _write_array(buf, name, arr)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a checkpoint file: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4))
        config = ModelConfig.from_json(_read_exact(f, cfg_len).decode("utf-8"))
        if expect_config is not None and config != expect_config:
            raise CheckpointError("checkpoint config does not match the expected config")
        (n_arrays,) = struct.unpack("<I", _read_exact(f, 4))
        arrays = dict(_read_array(f) for _ in range(n_arrays))
        optimizer = None
        (has_opt,) = struct.unpack("<B", _read_exact(f, 1))
        if has_opt:
            (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
            meta = json.loads(_read_exact(f, meta_len).decode("utf-8"))
            (n_moments,) = struct.unpack("<I", _read_exact(f, 4))
            m, v = {}, {}
            for _ in range(n_moments):
                name, arr = _read_array(f)
                if name.startswith("v::"):
                    v[name[3:]] = arr
                else:
                    m[name] = arr
            optimizer = {"step": meta["step"], "m": m, "v": v}
    return Checkpoint(config, arrays, version, optimizer)


def param_hash(model_or_ckpt) -> str:
    """sha256 over parameter names, shapes and raw bytes (order-sensitive)."""
    arrays = (
        model_or_ckpt.arrays
        if isinstance(model_or_ckpt, Checkpoint)
        else {k: v.data for k, v in model_or_ckpt.params.items()}
    )
    h = hashlib.sha256()
    for name, arr in arrays.items():
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
