"""Universal multimodal transformer: embeddings, causal blocks, LM and regression heads."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericalError, Tensor
from .batch import SequenceBatch, as_batched
from .text import VIDEO_ID


class ConfigError(ValueError):
    pass


class CapacityError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    max_positions: int = 256
    d_v: int = 16
    d_a: int = 8
    dropout: float = 0.1
    ln_eps: float = 1e-5

    @property
    def feature_dim(self) -> int:
        return 2 * self.d_v + self.d_a

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def validate(self) -> None:
        if self.max_positions <= 0:
            raise ConfigError("max_positions must be positive")
        if self.n_heads <= 0 or self.hidden % self.n_heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by n_heads={self.n_heads}")
        if min(self.n_layers, self.vocab_size, self.hidden) <= 0 or self.feature_dim <= 0:
            raise ConfigError(f"non-positive dimension in {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


FULL_CONFIG = ModelConfig(n_layers=12, hidden=768, n_heads=12, vocab_size=50257,
                           max_positions=1024, d_v=2048, d_a=128)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    h, f = config.hidden, config.feature_dim
    shapes = {
        "wte": (config.vocab_size, h),
        "wpe": (config.max_positions, h),
        "video.w": (f, h),
        "video.b": (h,),
    }
    for i in range(config.n_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.g": (h,), p + "ln1.b": (h,),
            p + "attn.w_qkv": (h, 3 * h), p + "attn.b_qkv": (3 * h,),
            p + "attn.w_out": (h, h), p + "attn.b_out": (h,),
            p + "ln2.g": (h,), p + "ln2.b": (h,),
            p + "mlp.w_in": (h, 4 * h), p + "mlp.b_in": (4 * h,),
            p + "mlp.w_out": (4 * h, h), p + "mlp.b_out": (h,),
        })
    shapes.update({"ln_f.g": (h,), "ln_f.b": (h,), "reg.w": (h, f), "reg.b": (f,)})
    return shapes


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


class ModelParams:
    """Named learnable tensors plus the config they were built for."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise CheckpointError(f"parameter inventory mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise CheckpointError(f"{name}: shape {tensors[name].shape} != {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def dtype(self):
        return self["wte"].dtype

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.copy(), requires_grad=True, name=n)
                                         for n, t in self.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.astype(dtype), requires_grad=True, name=n)
                                         for n, t in self.items()})


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> ModelParams:
    """GPT-2 style init: weights ~ N(0, std^2), biases 0, layer-norm gains 1."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, std, size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ModelParams(config, tensors)


def embed_inputs(batch: SequenceBatch, params: ModelParams) -> Tensor:
    """WE[token] + PE[pos] + WE[segment] for text; VideoEmbedder(row) + PE + WE[[video]] for features."""
    batch = as_batched(batch)
    cfg = params.config
    if batch.positions.size and batch.positions.max() >= cfg.max_positions:
        raise CapacityError(f"position {int(batch.positions.max())} >= max_positions {cfg.max_positions}")
    dtype = params.dtype
    is_feat = batch.is_feature
    tok = ad.mul_const(ad.embedding(params["wte"], batch.token_ids), (~is_feat)[..., None])
    seg_ids = np.where(is_feat, VIDEO_ID, batch.segment_ids)
    x = ad.add(tok, ad.embedding(params["wte"], seg_ids))
    x = ad.add(x, ad.embedding(params["wpe"], batch.positions))
    if is_feat.any():
        feats = Tensor(batch.features.astype(dtype))
        vid = ad.add(ad.matmul(feats, params["video.w"]), params["video.b"])
        x = ad.add(x, ad.mul_const(vid, is_feat[..., None]))
    return x


def _attention(x: Tensor, params: ModelParams, prefix: str, causal: np.ndarray) -> Tensor:
    cfg = params.config
    h, hd = cfg.hidden, cfg.head_dim
    qkv = ad.add(ad.matmul(x, params[prefix + "w_qkv"]), params[prefix + "b_qkv"])
    heads = []
    for k in range(cfg.n_heads):
        q = ad.slice_last(qkv, k * hd, (k + 1) * hd)
        key = ad.slice_last(qkv, h + k * hd, h + (k + 1) * hd)
        v = ad.slice_last(qkv, 2 * h + k * hd, 2 * h + (k + 1) * hd)
        scores = ad.scale(ad.matmul(q, ad.transpose(key)), 1.0 / np.sqrt(hd))
        heads.append(ad.matmul(ad.softmax(scores, causal), v))
    merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=-1)
    return ad.add(ad.matmul(merged, params[prefix + "w_out"]), params[prefix + "b_out"])


def hidden_states(batch: SequenceBatch, params: ModelParams, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> Tensor:
    cfg = params.config
    batch = as_batched(batch)
    train = mode == "train" and cfg.dropout > 0
    if train and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    n = len(batch)
    causal = np.tril(np.ones((n, n), dtype=bool))
    x = embed_inputs(batch, params)
    if train:
        x = ad.dropout(x, cfg.dropout, rng)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        a = _attention(ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps),
                       params, p + "attn.", causal)
        if train:
            a = ad.dropout(a, cfg.dropout, rng)
        x = ad.add(x, a)
        m = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
        m = ad.gelu(ad.add(ad.matmul(m, params[p + "mlp.w_in"]), params[p + "mlp.b_in"]))
        m = ad.add(ad.matmul(m, params[p + "mlp.w_out"]), params[p + "mlp.b_out"])
        if train:
            m = ad.dropout(m, cfg.dropout, rng)
        x = ad.add(x, m)
        if not np.isfinite(x.data).all():
            raise NumericalError(f"non-finite activation after layer {i}")
    return ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"], cfg.ln_eps)


def forward(batch: SequenceBatch, params: ModelParams, mode: str = "eval",
            rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(lm_logits [..., L, V], feature_preds [..., L, feature_dim])``.

    Single-sequence input gets a leading batch axis of 1.
    """
    h = hidden_states(batch, params, mode, rng)
    logits = ad.matmul(h, ad.transpose(params["wte"]))
    preds = ad.add(ad.matmul(h, params["reg.w"]), params["reg.b"])
    return logits, preds


# --------------------------------------------------------------- checkpoint

MAGIC = b"MMDF"
FORMAT_VERSION = 1
_WIDTH = {4: "<f4", 8: "<f8"}


def save_checkpoint(path, params: ModelParams, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None, width: int | None = None) -> None:
    """Write config, metadata and named tensors.

    ``width`` is the value width in bytes (4 by default, 8 for bit-exact float64).
    ``extra`` tensors (optimizer state) are stored after the parameters.
    """
    width = width or (8 if params.dtype == np.float64 else 4)
    dt = _WIDTH[width]
    cfg = json.dumps(params.config.to_dict(), sort_keys=True).encode()
    meta_b = json.dumps(meta or {}, sort_keys=True).encode()
    named = [(n, t.data) for n, t in params.items()] + list((extra or {}).items())
    parts = [MAGIC, struct.pack("<III", FORMAT_VERSION, width, len(cfg)), cfg,
             struct.pack("<I", len(meta_b)), meta_b, struct.pack("<II", len(params), len(named))]
    for name, arr in named:
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected: ModelConfig | None = None, dtype=None):
    """Return ``(params, extra, meta)``; raises :class:`CheckpointError` on mismatch."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, width, clen = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if width not in _WIDTH:
        raise CheckpointError(f"{path}: unsupported value width {width}")
    off = 16
    config = ModelConfig.from_dict(json.loads(buf[off:off + clen]))
    off += clen
    if expected is not None and expected != config:
        raise CheckpointError(f"{path}: config {config} does not match expected {expected}")
    (mlen,) = struct.unpack_from("<I", buf, off)
    meta = json.loads(buf[off + 4:off + 4 + mlen])
    off += 4 + mlen
    n_params, n_total = struct.unpack_from("<II", buf, off)
    off += 8
    dt = np.dtype(_WIDTH[width])
    out_dtype = dtype or (np.float64 if width == 8 else np.float32)
    tensors, extra = {}, {}
    for k in range(n_total):
        (nlen,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4:off + 4 + nlen].decode()
        off += 4 + nlen
        (rank,) = struct.unpack_from("<I", buf, off)
        dims = struct.unpack_from(f"<{rank}I", buf, off + 4)
        off += 4 + 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype=dt, count=size, offset=off).reshape(dims).astype(out_dtype)
        off += size * width
        if k < n_params:
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        else:
            extra[name] = arr
    return ModelParams(config, tensors), extra, meta
