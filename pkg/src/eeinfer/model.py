"""Toy decoder-only transformer with deterministic init and greedy decoding.

The forward pass is assembled from three pieces (embed_positions,
apply_layer_range, final_logits) so a sharded runner can execute exactly the
same arithmetic as the monolithic path, piece by piece. Every reduction goes
through the deterministic kernel in tensor_ops, which is what makes
"bit-identical output" a meaningful contract rather than a hope.

Sequences carry a domain tag (plaintext or ciphertext) and the model refuses
to run on the wrong one; that tag is the misuse guard the encryption layer
relies on.
"""
from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .containers import canonical_json, read_container, write_container
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    IntegrityError,
    RangeError,
    ShapeError,
    VersionError,
)
from .tensor_ops import activate, layer_norm, matmul, rms_norm, softmax_rows

PLAINTEXT = "plaintext"
CIPHERTEXT = "ciphertext"
DOMAINS = (PLAINTEXT, CIPHERTEXT)

NORM_KINDS = ("layernorm", "rmsnorm")
ACT_KINDS = ("relu", "gelu", "silu")
POS_KINDS = ("learned-absolute",)

MODEL_MAGIC = b"EEMODEL1"
MODEL_FORMAT_VERSION = 1

WEIGHT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters; weights are stored (in_dim, out_dim) so x @ W applies them."""

    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_head: int
    d_ff: int
    max_seq_len: int
    norm_kind: str = "layernorm"
    act_kind: str = "gelu"
    pos_kind: str = "learned-absolute"
    norm_eps: float | None = None  # None = per-kind default (1e-5 layernorm, 1e-6 rmsnorm)

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_head", "d_ff", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{name} must be an integer, got {v!r}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.max_seq_len < 1:
            raise ConfigError(f"max_seq_len must be >= 1, got {self.max_seq_len}")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_head, self.d_ff) < 1:
            raise ConfigError("d_model, n_layers, n_heads, d_head, d_ff must all be >= 1")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(
                f"n_heads * d_head must equal d_model "
                f"({self.n_heads} * {self.d_head} != {self.d_model})"
            )
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}, got {self.norm_kind!r}")
        if self.act_kind not in ACT_KINDS:
            raise ConfigError(f"act_kind must be one of {ACT_KINDS}, got {self.act_kind!r}")
        if self.pos_kind not in POS_KINDS:
            raise ConfigError(f"pos_kind must be one of {POS_KINDS}, got {self.pos_kind!r}")
        if self.norm_eps is not None and not (self.norm_eps > 0):
            raise ConfigError(f"norm_eps must be positive or None, got {self.norm_eps!r}")

    @property
    def effective_norm_eps(self) -> float:
        if self.norm_eps is not None:
            return self.norm_eps
        return 1e-5 if self.norm_kind == "layernorm" else 1e-6

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        # kinds and eps have defaults; the size fields must be present
        required = known - {"norm_eps", "norm_kind", "act_kind", "pos_kind"}
        missing = required - set(d)
        if missing:
            raise ConfigError(f"missing config fields: {sorted(missing)}")
        return cls(**d)


def make_config(
    vocab_size: int,
    d_model: int,
    n_layers: int,
    n_heads: int,
    d_ff: int,
    max_seq_len: int,
    **kwargs: object,
) -> ModelConfig:
    """Convenience constructor that derives d_head = d_model / n_heads."""
    if n_heads < 1 or d_model % n_heads != 0:
        raise ConfigError(f"d_model {d_model} is not divisible by n_heads {n_heads}")
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=d_model,
        n_layers=n_layers,
        n_heads=n_heads,
        d_head=d_model // n_heads,
        d_ff=d_ff,
        max_seq_len=max_seq_len,
        **kwargs,  # type: ignore[arg-type]
    )


def config_fingerprint(config: ModelConfig) -> str:
    """sha256 over the canonical JSON form; keys bind to this."""
    return hashlib.sha256(canonical_json(config.to_dict()).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TokenSeq:
    """Token ids plus the domain they live in. Cross-domain use is an error."""

    ids: tuple[int, ...]
    domain: str

    def __post_init__(self) -> None:
        if self.domain not in DOMAINS:
            raise DomainError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        ids = tuple(int(i) for i in self.ids)
        if any(i < 0 for i in ids):
            raise RangeError("token ids must be non-negative")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.ids)


def expected_tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor directory: names, shapes, and (for init) draw order."""
    d, v = config.d_model, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embedding": (v, d),
        "pos_embedding": (config.max_seq_len, d),
    }
    has_offset = config.norm_kind == "layernorm"
    for i in range(config.n_layers):
        p = f"layer{i}"
        shapes[f"{p}.attn_norm.gain"] = (d,)
        if has_offset:
            shapes[f"{p}.attn_norm.offset"] = (d,)
        for w in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{b}"] = (d,)
        shapes[f"{p}.ffn_norm.gain"] = (d,)
        if has_offset:
            shapes[f"{p}.ffn_norm.offset"] = (d,)
        shapes[f"{p}.ffn.W1"] = (d, config.d_ff)
        shapes[f"{p}.ffn.b1"] = (config.d_ff,)
        shapes[f"{p}.ffn.W2"] = (config.d_ff, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["final_norm.gain"] = (d,)
    if has_offset:
        shapes["final_norm.offset"] = (d,)
    shapes["lm_head.W"] = (d, v)
    shapes["lm_head.b"] = (v,)
    return shapes


class ModelBundle:
    """Immutable (config, domain, tensors) triple with shape validation."""

    __slots__ = ("config", "domain", "tensors")

    def __init__(self, config: ModelConfig, domain: str, tensors: Mapping[str, np.ndarray]) -> None:
        if domain not in DOMAINS:
            raise DomainError(f"domain must be one of {DOMAINS}, got {domain!r}")
        expected = expected_tensor_shapes(config)
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        if missing or extra:
            raise IntegrityError(
                f"tensor set disagrees with config (missing: {sorted(missing)}, "
                f"unexpected: {sorted(extra)})"
            )
        frozen: dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
            if arr.shape != shape:
                raise IntegrityError(
                    f"tensor {name!r} has shape {arr.shape}, config implies {shape}"
                )
            arr = arr.copy()
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "tensors", MappingProxyType(frozen))

    def __setattr__(self, name: str, value: object) -> None:
        raise AttributeError("ModelBundle is immutable")

    @property
    def fingerprint(self) -> str:
        return config_fingerprint(self.config)

    def replace_tensors(self, domain: str, tensors: Mapping[str, np.ndarray]) -> "ModelBundle":
        return ModelBundle(self.config, domain, tensors)


def init_model(config: ModelConfig, seed: int) -> ModelBundle:
    """Seeded deterministic init: weights and biases normal(0, 0.02), norm
    gains 1, norm offsets 0. Draw order is the expected_tensor_shapes order."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_tensor_shapes(config).items():
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape, dtype=np.float64)
        elif name.endswith(".offset"):
            tensors[name] = np.zeros(shape, dtype=np.float64)
        else:
            tensors[name] = rng.normal(0.0, WEIGHT_STD, size=shape)
    return ModelBundle(config, PLAINTEXT, tensors)


def _apply_norm(model: ModelBundle, prefix: str, x: np.ndarray) -> np.ndarray:
    cfg = model.config
    gain = model.tensors[f"{prefix}.gain"]
    if cfg.norm_kind == "layernorm":
        return layer_norm(x, gain, model.tensors[f"{prefix}.offset"], eps=cfg.effective_norm_eps)
    return rms_norm(x, gain, eps=cfg.effective_norm_eps)


def _validate_prompt(model: ModelBundle, tokens: TokenSeq, extra: int = 0) -> None:
    if tokens.domain != model.domain:
        raise DomainError(
            f"token sequence is {tokens.domain} but the model is {model.domain}; "
            "encrypt/decrypt at the boundary instead of mixing domains"
        )
    if len(tokens) == 0:
        raise ShapeError("prompt must contain at least one token")
    if len(tokens) + extra > model.config.max_seq_len:
        raise ShapeError(
            f"sequence length {len(tokens)}+{extra} exceeds max_seq_len "
            f"{model.config.max_seq_len}"
        )
    if max(tokens.ids) >= model.config.vocab_size:
        raise RangeError(
            f"token id {max(tokens.ids)} out of range for vocab_size {model.config.vocab_size}"
        )


def embed_positions(model: ModelBundle, ids: Sequence[int]) -> np.ndarray:
    """Token embedding plus learned absolute positional rows."""
    idx = np.asarray(ids, dtype=np.int64)
    return model.tensors["embedding"][idx] + model.tensors["pos_embedding"][: idx.shape[0]]


def apply_layer_range(model: ModelBundle, x: np.ndarray, first: int, last: int) -> np.ndarray:
    """Run layers first..last inclusive on a residual-stream state."""
    if not (0 <= first <= last < model.config.n_layers):
        raise ShapeError(
            f"layer range ({first}, {last}) invalid for n_layers {model.config.n_layers}"
        )
    cfg = model.config
    seq_len = x.shape[0]
    scale = math.sqrt(cfg.d_head)
    mask_rows, mask_cols = np.triu_indices(seq_len, k=1)
    for li in range(first, last + 1):
        p = f"layer{li}"
        normed = _apply_norm(model, f"{p}.attn_norm", x)
        q = matmul(normed, model.tensors[f"{p}.attn.Wq"]) + model.tensors[f"{p}.attn.bq"]
        k = matmul(normed, model.tensors[f"{p}.attn.Wk"]) + model.tensors[f"{p}.attn.bk"]
        v = matmul(normed, model.tensors[f"{p}.attn.Wv"]) + model.tensors[f"{p}.attn.bv"]
        ctx = np.empty((seq_len, cfg.d_model), dtype=np.float64)
        for h in range(cfg.n_heads):
            cols = slice(h * cfg.d_head, (h + 1) * cfg.d_head)
            scores = matmul(q[:, cols], k[:, cols].T) / scale
            scores[mask_rows, mask_cols] = -np.inf  # causal mask
            ctx[:, cols] = matmul(softmax_rows(scores), v[:, cols])
        x = x + (matmul(ctx, model.tensors[f"{p}.attn.Wo"]) + model.tensors[f"{p}.attn.bo"])
        normed = _apply_norm(model, f"{p}.ffn_norm", x)
        hidden = activate(
            cfg.act_kind,
            matmul(normed, model.tensors[f"{p}.ffn.W1"]) + model.tensors[f"{p}.ffn.b1"],
        )
        x = x + (matmul(hidden, model.tensors[f"{p}.ffn.W2"]) + model.tensors[f"{p}.ffn.b2"])
    return x


def final_logits(model: ModelBundle, x: np.ndarray) -> np.ndarray:
    x = _apply_norm(model, "final_norm", x)
    return matmul(x, model.tensors["lm_head.W"]) + model.tensors["lm_head.b"]


def forward(model: ModelBundle, tokens: TokenSeq) -> np.ndarray:
    """Per-position logits, shape (len(tokens), vocab_size)."""
    _validate_prompt(model, tokens)
    x = embed_positions(model, tokens.ids)
    x = apply_layer_range(model, x, 0, model.config.n_layers - 1)
    return final_logits(model, x)


def greedy_decode(model: ModelBundle, prompt: TokenSeq, n_new: int) -> TokenSeq:
    """Append argmax tokens one at a time; ties go to the lowest index."""
    if n_new < 0:
        raise RangeError(f"n_new must be >= 0, got {n_new}")
    _validate_prompt(model, prompt, extra=n_new)
    ids = list(prompt.ids)
    for _ in range(n_new):
        logits = forward(model, TokenSeq(tuple(ids), model.domain))
        ids.append(int(np.argmax(logits[-1])))
    return TokenSeq(tuple(ids), model.domain)


def first_token_confidence(model: ModelBundle, prompt: TokenSeq) -> float:
    """Softmax probability of the argmax token at the last prompt position."""
    logits = forward(model, prompt)
    probs = softmax_rows(logits[-1:, :])
    return float(np.max(probs))


def save_model(model: ModelBundle, path: str | Path) -> None:
    directory = []
    chunks: list[bytes] = []
    offset = 0
    for name in expected_tensor_shapes(model.config):
        arr = model.tensors[name]
        raw = arr.astype("<f8", copy=False).tobytes(order="C")
        directory.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "length": len(raw),
                "crc32": zlib.crc32(raw) & 0xFFFFFFFF,
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "domain": model.domain,
        "tensors": directory,
    }
    write_container(path, MODEL_MAGIC, header, b"".join(chunks))


def load_model(path: str | Path) -> ModelBundle:
    header, payload, payload_base = read_container(path, MODEL_MAGIC)
    version = header.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise VersionError(f"unsupported model format version {version!r}")
    for field_name in ("config", "domain", "tensors"):
        if field_name not in header:
            raise FormatError(f"model header missing {field_name!r} field")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (ConfigError, TypeError) as exc:
        raise FormatError(f"model header config is invalid: {exc}") from exc
    domain = header["domain"]
    if domain not in DOMAINS:
        raise FormatError(f"model header domain {domain!r} is invalid")
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            length = int(entry["length"])
            crc = int(entry["crc32"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed tensor directory entry: {exc}") from exc
        expected_len = int(np.prod(shape)) * 8 if shape else 8
        if length != expected_len:
            raise FormatError(
                f"tensor {name!r} length {length} disagrees with shape {shape}",
                offset=payload_base + offset,
            )
        if offset < 0 or offset + length > len(payload):
            raise FormatError(
                f"tensor {name!r} payload is truncated", offset=payload_base + offset
            )
        raw = payload[offset : offset + length]
        if (zlib.crc32(raw) & 0xFFFFFFFF) != crc:
            raise IntegrityError(f"tensor {name!r} failed its CRC32 check")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    return ModelBundle(config, domain, tensors)
