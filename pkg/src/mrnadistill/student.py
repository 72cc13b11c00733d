"""The trainable student: residual blocks, tap points, projection heads.

Each block applies a pre-norm residual update
    x <- x + dropout(act(affine(layer_norm(x))))
positionwise.  Two designated blocks are "taps": the residual stream
after the tap block is masked-mean-pooled over positions and pushed
through that tap's linear projection head into the teacher dimension.
The final embedding is the concatenation of the two pooled raw tap
vectors.  An optional logit head reads the last block's stream.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .rng import SeededRng
from .tokenizer import VOCAB_SIZE

CHECKPOINT_MAGIC = b"HNANOCKP"
CHECKPOINT_VERSION = 1


@dataclass
class StudentConfig:
    vocab_size: int = VOCAB_SIZE
    hidden_dim: int = 32
    n_blocks: int = 6
    tap_layers: tuple[int, ...] = (3, 6)
    proj_dims: tuple[int, ...] = (64, 64)
    activation: str = "gelu"
    dropout: float = 0.10
    layer_norm_eps: float = 1e-5
    logit_head: bool = False

    def __post_init__(self):
        self.tap_layers = tuple(self.tap_layers)
        self.proj_dims = tuple(self.proj_dims)
        if self.hidden_dim < 1 or self.n_blocks < 1:
            raise ConfigError("hidden_dim and n_blocks must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if list(self.tap_layers) != sorted(set(self.tap_layers)):
            raise ConfigError(f"tap_layers must be strictly increasing, got {self.tap_layers}")
        if not self.tap_layers or max(self.tap_layers) > self.n_blocks or min(self.tap_layers) < 1:
            raise ConfigError(f"tap_layers {self.tap_layers} must lie in [1, n_blocks={self.n_blocks}]")
        if len(self.proj_dims) != len(self.tap_layers):
            raise ConfigError("one projection dim per tap layer required")
        if self.activation not in ("tanh", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")


# published-scale dimensions: d_s=256 projected into 1942, taps at blocks 5 and 8
PUBLISHED_SCALE = StudentConfig(hidden_dim=256, n_blocks=8, tap_layers=(5, 8),
                             proj_dims=(1942, 1942))


def num_params(config: StudentConfig) -> int:
    """Exact trainable scalar count for a configuration."""
    d = config.hidden_dim
    total = config.vocab_size * d
    total += config.n_blocks * (2 * d + d * d + d)  # ln gain/bias + affine w/b
    for dt in config.proj_dims:
        total += d * dt + dt
    if config.logit_head:
        total += d * config.vocab_size + config.vocab_size
    return total


@dataclass
class StudentOutput:
    """One forward pass: raw and projected pooled tap embeddings, the
    concatenated final embedding, and logits when the head is enabled."""

    tap_raw: list[T.Tensor]
    tap_projected: list[T.Tensor]
    final_embedding: T.Tensor
    logits: T.Tensor | None = None


class StudentModel:
    """Parameter container plus the tape-recorded forward pass."""

    def __init__(self, config: StudentConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = SeededRng(seed).derive("student-init")
        d = config.hidden_dim

        def param(name, data):
            self._params[name] = T.Tensor(np.asarray(data, dtype=dtype), requires_grad=True)

        self._params: dict[str, T.Tensor] = {}
        param("embedding", rng.derive("embedding").normal((config.vocab_size, d)))
        for i in range(1, config.n_blocks + 1):
            brng = rng.derive(f"block{i}")
            param(f"block{i}.ln_gain", np.ones(d))
            param(f"block{i}.ln_bias", np.zeros(d))
            param(f"block{i}.w", brng.normal((d, d), std=1.0 / np.sqrt(d)))
            param(f"block{i}.b", np.zeros(d))
        for j, dt in enumerate(config.proj_dims, start=1):
            trng = rng.derive(f"tap{j}")
            param(f"tap{j}.w", trng.normal((d, dt), std=1.0 / np.sqrt(d)))
            param(f"tap{j}.b", np.zeros(dt))
        if config.logit_head:
            hrng = rng.derive("logit-head")
            param("logit_head.w", hrng.normal((d, config.vocab_size), std=1.0 / np.sqrt(d)))
            param("logit_head.b", np.zeros(config.vocab_size))

    def parameters(self) -> dict[str, T.Tensor]:
        return self._params

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def forward(self, tokens, mask, train: bool = False, dropout_rng: SeededRng | None = None,
                with_logits: bool | None = None) -> StudentOutput:
        cfg = self.config
        tokens = np.asarray(tokens)
        mask = np.asarray(mask, dtype=bool)
        if tokens.shape != mask.shape or tokens.ndim != 2:
            raise ShapeError(f"tokens {tokens.shape} and mask {mask.shape} must both be [B, L]")
        if train and cfg.dropout > 0.0 and dropout_rng is None:
            raise ConfigError("training forward with dropout requires a dropout_rng")
        p = self._params
        x = T.embedding_lookup(p["embedding"], tokens)
        tap_raw: list[T.Tensor] = []
        taps = set(cfg.tap_layers)
        for i in range(1, cfg.n_blocks + 1):
            h = T.layer_norm(x, p[f"block{i}.ln_gain"], p[f"block{i}.ln_bias"], cfg.layer_norm_eps)
            a = T.affine(h, p[f"block{i}.w"], p[f"block{i}.b"])
            z = T.activation(a, cfg.activation)
            z = T.dropout(z, cfg.dropout, dropout_rng, train)
            x = T.residual_add(x, z)
            if i in taps:
                tap_raw.append(T.masked_mean_pool(x, mask))
        tap_projected = [
            T.affine(e, p[f"tap{j}.w"], p[f"tap{j}.b"])
            for j, e in enumerate(tap_raw, start=1)
        ]
        final = tap_raw[0]
        for e in tap_raw[1:]:
            final = T.concat(final, e, axis=-1)
        logits = None
        if with_logits is None:
            with_logits = cfg.logit_head
        if with_logits:
            if not cfg.logit_head:
                raise ConfigError("logits requested but the config has no logit head")
            logits = T.affine(x, p["logit_head.w"], p["logit_head.b"])
        return StudentOutput(tap_raw=tap_raw, tap_projected=tap_projected,
                             final_embedding=final, logits=logits)

    # -- checkpointing ------------------------------------------------------

    def save(self, path) -> None:
        cfg_json = json.dumps(asdict(self.config)).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<H", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(cfg_json)))
            fh.write(cfg_json)
            for tensor in self._params.values():
                arr = np.ascontiguousarray(tensor.data, dtype="<f4")
                fh.write(struct.pack("<B", arr.ndim))
                for dim in arr.shape:
                    fh.write(struct.pack("<I", dim))
                fh.write(arr.tobytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "StudentModel":
        def take(fh, n: int) -> bytes:
            buf = fh.read(n)
            if len(buf) != n:
                raise FormatError(f"checkpoint truncated: wanted {n} bytes, got {len(buf)}")
            return buf

        with open(path, "rb") as fh:
            if take(fh, 8) != CHECKPOINT_MAGIC:
                raise FormatError("bad checkpoint magic")
            (version,) = struct.unpack("<H", take(fh, 2))
            if version != CHECKPOINT_VERSION:
                raise FormatError(f"unsupported checkpoint version {version}")
            (cfg_len,) = struct.unpack("<I", take(fh, 4))
            cfg_dict = json.loads(take(fh, cfg_len).decode("utf-8"))
            cfg_dict["tap_layers"] = tuple(cfg_dict["tap_layers"])
            cfg_dict["proj_dims"] = tuple(cfg_dict["proj_dims"])
            model = cls(StudentConfig(**cfg_dict), seed=0, dtype=dtype)
            for name, tensor in model._params.items():
                (rank,) = struct.unpack("<B", take(fh, 1))
                shape = tuple(struct.unpack("<I", take(fh, 4))[0] for _ in range(rank))
                if shape != tensor.data.shape:
                    raise FormatError(f"checkpoint param {name}: shape {shape} != expected {tensor.data.shape}")
                data = np.frombuffer(take(fh, 4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
                tensor.data = data.astype(dtype)
        return model
