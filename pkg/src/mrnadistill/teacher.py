"""Frozen teachers: synthetic with controllable spectrum, or file-backed.

The synthetic teacher maps masked-mean-pooled token one-hot features
(dimension V) through a frozen affine+tanh expansion to width 64, then
through a frozen linear map with a controlled singular-value profile
into the teacher embedding dimension.  The linear map folds in a
whitening stage calibrated once, at construction, on a seeded reference
sample: over that reference distribution the output covariance spectrum
equals the configured sigma_k^2 profile (exactly on the calibration
sample itself, to sampling error on fresh draws).  Everything is frozen
after construction; forwards are bit-reproducible.

Optional logits are a frozen affine map of per-position one-hot features
plus seeded noise keyed on (sequence content, position), which creates
the spiky, position-dependent entropy regime that makes logit
distillation noisy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .rng import SeededRng, _GOLDEN, _mix
from .tokenizer import VOCAB_SIZE

DUMP_MAGIC = b"TEMBDUMP"
DUMP_VERSION = 1

EXPANSION_WIDTH = 64       # width of the frozen tanh feature expansion
CALIBRATION_SIZE = 8192    # reference sample used to calibrate whitening
REFERENCE_LENGTH = 256     # length of reference sequences
REFERENCE_SPREAD = 1.0     # composition logit spread of the reference set


@dataclass
class TeacherSpec:
    """Configuration for a frozen teacher.

    `spectrum` selects the singular-value profile of each layer's linear
    map: "geometric" uses sigma_k = decay^k for k < effective_rank;
    "spiked" uses sigma_0 = 1 with the remaining mass `tail_mass` spread
    flat over the other effective_rank-1 directions (one dominant
    direction plus a long tail, the block-12-like regime).
    """

    kind: str = "synthetic"                 # "synthetic" | "file"
    layer_dims: tuple[int, ...] = (1942, 1942)
    seed: int = 0
    effective_rank: tuple[int, ...] = (6, 6)
    decay: float = 0.5
    spectrum: str = "geometric"
    tail_mass: float = 0.04
    emit_logits: bool = False
    # logit noise is a keyed heavy-tailed mixture: every position gets
    # N(0, logit_noise^2) segments-modulated noise, and a `heavy_fraction`
    # of sequences get amplitude `logit_noise_heavy` throughout, which is
    # what makes per-batch KL erratic rather than CLT-smoothed
    logit_noise: float = 0.0
    logit_noise_heavy: float = 0.0
    heavy_fraction: float = 0.0
    dump_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "file"):
            raise ConfigError(f"unknown teacher kind {self.kind!r}")
        if len(self.effective_rank) != len(self.layer_dims):
            raise ConfigError("effective_rank must give one value per matched layer")
        for r, d in zip(self.effective_rank, self.layer_dims):
            if not 1 <= r <= min(d, EXPANSION_WIDTH):
                raise ConfigError(
                    f"effective_rank {r} must be in [1, min(layer_dim={d}, {EXPANSION_WIDTH})]")
        if self.spectrum not in ("geometric", "spiked"):
            raise ConfigError(f"unknown spectrum kind {self.spectrum!r}")


# named presets; desk-scale dims, spectra chosen to mirror the observed
# norm-layer (few components at every threshold) and block-12 (one
# dominant component, long tail at 99%) PCA regimes
PRESETS = {
    "rank1": dict(layer_dims=(64, 64), effective_rank=(1, 1), decay=0.5),
    "norm-like": dict(layer_dims=(64, 64), effective_rank=(6, 6), decay=0.9),
    "block12-like": dict(layer_dims=(64, 64), effective_rank=(48, 48),
                         spectrum="spiked", tail_mass=0.04),
    "desk": dict(layer_dims=(64, 64), effective_rank=(6, 6), decay=0.5),
    "desk-logit": dict(layer_dims=(64, 64), effective_rank=(6, 6), decay=0.5,
                       emit_logits=True, logit_noise=0.5, logit_noise_heavy=25.0,
                       heavy_fraction=0.03),
    "published-dims": dict(layer_dims=(1942, 1942), effective_rank=(6, 6), decay=0.9),
}


def preset_spec(name: str, seed: int = 0, **overrides) -> TeacherSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown teacher preset {name!r} (have {sorted(PRESETS)})")
    kwargs = dict(PRESETS[name])
    kwargs.update(overrides)
    return TeacherSpec(kind="synthetic", seed=seed, **kwargs)


def singular_values(spec: TeacherSpec, layer: int) -> np.ndarray:
    r = spec.effective_rank[layer]
    if spec.spectrum == "geometric":
        return spec.decay ** np.arange(r, dtype=np.float64)
    s = np.empty(r, dtype=np.float64)
    s[0] = 1.0
    if r > 1:
        s[1:] = np.sqrt(spec.tail_mass / (r - 1))
    return s


def pooled_composition(tokens: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked mean of token one-hots: [B, L] -> [B, V] float64."""
    tokens = np.asarray(tokens)
    mask = np.asarray(mask, dtype=bool)
    b, L = tokens.shape
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractError("pooled_composition: a row has an all-false mask")
    flat = (np.arange(b)[:, None] * VOCAB_SIZE + tokens).reshape(-1)
    freq = np.bincount(flat, weights=mask.reshape(-1).astype(np.float64),
                       minlength=b * VOCAB_SIZE).reshape(b, VOCAB_SIZE)
    return freq / counts[:, None]


def reference_sequences(n: int, rng: SeededRng, length: int = REFERENCE_LENGTH,
                        spread: float = REFERENCE_SPREAD) -> tuple[np.ndarray, np.ndarray]:
    """Seeded reference token sample: compositions are softmaxed normal
    logits over the five letter ids, realized as length-`length` rows."""
    logits = rng.normal((n, VOCAB_SIZE - 1), std=spread)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    edges = np.cumsum(probs, axis=1)
    u = rng.uniform((n, length))
    # vectorized per-row inverse CDF: count how many edges each u passes
    idx = (u[:, :, None] >= edges[:, None, :-1]).sum(axis=2)
    tokens = (idx + 1).astype(np.uint8)  # letter ids are 1..5
    mask = np.ones((n, length), dtype=bool)
    return tokens, mask


class _SyntheticLayer:
    """One matched layer's frozen map: V -> tanh(64) -> whiten -> sigma -> D."""

    def __init__(self, dim: int, sigma: np.ndarray, rng: SeededRng):
        h = EXPANSION_WIDTH
        r = sigma.shape[0]
        self.dim = dim
        self.sigma = sigma
        self.w1 = rng.derive("w1").normal((VOCAB_SIZE, h), std=2.5)
        self.b1 = rng.derive("b1").normal((h,), std=0.5)
        cal_tokens, cal_mask = reference_sequences(CALIBRATION_SIZE, rng.derive("calibration"))
        hcal = self._expand(pooled_composition(cal_tokens, cal_mask))
        self.h_mean = hcal.mean(axis=0)
        cov = np.cov(hcal, rowvar=False, bias=True)
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1][:r]
        lam = evals[order]
        if lam[-1] <= lam[0] * 1e-12:
            raise ConfigError(
                f"reference feature covariance cannot support effective_rank {r}")
        self.whiten = evecs[:, order] / np.sqrt(lam)  # [h, r]
        q, rr = np.linalg.qr(rng.derive("directions").normal((dim, r)))
        signs = np.where(np.diag(rr) >= 0, 1.0, -1.0)  # fix LAPACK sign convention
        self.directions = q * signs                    # [dim, r], orthonormal columns

    def _expand(self, comp: np.ndarray) -> np.ndarray:
        return np.tanh(comp @ self.w1 + self.b1)

    def forward(self, comp: np.ndarray) -> np.ndarray:
        z = (self._expand(comp) - self.h_mean) @ self.whiten
        return (z * self.sigma) @ self.directions.T


class SyntheticTeacher:
    """Frozen synthetic teacher with a controllable embedding spectrum."""

    def __init__(self, spec: TeacherSpec):
        if spec.kind != "synthetic":
            raise ConfigError(f"SyntheticTeacher requires kind='synthetic', got {spec.kind!r}")
        self.spec = spec
        root = SeededRng(spec.seed).derive("synthetic-teacher")
        self.layers = [
            _SyntheticLayer(dim, singular_values(spec, i), root.derive(f"layer{i}"))
            for i, dim in enumerate(spec.layer_dims)
        ]
        head_rng = root.derive("logit-head")
        # sharp signal part: clean positions are confidently predictable,
        # so unpredictable-noise positions carry a large KL penalty
        self._logit_w = head_rng.normal((VOCAB_SIZE, VOCAB_SIZE), std=4.0)
        self._logit_key = np.uint64(int(head_rng.uniform() * 2**53))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return self.spec.layer_dims

    def targets(self, tokens, mask, indices=None, dtype=np.float32) -> list[np.ndarray]:
        """Per-matched-layer pooled target embeddings, [B, D_l] each."""
        comp = pooled_composition(tokens, mask)
        return [layer.forward(comp).astype(dtype) for layer in self.layers]

    def logits(self, tokens, mask, indices=None, dtype=np.float32) -> np.ndarray:
        """Per-position logits [B, L, V]: token affine map + keyed noise.

        Noise is a frozen, deterministic function of (teacher seed, row
        content, position, vocab slot).  Its amplitude is modulated at
        two scales: segments of ~16 positions within a sequence switch
        between quiet and loud (regions of high entropy along the
        sequence), and a small keyed fraction of whole sequences is
        "heavy" with amplitude `logit_noise_heavy` (erratic per-batch
        KL).
        """
        if not self.spec.emit_logits:
            raise ConfigError("teacher spec does not emit logits")
        tokens = np.asarray(tokens)
        base = self._logit_w[tokens]  # [B, L, V]
        spec = self.spec
        if spec.logit_noise > 0.0 or spec.logit_noise_heavy > 0.0:
            keys = self._row_keys(tokens)
            amp = self._noise_amplitude(keys, tokens.shape[1])
            base = base + amp[:, :, None] * self._keyed_noise(keys, tokens.shape[1])
        return base.astype(dtype)

    def _row_keys(self, tokens: np.ndarray) -> np.ndarray:
        keys = np.full(tokens.shape[0], self._logit_key, dtype=np.uint64)
        for j in range(tokens.shape[1]):  # fold row content into the key
            keys = _mix(keys + tokens[:, j].astype(np.uint64) * _GOLDEN)
        return keys

    def _noise_amplitude(self, keys: np.ndarray, length: int) -> np.ndarray:
        """Per-(row, position) noise amplitude, [B, L]."""
        spec = self.spec
        heavy_u = (_mix(keys + np.uint64(0xD1B54A32D192ED03)) >> np.uint64(11)) * 2.0**-53
        amp_row = np.where(heavy_u < spec.heavy_fraction,
                           spec.logit_noise_heavy, spec.logit_noise)  # [B]
        seg = np.arange(length, dtype=np.uint64) // np.uint64(16)
        seg_grid = keys[:, None] + (seg[None, :] + np.uint64(1)) * np.uint64(0xA0761D6478BD642F)
        seg_u = (_mix(seg_grid) >> np.uint64(11)) * 2.0**-53
        seg_mult = np.where(seg_u < 0.15, 4.0, 1.0)  # loud segments
        return amp_row[:, None] * seg_mult

    def _keyed_noise(self, keys: np.ndarray, length: int) -> np.ndarray:
        """Standard-normal noise grid [B, L, V], bit-identical per input."""
        grid = (keys[:, None, None]
                + np.arange(1, length + 1, dtype=np.uint64)[None, :, None] * _GOLDEN
                + np.arange(1, VOCAB_SIZE + 1, dtype=np.uint64)[None, None, :] * np.uint64(0x9E3779B97F4A7C16))
        u1 = (_mix(grid) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u2 = (_mix(grid + np.uint64(1)) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def reference_sample(self, n: int, label: str = "calibration") -> tuple[np.ndarray, np.ndarray]:
        """Token sample from the calibration distribution.

        label="calibration" regenerates the exact sample the whitening
        stage was calibrated on (n must then be CALIBRATION_SIZE); other
        labels give fresh draws from the same distribution.
        """
        root = SeededRng(self.spec.seed).derive("synthetic-teacher")
        if label == "calibration":
            if n != CALIBRATION_SIZE:
                raise ContractError(f"calibration sample has exactly {CALIBRATION_SIZE} rows")
            # matches _SyntheticLayer construction for layer 0
            return reference_sequences(n, root.derive("layer0").derive("calibration"))
        return reference_sequences(n, root.derive(f"reference-{label}"))

    def fingerprint(self) -> int:
        """Cheap digest of all frozen parameters (frozen-ness checks)."""
        acc = 0
        for layer in self.layers:
            for arr in (layer.w1, layer.b1, layer.h_mean, layer.whiten,
                        layer.sigma, layer.directions):
                acc ^= hash(arr.tobytes())
        return acc ^ hash(self._logit_w.tobytes())


@dataclass
class TeacherOutput:
    """Targets for one sequence: one pooled vector per matched layer."""

    embeddings: list[np.ndarray]
    logits: np.ndarray | None = None


def write_dump(path, embeddings: list[np.ndarray], logits: np.ndarray | None = None) -> None:
    """Write per-layer embedding matrices (and optional logits) to a dump.

    `embeddings[l]` is [n, dim_l]; rows are sequences in dataset order.
    """
    if not embeddings:
        raise ContractError("write_dump requires at least one layer")
    n = embeddings[0].shape[0]
    if any(e.shape[0] != n for e in embeddings):
        raise ContractError("all layers must hold the same sequence count")
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<H", DUMP_VERSION))
        fh.write(struct.pack("<H", len(embeddings)))
        for e in embeddings:
            fh.write(struct.pack("<I", e.shape[1]))
        fh.write(struct.pack("<Q", n))
        if logits is not None:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<II", logits.shape[1], logits.shape[2]))
        else:
            fh.write(struct.pack("<B", 0))
        for i in range(n):
            for e in embeddings:
                fh.write(np.ascontiguousarray(e[i], dtype="<f4").tobytes())
        if logits is not None:
            for i in range(n):
                fh.write(np.ascontiguousarray(logits[i], dtype="<f4").tobytes())


class FileTeacher:
    """Teacher backed by a precomputed embedding dump.

    Targets are looked up by dataset row index, so the dump must be
    aligned with the token file it was computed from.
    """

    def __init__(self, path, expected_layer_dims: tuple[int, ...] | None = None):
        self.embeddings, self.logit_table = _read_dump(path)
        dims = tuple(e.shape[1] for e in self.embeddings)
        if expected_layer_dims is not None and dims != tuple(expected_layer_dims):
            raise FormatError(f"dump layer dims {dims} do not match expected {tuple(expected_layer_dims)}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return tuple(e.shape[1] for e in self.embeddings)

    def __len__(self) -> int:
        return self.embeddings[0].shape[0]

    def targets(self, tokens, mask, indices=None, dtype=np.float32) -> list[np.ndarray]:
        if indices is None:
            raise ContractError("FileTeacher.targets requires dataset row indices")
        return [e[indices].astype(dtype) for e in self.embeddings]

    def logits(self, tokens, mask, indices=None, dtype=np.float32) -> np.ndarray:
        if self.logit_table is None:
            raise ConfigError("dump carries no logits section")
        if indices is None:
            raise ContractError("FileTeacher.logits requires dataset row indices")
        return self.logit_table[indices].astype(dtype)


def _read_dump(path):
    def take(fh, n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise FormatError(f"dump truncated: wanted {n} bytes, got {len(buf)}")
        return buf

    with open(path, "rb") as fh:
        if take(fh, 8) != DUMP_MAGIC:
            raise FormatError("bad dump magic")
        (version,) = struct.unpack("<H", take(fh, 2))
        if version != DUMP_VERSION:
            raise FormatError(f"unsupported dump version {version}")
        (n_layers,) = struct.unpack("<H", take(fh, 2))
        if n_layers == 0:
            raise FormatError("dump has zero layers")
        dims = [struct.unpack("<I", take(fh, 4))[0] for _ in range(n_layers)]
        (count,) = struct.unpack("<Q", take(fh, 8))
        (has_logits,) = struct.unpack("<B", take(fh, 1))
        if has_logits:
            L, V = struct.unpack("<II", take(fh, 8))
        embeddings = [np.zeros((count, d), dtype=np.float32) for d in dims]
        for i in range(count):
            for l, d in enumerate(dims):
                embeddings[l][i] = np.frombuffer(take(fh, 4 * d), dtype="<f4")
        logits = None
        if has_logits:
            logits = np.zeros((count, L, V), dtype=np.float32)
            for i in range(count):
                logits[i] = np.frombuffer(take(fh, 4 * L * V), dtype="<f4").reshape(L, V)
    return embeddings, logits


def load_dump(path, expected_layer_dims: tuple[int, ...] | None = None) -> FileTeacher:
    return FileTeacher(path, expected_layer_dims=expected_layer_dims)
