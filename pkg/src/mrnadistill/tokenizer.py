"""Per-nucleotide tokenization to fixed-length token/mask pairs.

Vocabulary is deliberately minimal: PAD plus the four DNA bases plus N.
U folds into T (the teacher family tokenizes DNA letters) and every
IUPAC ambiguity code folds into N; both folds are recorded by
`canonicalize` so reports can state exactly what was collapsed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError, TokenizationError
from .genbank import AMBIGUITY_CODES

PAD_ID = 0
VOCAB = {"A": 1, "C": 2, "G": 3, "T": 4, "N": 5}
VOCAB_SIZE = 6

TOKENS_MAGIC = b"MRNATOKS"
TOKENS_VERSION = 1

_ID_TO_CHAR = np.array(["?", "A", "C", "G", "T", "N"])

# char code -> token id; -1 marks characters outside the alphabet
_ENCODE_TABLE = np.full(256, -1, dtype=np.int16)
for _ch, _tid in VOCAB.items():
    _ENCODE_TABLE[ord(_ch)] = _tid
    _ENCODE_TABLE[ord(_ch.lower())] = _tid
_ENCODE_TABLE[ord("U")] = VOCAB["T"]
_ENCODE_TABLE[ord("u")] = VOCAB["T"]
for _ch in AMBIGUITY_CODES:
    _ENCODE_TABLE[ord(_ch)] = VOCAB["N"]
    _ENCODE_TABLE[ord(_ch.lower())] = VOCAB["N"]


@dataclass
class TokenSequence:
    """Fixed-length token ids with a validity mask.

    The mask is true on a prefix and false on the suffix; tokens are PAD
    exactly where the mask is false.
    """

    tokens: np.ndarray  # uint8, length L
    mask: np.ndarray    # bool, length L
    original_length: int


def encode(sequence: str) -> np.ndarray:
    """One token id per character; U maps to T, ambiguity codes to N."""
    if not sequence:
        return np.zeros(0, dtype=np.uint8)
    raw = np.frombuffer(sequence.encode("ascii", errors="replace"), dtype=np.uint8)
    ids = _ENCODE_TABLE[raw]
    bad = np.nonzero(ids < 0)[0]
    if bad.size:
        pos = int(bad[0])
        raise TokenizationError(f"invalid character {sequence[pos]!r} at position {pos}")
    return ids.astype(np.uint8)


def decode(tokens) -> str:
    """Inverse of encode up to canonicalization; rejects PAD and bad ids."""
    ids = np.asarray(tokens)
    if ids.size == 0:
        return ""
    if np.any(ids == PAD_ID):
        raise TokenizationError("decode: PAD token in input")
    if np.any(ids >= VOCAB_SIZE):
        raise TokenizationError("decode: token id out of range")
    return "".join(_ID_TO_CHAR[ids])


def canonicalize(sequence: str) -> str:
    """Uppercase, U -> T, ambiguity codes -> N (decode(encode(s)))."""
    out = sequence.upper().replace("U", "T")
    for ch in AMBIGUITY_CODES:
        out = out.replace(ch, "N")
    return out


def uses_rna_alphabet(sequence: str) -> bool:
    """True when encoding will fold U into T (kept per sequence so the
    collapse stays reportable; the token file format itself stores only
    canonical ids)."""
    return "U" in sequence.upper()


def pad_or_truncate(tokens, context_length: int) -> TokenSequence:
    """Fit tokens to a fixed context: keep the 5' prefix, right-pad the rest."""
    if context_length < 1:
        raise ContractError(f"context_length must be >= 1, got {context_length}")
    ids = np.asarray(tokens, dtype=np.uint8)
    n = ids.shape[0]
    out = np.full(context_length, PAD_ID, dtype=np.uint8)
    kept = min(n, context_length)
    out[:kept] = ids[:kept]
    mask = np.zeros(context_length, dtype=bool)
    mask[:kept] = True
    return TokenSequence(tokens=out, mask=mask, original_length=n)


@dataclass
class TokenizedDataset:
    """A batchable block of tokenized sequences at one context length."""

    tokens: np.ndarray           # uint8 [n, L]
    original_lengths: np.ndarray  # int64 [n]

    @property
    def context_length(self) -> int:
        return self.tokens.shape[1]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def masks(self) -> np.ndarray:
        L = self.context_length
        return np.arange(L)[None, :] < np.minimum(self.original_lengths, L)[:, None]

    @classmethod
    def from_sequences(cls, sequences, context_length: int) -> "TokenizedDataset":
        rows = []
        lengths = []
        for seq in sequences:
            ts = pad_or_truncate(encode(seq), context_length)
            rows.append(ts.tokens)
            lengths.append(ts.original_length)
        n = len(rows)
        tokens = np.vstack(rows) if n else np.zeros((0, context_length), dtype=np.uint8)
        return cls(tokens=tokens, original_lengths=np.asarray(lengths, dtype=np.int64))


def write_tokens(dataset: TokenizedDataset, path) -> None:
    """Write a MRNATOKS file (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(TOKENS_MAGIC)
        fh.write(struct.pack("<H", TOKENS_VERSION))
        fh.write(struct.pack("<I", dataset.context_length))
        fh.write(struct.pack("<Q", len(dataset)))
        for i in range(len(dataset)):
            fh.write(struct.pack("<I", int(dataset.original_lengths[i])))
            fh.write(dataset.tokens[i].tobytes())


def read_tokens(path) -> TokenizedDataset:
    def take(fh, n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise FormatError(f"token file truncated: wanted {n} bytes, got {len(buf)}")
        return buf

    with open(path, "rb") as fh:
        if take(fh, 8) != TOKENS_MAGIC:
            raise FormatError("bad token-file magic")
        (version,) = struct.unpack("<H", take(fh, 2))
        if version != TOKENS_VERSION:
            raise FormatError(f"unsupported token-file version {version}")
        (L,) = struct.unpack("<I", take(fh, 4))
        (count,) = struct.unpack("<Q", take(fh, 8))
        tokens = np.zeros((count, L), dtype=np.uint8)
        lengths = np.zeros(count, dtype=np.int64)
        for i in range(count):
            (lengths[i],) = struct.unpack("<I", take(fh, 4))
            tokens[i] = np.frombuffer(take(fh, L), dtype=np.uint8)
    return TokenizedDataset(tokens=tokens, original_lengths=lengths)
