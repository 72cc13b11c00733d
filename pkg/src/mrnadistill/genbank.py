"""GenBank flat-file ingestion: parse, categorize, subsample, shard.

The parser is a single-pass state machine over LOCUS...// blocks that
keeps only what training needs (accession, molecule type, organism +
lineage, ORIGIN sequence) and skips everything else verbatim.  It is
total: malformed blocks are counted as parse errors and skipped, never
raised.
"""

from __future__ import annotations

import gzip as _gzip
import io
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator

from .errors import ConfigError, ContractError, FormatError
from .rng import SeededRng, hash_to_unit

# nucleotide alphabet: canonical bases, U, N, and the IUPAC ambiguity codes
AMBIGUITY_CODES = "RYSWKMBDHV"
ALPHABET = frozenset("ACGTUN" + AMBIGUITY_CODES)

SHARD_MAGIC = b"MRNASHRD"
SHARD_VERSION = 1


class Category(IntEnum):
    MAMMAL = 0
    OTHER_VERTEBRATE = 1
    INVERTEBRATE = 2
    VIRAL = 3
    OTHER = 4


@dataclass
class GenBankRecord:
    """One parsed mRNA entry."""

    accession: str
    molecule_type: str
    organism: str
    lineage: list[str]
    category: Category
    sequence: str


@dataclass
class IngestStats:
    records_seen: int = 0
    records_kept: int = 0
    parse_errors: int = 0
    per_category: dict[str, int] = field(default_factory=dict)

    def count_kept(self, category: Category) -> None:
        self.records_kept += 1
        key = category.name
        self.per_category[key] = self.per_category.get(key, 0) + 1

    def as_dict(self) -> dict:
        return {
            "records_seen": self.records_seen,
            "records_kept": self.records_kept,
            "parse_errors": self.parse_errors,
            "per_category": dict(self.per_category),
        }


def categorize(lineage: Iterable[str]) -> Category:
    """Map an ORGANISM taxonomy list to one of the five categories."""
    taxa = {t.strip() for t in lineage}
    if "Mammalia" in taxa:
        return Category.MAMMAL
    if "Vertebrata" in taxa or "Craniata" in taxa:
        return Category.OTHER_VERTEBRATE
    if "Viruses" in taxa:
        return Category.VIRAL
    if "Metazoa" in taxa:
        return Category.INVERTEBRATE
    return Category.OTHER


# top-level GenBank section keywords; seeing one ends lineage continuation
_SECTION_KEYWORDS = (
    "DEFINITION", "ACCESSION", "VERSION", "DBLINK", "KEYWORDS", "SOURCE",
    "REFERENCE", "COMMENT", "PRIMARY", "FEATURES", "ORIGIN", "CONTIG",
)


def parse_gbff(stream, *, gzip: bool = False, stats: IngestStats | None = None) -> Iterator[GenBankRecord]:
    """Lazily parse GenBank flat-file records from a byte stream.

    Yields one record per LOCUS...// block that carries an ORIGIN
    section; blocks with a malformed LOCUS line, a missing/empty ORIGIN,
    characters outside the nucleotide alphabet, or a truncated tail are
    counted in `stats.parse_errors` and skipped.
    """
    if stats is None:
        stats = IngestStats()
    if isinstance(stream, (str, Path)):
        with open(stream, "rb") as fh:
            yield from parse_gbff(fh, gzip=gzip, stats=stats)
            return
    if gzip:
        stream = _gzip.open(stream, "rb")
    text = io.TextIOWrapper(stream, encoding="ascii", errors="replace")

    in_block = False
    block_bad = False
    locus_name = ""
    molecule_type = ""
    accession = ""
    organism = ""
    lineage_parts: list[str] = []
    seq_parts: list[str] = []
    saw_origin = False
    mode = ""  # "", "lineage", "origin"

    def finalize() -> GenBankRecord | None:
        nonlocal in_block
        in_block = False
        if block_bad or not saw_origin:
            stats.parse_errors += 1
            return None
        seq = "".join(seq_parts).upper()
        acc = accession or locus_name
        if not acc or not seq or not set(seq) <= ALPHABET:
            stats.parse_errors += 1
            return None
        lineage = [t.strip() for t in " ".join(lineage_parts).rstrip(".").split(";") if t.strip()]
        rec = GenBankRecord(
            accession=acc,
            molecule_type=molecule_type,
            organism=organism,
            lineage=lineage,
            category=categorize(lineage),
            sequence=seq,
        )
        stats.count_kept(rec.category)
        return rec

    for raw in text:
        line = raw.rstrip("\n").rstrip("\r")
        if line.startswith("LOCUS"):
            if in_block:  # previous block never closed
                stats.parse_errors += 1
            in_block = True
            block_bad = False
            stats.records_seen += 1
            tokens = line.split()
            if len(tokens) < 2:
                block_bad = True
                locus_name = ""
                molecule_type = ""
            else:
                locus_name = tokens[1]
                molecule_type = tokens[4] if len(tokens) >= 5 else ""
            accession = ""
            organism = ""
            lineage_parts = []
            seq_parts = []
            saw_origin = False
            mode = ""
            continue
        if not in_block:
            continue
        if line.startswith("//"):
            rec = finalize()
            if rec is not None:
                yield rec
            continue
        if mode == "origin":
            seq_parts.append("".join(c for c in line if c.isalpha()))
            continue
        if mode == "lineage":
            if line.startswith(" ") and line.strip() and not line.lstrip().startswith(_SECTION_KEYWORDS):
                lineage_parts.append(line.strip())
                continue
            mode = ""
        stripped = line.strip()
        if line.startswith("ACCESSION"):
            parts = stripped.split()
            if len(parts) > 1:
                accession = parts[1]
        elif stripped.startswith("ORGANISM"):
            organism = stripped[len("ORGANISM"):].strip()
            mode = "lineage"
        elif line.startswith("ORIGIN"):
            saw_origin = True
            mode = "origin"

    if in_block:  # EOF inside a block: truncated final record
        stats.parse_errors += 1


@dataclass
class CategoryTargets:
    """Target fraction per category; fractions must sum to 1."""

    fractions: dict[Category, float]

    def __post_init__(self):
        for cat in Category:
            self.fractions.setdefault(cat, 0.0)
        if any(f < 0 for f in self.fractions.values()):
            raise ConfigError("category fractions must be non-negative")
        total = sum(self.fractions.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"category fractions sum to {total!r}, expected 1")

    @classmethod
    def from_percentages(cls, other_vertebrate: float, mammal: float,
                         invertebrate: float, viral: float, other: float = 0.0) -> "CategoryTargets":
        """Build targets from percentages, normalizing away rounding slack.

        Published proportions often sum to slightly off 100 (e.g. 99.9);
        anything within 0.5 of 100 is renormalized, larger gaps are
        configuration errors.
        """
        raw = {
            Category.OTHER_VERTEBRATE: other_vertebrate,
            Category.MAMMAL: mammal,
            Category.INVERTEBRATE: invertebrate,
            Category.VIRAL: viral,
            Category.OTHER: other,
        }
        total = sum(raw.values())
        if abs(total - 100.0) > 0.5:
            raise ConfigError(f"category percentages sum to {total}, expected 100")
        return cls({c: v / total for c, v in raw.items()})


# published dataset mix: other vertebrates / mammals / invertebrates / viruses
PUBLISHED_MIX = CategoryTargets.from_percentages(43.6, 28.3, 26.4, 1.6)


def _quotas(targets: CategoryTargets, total: int) -> dict[Category, int]:
    q = {c: int(total * f + 0.5) for c, f in targets.fractions.items()}
    overshoot = sum(q.values()) - total
    for c in sorted(q, key=lambda c: -q[c]):
        if overshoot <= 0:
            break
        take = min(overshoot, q[c])
        q[c] -= take
        overshoot -= take
    return q


def subsample(records: Iterable[GenBankRecord], targets: CategoryTargets,
              total: int, seed: int) -> tuple[list[GenBankRecord], IngestStats]:
    """Single-pass per-category reservoir subsampling to target fractions.

    Deterministic in (stream, targets, total, seed); output preserves
    stream order.  Reservoir caps sit at `total` (not at the quota) so a
    category's shortfall can be redistributed proportionally to the
    others after the pass; memory is O(categories x total) records.
    """
    if total < 1:
        raise ContractError(f"subsample total must be >= 1, got {total}")
    rng = SeededRng(seed).derive("subsample")
    stats = IngestStats()
    reservoirs: dict[Category, list[tuple[int, GenBankRecord]]] = {c: [] for c in Category}
    counts = {c: 0 for c in Category}
    for rec in records:
        idx = stats.records_seen
        stats.records_seen += 1
        c = rec.category
        counts[c] += 1
        res = reservoirs[c]
        if len(res) < total:
            res.append((idx, rec))
        else:
            j = rng.integers(counts[c])
            if j < total:
                res[j] = (idx, rec)

    quotas = _quotas(targets, total)
    keep = {c: min(quotas[c], len(reservoirs[c])) for c in Category}
    budget = min(total, sum(len(r) for r in reservoirs.values()))
    remaining = budget - sum(keep.values())
    while remaining > 0:
        headroom = {c: len(reservoirs[c]) - keep[c] for c in Category}
        open_cats = [c for c in Category if headroom[c] > 0]
        if not open_cats:
            break
        weight = sum(targets.fractions[c] for c in open_cats)
        progress = 0
        for c in open_cats:
            if weight > 0:
                # zero-target categories wait until the weighted ones drain
                if targets.fractions[c] == 0:
                    continue
                want = max(int(remaining * targets.fractions[c] / weight + 0.5), 1)
            else:
                want = remaining  # only zero-weight categories remain open
            extra = min(want, headroom[c], remaining - progress)
            keep[c] += extra
            progress += extra
        remaining -= progress
        if progress == 0:
            break

    selected: list[tuple[int, GenBankRecord]] = []
    for c in Category:
        res = reservoirs[c]
        k = keep[c]
        if k >= len(res):
            chosen = res
        else:
            order = rng.permutation(len(res))[:k]
            chosen = [res[i] for i in order]
        selected.extend(chosen)
        if k > 0:
            stats.per_category[c.name] = len(chosen)
    selected.sort(key=lambda pair: pair[0])
    stats.records_kept = len(selected)
    return [rec for _, rec in selected], stats


def write_shard(records: list[GenBankRecord], path) -> None:
    """Write records to a binary shard (little-endian, magic MRNASHRD)."""
    if not records:
        raise ContractError("write_shard requires a non-empty record list")
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<H", SHARD_VERSION))
        fh.write(struct.pack("<Q", len(records)))
        for rec in records:
            acc = rec.accession.encode("ascii")
            seq = rec.sequence.encode("ascii")
            fh.write(struct.pack("<H", len(acc)))
            fh.write(acc)
            fh.write(struct.pack("<B", int(rec.category)))
            fh.write(struct.pack("<I", len(seq)))
            fh.write(seq)


def read_shard(path) -> list[GenBankRecord]:
    """Read a shard back; raises FormatError on bad magic/version/truncation.

    Only the stored triple (accession, category, sequence) is recovered;
    organism/lineage fields come back empty.
    """
    def take(fh, n: int) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise FormatError(f"shard truncated: wanted {n} bytes, got {len(buf)}")
        return buf

    records = []
    with open(path, "rb") as fh:
        if take(fh, 8) != SHARD_MAGIC:
            raise FormatError("bad shard magic")
        (version,) = struct.unpack("<H", take(fh, 2))
        if version != SHARD_VERSION:
            raise FormatError(f"unsupported shard version {version}")
        (count,) = struct.unpack("<Q", take(fh, 8))
        for _ in range(count):
            (alen,) = struct.unpack("<H", take(fh, 2))
            acc = take(fh, alen).decode("ascii")
            (code,) = struct.unpack("<B", take(fh, 1))
            try:
                category = Category(code)
            except ValueError as exc:
                raise FormatError(f"unknown category code {code}") from exc
            (slen,) = struct.unpack("<I", take(fh, 4))
            seq = take(fh, slen).decode("ascii")
            records.append(GenBankRecord(accession=acc, molecule_type="", organism="",
                                         lineage=[], category=category, sequence=seq))
    return records


def split_by_accession(records: list[GenBankRecord], fraction: float,
                       seed: int) -> tuple[list[GenBankRecord], list[GenBankRecord]]:
    """Deterministic held-out split by seeded hash of the accession."""
    train, held = [], []
    for rec in records:
        (held if hash_to_unit(rec.accession, seed) < fraction else train).append(rec)
    return train, held


_LINEAGES = {
    Category.MAMMAL: ["Eukaryota", "Metazoa", "Chordata", "Craniata", "Vertebrata", "Mammalia"],
    Category.OTHER_VERTEBRATE: ["Eukaryota", "Metazoa", "Chordata", "Craniata", "Vertebrata", "Actinopterygii"],
    Category.INVERTEBRATE: ["Eukaryota", "Metazoa", "Arthropoda", "Insecta"],
    Category.VIRAL: ["Viruses", "Riboviria"],
    Category.OTHER: ["Eukaryota", "Fungi", "Ascomycota"],
}


def synthetic_records(n: int, seed: int, *, length_range: tuple[int, int] = (60, 200),
                      category_counts: dict[Category, int] | None = None,
                      composition_spread: float = 0.0) -> list[GenBankRecord]:
    """Generate synthetic mRNA-like records for desk-scale runs and tests.

    Each record's ACGT composition is a softmax of N(0, spread^2) logits:
    spread 0 gives uniform sequences, larger values spread compositions
    across the simplex (more signal for the synthetic teacher to expose).
    """
    import numpy as np

    rng = SeededRng(seed).derive("synthetic-records")
    if category_counts is None:
        category_counts = {Category.OTHER: n}
    if sum(category_counts.values()) != n:
        raise ConfigError("category_counts must sum to n")
    cats: list[Category] = []
    for c in Category:
        cats.extend([c] * category_counts.get(c, 0))
    cats = rng.shuffled(cats)

    letters = "ACGT"
    lo, hi = length_range
    records = []
    for i in range(n):
        length = lo + rng.integers(hi - lo + 1)
        if composition_spread == 0.0:
            probs = np.full(4, 0.25)
        else:
            logits = rng.normal((4,), std=composition_spread)
            e = np.exp(logits - logits.max())
            probs = e / e.sum()
        edges = np.cumsum(probs)
        u = rng.uniform((length,))
        seq_idx = np.searchsorted(edges[:-1], u, side="right")
        seq = "".join(letters[j] for j in seq_idx)
        cat = cats[i]
        records.append(GenBankRecord(
            accession=f"SYN{i:07d}",
            molecule_type="mRNA",
            organism="synthetic",
            lineage=list(_LINEAGES[cat]),
            category=cat,
            sequence=seq,
        ))
    return records
