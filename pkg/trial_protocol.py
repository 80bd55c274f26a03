"""
Embedding, trial and enrollment file handling plus adaptation-set sampling.

FILE FORMATS (UTF-8, Unix newlines):
- Embeddings, TEXT:
      dim <d>
      <utt_id> <spk_id|-> <attack_id|-> <b|s> v1 ... vd
- Embeddings, BINARY (little-endian):
      b"EMB1", u32 dim, u32 count, then per record
      u16 len + utf-8 utt_id, u16 len + spk_id (0 = absent),
      u16 len + attack_id (0 = absent), u8 bonafide, f32 x dim
- Trials TSV:          model_id  test_utt  target|nontarget|spoof  attack_id|-
- Enrollment map TSV:  model_id  utt_id   (one row per enrollment utterance)

SAMPLING STRATEGIES:
- bonafide         the bonafide set as is
- bonafide+spoof   union of bonafide and spoofed sets
- per-spk          m/2 bonafide spread over speakers, m/2 spoofed spread over speakers
- per-attack       m/2 bonafide spread over speakers, m/2 spoofed spread over attacks
- per-both         m/2 bonafide spread over speakers, m/2 spoofed spread over
                   (speaker, attack) cells
Quotas are floor(q / cells) with the remainder handed out one by one to the
cells in sorted key order. Draws are uniform without replacement from a
generator seeded with the plan's seed, so a plan always yields the same set.
"""
import logging
import os
import re
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from backend_errors import (
    ConfigError,
    DataError,
    InfeasiblePlanError,
    ParseError,
    ShapeError,
)

logger = logging.getLogger(__name__)

EMBEDDING_MAGIC = b"EMB1"
ABSENT = "-"

# Trial counts of the ASVspoof 2019 ASV protocols
TRIAL_STATISTICS = {
    ("la", "dev"): {"target": 1484, "nontarget": 5768, "spoof": 22296},
    ("la", "eval"): {"target": 5370, "nontarget": 33327, "spoof": 63882},
    ("pa", "dev"): {"target": 2700, "nontarget": 14040, "spoof": 24300},
    ("pa", "eval"): {"target": 12960, "nontarget": 123930, "spoof": 116640},
}


class EmbeddingFormat(str, Enum):
    TEXT = "text"
    BINARY = "binary"


class TrialKey(str, Enum):
    TARGET = "target"
    NONTARGET = "nontarget"
    SPOOF = "spoof"


class SampleStrategy(str, Enum):
    BONAFIDE_ONLY = "bonafide"
    BONAFIDE_PLUS_SPOOF = "bonafide+spoof"
    PER_SPK = "per-spk"
    PER_ATTACK = "per-attack"
    PER_BOTH = "per-both"


BALANCED_STRATEGIES = (SampleStrategy.PER_SPK, SampleStrategy.PER_ATTACK, SampleStrategy.PER_BOTH)


def _optional(value):
    if value is None:
        return None
    if isinstance(value, float) and np.isnan(value):
        return None
    return str(value)


@contextmanager
def atomic_output(path, mode="w"):
    """Write to a temporary file next to `path` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        if "b" in mode:
            fh = os.fdopen(fd, mode)
        else:
            fh = os.fdopen(fd, mode, encoding="utf-8", newline="\n")
        with fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def utf8_error(path, error):
    """ParseError pointing at the first line of `path` that is not valid UTF-8."""
    data = Path(path).read_bytes()
    try:
        data.decode("utf-8")
    except UnicodeDecodeError as e:
        line_number = data.count(b"\n", 0, e.start) + 1
        return ParseError(f"invalid UTF-8 ({e.reason})", path, f"line {line_number}")
    return ParseError(f"invalid UTF-8 ({error.reason})", path)


def read_text_table(path, names, sep=r"\s+", skip_blank_lines=True):
    """
    Read a header-less text table of exactly len(names) string columns.

    Returns None for an empty file. Missing trailing fields come back as "";
    a row with extra fields is a ParseError on its 1-based line.
    """
    n = len(names)
    try:
        # spare last column catches rows with an extra field
        table = pd.read_csv(
            path, sep=sep, header=None, names=list(range(n + 1)), dtype=str, index_col=False,
            keep_default_na=False, na_filter=False, skip_blank_lines=skip_blank_lines,
        )
    except pd.errors.EmptyDataError:
        return None
    except UnicodeDecodeError as e:
        raise utf8_error(path, e) from e
    except (pd.errors.ParserError, ValueError) as e:
        ragged = re.search(r"in line (\d+), saw (\d+)", str(e))
        if ragged:
            raise ParseError(f"expected {n} fields, found {ragged.group(2)}", path,
                             f"line {ragged.group(1)}") from e
        raise ParseError(str(e), path) from e
    if table.empty:
        return None
    table = table.fillna("")
    extra = (table[n] != "").to_numpy()
    if extra.any():
        raise ParseError(f"expected {n} fields, found more", path, f"line {int(np.flatnonzero(extra)[0]) + 1}")
    table = table.drop(columns=n)
    table.columns = names
    return table


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """
    Named fixed-dimension vectors with optional speaker / attack labels.

    `labels` has one row per record with columns utt_id, speaker_id,
    attack_id (None when absent) and bonafide; `vectors` is (n, dim) float64
    in the same row order.
    """
    dim: int
    labels: pd.DataFrame
    vectors: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise ShapeError(f"Embedding dimension must be positive, got {self.dim}")
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.size == 0:
            vectors = vectors.reshape(0, self.dim)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise ShapeError(f"Vectors have shape {vectors.shape}, expected (n, {self.dim})")
        if vectors.shape[0] != len(self.labels):
            raise ShapeError(f"{vectors.shape[0]} vectors but {len(self.labels)} label rows")
        if not np.all(np.isfinite(vectors)):
            bad = int(np.flatnonzero(~np.isfinite(vectors).all(axis=1))[0])
            raise DataError(f"Non-finite values in vector '{self.labels['utt_id'].iloc[bad]}'")
        dup = self.labels["utt_id"].duplicated()
        if dup.any():
            raise DataError(f"Duplicate utt_id '{self.labels['utt_id'][dup].iloc[0]}'")
        spoof_bonafide = self.labels["attack_id"].notna() & self.labels["bonafide"]
        if spoof_bonafide.any():
            raise DataError(
                f"Utterance '{self.labels['utt_id'][spoof_bonafide].iloc[0]}' has an attack id "
                "but is marked bonafide"
            )
        vectors = vectors.copy()
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def from_records(cls, dim, utt_ids, vectors, speaker_ids=None, attack_ids=None, bonafide=None):
        n = len(utt_ids)
        speaker_ids = [None] * n if speaker_ids is None else [_optional(s) for s in speaker_ids]
        attack_ids = [None] * n if attack_ids is None else [_optional(a) for a in attack_ids]
        if bonafide is None:
            bonafide = [a is None for a in attack_ids]
        labels = pd.DataFrame({
            "utt_id": pd.Series([str(u) for u in utt_ids], dtype=object),
            "speaker_id": pd.Series(speaker_ids, dtype=object),
            "attack_id": pd.Series(attack_ids, dtype=object),
            "bonafide": pd.Series([bool(b) for b in bonafide], dtype=bool),
        })
        vectors = np.asarray(vectors, dtype=np.float64).reshape(n, dim)
        return cls(dim=int(dim), labels=labels, vectors=vectors)

    @classmethod
    def empty(cls, dim):
        return cls.from_records(dim, [], np.zeros((0, dim)))

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        if not sets:
            raise DataError("Nothing to concatenate")
        dims = {s.dim for s in sets}
        if len(dims) != 1:
            raise ShapeError(f"Cannot concatenate sets of dimensions {sorted(dims)}")
        labels = pd.concat([s.labels for s in sets], ignore_index=True)
        for column in ("speaker_id", "attack_id"):
            labels[column] = pd.Series([_optional(v) for v in labels[column]], dtype=object)
        labels["bonafide"] = labels["bonafide"].astype(bool)
        return cls(dim=sets[0].dim, labels=labels, vectors=np.vstack([s.vectors for s in sets]))

    def __len__(self):
        return len(self.labels)

    @property
    def utt_ids(self):
        return self.labels["utt_id"].tolist()

    @property
    def speaker_ids(self):
        return [_optional(s) for s in self.labels["speaker_id"]]

    @property
    def attack_ids(self):
        return [_optional(a) for a in self.labels["attack_id"]]

    @property
    def bonafide(self):
        return self.labels["bonafide"].to_numpy(dtype=bool)

    @property
    def has_speaker_labels(self):
        return len(self) > 0 and self.labels["speaker_id"].notna().all()

    def index_of(self):
        return {u: i for i, u in enumerate(self.labels["utt_id"])}

    def subset(self, rows):
        rows = np.asarray(rows)
        rows = np.flatnonzero(rows) if rows.dtype == bool else rows.astype(np.intp)
        labels = self.labels.iloc[rows].reset_index(drop=True)
        return EmbeddingSet(dim=self.dim, labels=labels, vectors=self.vectors[rows])

    def with_vectors(self, vectors):
        vectors = np.asarray(vectors, dtype=np.float64)
        return EmbeddingSet(dim=vectors.shape[1], labels=self.labels.copy(), vectors=vectors)

    def equals(self, other):
        return (
            self.dim == other.dim
            and self.labels.equals(other.labels)
            and np.array_equal(self.vectors, other.vectors)
        )


# ---------------------------------------------------------------------------
# Embedding files
# ---------------------------------------------------------------------------

def parse_embedding_line(line, dim, line_number, path=None):
    """Parse one TEXT record into (utt_id, spk_id, attack_id, bonafide, values)."""
    fields = line.split()
    if len(fields) != dim + 4:
        raise ParseError(f"expected {dim + 4} fields, found {len(fields)}", path, f"line {line_number}")
    utt_id, spk, attack, flag = fields[:4]
    if flag not in ("b", "s"):
        raise ParseError(f"bonafide flag must be 'b' or 's', got '{flag}'", path, f"line {line_number}")
    try:
        values = np.array([float(v) for v in fields[4:]], dtype=np.float64)
    except ValueError as e:
        raise ParseError(f"bad number: {e}", path, f"line {line_number}") from e
    if not np.all(np.isfinite(values)):
        raise ParseError("non-finite value", path, f"line {line_number}")
    return (
        utt_id,
        None if spk == ABSENT else spk,
        None if attack == ABSENT else attack,
        flag == "b",
        values,
    )


def _load_text_embeddings(path):
    records = []
    seen = set()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline()
            parts = header.split()
            if len(parts) != 2 or parts[0] != "dim":
                raise ParseError("first line must be 'dim <d>'", path, "line 1")
            try:
                dim = int(parts[1])
            except ValueError as e:
                raise ParseError(f"bad dimension '{parts[1]}'", path, "line 1") from e
            if dim < 1:
                raise ParseError(f"dimension must be positive, got {dim}", path, "line 1")
            for line_number, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                record = parse_embedding_line(line, dim, line_number, path)
                if record[0] in seen:
                    raise ParseError(f"duplicate utt_id '{record[0]}'", path, f"line {line_number}")
                if record[2] is not None and record[3]:
                    raise ParseError(f"'{record[0]}' has an attack id but is marked bonafide",
                                     path, f"line {line_number}")
                seen.add(record[0])
                records.append(record)
    except UnicodeDecodeError as e:
        raise utf8_error(path, e) from e
    return dim, records


def _read_string(buffer, offset, path, index):
    if offset + 2 > len(buffer):
        raise ParseError("truncated record", path, f"record {index}")
    (length,) = struct.unpack_from("<H", buffer, offset)
    offset += 2
    if offset + length > len(buffer):
        raise ParseError("truncated record", path, f"record {index}")
    try:
        text = bytes(buffer[offset:offset + length]).decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(f"invalid UTF-8 id: {e}", path, f"record {index}") from e
    return text, offset + length


def _load_binary_embeddings(path):
    buffer = Path(path).read_bytes()
    if buffer[:4] != EMBEDDING_MAGIC:
        raise ParseError(f"bad magic {buffer[:4]!r}, expected {EMBEDDING_MAGIC!r}", path, "header")
    if len(buffer) < 12:
        raise ParseError("truncated header", path, "header")
    dim, count = struct.unpack_from("<II", buffer, 4)
    if dim < 1:
        raise ParseError(f"dimension must be positive, got {dim}", path, "header")
    offset = 12
    records = []
    seen = set()
    for index in range(count):
        utt_id, offset = _read_string(buffer, offset, path, index)
        spk, offset = _read_string(buffer, offset, path, index)
        attack, offset = _read_string(buffer, offset, path, index)
        if offset + 1 + 4 * dim > len(buffer):
            raise ParseError("truncated record", path, f"record {index}")
        bonafide = buffer[offset] != 0
        offset += 1
        values = np.frombuffer(buffer, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += 4 * dim
        if not utt_id:
            raise ParseError("empty utt_id", path, f"record {index}")
        if utt_id in seen:
            raise ParseError(f"duplicate utt_id '{utt_id}'", path, f"record {index}")
        if not np.all(np.isfinite(values)):
            raise ParseError("non-finite value", path, f"record {index}")
        if attack and bonafide:
            raise ParseError(f"'{utt_id}' has an attack id but is marked bonafide", path, f"record {index}")
        seen.add(utt_id)
        records.append((utt_id, spk or None, attack or None, bonafide, values))
    if offset != len(buffer):
        raise ParseError(f"{len(buffer) - offset} unexpected trailing bytes", path, f"record {count}")
    return dim, records


def load_embeddings(path, format=EmbeddingFormat.TEXT):
    format = EmbeddingFormat(format)
    if format is EmbeddingFormat.TEXT:
        dim, records = _load_text_embeddings(path)
    else:
        dim, records = _load_binary_embeddings(path)
    if records:
        utt_ids, spk_ids, attack_ids, bonafide, values = zip(*records)
        # both formats hold float32 values, kept in float64 for the numerics
        vectors = np.vstack(values).astype(np.float32).astype(np.float64)
        embeddings = EmbeddingSet.from_records(dim, utt_ids, vectors, spk_ids, attack_ids, bonafide)
    else:
        embeddings = EmbeddingSet.empty(dim)
    logger.debug(f"Loaded {len(embeddings)} embeddings of dim {dim} from '{path}'")
    return embeddings


def _check_text_id(value, what):
    if value is not None and (not value or any(c.isspace() for c in value) or value == ABSENT):
        raise DataError(f"{what} '{value}' cannot be written to a whitespace-separated file")


def write_embeddings(embeddings, path, format=EmbeddingFormat.TEXT):
    format = EmbeddingFormat(format)
    vectors32 = embeddings.vectors.astype("<f4")
    rows = zip(embeddings.utt_ids, embeddings.speaker_ids, embeddings.attack_ids, embeddings.bonafide)
    if format is EmbeddingFormat.TEXT:
        with atomic_output(path, "w") as fh:
            fh.write(f"dim {embeddings.dim}\n")
            for (utt_id, spk, attack, bonafide), values in zip(rows, vectors32):
                _check_text_id(utt_id, "utt_id")
                _check_text_id(spk, "speaker_id")
                _check_text_id(attack, "attack_id")
                numbers = " ".join(f"{float(v):.9g}" for v in values)
                fh.write(f"{utt_id} {spk or ABSENT} {attack or ABSENT} {'b' if bonafide else 's'} {numbers}\n")
    else:
        with atomic_output(path, "wb") as fh:
            fh.write(EMBEDDING_MAGIC)
            fh.write(struct.pack("<II", embeddings.dim, len(embeddings)))
            for (utt_id, spk, attack, bonafide), values in zip(rows, vectors32):
                for text in (utt_id, spk or "", attack or ""):
                    raw = text.encode("utf-8")
                    fh.write(struct.pack("<H", len(raw)))
                    fh.write(raw)
                fh.write(struct.pack("<B", 1 if bonafide else 0))
                fh.write(values.tobytes())
    logger.debug(f"Wrote {len(embeddings)} embeddings to '{path}'")


# ---------------------------------------------------------------------------
# Trials and enrollment maps
# ---------------------------------------------------------------------------

TRIAL_COLUMNS = ["model_id", "test_utt", "key", "attack_id"]


@dataclass(frozen=True, eq=False)
class TrialList:
    """Trials as a DataFrame with columns model_id, test_utt, key, attack_id."""
    table: pd.DataFrame

    @classmethod
    def from_rows(cls, rows):
        table = pd.DataFrame(list(rows), columns=TRIAL_COLUMNS)
        table["key"] = [TrialKey(k).value for k in table["key"]]
        table["attack_id"] = [_optional(a) for a in table["attack_id"]]
        return cls(table.astype(object))

    def __len__(self):
        return len(self.table)

    def keyed(self, key, attack_id=None):
        mask = self.table["key"] == TrialKey(key).value
        if attack_id is not None:
            mask &= self.table["attack_id"] == attack_id
        return self.table[mask]

    def counts(self):
        counts = self.table["key"].value_counts()
        return {key: int(counts.get(key.value, 0)) for key in TrialKey}

    def counts_per_attack(self):
        spoof = self.keyed(TrialKey.SPOOF)
        return {str(a): int(n) for a, n in spoof["attack_id"].value_counts().sort_index().items()}

    def attacks(self):
        return sorted(self.counts_per_attack())


def parse_trials(path):
    """Read a trials TSV. Line numbers in errors are 1-based."""
    table = read_text_table(path, TRIAL_COLUMNS, sep="\t", skip_blank_lines=False)
    if table is None:
        return TrialList(pd.DataFrame(columns=TRIAL_COLUMNS, dtype=object))
    line_numbers = np.arange(1, len(table) + 1)

    incomplete = (table == "").any(axis=1).to_numpy()
    if incomplete.any():
        raise ParseError("expected 4 tab-separated fields", path, f"line {line_numbers[incomplete][0]}")

    valid_keys = {k.value for k in TrialKey}
    bad_key = ~table["key"].isin(valid_keys).to_numpy()
    if bad_key.any():
        first = int(np.flatnonzero(bad_key)[0])
        raise ParseError(f"unknown key '{table['key'].iloc[first]}'", path, f"line {line_numbers[first]}")

    is_spoof = (table["key"] == TrialKey.SPOOF.value).to_numpy()
    no_attack = (table["attack_id"] == ABSENT).to_numpy()
    spoof_without_attack = is_spoof & no_attack
    if spoof_without_attack.any():
        raise ParseError("spoof trial without attack id", path,
                         f"line {line_numbers[spoof_without_attack][0]}")
    bonafide_with_attack = ~is_spoof & ~no_attack
    if bonafide_with_attack.any():
        raise ParseError("target/nontarget trial carries an attack id", path,
                         f"line {line_numbers[bonafide_with_attack][0]}")

    duplicated = table.duplicated(subset=["model_id", "test_utt"]).to_numpy()
    if duplicated.any():
        first = int(np.flatnonzero(duplicated)[0])
        raise ParseError(
            f"duplicate trial ({table['model_id'].iloc[first]}, {table['test_utt'].iloc[first]})",
            path, f"line {line_numbers[first]}",
        )

    table["attack_id"] = [None if a == ABSENT else a for a in table["attack_id"]]
    trials = TrialList(table.astype(object))
    logger.debug(f"Parsed {len(trials)} trials from '{path}': {trials.counts()}")
    return trials


def write_trials(trials, path):
    with atomic_output(path, "w") as fh:
        for row in trials.table.itertuples(index=False):
            fh.write(f"{row.model_id}\t{row.test_utt}\t{row.key}\t{row.attack_id or ABSENT}\n")


def load_enrollment_map(path):
    """model_id -> list of enrollment utt_ids, in file order."""
    table = read_text_table(path, ["model_id", "utt_id"])
    if table is None:
        return {}
    incomplete = (table == "").any(axis=1).to_numpy()
    if incomplete.any():
        raise ParseError("expected 'model_id utt_id'", path, f"line {int(np.flatnonzero(incomplete)[0]) + 1}")
    enrollment = {}
    for model_id, utt_id in table.itertuples(index=False):
        enrollment.setdefault(model_id, []).append(utt_id)
    return enrollment


def write_enrollment_map(enrollment, path):
    with atomic_output(path, "w") as fh:
        for model_id, utt_ids in enrollment.items():
            for utt_id in utt_ids:
                fh.write(f"{model_id}\t{utt_id}\n")


# ---------------------------------------------------------------------------
# Adaptation-set sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplePlan:
    strategy: SampleStrategy
    budget_m: int = 1290
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", SampleStrategy(self.strategy))
        if self.budget_m < 1:
            raise ConfigError(f"budget_m must be positive, got {self.budget_m}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.strategy in BALANCED_STRATEGIES and self.budget_m % 2:
            raise ConfigError(f"budget_m must be even for '{self.strategy.value}', got {self.budget_m}")


def split_quota(cells, total):
    """Spread `total` over sorted cells: floor share each, remainder round-robin."""
    cells = sorted(cells)
    if not cells:
        raise DataError("No cells to sample from")
    base, remainder = divmod(total, len(cells))
    return {cell: base + (1 if i < remainder else 0) for i, cell in enumerate(cells)}


def _cell_keys(embeddings, columns, what):
    for column in columns:
        if embeddings.labels[column].isna().any():
            raise DataError(f"{what} set lacks {column.replace('_id', '')} labels needed for sampling")
    if len(columns) == 1:
        return [str(v) for v in embeddings.labels[columns[0]]]
    return [tuple(str(v) for v in row) for row in embeddings.labels[list(columns)].itertuples(index=False)]


def _draw(embeddings, keys, quotas, rng):
    by_cell = {}
    for i, key in enumerate(keys):
        by_cell.setdefault(key, []).append(i)
    utt_ids = embeddings.labels["utt_id"].to_numpy()
    chosen = []
    for cell, quota in quotas.items():
        members = sorted(by_cell.get(cell, []), key=lambda i: utt_ids[i])
        if quota > len(members):
            raise InfeasiblePlanError(cell, quota, len(members))
        picks = rng.choice(len(members), size=quota, replace=False)
        chosen.extend(members[p] for p in sorted(picks))
    return chosen


def sample_adaptation_set(bonafide, spoofed, plan):
    """Build the in-domain adaptation set described by `plan`."""
    strategy = plan.strategy
    if strategy is SampleStrategy.BONAFIDE_ONLY:
        return bonafide
    if strategy is SampleStrategy.BONAFIDE_PLUS_SPOOF:
        return EmbeddingSet.concat([bonafide, spoofed])
    if len(bonafide) == 0 or len(spoofed) == 0:
        raise DataError(f"'{strategy.value}' sampling needs non-empty bonafide and spoofed sets")

    half = plan.budget_m // 2
    rng = np.random.default_rng(plan.seed)

    bona_keys = _cell_keys(bonafide, ["speaker_id"], "Bonafide")
    bona_rows = _draw(bonafide, bona_keys, split_quota(set(bona_keys), half), rng)

    columns = {
        SampleStrategy.PER_SPK: ["speaker_id"],
        SampleStrategy.PER_ATTACK: ["attack_id"],
        SampleStrategy.PER_BOTH: ["speaker_id", "attack_id"],
    }[strategy]
    spoof_keys = _cell_keys(spoofed, columns, "Spoofed")
    spoof_rows = _draw(spoofed, spoof_keys, split_quota(set(spoof_keys), half), rng)

    logger.info(
        f"✓ Sampled '{strategy.value}' adaptation set: {len(bona_rows)} bonafide + "
        f"{len(spoof_rows)} spoofed over {len(set(spoof_keys))} cells"
    )
    return EmbeddingSet.concat([bonafide.subset(bona_rows), spoofed.subset(spoof_rows)])
