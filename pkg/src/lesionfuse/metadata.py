"""Clinical metadata: schema, CSV ingestion, encoding, imputation and splits."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, StateError

KINDS = ("categorical", "numeric", "identifier", "label")
PARTITIONS = ("train", "val", "test")


@dataclass
class Column:
    name: str
    kind: str
    vocab: List[str] = field(default_factory=list)
    bounds: Optional[List[float]] = None

    @property
    def width(self) -> int:
        if self.kind == "categorical":
            return len(self.vocab)
        return 1 if self.kind == "numeric" else 0


@dataclass
class MetadataSchema:
    columns: List[Column]
    id_column: str
    label_column: str
    patient_column: Optional[str] = None
    missing_markers: List[str] = field(default_factory=lambda: [""])
    unknown_as_missing: bool = False

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        for c in self.columns:
            if c.kind not in KINDS:
                raise SchemaError(f"column {c.name}: unknown kind {c.kind!r}")
            if c.kind in ("categorical", "label") and not c.vocab:
                raise SchemaError(f"column {c.name}: categorical columns need a vocabulary")
            if c.kind == "numeric":
                if not c.bounds or len(c.bounds) != 2 or not c.bounds[1] > c.bounds[0]:
                    raise SchemaError(f"column {c.name}: numeric columns need bounds [lo, hi]")
        labels = [c for c in self.columns if c.kind == "label"]
        if len(labels) != 1:
            raise SchemaError(f"schema needs exactly one label column, found {len(labels)}")
        if labels[0].name != self.label_column:
            raise SchemaError(f"label_column {self.label_column!r} is not the label column")
        for key in (self.id_column, self.patient_column):
            if key is not None and key not in names:
                raise SchemaError(f"column {key!r} referenced but not declared")

    @property
    def class_names(self) -> List[str]:
        return list(self.column(self.label_column).vocab)

    @property
    def feature_columns(self) -> List[Column]:
        return [c for c in self.columns if c.kind in ("categorical", "numeric")]

    @property
    def encoded_length(self) -> int:
        return sum(c.width for c in self.feature_columns)

    def column(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise SchemaError(f"no column named {name!r}")

    def slices(self) -> Dict[str, slice]:
        out, offset = {}, 0
        for c in self.feature_columns:
            out[c.name] = slice(offset, offset + c.width)
            offset += c.width
        return out

    def to_dict(self) -> dict:
        cols = []
        for c in self.columns:
            d = {"name": c.name, "kind": c.kind}
            if c.vocab:
                d["vocab"] = list(c.vocab)
            if c.bounds is not None:
                d["bounds"] = list(c.bounds)
            cols.append(d)
        return {
            "version": 1,
            "id_column": self.id_column,
            "patient_column": self.patient_column,
            "label_column": self.label_column,
            "missing_markers": list(self.missing_markers),
            "unknown_as_missing": self.unknown_as_missing,
            "columns": cols,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetadataSchema":
        try:
            cols = [Column(c["name"], c["kind"], list(c.get("vocab", [])),
                           [float(b) for b in c["bounds"]] if "bounds" in c else None)
                    for c in d["columns"]]
            return cls(cols, d["id_column"], d["label_column"], d.get("patient_column"),
                       list(d.get("missing_markers", [""])), bool(d.get("unknown_as_missing", False)))
        except KeyError as exc:
            raise SchemaError(f"schema missing key {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "MetadataSchema":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc


@dataclass
class MetadataRecord:
    values: Dict[str, Optional[str]]
    line: int = 0

    @property
    def missing(self) -> List[str]:
        return [k for k, v in self.values.items() if v is None]


@dataclass
class EncodedMeta:
    vector: np.ndarray
    mask: np.ndarray  # True where the entry was missing before imputation


def _normalise(value: Optional[str], schema: MetadataSchema) -> Optional[str]:
    if value is None:
        return None
    value = value.strip()
    return None if value in schema.missing_markers else value


def make_record(values: Dict[str, Optional[str]], schema: MetadataSchema,
                line: int = 0, inference: bool = False) -> MetadataRecord:
    """Validate a raw column->string map against the schema.

    With ``inference`` the label may be absent, absent feature columns count
    as missing, and columns the schema does not know are rejected.
    """
    if inference:
        unknown = sorted(set(values) - {c.name for c in schema.columns})
        if unknown:
            raise SchemaError(f"columns not in schema: {unknown}")
    out = {}
    for c in schema.columns:
        if c.name not in values and not inference:
            raise SchemaError(f"record is missing column {c.name!r}")
        v = _normalise(values.get(c.name), schema)
        if c.kind == "label":
            if v is None:
                if inference:
                    out[c.name] = None
                    continue
                raise ParseError(f"missing label in column {c.name!r}", line)
            if v not in c.vocab:
                raise SchemaError(f"label {v!r} outside vocabulary {c.vocab}")
        elif c.kind == "categorical" and v is not None and v not in c.vocab:
            if not schema.unknown_as_missing:
                raise SchemaError(f"column {c.name!r}: value {v!r} outside vocabulary")
            v = None
        out[c.name] = v
    return MetadataRecord(out, line)


def parse_csv(path, schema: MetadataSchema) -> List[MetadataRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, strict=True)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty metadata file", 1) from None
        except csv.Error as exc:
            raise ParseError(str(exc), 1) from exc
        header = [h.strip() for h in header]
        for c in schema.columns:
            if c.name not in header:
                raise SchemaError(f"metadata CSV lacks column {c.name!r}")
        index = {name: i for i, name in enumerate(header)}
        records = []
        while True:
            try:
                row = next(reader)
            except StopIteration:
                break
            except csv.Error as exc:
                raise ParseError(str(exc), reader.line_num) from exc
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", reader.line_num)
            values = {c.name: row[index[c.name]] for c in schema.columns}
            records.append(make_record(values, schema, reader.line_num))
    return records


def encode(record: MetadataRecord, schema: MetadataSchema) -> EncodedMeta:
    vec = np.zeros(schema.encoded_length, dtype=np.float32)
    mask = np.zeros(schema.encoded_length, dtype=bool)
    for c, sl in zip(schema.feature_columns, schema.slices().values()):
        v = record.values.get(c.name)
        if v is None:
            mask[sl] = True
            continue
        if c.kind == "categorical":
            vec[sl.start + c.vocab.index(v)] = 1.0
        else:
            try:
                x = float(v)
            except ValueError:
                raise ParseError(f"column {c.name!r}: {v!r} is not a number", record.line) from None
            lo, hi = c.bounds
            vec[sl.start] = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return EncodedMeta(vec, mask)


def labels_of(records: Sequence[MetadataRecord], schema: MetadataSchema) -> np.ndarray:
    vocab = schema.class_names
    return np.array([vocab.index(r.values[schema.label_column]) for r in records], dtype=np.int64)


# ----------------------------------------------------------------------------
# imputation


class Imputer:
    """Fills masked entries; fitted on the training partition only.

    ``statistic`` uses the training mode per categorical column and the
    training median per numeric column.  ``autoencoder`` trains a four-layer
    fully connected autoencoder to reconstruct randomly masked encodings.
    Observed entries are never modified.
    """

    def __init__(self, schema: MetadataSchema, mode: str = "statistic", seed: int = 0,
                 epochs: int = 150, hidden: int = 32):
        if mode not in ("statistic", "autoencoder"):
            raise ConfigError(f"unknown imputation mode {mode!r}")
        self.schema = schema
        self.mode = mode
        self.seed = seed
        self.epochs = epochs
        self.hidden = hidden
        self.fill: Optional[np.ndarray] = None
        self.weights: Dict[str, np.ndarray] = {}

    # -- fitting
    def fit(self, train: Sequence[EncodedMeta]) -> "Imputer":
        if not train:
            raise StateError("cannot fit imputation on an empty training partition")
        X = np.stack([e.vector for e in train])
        M = np.stack([e.mask for e in train])
        fill = np.zeros(self.schema.encoded_length, dtype=np.float32)
        for c, sl in zip(self.schema.feature_columns, self.schema.slices().values()):
            observed = ~M[:, sl.start]
            if c.kind == "categorical":
                counts = X[observed, sl].sum(axis=0)
                fill[sl.start + int(np.argmax(counts)) if observed.any() else sl.start] = 1.0
            else:
                fill[sl.start] = float(np.median(X[observed, sl.start])) if observed.any() else 0.5
        self.fill = fill
        if self.mode == "autoencoder":
            self._fit_autoencoder(X, M)
        return self

    def _fit_autoencoder(self, X: np.ndarray, M: np.ndarray) -> None:
        from .optim import OptimizerState, sgd_step
        from .tensor import Tensor, backward, linear, mean, mul, relu, sigmoid

        rng = np.random.default_rng(self.seed)
        d = X.shape[1]
        dims = [d, self.hidden, self.hidden // 2, self.hidden, d]
        params = []
        for i in range(4):
            bound = np.sqrt(1.0 / dims[i])
            params.append(Tensor(rng.uniform(-bound, bound, (dims[i], dims[i + 1])), True, f"ae{i}.w"))
            params.append(Tensor(rng.uniform(-bound, bound, dims[i + 1]), True, f"ae{i}.b"))
        groups = list(self.schema.slices().values())
        state = OptimizerState(base_lr=0.5, step_size=10 ** 6, gamma=0.5)
        observed = (~M).astype(np.float32)
        n = X.shape[0]
        batch = min(64, n)
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for s in range(0, n, batch):
                idx = order[s:s + batch]
                drop = np.zeros((len(idx), d), dtype=np.float32)
                for sl in groups:
                    drop[:, sl] = (rng.random(len(idx)) < 0.25)[:, None]
                inp = X[idx] * (1 - drop) * observed[idx]
                out = self._ae_forward(params, Tensor(inp), linear, relu, sigmoid)
                err = out - Tensor(X[idx])
                loss = mean(mul(mul(err, err), Tensor(observed[idx])))
                backward(loss)
                sgd_step(params, state)
        self.weights = {p.name: p.data.copy() for p in params}

    @staticmethod
    def _ae_forward(params, x, linear, relu, sigmoid):
        for i in range(4):
            x = linear(x, params[2 * i], params[2 * i + 1])
            x = relu(x) if i < 3 else sigmoid(x)
        return x

    # -- applying
    def transform(self, data: Sequence[EncodedMeta]) -> List[EncodedMeta]:
        if self.fill is None:
            raise StateError("imputer is not fitted")
        if not data:
            return []
        X = np.stack([e.vector for e in data])
        M = np.stack([e.mask for e in data])
        if not M.any():
            return [EncodedMeta(e.vector.copy(), e.mask.copy()) for e in data]
        if self.mode == "statistic":
            proposal = np.broadcast_to(self.fill, X.shape)
        else:
            proposal = self._reconstruct(X * ~M)
        out = X.copy()
        for c, sl in zip(self.schema.feature_columns, self.schema.slices().values()):
            rows = M[:, sl.start]
            if not rows.any():
                continue
            if c.kind == "categorical":
                block = np.zeros((rows.sum(), c.width), dtype=np.float32)
                block[np.arange(rows.sum()), np.argmax(proposal[rows, sl], axis=1)] = 1.0
                out[rows, sl] = block
            else:
                out[rows, sl.start] = np.clip(proposal[rows, sl.start], 0.0, 1.0)
        return [EncodedMeta(out[i], M[i].copy()) for i in range(len(data))]

    def _reconstruct(self, X: np.ndarray) -> np.ndarray:
        from .tensor import Tensor, linear, no_grad, relu, sigmoid

        params = [Tensor(self.weights[f"ae{i}.{k}"]) for i in range(4) for k in ("w", "b")]
        with no_grad():
            return self._ae_forward(params, Tensor(X), linear, relu, sigmoid).data

    # -- persistence (stored inside checkpoints)
    def state(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "epochs": self.epochs,
                "hidden": self.hidden,
                "fill": None if self.fill is None else [float(v) for v in self.fill]}

    def tensors(self) -> Dict[str, np.ndarray]:
        return {f"imputer.{k}": v for k, v in sorted(self.weights.items())}

    @classmethod
    def restore(cls, schema: MetadataSchema, state: dict,
                tensors: Optional[Dict[str, np.ndarray]] = None) -> "Imputer":
        imp = cls(schema, state["mode"], state["seed"], state["epochs"], state["hidden"])
        if state.get("fill") is not None:
            imp.fill = np.array(state["fill"], dtype=np.float32)
        for k, v in (tensors or {}).items():
            if k.startswith("imputer."):
                imp.weights[k[len("imputer."):]] = np.asarray(v, dtype=np.float32)
        return imp


def impute(dataset: Sequence[EncodedMeta], mode: str = "statistic",
           train_indices: Optional[Sequence[int]] = None, schema: Optional[MetadataSchema] = None,
           seed: int = 0) -> List[EncodedMeta]:
    """Fit on ``train_indices`` (default: everything) and fill the whole dataset."""
    if schema is None:
        raise ConfigError("impute needs the schema that produced the encodings")
    idx = range(len(dataset)) if train_indices is None else train_indices
    imputer = Imputer(schema, mode, seed).fit([dataset[i] for i in idx])
    return imputer.transform(dataset)


# ----------------------------------------------------------------------------
# splitting


@dataclass
class SplitAssignment:
    assignment: Dict[str, str]
    seed: int
    ratios: List[float]

    def ids(self, partition: str) -> List[str]:
        return [k for k, v in self.assignment.items() if v == partition]

    def sizes(self) -> Dict[str, int]:
        return {p: len(self.ids(p)) for p in PARTITIONS}

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "partition"])
            for k, v in self.assignment.items():
                w.writerow([k, v])


def split(records: Sequence[MetadataRecord], schema: MetadataSchema,
          ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
          group_by_patient: bool = True, split_file=None) -> SplitAssignment:
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError("split ratios must be three positive numbers summing to 1")
    ids = [r.values[schema.id_column] for r in records]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate sample ids")
    if split_file is not None:
        return _read_split_file(split_file, ids, seed, ratios)

    groups: Dict[str, List[str]] = {}
    for r, sid in zip(records, ids):
        key = r.values.get(schema.patient_column) if group_by_patient and schema.patient_column else None
        groups.setdefault(key if key is not None else f"\0{sid}", []).append(sid)
    keys = list(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    targets = np.array(ratios) * len(ids)
    counts = np.zeros(3)
    assignment: Dict[str, str] = {}
    for k in order:
        members = groups[keys[k]]
        part = int(np.argmax(targets - counts))
        counts[part] += len(members)
        for sid in members:
            assignment[sid] = PARTITIONS[part]
    return SplitAssignment({sid: assignment[sid] for sid in ids}, seed, ratios)


def _read_split_file(path, ids, seed, ratios) -> SplitAssignment:
    known = set(ids)
    assignment = {}
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or (i == 0 and row[0] == "sample_id"):
                continue
            sid, part = row[0].strip(), row[1].strip()
            if sid not in known:
                raise SchemaError(f"split file references unknown sample id {sid!r}")
            if part not in PARTITIONS:
                raise SchemaError(f"split file: unknown partition {part!r}")
            assignment[sid] = part
    missing = known - set(assignment)
    if missing:
        raise SchemaError(f"split file does not assign {len(missing)} sample(s), e.g. {sorted(missing)[0]!r}")
    return SplitAssignment({sid: assignment[sid] for sid in ids}, seed, ratios)


# ----------------------------------------------------------------------------
# encoded dataset cache

CACHE_MAGIC = b"LFMETA\x00\x01"
CACHE_VERSION = 1


def write_encoded_cache(path, ids: Sequence[str], encoded: Sequence[EncodedMeta]) -> None:
    """Little-endian binary: magic, version, count, width, then per record
    (id, float32 vector, uint8 mask)."""
    d = len(encoded[0].vector) if encoded else 0
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<III", CACHE_VERSION, len(encoded), d))
        for sid, e in zip(ids, encoded):
            raw = sid.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(e.vector, dtype="<f4").tobytes())
            fh.write(np.asarray(e.mask, dtype=np.uint8).tobytes())


def read_encoded_cache(path):
    from .errors import VersionError

    blob = Path(path).read_bytes()
    if blob[:8] != CACHE_MAGIC:
        raise VersionError(f"{path}: not an encoded metadata cache")
    version, n, d = struct.unpack_from("<III", blob, 8)
    if version != CACHE_VERSION:
        raise VersionError(f"{path}: unsupported cache version {version}")
    pos, ids, encoded = 20, [], []
    for _ in range(n):
        (k,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        ids.append(blob[pos:pos + k].decode("utf-8"))
        pos += k
        vec = np.frombuffer(blob, dtype="<f4", count=d, offset=pos).astype(np.float32)
        pos += 4 * d
        mask = np.frombuffer(blob, dtype=np.uint8, count=d, offset=pos).astype(bool)
        pos += d
        encoded.append(EncodedMeta(vec, mask))
    return ids, encoded


def packaged_schema(name: str = "pad_ufes20") -> MetadataSchema:
    """A schema shipped with the package (``schemas/<name>.json``)."""
    from importlib import resources

    try:
        text = resources.files("lesionfuse").joinpath("schemas", f"{name}.json").read_text()
    except FileNotFoundError:
        raise SchemaError(f"no packaged schema named {name!r}") from None
    return MetadataSchema.from_dict(json.loads(text))
