"""Corpus handling: documents, pairwise labels, tuple annotations, feature
matrices, and the doc-ID subsampling protocol used for sparse-training
experiments.

File formats (all TSV with a `# <kind> v1` header line):

* documents:  ``# docs v1`` then ``id<TAB>text[<TAB>focus_index]``
* pairs:      ``# pairs v1`` then ``winner<TAB>loser<TAB>count``
* tuples:     ``# tuples v1`` then ``m1<TAB>m2<TAB>m3<TAB>m4<TAB>best<TAB>worst``
* features:   ``# features v1 dim=D[ focus_dim=F]`` then
              ``id<TAB>x_1..x_D[<TAB>f_1..f_F]``

Feature files also have a binary twin (magic ``PRFK1``, length-prefixed ids,
little-endian float64 rows) for large corpora; ``load_features`` detects the
format from the first bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

PAIRS_HEADER = "# pairs v1"
TUPLES_HEADER = "# tuples v1"
DOCS_HEADER = "# docs v1"
FEATURES_MAGIC = b"PRFK1"


class CorpusError(ValueError):
    """Raised for malformed input files or violated corpus invariants."""


@dataclass(frozen=True)
class Document:
    """A single ranked instance: id, optional raw text, optional focus token."""

    id: str
    text: str | None = None
    focus_index: int | None = None

    def __post_init__(self):
        if not self.id:
            raise CorpusError("document id must be non-empty")
        if self.focus_index is not None:
            if self.focus_index < 0:
                raise CorpusError(f"document {self.id!r}: focus_index must be >= 0")
            if self.text is not None and self.focus_index >= len(self.text.split()):
                raise CorpusError(
                    f"document {self.id!r}: focus_index {self.focus_index} is not a "
                    f"valid token position ({len(self.text.split())} tokens)"
                )


@dataclass(frozen=True)
class PairLabel:
    """One pairwise outcome: winner beat loser, observed `count` times."""

    winner_id: str
    loser_id: str
    count: int = 1

    def __post_init__(self):
        if self.winner_id == self.loser_id:
            raise CorpusError(f"pair compares {self.winner_id!r} with itself")
        if self.count < 1:
            raise CorpusError(f"pair ({self.winner_id}, {self.loser_id}): count must be >= 1")


@dataclass(frozen=True)
class TupleLabel:
    """A best-worst annotated 4-tuple."""

    member_ids: tuple[str, str, str, str]
    best_id: str
    worst_id: str

    def __post_init__(self):
        if len(self.member_ids) != 4:
            raise CorpusError("tuple must have exactly 4 members")
        if self.best_id == self.worst_id:
            raise CorpusError(f"tuple best {self.best_id!r} equals worst")
        for chosen in (self.best_id, self.worst_id):
            if chosen not in self.member_ids:
                raise CorpusError(f"tuple choice {chosen!r} is not a member")


class FeatureMatrix:
    """Dense per-document feature vectors, optionally with a parallel block
    of focus-word vectors covering the same ids in the same order.

    Immutable after construction; rows are stored row-major float64.
    """

    def __init__(self, doc_ids, rows, focus_rows=None):
        self.doc_ids: list[str] = list(doc_ids)
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2:
            raise CorpusError("feature rows must form a 2-d array")
        if rows.shape[0] != len(self.doc_ids):
            raise CorpusError(
                f"{rows.shape[0]} feature rows for {len(self.doc_ids)} ids"
            )
        if rows.shape[1] < 1:
            raise CorpusError("feature dimension must be >= 1")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise CorpusError("duplicate document ids in feature matrix")
        bad = _first_nonfinite_row(rows)
        if bad is not None:
            raise CorpusError(f"non-finite feature value for id {self.doc_ids[bad]!r}")
        self.rows = rows
        self.rows.setflags(write=False)

        if focus_rows is not None:
            focus_rows = np.asarray(focus_rows, dtype=np.float64)
            if focus_rows.ndim != 2 or focus_rows.shape[0] != len(self.doc_ids):
                raise CorpusError("focus rows must cover exactly the same ids")
            bad = _first_nonfinite_row(focus_rows)
            if bad is not None:
                raise CorpusError(
                    f"non-finite focus value for id {self.doc_ids[bad]!r}"
                )
            focus_rows.setflags(write=False)
        self.focus_rows: np.ndarray | None = focus_rows
        self._index = {d: i for i, d in enumerate(self.doc_ids)}

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def focus_dim(self) -> int:
        return 0 if self.focus_rows is None else self.focus_rows.shape[1]

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __contains__(self, doc_id) -> bool:
        return doc_id in self._index

    def index_of(self, doc_id: str) -> int:
        try:
            return self._index[doc_id]
        except KeyError:
            raise CorpusError(f"no feature row for id {doc_id!r}") from None

    def row(self, doc_id: str) -> np.ndarray:
        return self.rows[self.index_of(doc_id)]

    def focus_row(self, doc_id: str) -> np.ndarray:
        if self.focus_rows is None:
            raise CorpusError("feature matrix carries no focus vectors")
        return self.focus_rows[self.index_of(doc_id)]

    def subset(self, ids) -> "FeatureMatrix":
        """Restrict to `ids`, keeping this matrix's row order."""
        keep = [i for i, d in enumerate(self.doc_ids) if d in set(ids)]
        missing = set(ids) - set(self.doc_ids)
        if missing:
            raise CorpusError(f"no feature rows for ids: {sorted(missing)}")
        focus = None if self.focus_rows is None else self.focus_rows[keep]
        return FeatureMatrix([self.doc_ids[i] for i in keep], self.rows[keep], focus)


@dataclass(frozen=True)
class SplitSpec:
    """A train/test partition of document ids at a given fraction."""

    fraction: float
    seed: int
    train_ids: frozenset[str]
    test_ids: frozenset[str]

    def __post_init__(self):
        if self.train_ids & self.test_ids:
            raise CorpusError("train and test ids overlap")


def _first_nonfinite_row(arr):
    finite = np.isfinite(arr).all(axis=1)
    if finite.all():
        return None
    return int(np.argmax(~finite))


def _data_lines(path):
    """Yield (line_number, stripped_line) skipping blanks and comments."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line


def load_pairs(path, format: str = "pairs") -> list[PairLabel]:
    """Read pairwise labels from a pair or tuple file.

    Tuple rows are converted to exactly one pair each: best beats worst.
    Identical (winner, loser) pairs are merged by summing counts, so the
    total count always equals the number of annotations in the file.
    """
    if format not in ("pairs", "tuples"):
        raise CorpusError(f"unknown pair file format {format!r}")

    counts: dict[tuple[str, str], int] = {}

    def add(winner, loser, count, lineno):
        if winner == loser:
            raise CorpusError(f"{path}:{lineno}: winner equals loser ({winner!r})")
        if count < 1:
            raise CorpusError(f"{path}:{lineno}: count must be a positive integer")
        key = (winner, loser)
        counts[key] = counts.get(key, 0) + count

    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if format == "pairs":
            if len(cols) not in (2, 3):
                raise CorpusError(
                    f"{path}:{lineno}: expected winner<TAB>loser[<TAB>count], "
                    f"got {len(cols)} columns"
                )
            try:
                count = int(cols[2]) if len(cols) == 3 else 1
            except ValueError:
                raise CorpusError(f"{path}:{lineno}: count {cols[2]!r} is not an integer")
            add(cols[0], cols[1], count, lineno)
        else:
            if len(cols) != 6:
                raise CorpusError(
                    f"{path}:{lineno}: expected m1..m4, best, worst (6 columns), "
                    f"got {len(cols)}"
                )
            tup = TupleLabel(tuple(cols[:4]), cols[4], cols[5])
            add(tup.best_id, tup.worst_id, 1, lineno)

    return [PairLabel(w, l, c) for (w, l), c in counts.items()]


def save_pairs(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(PAIRS_HEADER + "\n")
        for p in pairs:
            fh.write(f"{p.winner_id}\t{p.loser_id}\t{p.count}\n")


def load_documents(path) -> list[Document]:
    docs = []
    seen = set()
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise CorpusError(
                f"{path}:{lineno}: expected id<TAB>text[<TAB>focus_index]"
            )
        doc_id, text = cols[0], cols[1]
        if doc_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate document id {doc_id!r}")
        seen.add(doc_id)
        focus = None
        if len(cols) == 3 and cols[2] != "":
            try:
                focus = int(cols[2])
            except ValueError:
                raise CorpusError(
                    f"{path}:{lineno}: focus index {cols[2]!r} is not an integer"
                )
        try:
            docs.append(Document(doc_id, text, focus))
        except CorpusError as exc:
            raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return docs


def save_documents(docs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DOCS_HEADER + "\n")
        for d in docs:
            text = d.text or ""
            if "\t" in text or "\n" in text:
                raise CorpusError(f"document {d.id!r}: text may not contain tabs/newlines")
            focus = "" if d.focus_index is None else str(d.focus_index)
            fh.write(f"{d.id}\t{text}\t{focus}\n")


def load_features(path) -> FeatureMatrix:
    """Load a feature file, auto-detecting the text or binary format."""
    with open(path, "rb") as fh:
        magic = fh.read(len(FEATURES_MAGIC))
    if magic == FEATURES_MAGIC:
        return _load_features_binary(path)
    return _load_features_text(path)


def _parse_feature_header(line, path):
    # "# features v1 dim=D[ focus_dim=F]"
    parts = line.split()
    if parts[:3] != ["#", "features", "v1"]:
        raise CorpusError(f"{path}: missing feature header '# features v1 dim=...'")
    dim = focus_dim = None
    for tok in parts[3:]:
        key, _, val = tok.partition("=")
        if key == "dim":
            dim = int(val)
        elif key == "focus_dim":
            focus_dim = int(val)
    if dim is None or dim < 1:
        raise CorpusError(f"{path}: header must declare a positive dim")
    if focus_dim is not None and focus_dim < 1:
        raise CorpusError(f"{path}: focus_dim, when declared, must be positive")
    return dim, focus_dim or 0


def _load_features_text(path) -> FeatureMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
    dim, focus_dim = _parse_feature_header(header, path)

    ids, rows, focus_rows = [], [], []
    for lineno, line in _data_lines(path):
        cols = line.split("\t")
        doc_id = cols[0]
        values = cols[1:]
        if len(values) != dim + focus_dim:
            raise CorpusError(
                f"{path}:{lineno}: id {doc_id!r} has {len(values)} values, "
                f"expected dim={dim}" + (f" + focus_dim={focus_dim}" if focus_dim else "")
            )
        try:
            vec = [float(v) for v in values]
        except ValueError:
            raise CorpusError(f"{path}:{lineno}: id {doc_id!r} has a non-numeric value")
        if not all(math.isfinite(v) for v in vec):
            raise CorpusError(f"{path}:{lineno}: id {doc_id!r} has a NaN/Inf value")
        ids.append(doc_id)
        rows.append(vec[:dim])
        if focus_dim:
            focus_rows.append(vec[dim:])
    if not ids:
        raise CorpusError(f"{path}: feature file has no rows")
    return FeatureMatrix(ids, np.array(rows), np.array(focus_rows) if focus_dim else None)


def _load_features_binary(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    off = len(FEATURES_MAGIC)
    dim, focus_dim, n = struct.unpack_from("<IIQ", data, off)
    off += struct.calcsize("<IIQ")
    ids, rows, focus_rows = [], [], []
    for _ in range(n):
        (id_len,) = struct.unpack_from("<I", data, off)
        off += 4
        ids.append(data[off : off + id_len].decode("utf-8"))
        off += id_len
        rows.append(np.frombuffer(data, dtype="<f8", count=dim, offset=off))
        off += 8 * dim
        if focus_dim:
            focus_rows.append(np.frombuffer(data, dtype="<f8", count=focus_dim, offset=off))
            off += 8 * focus_dim
    if not ids:
        raise CorpusError(f"{path}: feature file has no rows")
    return FeatureMatrix(
        ids, np.array(rows), np.array(focus_rows) if focus_dim else None
    )


def save_features(fm: FeatureMatrix, path, format: str = "text") -> None:
    """Write a feature file in the text or binary format."""
    if format == "text":
        header = f"# features v1 dim={fm.dim}"
        if fm.focus_dim:
            header += f" focus_dim={fm.focus_dim}"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for i, doc_id in enumerate(fm.doc_ids):
                vals = [repr(float(v)) for v in fm.rows[i]]
                if fm.focus_rows is not None:
                    vals += [repr(float(v)) for v in fm.focus_rows[i]]
                fh.write(doc_id + "\t" + "\t".join(vals) + "\n")
    elif format == "binary":
        with open(path, "wb") as fh:
            fh.write(FEATURES_MAGIC)
            fh.write(struct.pack("<IIQ", fm.dim, fm.focus_dim, len(fm)))
            for i, doc_id in enumerate(fm.doc_ids):
                raw = doc_id.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(fm.rows[i].astype("<f8").tobytes())
                if fm.focus_rows is not None:
                    fh.write(fm.focus_rows[i].astype("<f8").tobytes())
    else:
        raise CorpusError(f"unknown feature file format {format!r}")


def append_feature_columns(fm: FeatureMatrix, aux: dict) -> FeatureMatrix:
    """Append auxiliary columns (id -> vector) to every feature row.

    Every id in `fm` must be covered by `aux`; widths must agree across ids.
    An empty-width aux table returns an equivalent matrix unchanged.
    """
    missing = [d for d in fm.doc_ids if d not in aux]
    if missing:
        raise CorpusError(f"auxiliary table missing ids: {missing}")
    widths = {len(np.atleast_1d(aux[d])) for d in fm.doc_ids}
    if len(widths) > 1:
        raise CorpusError(f"auxiliary vectors have inconsistent widths: {sorted(widths)}")
    width = widths.pop() if widths else 0
    if width == 0:
        return FeatureMatrix(fm.doc_ids, fm.rows, fm.focus_rows)
    extra = np.array([np.atleast_1d(aux[d]) for d in fm.doc_ids], dtype=np.float64)
    return FeatureMatrix(fm.doc_ids, np.hstack([fm.rows, extra]), fm.focus_rows)


def attach_focus(fm: FeatureMatrix, focus_fm: FeatureMatrix) -> FeatureMatrix:
    """Attach a separately-loaded focus-vector matrix to `fm`'s ids."""
    focus = np.array([focus_fm.row(d) for d in fm.doc_ids])
    return FeatureMatrix(fm.doc_ids, fm.rows, focus)


def subsample_split(ids, pairs, fraction: float, seed: int):
    """Draw round(fraction * |ids|) training ids by seeded shuffle and keep
    only the pairs with both endpoints inside the training set.

    Returns (SplitSpec, train_pairs). The remaining ids form the test set.
    """
    if not (0.0 < fraction <= 1.0):
        raise CorpusError(f"fraction must be in (0, 1], got {fraction}")
    all_ids = sorted(ids)
    n_train = int(math.floor(len(all_ids) * fraction + 0.5))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(all_ids))
    train = frozenset(all_ids[i] for i in order[:n_train])
    test = frozenset(all_ids[i] for i in order[n_train:])
    train_pairs = [p for p in pairs if p.winner_id in train and p.loser_id in train]
    return SplitSpec(fraction, seed, train, test), train_pairs
