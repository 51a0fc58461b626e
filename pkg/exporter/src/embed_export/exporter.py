"""Export document representations as prefrank feature files.

Input corpora are the ranking toolkit's document TSV (`# docs v1` header,
then `id<TAB>text[<TAB>focus_index]`); outputs are its text feature format
(`# features v1 dim=D`, then `id<TAB>v1..vD`). Three representations:

* mwe       unweighted mean of the in-vocabulary static word vectors
* focus     the static vector of the focus-word token
* sentence  a pretrained sentence encoder applied to the raw text

Static vectors are read from word2vec-style text files. Out-of-vocabulary
tokens are skipped; a document with no known token gets a zero vector and a
warning. Exports are deterministic, so re-running one is byte-identical.
"""

from __future__ import annotations

import logging
import string
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

REPRESENTATIONS = ("mwe", "sentence", "focus")
SCOPES = ("train_only", "train_plus_test")

_STRIP = string.punctuation + string.whitespace


class ExportError(ValueError):
    """Raised for unreadable inputs or spec violations."""


@dataclass(frozen=True)
class ExportSpec:
    """One export job.

    `scope` records which corpus the input file holds: the training documents
    alone, or training and test documents combined (the combined corpus is
    what the test-set features are generated from). All rows of the input are
    encoded in one batch either way, so corpus-level encoders see exactly the
    declared corpus.
    """

    input_path: str
    representation: str
    source: str
    output_path: str
    scope: str = "train_plus_test"

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ExportError(f"unknown representation {self.representation!r}")
        if self.scope not in SCOPES:
            raise ExportError(f"unknown corpus scope {self.scope!r}")


def tokenize(text: str) -> list[str]:
    """Whitespace tokens with edge punctuation stripped, case preserved.

    Token positions follow the plain whitespace split, so focus indices refer
    to the same positions before and after punctuation stripping.
    """
    return [tok.strip(_STRIP) for tok in text.split()]


def read_corpus(path):
    """Parse the document TSV: (id, text, focus_index or None) per row."""
    rows = []
    seen = set()
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"cannot read corpus {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise ExportError(
                    f"{path}:{lineno}: expected id<TAB>text[<TAB>focus_index]"
                )
            doc_id, text = cols[0], cols[1]
            if doc_id in seen:
                raise ExportError(f"{path}:{lineno}: duplicate id {doc_id!r}")
            seen.add(doc_id)
            focus = None
            if len(cols) == 3 and cols[2] != "":
                try:
                    focus = int(cols[2])
                except ValueError:
                    raise ExportError(
                        f"{path}:{lineno}: focus index {cols[2]!r} is not an integer"
                    )
                if focus < 0:
                    raise ExportError(f"{path}:{lineno}: focus index must be >= 0")
            rows.append((doc_id, text, focus))
    if not rows:
        raise ExportError(f"{path}: corpus has no documents")
    return rows


def load_word_vectors(path) -> dict:
    """Word2vec-style text vectors: optional `count dim` header, then
    `word v1 .. vd` per line, whitespace separated."""
    vectors = {}
    dim = None
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ExportError(f"cannot read vector source {path}: {exc}") from None
    with fh:
        first = fh.readline().rstrip("\n")
        parts = first.split()
        header = len(parts) == 2 and all(p.isdigit() for p in parts)
        if not header and parts:
            vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
            dim = len(parts) - 1
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            vec = np.array([float(v) for v in parts[1:]])
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ExportError(
                    f"{path}:{lineno}: vector for {parts[0]!r} has length "
                    f"{len(vec)}, expected {dim}"
                )
            vectors[parts[0]] = vec
    if not vectors:
        raise ExportError(f"{path}: no vectors found")
    return vectors


def _mean_vector(tokens, vectors, dim, doc_id):
    known = [vectors[t] for t in tokens if t in vectors]
    if not known:
        logger.warning("document %r has no in-vocabulary token; writing zeros", doc_id)
        return np.zeros(dim)
    return np.mean(known, axis=0)


def _load_sentence_encoder(source):
    try:
        from sentence_transformers import SentenceTransformer
    except ImportError:
        raise ExportError(
            "sentence representation needs the sentence-transformers package"
        ) from None
    try:
        model = SentenceTransformer(source)
    except Exception as exc:
        raise ExportError(f"cannot load sentence encoder {source!r}: {exc}") from None
    return lambda texts: np.asarray(model.encode(texts, show_progress_bar=False))


def export(spec: ExportSpec, encoder=None) -> str:
    """Run one export job and return the output path.

    `encoder` overrides the sentence model loader for representation
    "sentence": any callable mapping a list of texts to a 2-d array.
    """
    docs = read_corpus(spec.input_path)

    if spec.representation == "focus":
        missing = [d for d, _, focus in docs if focus is None]
        if missing:
            raise ExportError(
                f"focus representation needs a focus index for every document; "
                f"missing for {missing[:5]}"
            )

    if spec.representation in ("mwe", "focus"):
        vectors = load_word_vectors(spec.source)
        dim = len(next(iter(vectors.values())))
        rows = []
        for doc_id, text, focus in docs:
            tokens = tokenize(text)
            if spec.representation == "mwe":
                rows.append(_mean_vector(tokens, vectors, dim, doc_id))
            else:
                if focus >= len(tokens):
                    raise ExportError(
                        f"document {doc_id!r}: focus index {focus} outside "
                        f"{len(tokens)}-token text"
                    )
                token = tokens[focus]
                if token in vectors:
                    rows.append(vectors[token])
                else:
                    logger.warning(
                        "focus word %r of document %r is out of vocabulary; "
                        "writing zeros", token, doc_id,
                    )
                    rows.append(np.zeros(dim))
        matrix = np.vstack(rows)
    else:
        encode = encoder if encoder is not None else _load_sentence_encoder(spec.source)
        matrix = np.asarray(encode([text for _, text, _ in docs]), dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(docs):
            raise ExportError(
                f"sentence encoder returned shape {matrix.shape} for {len(docs)} documents"
            )

    if not np.all(np.isfinite(matrix)):
        raise ExportError("representation produced non-finite values")

    _write_features([d for d, _, _ in docs], matrix, spec.output_path)
    return spec.output_path


def _write_features(ids, matrix, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# features v1 dim={matrix.shape[1]}\n")
        for doc_id, row in zip(ids, matrix):
            fh.write(doc_id + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
