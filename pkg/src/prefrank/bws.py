"""Best-worst scaling scores from pairwise comparison counts.

The score of a document is the fraction of its comparisons won minus the
fraction lost, counting annotation multiplicities. This is both the
count-based baseline ranker and the gold-standard generator for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType

PROVENANCES = ("bws", "gppl", "directranker", "stacked", "synthetic")


@dataclass(frozen=True)
class ScoreVector:
    """Per-document real-valued scores with a provenance tag."""

    entries: MappingProxyType
    provenance: str

    def __init__(self, entries, provenance):
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        object.__setattr__(self, "entries", MappingProxyType(dict(entries)))
        object.__setattr__(self, "provenance", provenance)

    def __getitem__(self, doc_id: str) -> float:
        return self.entries[doc_id]

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> set[str]:
        return set(self.entries)

    def restrict(self, ids) -> "ScoreVector":
        """Keep only the given ids (all must be present)."""
        missing = set(ids) - set(self.entries)
        if missing:
            raise KeyError(f"scores missing for ids: {sorted(missing)}")
        return ScoreVector({d: self.entries[d] for d in ids}, self.provenance)


def compute_bws(ids, pairs) -> ScoreVector:
    """Score every id as (wins - losses) / appearances.

    Appearances count each realized comparison once per multiplicity;
    documents that never appear in a pair score 0 (the neutral midpoint).
    """
    id_set = set(ids)
    wins = {d: 0 for d in id_set}
    losses = {d: 0 for d in id_set}
    for p in pairs:
        if p.winner_id not in id_set:
            raise KeyError(f"pair references unknown id {p.winner_id!r}")
        if p.loser_id not in id_set:
            raise KeyError(f"pair references unknown id {p.loser_id!r}")
        wins[p.winner_id] += p.count
        losses[p.loser_id] += p.count
    scores = {}
    for d in id_set:
        appearances = wins[d] + losses[d]
        scores[d] = (wins[d] - losses[d]) / appearances if appearances else 0.0
    return ScoreVector(scores, "bws")


def rank_of(scores: ScoreVector) -> list[str]:
    """Ids sorted by descending score, ties broken by ascending id."""
    return sorted(scores.entries, key=lambda d: (-scores.entries[d], d))


def save_scores(scores: ScoreVector, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# scores v1 provenance={scores.provenance}\n")
        for d in sorted(scores.entries):
            fh.write(f"{d}\t{scores.entries[d]!r}\n")


def load_scores(path) -> ScoreVector:
    provenance = "bws"
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                for tok in line.split():
                    if tok.startswith("provenance="):
                        provenance = tok.split("=", 1)[1]
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise ValueError(f"{path}:{lineno}: expected id<TAB>score")
            entries[cols[0]] = float(cols[1])
    return ScoreVector(entries, provenance)
