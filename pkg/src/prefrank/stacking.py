"""Stacked generalization of base rankers.

Level-0 models (GP preference learning, the pairwise neural ranker, or
precomputed score tables) are trained on n cross-validation folds of the
training ids; a linear level-1 meta-model per fold is fit by least squares
from the level-0 scores on the held-out fold to the best-worst-scaling
target. The final prediction averages the n meta-model outputs.

Level-0 score columns are standardized with held-out-fold statistics before
the linear fit, so GP utilities and tanh scores on incompatible scales (and
any positive affine transform of either) lead to the same stacked ranking.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from . import directranker as dr
from . import gppl
from .bws import ScoreVector, compute_bws
from .corpus import FeatureMatrix

logger = logging.getLogger(__name__)

LEVEL0_KINDS = ("gppl", "directranker", "precomputed")


class StackingError(ValueError):
    """Raised for invalid stacking configurations or inputs."""


@dataclass(frozen=True)
class Level0Spec:
    """One base ranker: its kind, the feature matrix it reads, and its config.

    kind "precomputed" treats `config` as a ScoreVector and skips training;
    it exists for score-file stacking and for testing the meta level.
    """

    kind: str
    features: FeatureMatrix | None
    config: object
    name: str = ""

    def __post_init__(self):
        if self.kind not in LEVEL0_KINDS:
            raise StackingError(f"unknown level-0 kind {self.kind!r}")


@dataclass(frozen=True)
class StackConfig:
    level0_specs: tuple
    n_folds: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "level0_specs", tuple(self.level0_specs))
        if self.n_folds < 2:
            raise StackingError("n_folds must be at least 2")
        if not self.level0_specs:
            raise StackingError("at least one level-0 spec is required")


@dataclass(frozen=True)
class FoldModel:
    train_ids: frozenset
    val_ids: frozenset
    models: tuple            # one fitted level-0 model per spec
    col_means: np.ndarray
    col_stds: np.ndarray
    weights: np.ndarray      # one weight per spec
    intercept: float
    uniform_fallback: bool = False


@dataclass(frozen=True)
class StackModel:
    specs: tuple
    folds: tuple

    def __post_init__(self):
        for fold in self.folds:
            if len(fold.weights) != len(self.specs):
                raise StackingError("meta-model width must equal the level-0 count")


def make_folds(ids, n: int, seed: int):
    """Partition ids into n (train, val) folds; val sets are disjoint,
    jointly exhaustive, and differ in size by at most one."""
    all_ids = sorted(ids)
    if len(all_ids) < n:
        raise StackingError(f"cannot make {n} folds from {len(all_ids)} ids")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(all_ids))
    shuffled = [all_ids[i] for i in order]
    folds = []
    for chunk in np.array_split(np.arange(len(shuffled)), n):
        val = frozenset(shuffled[i] for i in chunk)
        train = frozenset(shuffled[i] for i in range(len(shuffled)) if shuffled[i] not in val)
        folds.append((train, val))
    return folds


def _pairs_within(pairs, ids):
    return [p for p in pairs if p.winner_id in ids and p.loser_id in ids]


def _fit_level0(spec: Level0Spec, fold_train_ids, pairs, seed_offset: int):
    train_pairs = _pairs_within(pairs, fold_train_ids)
    if spec.kind == "gppl":
        cfg = spec.config
        if seed_offset:
            cfg = replace(cfg, seed=cfg.seed + seed_offset)
        fm = spec.features.subset(fold_train_ids)
        return gppl.fit(fm, train_pairs, cfg)
    if spec.kind == "directranker":
        cfg = spec.config
        if seed_offset:
            cfg = replace(cfg, seed=cfg.seed + seed_offset)
        fold_bws = compute_bws(fold_train_ids, train_pairs)
        return dr.train(spec.features.subset(fold_train_ids), fold_bws, cfg)
    return spec.config  # precomputed ScoreVector


def _fit_level0_with_val(spec: Level0Spec, fold_train_ids, val_ids, pairs,
                         target: ScoreVector, seed_offset: int):
    """Like _fit_level0 but lets the neural ranker early-stop on the held-out
    fold, mirroring how the cross-validation ensembles pick their best epoch."""
    if spec.kind != "directranker":
        return _fit_level0(spec, fold_train_ids, pairs, seed_offset)

    cfg = spec.config
    if seed_offset:
        cfg = replace(cfg, seed=cfg.seed + seed_offset)
    train_pairs = _pairs_within(pairs, fold_train_ids)
    fold_bws = compute_bws(fold_train_ids, train_pairs)
    val = (spec.features.subset(val_ids), target.restrict(val_ids))
    return dr.train(spec.features.subset(fold_train_ids), fold_bws, cfg, val=val)


def _predict_level0(spec: Level0Spec, model, features: FeatureMatrix | None,
                    ids) -> np.ndarray:
    ids = sorted(ids)
    if spec.kind == "gppl":
        pred = gppl.predict(model, features.subset(ids))
        return np.array([pred.mean_of(d) for d in ids])
    if spec.kind == "directranker":
        scores = dr.predict_scores(model, features.subset(ids))
        return np.array([scores[d] for d in ids])
    missing = [d for d in ids if d not in model.entries]  # precomputed
    if missing:
        raise StackingError(f"precomputed scores missing for ids: {missing[:5]}")
    return np.array([model[d] for d in ids])


def fit_stack(train_ids, pairs, bws_train: ScoreVector, cfg: StackConfig) -> StackModel:
    """Train level-0 models per fold and a least-squares meta-model on the
    held-out scores. Pairs crossing into a fold's held-out set are dropped
    from that fold's level-0 training."""
    train_ids = set(train_ids)
    missing = train_ids - bws_train.ids()
    if missing:
        raise StackingError(
            f"best-worst scores missing for training ids: {sorted(missing)[:5]}"
        )
    for spec in cfg.level0_specs:
        if spec.kind != "precomputed" and spec.features is None:
            raise StackingError(f"level-0 kind {spec.kind!r} requires features to train")
    folds = make_folds(train_ids, cfg.n_folds, cfg.seed)

    fold_models = []
    for fold_no, (fold_train, fold_val) in enumerate(folds):
        val_ids = sorted(fold_val)
        models = tuple(
            _fit_level0_with_val(spec, fold_train, val_ids, pairs, bws_train,
                                 seed_offset=fold_no + 1)
            for spec in cfg.level0_specs
        )
        columns = [
            _predict_level0(spec, model, spec.features, val_ids)
            for spec, model in zip(cfg.level0_specs, models)
        ]
        Z = np.column_stack(columns)
        target = np.array([bws_train[d] for d in val_ids])

        means = Z.mean(axis=0)
        stds = Z.std(axis=0)
        degenerate = stds < 1e-10
        stds = np.where(degenerate, 1.0, stds)
        Zs = (Z - means) / stds

        uniform = bool(degenerate.any())
        if not uniform:
            design = np.column_stack([np.ones(len(val_ids)), Zs])
            coef, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
            if rank < design.shape[1]:
                uniform = True
        if uniform:
            logger.warning(
                "fold %d: degenerate level-0 design; falling back to uniform weights",
                fold_no,
            )
            weights = np.full(Z.shape[1], 1.0 / Z.shape[1])
            intercept = float(target.mean())
        else:
            intercept = float(coef[0])
            weights = coef[1:]

        fold_models.append(FoldModel(
            train_ids=frozenset(fold_train),
            val_ids=frozenset(fold_val),
            models=models,
            col_means=means,
            col_stds=stds,
            weights=weights,
            intercept=intercept,
            uniform_fallback=uniform,
        ))
    return StackModel(specs=cfg.level0_specs, folds=tuple(fold_models))


def predict_stacked(model: StackModel, test_features, combine: str = "score_mean") -> ScoreVector:
    """Score the test set with every fold's level-0 models and meta-model,
    then combine the n fold predictions.

    `test_features` is one FeatureMatrix per level-0 spec (None entries reuse
    the spec's training features). combine="score_mean" averages the meta
    outputs; "rank_mean" averages rank positions instead.
    """
    if combine not in ("score_mean", "rank_mean"):
        raise StackingError(f"unknown combine mode {combine!r}")
    if len(test_features) != len(model.specs):
        raise StackingError(
            f"{len(test_features)} feature matrices for {len(model.specs)} level-0 specs"
        )
    features = [
        tf if tf is not None else spec.features
        for spec, tf in zip(model.specs, test_features)
    ]
    id_sets = [set(f.doc_ids) for f in features if f is not None]
    if id_sets:
        ids = sorted(id_sets[0])
        for f, members in zip(features, id_sets):
            if members != id_sets[0]:
                diff = sorted(id_sets[0] ^ members)[:5]
                raise StackingError(
                    f"level-0 feature matrices disagree on ids (e.g. {diff})"
                )
    else:
        # precomputed-only stack: score whatever ids every stored table covers
        id_sets = [
            set(fitted.entries)
            for fold in model.folds
            for fitted in fold.models
        ]
        ids = sorted(set.intersection(*id_sets))
    if not ids:
        raise StackingError("level-0 inputs share no document ids")

    fold_preds = []
    for fold in model.folds:
        columns = []
        for spec, fitted, fm in zip(model.specs, fold.models, features):
            columns.append(_predict_level0(spec, fitted, fm, ids))
        Zs = (np.column_stack(columns) - fold.col_means) / fold.col_stds
        fold_preds.append(fold.intercept + Zs @ fold.weights)

    stacked = np.vstack(fold_preds)
    if combine == "rank_mean":
        combined = np.mean(
            [stats.rankdata(row, method="average") for row in stacked], axis=0
        )
    else:
        combined = stacked.mean(axis=0)
    return ScoreVector({d: float(combined[i]) for i, d in enumerate(ids)}, "stacked")


def predict_ensemble(model: StackModel, spec_index: int,
                     test_features: FeatureMatrix | None = None) -> ScoreVector:
    """Mean over folds of one level-0 model's raw scores (the n-fold
    cross-validation ensemble of a single base ranker)."""
    spec = model.specs[spec_index]
    fm = test_features if test_features is not None else spec.features
    ids = sorted(fm.doc_ids)
    preds = np.vstack([
        _predict_level0(spec, fold.models[spec_index], fm, ids)
        for fold in model.folds
    ])
    mean = preds.mean(axis=0)
    provenance = spec.kind if spec.kind in ("gppl", "directranker") else "stacked"
    return ScoreVector({d: float(mean[i]) for i, d in enumerate(ids)}, provenance)


# ---------------------------------------------------------------------------
# Model container (directory layout: meta.json + per-fold level-0 files)
# ---------------------------------------------------------------------------

def save_stack(model: StackModel, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    meta = {
        "container": "stack-model",
        "version": 1,
        "specs": [{"kind": s.kind, "name": s.name} for s in model.specs],
        "folds": [],
    }
    for fi, fold in enumerate(model.folds):
        entry = {
            "train_ids": sorted(fold.train_ids),
            "val_ids": sorted(fold.val_ids),
            "col_means": fold.col_means.tolist(),
            "col_stds": fold.col_stds.tolist(),
            "weights": fold.weights.tolist(),
            "intercept": fold.intercept,
            "uniform_fallback": fold.uniform_fallback,
            "models": [],
        }
        for si, (spec, fitted) in enumerate(zip(model.specs, fold.models)):
            fname = f"fold{fi}_spec{si}.{spec.kind}"
            path = os.path.join(dirpath, fname)
            if spec.kind == "gppl":
                gppl.save_posterior(fitted, path)
            elif spec.kind == "directranker":
                dr.save_model(fitted, path)
            else:
                from .bws import save_scores
                save_scores(fitted, path)
            entry["models"].append(fname)
        meta["folds"].append(entry)
    with open(os.path.join(dirpath, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def load_stack(dirpath, features_per_spec=None) -> StackModel:
    """Load a stack container; `features_per_spec` re-binds feature matrices
    (they are not serialized with the model)."""
    with open(os.path.join(dirpath, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("container") != "stack-model" or meta.get("version") != 1:
        raise StackingError(f"{dirpath}: not a v1 stack container")
    specs = []
    for si, s in enumerate(meta["specs"]):
        fm = features_per_spec[si] if features_per_spec else None
        cfg_placeholder = (
            ScoreVector({}, "stacked") if s["kind"] == "precomputed" else None
        )
        specs.append(Level0Spec(s["kind"], fm, cfg_placeholder, s.get("name", "")))
    folds = []
    for entry in meta["folds"]:
        models = []
        for s, fname in zip(meta["specs"], entry["models"]):
            path = os.path.join(dirpath, fname)
            if s["kind"] == "gppl":
                models.append(gppl.load_posterior(path))
            elif s["kind"] == "directranker":
                models.append(dr.load_model(path))
            else:
                from .bws import load_scores
                models.append(load_scores(path))
        folds.append(FoldModel(
            train_ids=frozenset(entry["train_ids"]),
            val_ids=frozenset(entry["val_ids"]),
            models=tuple(models),
            col_means=np.array(entry["col_means"]),
            col_stds=np.array(entry["col_stds"]),
            weights=np.array(entry["weights"]),
            intercept=entry["intercept"],
            uniform_fallback=entry["uniform_fallback"],
        ))
    return StackModel(specs=tuple(specs), folds=tuple(folds))
