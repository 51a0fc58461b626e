"""Command-line entry point and experiment orchestration.

Subcommands: bws, synth, subsample, train, predict, stack, eval, experiment.
Configuration files are INI-style with one section per module; every default
is overridable. All stage seeds derive from the master seed by stable
hashing, so a configuration fully determines the outputs.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import bws as bws_mod
from . import corpus, directranker, evaluation, gppl, stacking, synth

DEFAULT_FRACTIONS = (0.6, 0.33, 0.2, 0.1)
MODEL_KINDS = ("gppl", "directranker", "gppl_cv", "directranker_cv", "stack")


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage


@contextmanager
def _stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, str(exc)) from exc


def stage_seed(master_seed: int, *tokens) -> int:
    """Derive a stage seed by hashing the master seed with the stage name."""
    key = "|".join([str(master_seed)] + [str(t) for t in tokens])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**31 - 1)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    pairs_path: str
    feature_paths: dict
    fractions: tuple = DEFAULT_FRACTIONS
    n_repeats: int = 3
    models: tuple = ("gppl", "directranker", "stack")
    outdir: str = "prefrank-out"
    seed: int = 0
    gppl_config: gppl.GpplConfig = field(default_factory=gppl.GpplConfig)
    gppl_features: str = "default"
    ranker_config: directranker.RankerConfig = field(
        default_factory=directranker.RankerConfig
    )
    ranker_features: str = "default"
    stack_level0: tuple = (("gppl", "default"), ("directranker", "default"))
    stack_folds: int = 4

    def __post_init__(self):
        if not all(0.0 < f <= 1.0 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1]")
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be at least 1")
        for m in self.models:
            if m not in MODEL_KINDS:
                raise ValueError(f"unknown model kind {m!r}")


def _parse_list(raw, conv=str):
    return tuple(conv(tok.strip()) for tok in raw.split(",") if tok.strip())


def _gppl_config_from(section) -> gppl.GpplConfig:
    base = gppl.GpplConfig()
    ls_raw = section.get("lengthscales", "").strip()
    lengthscales = None
    if ls_raw:
        vals = _parse_list(ls_raw, float)
        lengthscales = vals[0] if len(vals) == 1 else np.array(vals)
    return gppl.GpplConfig(
        sigma2=section.getfloat("sigma2", base.sigma2),
        signal_var=section.getfloat("signal_var", base.signal_var),
        lengthscales=lengthscales,
        n_inducing=section.getint("n_inducing", base.n_inducing),
        batch_size=section.getint("batch_size", base.batch_size),
        max_iters=section.getint("max_iters", base.max_iters),
        tol=section.getfloat("tol", base.tol),
        seed=section.getint("seed", base.seed),
        step_size=section.getfloat("step_size", base.step_size),
        optimize_hypers=section.getboolean("optimize_hypers", base.optimize_hypers),
    )


def _ranker_config_from(section) -> directranker.RankerConfig:
    base = directranker.RankerConfig()
    ppe = section.get("pairs_per_epoch", "").strip()
    focus_raw = section.get("focus_hidden_dims", "").strip()
    return directranker.RankerConfig(
        hidden_dims=_parse_list(section.get("hidden_dims", ""), int) or base.hidden_dims,
        focus_hidden_dims=_parse_list(focus_raw, int) if focus_raw else None,
        learning_rate=section.getfloat("learning_rate", base.learning_rate),
        dropout=section.getfloat("dropout", base.dropout),
        batch_norm=section.getboolean("batch_norm", base.batch_norm),
        pairs_per_epoch=int(ppe) if ppe else None,
        max_epochs=section.getint("max_epochs", base.max_epochs),
        patience=section.getint("patience", base.patience),
        seed=section.getint("seed", base.seed),
    )


def load_experiment_config(path) -> ExperimentConfig:
    ini = configparser.ConfigParser()
    if not ini.read(path):
        raise FileNotFoundError(f"cannot read config file {path}")
    exp = ini["experiment"]
    features = dict(ini["features"]) if ini.has_section("features") else {}
    if not features:
        raise ValueError("config needs a [features] section naming feature files")

    level0 = []
    if ini.has_section("stack"):
        raw = ini["stack"].get("level0", "")
        for tok in _parse_list(raw):
            kind, _, feat = tok.partition(":")
            level0.append((kind, feat or "default"))
    kwargs = {}
    if level0:
        kwargs["stack_level0"] = tuple(level0)
    g_sec = ini["gppl"] if ini.has_section("gppl") else ini["experiment"]
    r_sec = ini["directranker"] if ini.has_section("directranker") else ini["experiment"]
    return ExperimentConfig(
        pairs_path=exp["pairs"],
        feature_paths=features,
        fractions=_parse_list(exp.get("fractions", ""), float) or DEFAULT_FRACTIONS,
        n_repeats=exp.getint("repeats", 3),
        models=_parse_list(exp.get("models", "")) or ("gppl", "directranker", "stack"),
        outdir=exp.get("outdir", "prefrank-out"),
        seed=exp.getint("seed", 0),
        gppl_config=_gppl_config_from(g_sec),
        gppl_features=ini["gppl"].get("features", "default") if ini.has_section("gppl") else "default",
        ranker_config=_ranker_config_from(r_sec),
        ranker_features=ini["directranker"].get("features", "default") if ini.has_section("directranker") else "default",
        stack_folds=ini["stack"].getint("folds", 4) if ini.has_section("stack") else 4,
    )


# ---------------------------------------------------------------------------
# Experiment pipeline
# ---------------------------------------------------------------------------

def _feature_name(cfg: ExperimentConfig, name: str):
    if name not in cfg.feature_paths:
        raise ValueError(f"no feature file registered under {name!r}")
    return cfg.feature_paths[name]


def _train_one(kind, cfg, feats, split, eval_ids, train_pairs, bws_train, seed):
    """Train one requested model and return its scores on eval_ids."""
    train_ids = sorted(split.train_ids)
    test_ids = sorted(eval_ids)

    if kind == "gppl":
        g_cfg = replace(cfg.gppl_config, seed=seed)
        fm = feats[cfg.gppl_features]
        post = gppl.fit(fm.subset(train_ids), train_pairs, g_cfg)
        return gppl.predict(post, fm.subset(test_ids)).to_scores()

    if kind == "directranker":
        r_cfg = replace(cfg.ranker_config, seed=seed)
        fm = feats[cfg.ranker_features]
        model = directranker.train(fm.subset(train_ids), bws_train, r_cfg)
        return directranker.predict_scores(model, fm.subset(test_ids))

    if kind in ("gppl_cv", "directranker_cv"):
        base_kind = kind[: -len("_cv")]
        if base_kind == "gppl":
            spec = stacking.Level0Spec(
                "gppl", feats[cfg.gppl_features], replace(cfg.gppl_config, seed=seed)
            )
        else:
            spec = stacking.Level0Spec(
                "directranker", feats[cfg.ranker_features],
                replace(cfg.ranker_config, seed=seed),
            )
        stack_cfg = stacking.StackConfig((spec,), n_folds=cfg.stack_folds, seed=seed)
        model = stacking.fit_stack(split.train_ids, train_pairs, bws_train, stack_cfg)
        return stacking.predict_ensemble(model, 0, spec.features.subset(test_ids))

    if kind == "stack":
        specs = []
        for l0_kind, feat_name in cfg.stack_level0:
            fm = feats[feat_name]
            l0_cfg = (
                replace(cfg.gppl_config, seed=seed)
                if l0_kind == "gppl"
                else replace(cfg.ranker_config, seed=seed)
            )
            specs.append(stacking.Level0Spec(l0_kind, fm, l0_cfg, name=feat_name))
        stack_cfg = stacking.StackConfig(tuple(specs), n_folds=cfg.stack_folds, seed=seed)
        model = stacking.fit_stack(split.train_ids, train_pairs, bws_train, stack_cfg)
        return stacking.predict_stacked(
            model, [s.features.subset(test_ids) for s in specs]
        )

    raise ValueError(f"unknown model kind {kind!r}")


def run_experiment(cfg: ExperimentConfig):
    """Run the fraction x repeat grid and return the per-cell correlations.

    Per run: subsample doc ids, compute training scores from surviving pairs,
    train each requested model, evaluate against the gold scores of the test
    ids (computed from every pair touching them), and write a report file.
    Returns {model: {fraction: [rho per repeat]}} and writes a mean/std
    summary table.
    """
    os.makedirs(cfg.outdir, exist_ok=True)
    with _stage("load"):
        pairs = corpus.load_pairs(cfg.pairs_path)
        feats = {name: corpus.load_features(path)
                 for name, path in cfg.feature_paths.items()}
        first = next(iter(feats.values()))
        all_ids = set(first.doc_ids)
        for name, fm in feats.items():
            if set(fm.doc_ids) != all_ids:
                raise ValueError(f"feature file {name!r} covers a different id set")
        gold_all = bws_mod.compute_bws(all_ids, pairs)

    results = {m: {f: [] for f in cfg.fractions} for m in cfg.models}
    for fraction in cfg.fractions:
        for repeat in range(cfg.n_repeats):
            with _stage(f"subsample f={fraction} r={repeat}"):
                split, train_pairs = corpus.subsample_split(
                    all_ids, pairs, fraction,
                    stage_seed(cfg.seed, "split", fraction, repeat),
                )
                bws_train = bws_mod.compute_bws(split.train_ids, train_pairs)
                # fraction 1.0 leaves no held-out documents; evaluate in-sample
                eval_ids = split.test_ids or split.train_ids
                gold_test = gold_all.restrict(eval_ids)

            for kind in cfg.models:
                with _stage(f"train {kind} f={fraction} r={repeat}"):
                    scores = _train_one(
                        kind, cfg, feats, split, eval_ids, train_pairs, bws_train,
                        stage_seed(cfg.seed, "train", kind, fraction, repeat),
                    )
                with _stage(f"eval {kind} f={fraction} r={repeat}"):
                    report = evaluation.build_report(
                        scores, gold_test, model_id=kind,
                        fraction=fraction, seed=repeat,
                    )
                    out = os.path.join(
                        cfg.outdir, f"{kind}_f{fraction}_r{repeat}.report.txt"
                    )
                    evaluation.emit_report(report, out)
                    results[kind][fraction].append(report.spearman)

    with _stage("summary"):
        _write_summary(cfg, results)
    return results


def summarize(results):
    """Mean and standard deviation per model x fraction cell."""
    table = {}
    for model, per_fraction in results.items():
        table[model] = {
            f: (float(np.mean(v)), float(np.std(v)))
            for f, v in per_fraction.items()
        }
    return table


def _write_summary(cfg, results):
    table = summarize(results)
    path = os.path.join(cfg.outdir, "summary.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# summary v1 metric=spearman\n")
        fh.write("model\t" + "\t".join(str(f) for f in cfg.fractions) + "\n")
        for model in cfg.models:
            cells = [
                "%.4f±%.4f" % table[model][f] for f in cfg.fractions
            ]
            fh.write(model + "\t" + "\t".join(cells) + "\n")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_bws(args):
    with _stage("bws"):
        pairs = corpus.load_pairs(args.pairs, args.format)
        if args.features:
            ids = set(corpus.load_features(args.features).doc_ids)
        else:
            ids = {p.winner_id for p in pairs} | {p.loser_id for p in pairs}
        scores = bws_mod.compute_bws(ids, pairs)
        bws_mod.save_scores(scores, args.out)


def _cmd_synth(args):
    with _stage("synth"):
        ini = configparser.ConfigParser()
        if not ini.read(args.config):
            raise FileNotFoundError(f"cannot read config file {args.config}")
        sec = ini["synth"]
        cfg = synth.SynthConfig(
            n_docs=sec.getint("n_docs"),
            dim=sec.getint("dim"),
            utility_fn=sec.get("utility_fn", "linear"),
            pairs_total=sec.getint("pairs_total"),
            annotators_per_pair=sec.getint("annotators_per_pair", 1),
            sigma2=sec.getfloat("sigma2", 1.0),
            seed=args.seed if args.seed is not None else sec.getint("seed", 0),
        )
        features, truth, pairs = synth.generate(cfg)
        os.makedirs(args.out_dir, exist_ok=True)
        corpus.save_features(features, os.path.join(args.out_dir, "features.tsv"))
        corpus.save_pairs(pairs, os.path.join(args.out_dir, "pairs.tsv"))
        bws_mod.save_scores(truth, os.path.join(args.out_dir, "truth.tsv"))


def _cmd_subsample(args):
    with _stage("subsample"):
        pairs = corpus.load_pairs(args.pairs)
        ids = set(corpus.load_features(args.features).doc_ids)
        split, train_pairs = corpus.subsample_split(
            ids, pairs, args.fraction, args.seed or 0
        )
        os.makedirs(args.out_dir, exist_ok=True)
        corpus.save_pairs(train_pairs, os.path.join(args.out_dir, "train_pairs.tsv"))
        for name, members in (("train_ids.txt", split.train_ids),
                              ("test_ids.txt", split.test_ids)):
            with open(os.path.join(args.out_dir, name), "w", encoding="utf-8") as fh:
                for d in sorted(members):
                    fh.write(d + "\n")


def _section(path, name):
    ini = configparser.ConfigParser()
    if path:
        if not ini.read(path):
            raise FileNotFoundError(f"cannot read config file {path}")
    if not ini.has_section(name):
        ini.add_section(name)
    return ini[name]


def _cmd_train(args):
    with _stage(f"train {args.model}"):
        features = corpus.load_features(args.features)
        pairs = corpus.load_pairs(args.pairs)
        if args.model == "gppl":
            cfg = _gppl_config_from(_section(args.config, "gppl"))
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            post = gppl.fit(features, pairs, cfg)
            gppl.save_posterior(post, args.out)
        elif args.model == "directranker":
            cfg = _ranker_config_from(_section(args.config, "directranker"))
            if args.seed is not None:
                cfg = replace(cfg, seed=args.seed)
            scores = bws_mod.compute_bws(set(features.doc_ids), pairs)
            model = directranker.train(features, scores, cfg)
            directranker.save_model(model, args.out)
        else:
            raise ValueError(f"unknown model kind {args.model!r}")


def _cmd_predict(args):
    with _stage("predict"):
        features = corpus.load_features(args.features)
        if os.path.isdir(args.model):
            model = stacking.load_stack(args.model)
            scores = stacking.predict_stacked(
                model, [features] * len(model.specs)
            )
        else:
            with np.load(args.model, allow_pickle=False) as data:
                kind = str(data["container"][0])
            if kind == "gppl-posterior":
                scores = gppl.predict(gppl.load_posterior(args.model), features).to_scores()
            else:
                scores = directranker.predict_scores(
                    directranker.load_model(args.model), features
                )
        bws_mod.save_scores(scores, args.out)


def _cmd_stack(args):
    with _stage("stack"):
        pairs = corpus.load_pairs(args.pairs)
        specs = []
        for raw in args.level0:
            parts = raw.split(":")
            if len(parts) < 2:
                raise ValueError(
                    f"--level0 expects kind:features[:config], got {raw!r}"
                )
            kind, feat_path = parts[0], parts[1]
            cfg_path = parts[2] if len(parts) > 2 else None
            fm = corpus.load_features(feat_path)
            if kind == "gppl":
                l0_cfg = _gppl_config_from(_section(cfg_path, "gppl"))
            elif kind == "directranker":
                l0_cfg = _ranker_config_from(_section(cfg_path, "directranker"))
            else:
                raise ValueError(f"unknown level-0 kind {kind!r}")
            specs.append(stacking.Level0Spec(kind, fm, l0_cfg, name=feat_path))
        id_sets = [set(s.features.doc_ids) for s in specs]
        ids = set.intersection(*id_sets)
        train_pairs = [p for p in pairs
                       if p.winner_id in ids and p.loser_id in ids]
        target = bws_mod.compute_bws(ids, train_pairs)
        cfg = stacking.StackConfig(tuple(specs), n_folds=args.folds,
                                   seed=args.seed or 0)
        model = stacking.fit_stack(ids, train_pairs, target, cfg)
        stacking.save_stack(model, args.out)


def _cmd_eval(args):
    with _stage("eval"):
        pred = bws_mod.load_scores(args.pred)
        gold = bws_mod.load_scores(args.gold)
        report = evaluation.build_report(pred, gold, model_id=pred.provenance)
        evaluation.emit_report(report, args.out)
        print(f"spearman\t{report.spearman:.6f}")


def _cmd_experiment(args):
    with _stage("experiment"):
        cfg = load_experiment_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out:
            cfg = replace(cfg, outdir=args.out)
        results = run_experiment(cfg)
        table = summarize(results)
        header = ["model"] + [str(f) for f in cfg.fractions]
        print("\t".join(header))
        for model in cfg.models:
            row = [model] + ["%.4f±%.4f" % table[model][f] for f in cfg.fractions]
            print("\t".join(row))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="prefrank",
        description="Preference learning toolkit: score, rank, and evaluate "
                    "documents from sparse pairwise comparisons.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bws", help="best-worst-scaling scores from pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--format", choices=("pairs", "tuples"), default="pairs")
    p.add_argument("--features", help="feature file defining the full id set")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bws)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("subsample", help="doc-id train/test split")
    p.add_argument("--pairs", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_subsample)

    p = sub.add_parser("train", help="train a single ranker")
    p.add_argument("--model", choices=("gppl", "directranker"), required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="score documents with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("stack", help="train a stacked combination")
    p.add_argument("--level0", action="append", required=True,
                   metavar="KIND:FEATURES[:CONFIG]")
    p.add_argument("--pairs", required=True)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_stack)

    p = sub.add_parser("eval", help="evaluate predictions against gold scores")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("experiment", help="run the fraction x repeat protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        print(f"[{exc.stage}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
