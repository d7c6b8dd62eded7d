"""Command-line experiment runner.

Subcommands cover the full lifecycle: ``prepare`` (ingest/filter/split/stats),
``synth`` (generate the two-domain synthetic pair), ``train`` (supervised /
adversarial / feature-augmentation), ``sweep`` (lambda grid), ``finetune``
(labeled-fraction curve), ``selftrain`` (teacher/student), and ``eval``
(transfer matrix + disagreement export). Everything is driven by one config
file plus ``--set key=value`` overrides; every run directory receives the
materialized config and its hash.

Exit codes: 0 success, 1 validation/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import CONFIG_SCHEMA_VERSION, __version__, kernels
from .config import config_hash, load_config, save_config
from .corpus import (
    Corpus,
    RealisPolicy,
    SyntheticSpec,
    compute_stats,
    default_synthetic_spec,
    filter_unrealized_events,
    load_corpus,
    make_synthetic_pair,
    split_corpus,
    write_corpus,
)
from .errors import AdatrigError, ValidationError
from .evaluation import (
    build_transfer_matrix,
    evaluate_model,
    export_disagreements,
    score,
    write_disagreements,
    write_transfer_matrix,
)
from .features import (
    FeaturePlan,
    FeatureSpace,
    build_pos_vocab,
    build_vocab,
    import_contextual_features,
    load_pretrained_embeddings,
)
from .nets import PLAN_FOR_KIND, load_checkpoint, save_checkpoint
from .selftrain import SelfTrainSpec, self_train
from .training import (
    AdaConfig,
    domain_probe_accuracy,
    finetune,
    run_finetune_sweep,
    train_ada,
    train_feda,
    train_supervised,
    unlabeled_sequences,
)
from .util import pct

log = logging.getLogger("adatrig")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _ada_config(cfg: dict, seed: int | None = None, lambda_: float | None = None) -> AdaConfig:
    t = cfg["training"]
    return AdaConfig(
        lambda_=t["lambda"] if lambda_ is None else lambda_,
        batch_size=t["batch_size"],
        max_epochs=t["max_epochs"],
        finetune_epochs=t["finetune_epochs"],
        patience=t["patience"],
        learning_rate=t["learning_rate"],
        pooling=cfg["model"]["pooling"],
        seed=t["seed"] if seed is None else seed,
        hidden=cfg["model"]["hidden"],
        input_dropout=t["input_dropout"],
        embed_init_scale=t["embed_init_scale"],
        max_grad_norm=t["max_grad_norm"],
        domain_loss_domains=t["domain_loss_domains"],
        lambda_grid=tuple(t["lambda_grid"]),
    )


def _out_root(cfg: dict) -> Path:
    return Path(cfg["output"]["root"])


def _run_dir(cfg: dict, default_name: str) -> Path:
    name = cfg["output"]["name"] or default_name
    return _out_root(cfg) / "runs" / name


def _load_synthetic_spec(cfg: dict) -> SyntheticSpec:
    setting = cfg["data"]["synthetic"]
    if setting in (None, "default"):
        p = cfg["data"]["synthetic_params"]
        return default_synthetic_spec(
            n_templates=p["n_templates"],
            n_content=p["n_content"],
            densities=tuple(p["densities"]),
            n_sentences=tuple(p["n_sentences"]),
            seed=p["seed"],
        )
    path = Path(setting)
    if not path.exists():
        raise ValidationError(f"synthetic spec not found: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    return SyntheticSpec.from_dict(data)


def _load_pair(cfg: dict) -> tuple[Corpus, Corpus]:
    """Load (or synthesize) the source/target corpora, splitting if needed."""
    data = cfg["data"]
    if data["synthetic"] is not None:
        spec = _load_synthetic_spec(cfg)
        source, target = make_synthetic_pair(spec, data["synthetic_seed"])
    else:
        if not data["source"] or not data["target"]:
            raise ValidationError("config needs data.source and data.target (or data.synthetic)")
        source = load_corpus(data["source"])
        target = load_corpus(data["target"])
    out = []
    for corpus in (source, target):
        if data["realis_filter"]:
            policy = (
                RealisPolicy.from_file(data["realis_policy"])
                if data["realis_policy"]
                else RealisPolicy()
            )
            corpus = filter_unrealized_events(corpus, policy)
        if not corpus.splits or data["resplit"]:
            corpus = split_corpus(corpus, tuple(data["split"]), data["split_seed"])
        out.append(corpus)
    return out[0], out[1]


def _feature_space(cfg: dict, source: Corpus, target: Corpus) -> tuple[FeatureSpace, object]:
    """Build the shared vocabulary, plan, and optional tables/stores."""
    f = cfg["features"]
    kind = cfg["model"]["learner"]
    plan = FeaturePlan(
        kind=PLAN_FOR_KIND[kind],
        word_dim=f["word_dim"],
        pos_dim=f["pos_dim"],
        contextual_dim=f["contextual_dim"],
    )
    vocab = build_vocab(source, target, min_count=f["min_count"], case_fold=f["case_fold"])
    pos_vocab = build_pos_vocab(source, target) if kind == "POS" else None
    store = None
    if kind == "CONTEXTUAL":
        if not f["contextual_store"]:
            raise ValidationError("CONTEXTUAL learner requires features.contextual_store")
        merged = Corpus(
            "merged", tuple(source.sentences) + tuple(target.sentences)
        )
        store = import_contextual_features(f["contextual_store"], merged, f["alignment"])
    word_table = None
    if f["embeddings"]:
        word_table = load_pretrained_embeddings(f["embeddings"], vocab, expected_dim=f["word_dim"])
    feats = FeatureSpace(vocab, plan, pos_vocab=pos_vocab, store=store)
    return feats, word_table


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    spec = _load_synthetic_spec(cfg)
    source, target = make_synthetic_pair(spec, cfg["data"]["synthetic_seed"])
    out = _out_root(cfg) / "prepared"
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(source, out / f"{source.name}.tsv")
    write_corpus(target, out / f"{target.name}.tsv")
    (out / "synthetic_spec.yaml").write_text(
        yaml.safe_dump(spec.to_dict(), sort_keys=True), encoding="utf-8"
    )
    print(f"wrote {source.name} and {target.name} under {out}")
    return 0


def cmd_prepare(cfg: dict) -> int:
    source, target = _load_pair(cfg)
    if source.name == target.name:
        raise ValidationError(
            f"source and target corpora share the name {source.name!r}; "
            "rename one (the prepared files would collide)"
        )
    out = _out_root(cfg) / "prepared"
    out.mkdir(parents=True, exist_ok=True)
    stats = {}
    for corpus in (source, target):
        write_corpus(corpus, out / f"{corpus.name}.tsv")
        st = compute_stats(corpus)
        stats[corpus.name] = {
            "n_docs": st.n_docs,
            "n_tokens": st.n_tokens,
            "n_events": st.n_events,
            "density": st.density,
            "density_pct": pct(st.density, 2),
            "splits": {k: len(v) for k, v in corpus.splits.items()},
        }
    vocab = build_vocab(
        source, target, cfg["features"]["min_count"], cfg["features"]["case_fold"]
    )
    (out / "vocab.json").write_text(
        json.dumps({"tokens": list(vocab.tokens), "case_fold": vocab.case_fold}, indent=2),
        encoding="utf-8",
    )
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True), encoding="utf-8")
    save_config(cfg, out / "config.yaml")
    for name, st in stats.items():
        print(
            f"{name}: docs={st['n_docs']} tokens={st['n_tokens']} "
            f"events={st['n_events']} density={st['density_pct']:.2f}%"
        )
    return 0


def _train_one(cfg: dict, seed: int | None = None, lambda_: float | None = None,
               run_dir: Path | None = None) -> dict:
    """Train per config; write run artifacts; return the result summary."""
    mode = cfg["training"]["mode"]
    kind = cfg["model"]["learner"]
    acfg = _ada_config(cfg, seed=seed, lambda_=lambda_)
    source, target = _load_pair(cfg)
    feats, word_table = _feature_space(cfg, source, target)

    run_dir = run_dir or _run_dir(cfg, f"{mode}-{kind.lower()}-seed{acfg.seed}")
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")

    t0 = time.perf_counter()
    if mode == "supervised":
        result = train_supervised(kind, source, acfg, feats, word_table=word_table)
    elif mode == "ada":
        result = train_ada(
            kind, source, unlabeled_sequences(target), acfg, feats, word_table=word_table
        )
    else:
        result = train_feda(kind, source, target, acfg, feats, word_table=word_table)
    wall = time.perf_counter() - t0

    with (run_dir / "trainlog.jsonl").open("w", encoding="utf-8") as fh:
        for entry in result.log:
            fh.write(json.dumps(entry.as_dict()) + "\n")

    model = result.model
    save_checkpoint(model, run_dir / "best.ckpt", config_hash(cfg))
    if result.final_snapshot is not None:
        best = model.snapshot()
        model.restore(result.final_snapshot)
        save_checkpoint(model, run_dir / "final.ckpt", config_hash(cfg))
        model.restore(best)

    metrics: dict = {
        "best_epoch": result.best_epoch,
        "best_dev_f1": result.best_dev_f1,
        "n_epochs": len(result.log),
    }
    if mode == "feda":
        metrics["source_test_f1"] = evaluate_model_with_domain(model, source, 0)
        metrics["target_test_f1"] = evaluate_model_with_domain(model, target, 1)
    else:
        metrics["in_domain_test_f1"] = evaluate_model(model, source.split("test")).f1
        metrics["out_domain_test_f1"] = evaluate_model(model, target.split("test")).f1
    if mode == "ada":
        metrics["heldout_domain_acc"] = domain_probe_accuracy(
            model, source.split("dev"), target.split("dev"), feats
        )
    summary = {
        "config_hash": config_hash(cfg),
        "schema_version": CONFIG_SCHEMA_VERSION,
        "backend": kernels.backend_name(),
        "mode": mode,
        "learner": kind,
        "lambda": acfg.lambda_,
        "seed": acfg.seed,
        "metrics": metrics,
        "wall_time": wall,
    }
    (run_dir / "result.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8"
    )
    return summary


def evaluate_model_with_domain(model, corpus: Corpus, domain: int) -> float:
    sentences = corpus.split("test")
    pred = model.predict(sentences, domain)
    gold = [list(s.tags) for s in sentences]
    return score(pred, gold).f1


def cmd_train(cfg: dict) -> int:
    summary = _train_one(cfg)
    print(json.dumps(summary["metrics"], indent=2, sort_keys=True))
    return 0


def _sweep_worker(args):
    cfg, lam, seed, run_dir = args
    return _train_one(cfg, seed=seed, lambda_=lam, run_dir=Path(run_dir))


def cmd_sweep(cfg: dict) -> int:
    grid = cfg["training"]["lambda_grid"]
    if not grid:
        raise ValidationError("training.lambda_grid is empty")
    if cfg["training"]["mode"] != "ada":
        raise ValidationError("sweep requires training.mode=ada")
    seeds = cfg["training"]["seeds"] or [cfg["training"]["seed"]]
    base = _run_dir(cfg, "sweep")
    jobs = []
    for lam in grid:
        for seed in seeds:
            jobs.append((cfg, lam, seed, str(base / f"lam{lam}-seed{seed}")))
    workers = int(cfg["output"]["workers"])
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(job) for job in jobs]

    by_lambda: dict[float, list[dict]] = {}
    for res in results:
        by_lambda.setdefault(res["lambda"], []).append(res)
    aggregates = []
    for lam in grid:
        rows = by_lambda[lam]
        dev = float(np.mean([r["metrics"]["best_dev_f1"] for r in rows]))
        dacc = float(np.mean([r["metrics"].get("heldout_domain_acc", 0.5) for r in rows]))
        aggregates.append(
            {"lambda": lam, "mean_dev_f1": dev, "mean_heldout_domain_acc": dacc, "best": False}
        )
    # best lambda: max dev F1; ties broken by domain accuracy closest to 0.5
    key = lambda a: (round(a["mean_dev_f1"], 6), -abs(a["mean_heldout_domain_acc"] - 0.5))
    best = max(aggregates, key=key)
    best["best"] = True
    base.mkdir(parents=True, exist_ok=True)
    (base / "sweep.json").write_text(
        json.dumps({"runs": results, "aggregate": aggregates}, indent=2, sort_keys=True),
        encoding="utf-8",
    )
    for agg in aggregates:
        flag = " <-- best" if agg["best"] else ""
        print(
            f"lambda={agg['lambda']:<4} dev_f1={agg['mean_dev_f1']:.4f} "
            f"domain_acc={agg['mean_heldout_domain_acc']:.3f}{flag}"
        )
    return 0


def _base_model(cfg: dict, source: Corpus, target: Corpus, feats, word_table):
    """Load the finetune/selftrain base model from a checkpoint, or train it."""
    ckpt = cfg["finetune"]["base_ckpt"] or cfg["selftrain"]["teacher_ckpt"]
    if ckpt:
        model = load_checkpoint(ckpt, store=feats.store)
        return model
    mode = cfg["training"]["mode"]
    kind = cfg["model"]["learner"]
    acfg = _ada_config(cfg)
    if mode == "ada":
        result = train_ada(kind, source, unlabeled_sequences(target), acfg, feats, word_table=word_table)
    elif mode == "supervised":
        result = train_supervised(kind, source, acfg, feats, word_table=word_table)
    else:
        raise ValidationError("finetune/selftrain base must be mode supervised or ada")
    return result.model


def cmd_finetune(cfg: dict) -> int:
    source, target = _load_pair(cfg)
    feats, word_table = _feature_space(cfg, source, target)
    model = _base_model(cfg, source, target, feats, word_table)
    acfg = _ada_config(cfg)
    percents = cfg["finetune"]["percents"]
    seeds = cfg["training"]["seeds"] or [cfg["training"]["seed"]]
    report = run_finetune_sweep(model, target, percents, seeds, acfg)
    run_dir = _run_dir(cfg, "finetune")
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")
    (run_dir / "curve.json").write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True), encoding="utf-8"
    )
    lines = ["percent\tmean_f1\tstd_f1"]
    for row in report.rows:
        lines.append(f"{row.percent}\t{row.mean_f1:.6f}\t{row.std_f1:.6f}")
        print(f"{pct(row.percent):4.1f}% labeled -> F1 {pct(row.mean_f1):5.1f} ± {pct(row.std_f1):.1f}")
    (run_dir / "curve.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return 0


def cmd_selftrain(cfg: dict) -> int:
    source, target = _load_pair(cfg)
    feats, word_table = _feature_space(cfg, source, target)
    teacher = _base_model(cfg, source, target, feats, word_table)
    acfg = _ada_config(cfg)
    st = cfg["selftrain"]
    spec = SelfTrainSpec(
        teacher=teacher,
        cfg=acfg,
        labeled_fraction=st["labeled_fraction"],
        iterations=st["iterations"],
        student_kind=st["student"],
        student_max_epochs=st["student_max_epochs"],
    )
    if spec.student_kind != teacher.kind:
        # student encodes with its own plan; reuse vocab, swap the plan kind
        student_plan = FeaturePlan(
            kind=PLAN_FOR_KIND[spec.student_kind],
            word_dim=cfg["features"]["word_dim"],
            pos_dim=cfg["features"]["pos_dim"],
            contextual_dim=cfg["features"]["contextual_dim"],
        )
        feats = FeatureSpace(feats.vocab, student_plan, pos_vocab=feats.pos_vocab, store=feats.store)
    result = self_train(spec, target, feats)
    run_dir = _run_dir(cfg, "selftrain")
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")
    write_corpus(result.pseudo_corpus, run_dir / "pseudo_labels.tsv")
    save_checkpoint(result.student, run_dir / "student.ckpt", config_hash(cfg))
    report = {
        "teacher": result.teacher_report.as_dict(),
        "student": result.report.as_dict(),
        "iterations": result.iteration_reports,
        "n_label_passes": result.n_label_passes,
    }
    (run_dir / "selftrain_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True), encoding="utf-8"
    )
    print(
        f"teacher F1 {pct(result.teacher_report.f1):5.1f} -> "
        f"student F1 {pct(result.report.f1):5.1f}"
    )
    return 0


def cmd_eval(cfg: dict) -> int:
    source, target = _load_pair(cfg)
    ckpts = cfg["eval"]["models"]
    if not ckpts:
        raise ValidationError("eval.models must list at least one checkpoint directory")
    corpora = {source.name: source, target.name: target}
    models = {}
    for ckpt in ckpts:
        model = load_checkpoint(ckpt)
        model_id = Path(ckpt).parent.name or Path(ckpt).name
        if model.train_domain is None:
            model.train_domain = source.name
        models[model_id] = model
    matrix = build_transfer_matrix(models, corpora, cfg["eval"]["out_of_domain"])
    run_dir = _run_dir(cfg, "eval")
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")
    write_transfer_matrix(matrix, run_dir)
    print(matrix.render_text())
    if len(models) >= 2:
        ids = list(models)
        limit = cfg["eval"]["disagreement_limit"]
        for name, corpus in corpora.items():
            rows = export_disagreements(models[ids[0]], models[ids[1]], corpus, limit)
            write_disagreements(rows, run_dir / f"disagreements_{name}.tsv")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


COMMANDS = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "finetune": cmd_finetune,
    "selftrain": cmd_selftrain,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = _Parser(prog="adatrig", description=__doc__)
    parser.add_argument(
        "--version",
        action="version",
        version=f"adatrig {__version__} (config schema v{CONFIG_SCHEMA_VERSION})",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="path to the experiment config (YAML)")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config value (dotted path)",
        )
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit:
        raise
    except AdatrigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
