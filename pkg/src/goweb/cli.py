"""Command-line entry point: ``goweb <command> [options]``.

Every command resolves its configuration (preset, then ``--config`` overlay,
then ``--seed``), embeds it in the artifact it writes and prints a single
summary line. Exit codes: 0 ok, 2 missing input, 3 bad config, 4 numerical
or gradient-check failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio, metrics, pipeline
from .config import PRESETS, ConfigError, RunConfig, load_config
from .goal_embed import GoalEmbeddingTable, evaluate_reconstruction, hierarchy_norm_profile
from .page_encoder import GoalEstimator, read_weak_labels, split_weak, train_goal_estimator, write_weak_labels
from .session_model import Corpus, GoWebModel
from .taxonomy import TaxonomyError, closure_pairs, dump_taxonomy, load_taxonomy

log = logging.getLogger("goweb")

EXIT_MISSING, EXIT_CONFIG, EXIT_NUMERIC = 2, 3, 4


class MissingInput(Exception):
    pass


class NumericalFailure(Exception):
    pass


def _need(path, kind: str = "input") -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"{kind} not found: {p}")
    return p


def _resolve_config(args) -> RunConfig:
    base = PRESETS[args.preset](0)
    cfg = load_config(_need(args.config, "config file"), base) if args.config else base
    return cfg.with_seed(args.seed if args.seed is not None else cfg.seed)


def _write_json(path, payload: dict) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_report(out, payload)


def _finite(report: dict, where: str) -> None:
    bad = [k for k, v in report.items() if isinstance(v, float) and not np.isfinite(v)]
    if bad:
        raise NumericalFailure(f"{where}: non-finite values for {bad}")


# -- commands ---------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> str:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    taxonomy = pipeline.make_run_taxonomy(cfg)
    events, sidecar, weak = dataio.synth_generate(cfg.synth, taxonomy)
    dump_taxonomy(taxonomy, out / "taxonomy.json")
    dataio.write_events(events, out / "events.jsonl")
    dataio.write_sidecar(sidecar, out / "sidecar.json")
    write_weak_labels(weak, out / "weak_labels.jsonl")
    _write_json(out / "config.json", cfg.to_dict())
    return f"synth: {len(events)} events, {len(sidecar['users'])} users, {len(weak)} weak labels -> {out}"


def cmd_train_goals(args, cfg: RunConfig) -> str:
    taxonomy = load_taxonomy(_need(args.taxonomy))
    table, report = pipeline.fit_goal_table(cfg, taxonomy)
    if not np.all(np.isfinite(table.coords)):
        raise NumericalFailure("goal embeddings diverged")
    table.save(args.out)
    _write_json(str(args.out) + ".report.json", {"config": cfg.to_dict(), **report})
    return f"train-goals: {len(table)} goals, map={report['map']:.4f} -> {args.out}"


def cmd_eval_recon(args, cfg: RunConfig) -> str:
    taxonomy = load_taxonomy(_need(args.taxonomy))
    table = GoalEmbeddingTable.load(_need(args.goals))
    report = {"config": cfg.to_dict(), **evaluate_reconstruction(table, closure_pairs(taxonomy)),
              "norms": hierarchy_norm_profile(table, taxonomy)}
    _write_json(args.out, report)
    return f"eval-recon: mean_rank={report['mean_rank']:.4f} map={report['map']:.4f} -> {args.out}"


def cmd_train_estimator(args, cfg: RunConfig) -> str:
    weak = read_weak_labels(_need(args.weak))
    table = GoalEmbeddingTable.load(_need(args.goals))
    est, report = train_goal_estimator(weak, table, cfg.estimator)
    if not all(np.isfinite(report["train_loss"])):
        raise NumericalFailure("estimator loss diverged")
    est.save(args.out, extra={"run_config": cfg.to_dict(), "report": metrics.to_jsonable(report)})
    return f"train-estimator: heldout accuracy={report['accuracy']:.4f} -> {args.out}"


def cmd_eval_estimator(args, cfg: RunConfig) -> str:
    est = GoalEstimator.load(_need(args.estimator, "checkpoint"))
    weak = read_weak_labels(_need(args.weak))
    _, eval_rows = split_weak(len(weak), est.cfg.eval_fraction, est.cfg.seed)
    pages = [weak[i].page for i in eval_rows]
    truth = {weak[i].page.page_id: weak[i].goal_id for i in eval_rows}
    pred = est.predict(est.index_for(pages), np.arange(len(pages)))
    report = {"config": cfg.to_dict(), "n": len(pages),
              **metrics.multiclass_f1(pred, [truth[p.page_id] for p in pages])}
    if args.taxonomy:
        taxonomy = load_taxonomy(_need(args.taxonomy))
        report["confusion"] = pipeline.estimator_confusion(est, pages, truth, taxonomy).to_dict()
    _write_json(args.out, report)
    return f"eval-estimator: micro_f1={report['micro_f1']:.4f} macro_f1={report['macro_f1']:.4f} -> {args.out}"


def _task_inputs(args, cfg: RunConfig):
    events = dataio.read_events(_need(args.events))
    return pipeline.build_task_data(cfg, events)


def _train_task(task: str):
    def run(args, cfg: RunConfig) -> str:
        if args.mode:
            cfg = cfg.with_mode(args.mode)
        est = GoalEstimator.load(_need(args.estimator, "checkpoint"))
        data = _task_inputs(args, cfg)
        corpus = Corpus(data.pages, est, cfg.model)
        losses: list[float] = []
        model = pipeline.train_task(task, cfg, est, corpus, data, losses)
        if not all(np.isfinite(losses)):
            raise NumericalFailure(f"{task} training loss diverged")
        model.save(args.out, extra={"run_config": cfg.to_dict(), "loss": losses})
        last = f"{losses[-1]:.5f}" if losses else "n/a"
        return f"train-{'rec' if task == 'rec' else 'revisit'}: mode={cfg.model.mode} final loss={last} -> {args.out}"
    return run


def _eval_task(task: str):
    def run(args, cfg: RunConfig) -> str:
        model = GoWebModel.load(_need(args.model, "checkpoint"))
        cfg = cfg.with_mode(model.cfg.mode)
        data = _task_inputs(args, cfg)
        corpus = Corpus(data.pages, model.estimator, model.cfg)
        report = pipeline.evaluate_task(task, model, corpus, data, args.split, cfg.revisit_threshold,
                                        empty_history=args.empty_history)
        _finite(report, task)
        _write_json(args.out, {"config": cfg.to_dict(), "split": args.split, "mode": model.cfg.mode,
                               "metrics": report})
        key = pipeline.HEADLINE[task]
        value = f"{report[key]:.4f}" if key in report else "n/a"
        return f"eval-{'rec' if task == 'rec' else 'revisit'}: {args.split} {key}={value} n={report['n']} -> {args.out}"
    return run


def _labelled_sessions(args, cfg: RunConfig):
    est = GoalEstimator.load(_need(args.estimator, "checkpoint"))
    data = _task_inputs(args, cfg)
    sidecar = dataio.read_sidecar(_need(args.sidecar))
    return est, data, Corpus(data.pages, est, cfg.model), pipeline.page_goals(sidecar)


def cmd_cluster(args, cfg: RunConfig) -> str:
    from .tasks import kmeans_pp
    est, data, corpus, page_goal = _labelled_sessions(args, cfg)
    groups = {}
    for s in data.split[args.split]:
        k = args.k or len({page_goal[p] for p in s.page_ids})
        k = min(k, len(s))
        groups[s.session_id] = kmeans_pp(corpus.rp[corpus.rows(s.page_ids)], k, cfg.seed).labels.tolist()
    _write_json(args.out, {"config": cfg.to_dict(), "split": args.split, "clusters": groups})
    return f"cluster: {len(groups)} sessions -> {args.out}"


def cmd_eval_cluster(args, cfg: RunConfig) -> str:
    est, data, corpus, page_goal = _labelled_sessions(args, cfg)
    report = pipeline.clustering_comparison(data.split[args.split], corpus, page_goal, cfg.seed,
                                            cfg.model.content_buckets)
    _write_json(args.out, {"config": cfg.to_dict(), "split": args.split, **report})
    return (f"eval-cluster: rp nmi={report['rp']['nmi']:.4f} ami={report['rp']['ami']:.4f}; "
            f"content nmi={report['content']['nmi']:.4f} ami={report['content']['ami']:.4f} -> {args.out}")


def cmd_analyze(args, cfg: RunConfig) -> str:
    events = dataio.read_events(_need(args.events))
    sidecar = dataio.read_sidecar(_need(args.sidecar))
    taxonomy = load_taxonomy(_need(args.taxonomy))
    est = GoalEstimator.load(_need(args.estimator, "checkpoint"))
    sessions = dataio.segment_sessions(events)
    t2 = sidecar.get("split", {}).get("t2")
    if t2 is not None:
        sessions = [s for s in sessions if s.start < t2]
    cats = pipeline.category_labels(sidecar, taxonomy)
    report = pipeline.analyze(sessions, cats)
    report["planted_affinity_order"] = pipeline.affinity_order(sidecar, taxonomy)
    pages = {}
    for s in sessions:
        for v in s.visits:
            pages.setdefault(v.page.page_id, v.page)
    report["confusion"] = pipeline.estimator_confusion(
        est, [pages[p] for p in sorted(pages)], pipeline.page_goals(sidecar), taxonomy).to_dict()
    _write_json(args.out, {"config": cfg.to_dict(), **report})
    top = report["revisit_durations"]["top_by_scale"]["hours"]
    within = report["confusion"]["within_category_rate"]
    return (f"analyze: {report['n_sessions']} sessions, {report['n_revisits']} revisits, "
            f"within-category error rate={within:.3f}, fastest={top[:3]} -> {args.out}")


def cmd_gradcheck(args, cfg: RunConfig) -> str:
    from .gradsuite import run_grad_suite
    reports = run_grad_suite(cfg.seed)
    payload = {"config": cfg.to_dict(),
               "checks": {k: {"max_rel_error": r.max_rel_error, "passed": r.passed} for k, r in reports.items()}}
    if args.out:
        _write_json(args.out, payload)
    failed = [k for k, r in reports.items() if not r.passed]
    if failed:
        raise NumericalFailure(f"gradient check failed for {failed}")
    worst = max(r.max_rel_error for r in reports.values())
    return f"gradcheck: {len(reports)} paths passed, worst relative error {worst:.2e}"


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="goweb", description="Goal-aware web browsing models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, out_required=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON overlay on the preset")
        p.add_argument("--preset", choices=sorted(PRESETS), default="small")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a synthetic world into a directory")
    p = add("train-goals", cmd_train_goals, "train Poincare goal embeddings")
    p.add_argument("--taxonomy", required=True)
    p = add("eval-recon", cmd_eval_recon, "reconstruction mean rank and MAP")
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--goals", required=True)
    p = add("train-estimator", cmd_train_estimator, "fit the goal estimator on weak labels")
    p.add_argument("--weak", required=True)
    p.add_argument("--goals", required=True)
    p = add("eval-estimator", cmd_eval_estimator, "held-out estimator metrics and confusion")
    p.add_argument("--weak", required=True)
    p.add_argument("--estimator", required=True)
    p.add_argument("--taxonomy")
    for task, name in (("rec", "rec"), ("rev", "revisit")):
        p = add(f"train-{name}", _train_task(task), f"train the {name} head")
        p.add_argument("--events", required=True)
        p.add_argument("--estimator", required=True)
        p.add_argument("--mode", choices=["full", "np", "ablation"])
        p = add(f"eval-{name}", _eval_task(task), f"evaluate the {name} head")
        p.add_argument("--events", required=True)
        p.add_argument("--model", required=True)
        p.add_argument("--split", choices=["test_warm", "test_cold", "train"], default="test_warm")
        p.add_argument("--empty-history", action="store_true")
    for name, func in (("cluster", cmd_cluster), ("eval-cluster", cmd_eval_cluster)):
        p = add(name, func, "group session visits by goal" if name == "cluster" else "score goal grouping")
        p.add_argument("--events", required=True)
        p.add_argument("--estimator", required=True)
        p.add_argument("--sidecar", required=True)
        p.add_argument("--split", choices=["test_warm", "test_cold", "train"], default="test_warm")
        if name == "cluster":
            p.add_argument("--k", type=int, default=0, help="clusters per session; 0 uses the true goal count")
    p = add("analyze", cmd_analyze, "estimator confusion, single-goal sessions and revisit durations")
    p.add_argument("--events", required=True)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--estimator", required=True)
    add("gradcheck", cmd_gradcheck, "finite-difference gradient suite", out_required=False)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GOWEB_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        print(args.func(args, cfg))
        return 0
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, TaxonomyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
