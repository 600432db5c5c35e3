"""Command-line entry point wiring all subsystems.

Subcommands: gen-data, build-labels, train, probe, analyze, gradcheck,
count-params.  Every command is driven by the same flat config format and a
``--seed`` that threads through corpus generation, label fitting, training
and probing, so re-running a command with identical inputs reproduces its
outputs byte for byte (manifests exclude timestamps).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .configio import describe_config_keys, load_run_config
from .labels import LabelStore, TeacherOracle, build_label_store
from .model import (JoociModel, ModelConfig, count_parameters, load_checkpoint,
                    parameter_table)
from .probe import cca_similarity, emit_report, train_probe
from .trainer import Adam, run_pretraining


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jooci",
        description="dual-encoder self-supervised speech representations at desk scale",
        epilog=describe_config_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("build-labels", help="fit k-means label sets over a corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus-dir", required=True)
    p.add_argument("--out", required=True, help="label store directory")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="two-stage pre-training")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus-dir", required=True)
    p.add_argument("--labels", required=True, help="label store directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("probe", help="train one linear probe on a frozen checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus-dir", required=True)
    p.add_argument("--task", choices=["sid", "pr"], required=True)
    p.add_argument("--encoder", choices=["content", "other"], required=True)
    p.add_argument("--layers", default="last",
                   help="all | last | <i> | <i>-<j> | asp|bn|fc (other encoder)")
    p.add_argument("--out", default=None, help="append the report to <out>/probes.csv")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("analyze", help="probe suite + CCA, emitting the CSV bundle")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    p.add_argument("--all", action="store_true")
    p.add_argument("--case", default=None)
    p.add_argument("--seeds", type=int, default=10)

    p = sub.add_parser("count-params", help="per-component parameter table")
    p.add_argument("--config", default=None)
    p.add_argument("--paper-scale", action="store_true",
                   help="use the full-size configuration")
    return parser


def _load_cfg(args):
    cfg = load_run_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    corpus = data_mod.generate_corpus(
        cfg.corpus.num_speakers, cfg.corpus.utts_per_speaker,
        cfg.corpus.phone_inventory, seed=cfg.seed,
        utt_seconds=(cfg.corpus.min_seconds, cfg.corpus.max_seconds))
    data_mod.save_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} utterances "
          f"({sum(u.duration_s for u in corpus):.1f}s) to {args.out}")
    return 0


def _cmd_build_labels(args) -> int:
    cfg = _load_cfg(args)
    corpus = data_mod.load_corpus(args.corpus_dir)
    store = build_label_store(
        corpus, content_layers=cfg.model.content_layers,
        vocab_size=cfg.model.vocab_size, num_sets=cfg.model.num_label_sets,
        seed=cfg.seed, iters=cfg.kmeans_iters, n_bands=cfg.feature_bands,
        anchor=cfg.label_anchor)
    store.save(args.out)
    ks = [cb.k for cb in store.codebooks]
    print(f"fitted {len(ks)} label sets (k={ks}) on layers "
          f"{sorted(store.layer_map)} -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_cfg(args)
    corpus = data_mod.load_corpus(args.corpus_dir)
    store = LabelStore.load(args.labels)
    teacher = TeacherOracle(dim=cfg.model.teacher_dim,
                            noise_scale=cfg.teacher_noise, seed=cfg.seed)
    resume_step = resume_stage = 0
    opt = None
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model = JoociModel(ckpt.config, seed=cfg.seed)
        ckpt.restore_model(model)
        opt = Adam(list(model.named_parameters()))
        state = ckpt.optimizer_state()
        if state is not None:
            opt.load_state(state)
        resume_step, resume_stage = ckpt.step, ckpt.stage
    else:
        model = JoociModel(cfg.model, seed=cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "run_config.json"), "w") as fh:
        json.dump(cfg.to_flat(), fh, indent=2, sort_keys=True)
    result = run_pretraining(
        model, cfg.stages, corpus, store, teacher, args.out, seed=cfg.seed,
        augment_cfg=cfg.augment if cfg.augment_enabled else None,
        crop_seconds=cfg.crop_seconds, ckpt_every=cfg.ckpt_every,
        resume_step=resume_step, resume_stage=resume_stage, opt=opt,
        skip_cl_when_frozen=cfg.skip_cl_when_frozen)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"final losses: cl={last.cl:.4f} ol={last.ol:.4f} rl={last.rl:.4f} "
              f"total={last.total:.4f}")
    print(f"checkpoint: {result.final_checkpoint}")
    return 0


def _cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    corpus = data_mod.load_corpus(args.corpus_dir)
    report = train_probe(model, corpus, task=args.task, encoder=args.encoder,
                         layer_selection=args.layers, seed=args.seed)
    print(f"{report.task} probe on {report.encoder} [{report.layer_selection}]: "
          f"accuracy {report.accuracy:.4f}")
    if args.out:
        from .probe import emit_report
        emit_report([report], {}, [], args.out)
    return 0


def _cmd_analyze(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    corpus = data_mod.load_corpus(args.corpus_dir)
    cache: dict = {}
    cells = [
        ("sid", "other", "bn"), ("sid", "other", "last"), ("sid", "other", "all"),
        ("sid", "content", "last"),
        ("pr", "content", "last"), ("pr", "content", "all"), ("pr", "other", "all"),
    ]
    reports = []
    for task, encoder, layers in cells:
        reports.append(train_probe(model, corpus, task, encoder, layers,
                                   seed=args.seed, cache=cache))
        print(f"{task}/{encoder}/{layers}: {reports[-1].accuracy:.4f}")
    weight_rows = {f"{r.task}-{r.encoder}": r.learned_weights
                   for r in reports if r.layer_selection == "all"}
    # CCA of every content layer against frame phone labels
    from .probe import extract_layers
    cca_rows = []
    num_layers = model.cfg.content_layers + 1
    reps = [[] for _ in range(num_layers)]
    labels = []
    for u in corpus:
        states = cache.get((u.utt_id, "content")) or extract_layers(model, u, "content")
        for i in range(num_layers):
            reps[i].append(states.frames[i])
        labels.append(u.phone_seq[: states.num_frames])
    y = np.concatenate(labels)
    for i in range(num_layers):
        cca_rows.append((i, cca_similarity(np.concatenate(reps[i], axis=0), y)))
    paths = emit_report(reports, weight_rows, cca_rows, args.out)
    print("report bundle:", ", ".join(sorted(paths)))
    return 0


def _cmd_gradcheck(args) -> int:
    from .autodiff import run_case, run_suite, registered_cases
    from .model import gradcheck_cases  # noqa: F401  (registers composites)
    seeds = range(args.seeds)
    if args.case:
        results = {args.case: run_case(args.case, seeds=seeds)}
    else:
        results = run_suite(seeds=seeds)
    failed = 0
    for name in sorted(results):
        err = results[name]
        ok = err < 1e-4
        failed += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'}  {name:32s} max_rel_err={err:.3e}")
    print(f"{len(results) - failed}/{len(results)} primitives within 1e-4")
    return 0 if failed == 0 else 1


def _cmd_count_params(args) -> int:
    if args.paper_scale:
        cfg = ModelConfig.paper_scale()
    else:
        cfg = load_run_config(getattr(args, "config", None)).model
    print(parameter_table(cfg))
    counts = count_parameters(cfg, "training")
    print(f"\nshared+content (training): {counts['shared_and_content'] / 1e6:.2f}M")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "build-labels": _cmd_build_labels,
    "train": _cmd_train,
    "probe": _cmd_probe,
    "analyze": _cmd_analyze,
    "gradcheck": _cmd_gradcheck,
    "count-params": _cmd_count_params,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
