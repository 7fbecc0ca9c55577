"""Command-line entry points.

Subcommands: ``gen`` builds a manifest plus split files, ``train``
runs the staged pipeline, ``eval`` scores a checkpoint over a
manifest, ``gradcheck`` audits gradients numerically, and ``report``
renders a saved report. Machine-readable artifacts go only to paths
named by ``--out``; progress lines go to stderr. Every command that
produces artifacts drops a run record JSON next to them describing
the exact invocation.

Exit codes: 0 success, 2 configuration or usage error, 3 malformed
data, 4 numerical failure (non-finite values or divergence), 5
gradient audit above tolerance.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Dict, List, Optional

from . import checkpoint as ck
from . import config as cfgmod
from . import contexts, corpus, evaluate, gradcheck, lora, trainer
from .errors import (ConfigError, ContractError, DataFormatError,
                     DegenerateError, NumericsError, TrainingDivergedError)
from .model import Model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_GRADCHECK = 5

FORMAT_VERSIONS = {"manifest": 1, "checkpoint": ck.FORMAT_VERSION, "report": 1}

STAGE_FAMILIES = {"s1": ["S1_VISION", "S1_AUDIO"], "s2": ["S2_ALIGN"],
                  "s3": ["S3_FUSION"]}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_run_record(path: str, argv: List[str], cfg: dict, seed: int,
                      artifacts: List[str], t0: float) -> None:
    record = {
        "command": ["avdoc"] + list(argv),
        "config": {k: cfg[k] for k in sorted(cfg)},
        "seed": seed,
        "artifacts": [os.path.abspath(a) for a in artifacts],
        "wall_clock_s": round(time.monotonic() - t0, 3),
        "format_versions": FORMAT_VERSIONS,
    }
    ck.atomic_write_text(path, json.dumps(record, sort_keys=True, indent=1) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="avdoc",
        description="Two-branch document-video QA models at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic corpus manifest")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", required=True, help="manifest output path (.jsonl)")
    p.add_argument("--seed", type=int, help="override corpus.seed")
    p.add_argument("--n", type=int, help="override corpus.n_subvideos")

    p = sub.add_parser("train", help="run the staged training pipeline")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="manifest to train on")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--stages", default="s1,s2,s3",
                   help="comma list out of s1,s2,s3 (default all)")
    p.add_argument("--skip", action="append", default=[],
                   help="ablate one stage family (s1, s2 or s3)")
    p.add_argument("--init", help="checkpoint to resume from")
    p.add_argument("--merge", action="store_true",
                   help="also export adapters merged into base weights")

    p = sub.add_parser("eval", help="score a checkpoint against a manifest")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--data", required=True, help="manifest to evaluate")
    p.add_argument("--ckpt", required=True, help="checkpoint to load")
    p.add_argument("--out", required=True, help="report output path (.json)")
    p.add_argument("--modality", default="both",
                   choices=list(contexts.MODALITIES),
                   help="which branch inputs stay visible")
    p.add_argument("--threshold", type=float, help="override eval.threshold")

    p = sub.add_parser("gradcheck", help="numerical gradient audit")
    p.add_argument("--seed", type=int, default=0, help="base seed")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")

    p = sub.add_parser("report", help="render a saved evaluation report")
    p.add_argument("--in", dest="inp", required=True, help="report JSON path")
    p.add_argument("--format", default="table", choices=["table", "json"])
    return parser


def _cmd_gen(args, argv: List[str]) -> int:
    t0 = time.monotonic()
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg["corpus.seed"] = args.seed
    if args.n is not None:
        cfg["corpus.n_subvideos"] = args.n
    svs = corpus.gen_corpus(cfg["corpus.seed"], cfg["corpus.n_subvideos"],
                            cfg["corpus.domain_count"],
                            cfg["corpus.qa_per_subvideo"])
    corpus.write_manifest(svs, args.out)
    base = args.out[:-6] if args.out.endswith(".jsonl") else args.out
    parts = corpus.split(svs, cfgmod.split_ratios(cfg), cfg["split.seed"])
    artifacts = [args.out]
    for name, part in zip(("train", "val", "test"), parts):
        path = f"{base}.{name}.jsonl"
        corpus.write_manifest(part, path)
        artifacts.append(path)
    _write_run_record(base + ".run.json", argv, cfg, cfg["corpus.seed"],
                      artifacts, t0)
    _log(f"wrote {len(svs)} sub-videos to {args.out} "
         f"(splits: {'/'.join(str(len(p)) for p in parts)})")
    return EXIT_OK


def _parse_stages(raw: str) -> List[str]:
    stages: List[str] = []
    for token in raw.split(","):
        token = token.strip().lower()
        if not token:
            continue
        if token not in STAGE_FAMILIES:
            raise ConfigError(f"unknown stage family {token!r} (use s1, s2, s3)")
        stages.extend(STAGE_FAMILIES[token])
    if not stages:
        raise ConfigError("no stages requested")
    return stages


def _cmd_train(args, argv: List[str]) -> int:
    t0 = time.monotonic()
    cfg = cfgmod.load_config(args.config)
    svs = corpus.read_manifest(args.data)
    train_svs, _val, _test = corpus.split(svs, cfgmod.split_ratios(cfg),
                                          cfg["split.seed"])
    if len(args.skip) > 1:
        raise ConfigError("only one stage family can be skipped per run")
    if args.init:
        model = trainer.model_from_checkpoint(ck.load_checkpoint(args.init))
    else:
        model = Model(cfgmod.model_config(cfg))

    os.makedirs(args.out, exist_ok=True)
    artifacts: List[str] = []

    def save_stage(c: ck.CheckpointData) -> None:
        path = os.path.join(args.out, f"{c.stage}.ckpt")
        ck.save_checkpoint(path, c)
        artifacts.extend([path, ck.meta_path(path)])
        _log(f"{c.stage}: {c.meta['step_count']} steps, "
             f"loss {c.meta['loss_history'][0]:.4f} -> {c.meta['loss_history'][-1]:.4f}")

    settings = dict(learning_rate=cfg["train.lr"],
                    batch_size=cfg["train.batch_size"],
                    epochs=cfg["train.epochs"], seed=cfg["train.seed"],
                    lora_rank=cfg["lora.rank"], lora_alpha=cfg["lora.alpha"],
                    align_tau=cfg["align.tau"],
                    align_direction=cfg["align.direction"],
                    align_strict=cfg["align.strict_paper_f"],
                    on_stage_end=save_stage)
    if args.skip:
        skip = args.skip[0].strip().upper()
        final = trainer.ablate(model, train_svs, skip, **settings)
    else:
        final = trainer.train_pipeline(model, train_svs, _parse_stages(args.stages),
                                       **settings)

    final_path = os.path.join(args.out, "final.ckpt")
    ck.save_checkpoint(final_path, final)
    artifacts.extend([final_path, ck.meta_path(final_path)])
    if args.merge:
        merged = ck.CheckpointData(
            final.stage, final.seed, lora.merged_state(model),
            {**final.meta, "lora": None, "merged": True})
        merged_path = os.path.join(args.out, "merged.ckpt")
        ck.save_checkpoint(merged_path, merged)
        artifacts.extend([merged_path, ck.meta_path(merged_path)])
    _write_run_record(os.path.join(args.out, "run.json"), argv, cfg,
                      cfg["train.seed"], artifacts, t0)
    _log(f"final checkpoint: {final_path} (lineage {final.meta['lineage']})")
    return EXIT_OK


def _cmd_eval(args, argv: List[str]) -> int:
    t0 = time.monotonic()
    cfg = cfgmod.load_config(args.config)
    if args.threshold is not None:
        cfg["eval.threshold"] = args.threshold
    model = trainer.model_from_checkpoint(ck.load_checkpoint(args.ckpt))
    svs = corpus.read_manifest(args.data)
    report = evaluate.evaluate_model(model, svs, cfg["eval.threshold"],
                                     modality=args.modality)
    ck.atomic_write_text(args.out,
                         json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    _write_run_record(args.out + ".run.json", argv, cfg,
                      cfg["train.seed"], [args.out], t0)
    _log(evaluate.render_report(report))
    _log(f"report written to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args, argv: List[str]) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    results = gradcheck.run_suite(args.seed, args.seeds)
    worst = 0.0
    for name, rel in results:
        print(f"{name:<24}{rel:.3e}")
        worst = max(worst, rel)
    print(f"{'max':<24}{worst:.3e}")
    if worst >= gradcheck.TOLERANCE:
        _log(f"gradient audit FAILED: {worst:.3e} >= {gradcheck.TOLERANCE:.0e}")
        return EXIT_GRADCHECK
    _log(f"gradient audit passed over {args.seeds} seeds")
    return EXIT_OK


def _cmd_report(args, argv: List[str]) -> int:
    try:
        with open(args.inp, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise DataFormatError(f"cannot read report {args.inp}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{args.inp}: not valid JSON: {exc}") from exc
    report = evaluate.EvalReport.from_dict(raw)
    if args.format == "json":
        print(json.dumps(report.to_dict(), sort_keys=True, indent=1))
    else:
        print(evaluate.render_report(report))
    return EXIT_OK


_COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval,
             "gradcheck": _cmd_gradcheck, "report": _cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args, argv)
    except (ConfigError, ContractError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except DataFormatError as exc:
        _log(f"error: {exc}")
        return EXIT_DATA
    except (NumericsError, TrainingDivergedError, DegenerateError) as exc:
        _log(f"error: {exc}")
        return EXIT_NUMERIC
    except OSError as exc:
        _log(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
