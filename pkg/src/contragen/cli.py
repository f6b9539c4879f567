"""Command-line entry points.

Subcommands: make-synthetic, warmup, train, generate, evaluate,
ablate-alpha, sweep-ratio, export-reps.  Each reads one flat key=value
config file; ``--seed``, ``--out`` and per-command overrides win over the
file.  Exit codes: 0 success, 2 configuration errors (offending key
named), 1 anything else, always with a one-line ``error: ...`` message.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .config import ExperimentConfig, load_config, validate_experiment
from .contrastive import oracle_score
from .data import (
    PaddedBatch,
    SyntheticTaskSpec,
    build_vocab_from_jsonl,
    import_parallel_text,
    load_jsonl_dataset,
    make_synthetic,
)
from .decoding import generate as rerank_generate
from .errors import ConfigError, ContragenError
from .evaluation import (
    DEFAULT_ALPHA_GRID,
    AblationTable,
    EvalReport,
    ablate_alpha,
    corpus_bleu,
    export_representations,
    selfgen_ratio_sweep,
)
from .training import (
    BaselineMode,
    adopt_best,
    build_model,
    init_state,
    train_loop,
    warmup_train,
)

log = logging.getLogger("contragen")


def _apply_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is not None:
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
        cfg.task = dataclasses.replace(cfg.task, seed=seed)
    return cfg


def _load_split(cfg: ExperimentConfig, which: str, vocab):
    path = getattr(cfg.data, f"{which}_path")
    if not path:
        raise ConfigError(f"data.{which}_path is not set")
    return load_jsonl_dataset(path, vocab).pairs


def _derive_model_config(cfg: ExperimentConfig, vocab) -> ExperimentConfig:
    cfg.model = dataclasses.replace(cfg.model, vocab_size=len(vocab))
    return cfg


def _check_model_match(cfg: ExperimentConfig, loaded: ExperimentConfig, force: bool) -> None:
    ours = dataclasses.asdict(cfg.model)
    theirs = dataclasses.asdict(loaded.model)
    ours.pop("vocab_size")
    theirs.pop("vocab_size")
    if ours != theirs and not force:
        raise ConfigError(
            "model section of the config does not match the checkpoint; pass --force to use "
            "the checkpoint's architecture"
        )


def _mode_of(cfg: ExperimentConfig, override: str | None) -> BaselineMode:
    name = override or cfg.mode
    if name not in BaselineMode.__members__:
        raise ConfigError(f"unknown mode {name!r}")
    return BaselineMode[name]


def _beam_override(cfg: ExperimentConfig, beam: int | None) -> None:
    if beam is not None:
        groups = cfg.beam.num_groups if beam % cfg.beam.num_groups == 0 else 1
        cfg.beam = dataclasses.replace(cfg.beam, beam_size=beam, num_groups=groups)


# -- subcommands ------------------------------------------------------------


def cmd_make_synthetic(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    spec: SyntheticTaskSpec = cfg.task
    paths = make_synthetic(spec, args.out)
    for split, path in paths.items():
        print(f"{split}: {path}")
    return 0


def cmd_import_parallel(args) -> int:
    n = import_parallel_text(args.source, args.target, args.out)
    print(f"wrote {n} records to {args.out}")
    return 0


def cmd_warmup(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    vocab = build_vocab_from_jsonl(cfg.data.train_path or _missing("data.train_path"))
    cfg = _derive_model_config(cfg, vocab)
    validate_experiment(cfg)
    train_pairs = _load_split(cfg, "train", vocab)
    dev_pairs = _load_split(cfg, "dev", vocab)
    model = build_model(cfg.model, cfg.train.seed)
    state = init_state(model, cfg.train)
    out = Path(args.out)
    state = warmup_train(
        state, train_pairs, dev_pairs, cfg.train,
        log_path=out / "metrics.csv", beam_cfg=cfg.beam, oracle_cfg=cfg.oracle,
    )
    adopt_best(state)
    ckpt.save_checkpoint(state, out, vocab, cfg, stage="warmup")
    print(f"warmup checkpoint: {out} (step {state.step}, best dev nll {state.best_dev_loss:.4f})")
    return 0


def _missing(key: str):
    raise ConfigError(f"{key} is not set")


def cmd_train(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    mode = _mode_of(cfg, args.mode)
    out = Path(args.out)
    if args.warmup:
        state, loaded_cfg, vocab, _ = ckpt.load_checkpoint(args.warmup)
        cfg = _derive_model_config(cfg, vocab)
        _check_model_match(cfg, loaded_cfg, args.force)
        cfg.model = loaded_cfg.model
        # stage two starts with a fresh optimizer over the warm parameters
        state.optimizer = torch.optim.Adam(state.model.parameters(), lr=cfg.train.learning_rate)
    elif mode is BaselineMode.MLE:
        vocab = build_vocab_from_jsonl(cfg.data.train_path or _missing("data.train_path"))
        cfg = _derive_model_config(cfg, vocab)
        model = build_model(cfg.model, cfg.train.seed)
        state = init_state(model, cfg.train)
    else:
        raise ConfigError("contrastive training requires --warmup CHECKPOINT")
    validate_experiment(cfg)
    train_pairs = _load_split(cfg, "train", vocab)
    dev_pairs = _load_split(cfg, "dev", vocab)
    state = train_loop(
        state, train_pairs, dev_pairs, cfg.train, cfg.beam, cfg.oracle, mode,
        log_path=out / "metrics.csv",
    )
    adopt_best(state)
    cfg.mode = mode.value
    ckpt.save_checkpoint(state, out, vocab, cfg, stage="contrastive")
    print(f"train checkpoint: {out} (step {state.step}, best dev loss {state.best_dev_loss:.4f})")
    return 0


def cmd_generate(args) -> int:
    state, cfg, vocab, _ = ckpt.load_checkpoint(args.ckpt)
    if args.config:
        file_cfg = _apply_seed(load_config(args.config), args.seed)
        _check_model_match(file_cfg, cfg, args.force)
        cfg.beam = file_cfg.beam
        cfg.alpha = file_cfg.alpha
    _beam_override(cfg, args.beam)
    alpha = cfg.alpha if args.alpha is None else args.alpha
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError("alpha must lie in [0, 1]")
    pairs = load_jsonl_dataset(args.input, vocab).pairs
    out_lines = []
    batch = max(1, args.batch_size)
    for i in range(0, len(pairs), batch):
        chunk = pairs[i : i + batch]
        src = PaddedBatch.from_sequences([p.source_ids for p in chunk])
        for ids in rerank_generate(state.model, src, cfg.beam, alpha):
            out_lines.append(vocab.decode(ids))
    text = "\n".join(out_lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(args) -> int:
    hyp_lines = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    ref_lines = Path(args.ref).read_text(encoding="utf-8").splitlines()
    hyps = [ln.split() for ln in hyp_lines]
    refs = [ln.split() for ln in ref_lines]
    bleu = corpus_bleu(hyps, refs)
    print(f"BLEU {bleu:.2f}")
    if args.out:
        per_sentence = [oracle_score(h, r) for h, r in zip(hyps, refs)]
        EvalReport(
            corpus_bleu=bleu, per_sentence=per_sentence, config={}, wall_clock=0.0
        ).to_json(args.out)
    return 0


def cmd_ablate_alpha(args) -> int:
    state, cfg, vocab, _ = ckpt.load_checkpoint(args.ckpt)
    _beam_override(cfg, args.beam)
    grid = tuple(float(x) for x in args.grid.split(",")) if args.grid else DEFAULT_ALPHA_GRID
    pairs = load_jsonl_dataset(args.data, vocab).pairs
    table: AblationTable = ablate_alpha(state.model, pairs, grid, cfg.beam, args.batch_size)
    table.to_csv(args.out)
    for a, b in table.rows:
        print(f"alpha={a:.2f} bleu={b:.2f}")
    return 0


def cmd_sweep_ratio(args) -> int:
    cfg = _apply_seed(load_config(args.config), args.seed)
    state, loaded_cfg, vocab, _ = ckpt.load_checkpoint(args.warmup)
    cfg = _derive_model_config(cfg, vocab)
    _check_model_match(cfg, loaded_cfg, args.force)
    cfg.model = loaded_cfg.model
    train_pairs = _load_split(cfg, "train", vocab)
    dev_pairs = _load_split(cfg, "dev", vocab)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    rows = selfgen_ratio_sweep(
        state.model, train_pairs, dev_pairs, cfg.train, cfg.beam, cfg.oracle,
        ratios, args.steps, alpha=cfg.alpha,
    )
    lines = ["ratio,steps_per_sec,dev_bleu"] + [
        f"{r['ratio']},{r['steps_per_sec']:.4f},{r['dev_bleu']:.4f}" for r in rows
    ]
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for ln in lines[1:]:
        print(ln)
    return 0


def cmd_export_reps(args) -> int:
    state, cfg, vocab, _ = ckpt.load_checkpoint(args.ckpt)
    _beam_override(cfg, args.beam)
    pairs = load_jsonl_dataset(args.data, vocab).pairs
    n = export_representations(
        state.model, pairs, args.out, cfg.beam, cfg.oracle, args.batch_size
    )
    print(f"wrote {n} records to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contragen")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--force", action="store_true", help="override config mismatch checks")

    p = sub.add_parser("make-synthetic", help="generate a synthetic task dataset")
    common(p)
    p.add_argument("--out", required=True, help="output directory for JSONL splits")
    p.set_defaults(fn=cmd_make_synthetic)

    p = sub.add_parser("import-parallel", help="convert two aligned text files to JSONL")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_import_parallel)

    p = sub.add_parser("warmup", help="likelihood-only training stage")
    common(p)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(fn=cmd_warmup)

    p = sub.add_parser("train", help="contrastive (or MLE baseline) training stage")
    common(p)
    p.add_argument("--warmup", default=None, help="warm-up checkpoint directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--mode", default=None, choices=sorted(BaselineMode.__members__))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="decode a JSONL file with rerank decoding")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="corpus BLEU of hypothesis vs reference files")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate-alpha", help="BLEU over an alpha grid, one beam pass")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default=None, help="comma-separated alphas")
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(fn=cmd_ablate_alpha)

    p = sub.add_parser("sweep-ratio", help="throughput/quality sweep over selfgen ratios")
    common(p)
    p.add_argument("--warmup", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", default="0.0,0.5,1.0")
    p.add_argument("--steps", type=int, default=30)
    p.set_defaults(fn=cmd_sweep_ratio)

    p = sub.add_parser("export-reps", help="export pooled representations as JSON lines")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(fn=cmd_export_reps)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContragenError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
