"""Command-line entry point driving the four phases and search.

Configuration is a flat key-value file (`section.key = value`) merged with
repeatable `--set key=value` overrides; the effective config is echoed into
the run directory so experiment grids diff cleanly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus, finetune as ft, meta as meta_mod, model as mdl, pretrain as pt
from . import search as search_mod
from .validation import check_phase

RUN_ROOT_ENV = "CODESEARCH_RUNS"


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_opt_int(text: str):
    return None if text.lower() == "none" else int(text)


def _parse_int_list(text: str):
    return [int(t.strip()) for t in text.split(",") if t.strip()]


def _parse_float_list(text: str):
    return [float(t.strip()) for t in text.split(",") if t.strip()]


def _parse_lang_paths(text: str):
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ValueError(f"expected lang:path, got {item!r}")
        lang, path = item.split(":", 1)
        out.append((lang.strip(), path.strip()))
    return out


# key -> parser; unknown keys are refused so typos fail before any compute
CONFIG_KEYS = {
    "seed": int,
    "data.sources": _parse_lang_paths,
    "data.target": _parse_lang_paths,
    "data.format": str,
    "data.vocab_max_size": int,
    "data.vocab_min_freq": int,
    "data.split": _parse_float_list,
    "model.d_model": int,
    "model.n_layers": int,
    "model.n_heads": int,
    "model.d_ff": int,
    "model.max_len": int,
    "model.attention_mode": str,
    "model.dropout": float,
    "model.tie_mlm": _parse_bool,
    "pretrain.mask_rate": float,
    "pretrain.mask_style": str,
    "pretrain.lr": float,
    "pretrain.warmup_steps": _parse_opt_int,
    "pretrain.total_steps": int,
    "pretrain.batch_size": int,
    "pretrain.decay": str,
    "pretrain.eval_every": int,
    "pretrain.valid_fraction": float,
    "meta.alpha": float,
    "meta.beta": float,
    "meta.m": int,
    "meta.k": _parse_opt_int,
    "meta.inner_steps": int,
    "meta.order": str,
    "meta.outer_aggregation": str,
    "meta.epochs": int,
    "meta.patience": _parse_opt_int,
    "meta.batch_size": int,
    "finetune.lr": float,
    "finetune.warmup_steps": _parse_opt_int,
    "finetune.total_steps": int,
    "finetune.batch_size": int,
    "finetune.objective": str,
    "finetune.margin": float,
    "finetune.eval_every": int,
    "finetune.decay": str,
    "eval.candidates": int,
    "sweep.sizes": _parse_int_list,
    "sweep.seeds": _parse_int_list,
}

DEFAULTS = {
    "seed": 0,
    "data.format": "jsonl",
    "data.vocab_max_size": 8192,
    "data.vocab_min_freq": 1,
    "data.split": [0.7, 0.15, 0.15],
    "eval.candidates": 100,
    "meta.m": 100,
    "meta.k": None,
    "sweep.sizes": [0, 100],
    "sweep.seeds": [0, 1, 2],
}


def load_flat(path) -> dict[str, str]:
    """Parse `key = value` lines; # starts a comment line."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = stripped.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def build_config(path, overrides) -> dict:
    raw = load_flat(path) if path else {}
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    cfg = dict(DEFAULTS)
    for key, text in raw.items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        try:
            cfg[key] = CONFIG_KEYS[key](text)
        except ValueError as exc:
            raise ValueError(f"config key {key!r}: {exc}") from exc
    return cfg


def echo_config(cfg: dict, out_dir: Path) -> None:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, list):
            if value and isinstance(value[0], tuple):
                text = ", ".join(f"{a}:{b}" for a, b in value)
            else:
                text = ", ".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    (out_dir / "config.echo.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _run_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        path = Path(args.out)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        path = root / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _encoder_kwargs(cfg: dict) -> dict:
    mapping = {
        "model.d_model": "d_model", "model.n_layers": "n_layers",
        "model.n_heads": "n_heads", "model.d_ff": "d_ff", "model.max_len": "max_len",
        "model.attention_mode": "attention_mode", "model.dropout": "dropout",
        "model.tie_mlm": "tie_mlm",
    }
    return {arg: cfg[key] for key, arg in mapping.items() if key in cfg}


def _validate_encoder_early(cfg: dict) -> None:
    # named-field validation before any data is touched; the placeholder
    # vocab size is replaced once the vocabulary exists
    mdl.EncoderConfig(vocab_size=100, **_encoder_kwargs(cfg))


def _section_kwargs(cfg: dict, section: str, mapping: dict[str, str]) -> dict:
    return {arg: cfg[f"{section}.{key}"] for key, arg in mapping.items()
            if f"{section}.{key}" in cfg}


def _load_language_pairs(cfg: dict, entries) -> dict[str, list[corpus.RawPair]]:
    out = {}
    for lang, path in entries:
        out[lang] = [
            corpus.RawPair(p.nl, p.code, lang, p.label)
            for p in corpus.load_pairs(path, cfg["data.format"])
        ]
    return out


def _vocab_path_for(ckpt_path, explicit) -> Path:
    if explicit:
        return Path(explicit)
    sibling = Path(ckpt_path).parent / "vocab.json"
    if not sibling.exists():
        raise FileNotFoundError(
            f"no vocabulary next to {ckpt_path} (looked for {sibling}); pass --vocab"
        )
    return sibling


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out_dir = _run_dir(args, "synth")
    spec = (
        corpus.SyntheticSpec.from_flat(load_flat(args.spec))
        if args.spec
        else corpus.SyntheticSpec.default()
    )
    corpora = corpus.generate_synthetic_corpus(spec, args.pairs, args.seed)
    for lang, pairs in sorted(corpora.items()):
        corpus.write_pairs_jsonl(out_dir / f"{lang}.jsonl", pairs)
    flat = spec.to_flat()
    (out_dir / "synth_spec.cfg").write_text(
        "\n".join(f"{k} = {v}" for k, v in sorted(flat.items())) + "\n", encoding="utf-8"
    )
    print(f"synth: wrote {len(corpora)} languages x {args.pairs} pairs to {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_config(args.config, args.set)
    _validate_encoder_early(cfg)
    pt_kwargs = _section_kwargs(cfg, "pretrain", {
        "mask_rate": "mask_rate", "mask_style": "mask_style", "lr": "lr",
        "warmup_steps": "warmup_steps", "total_steps": "total_steps",
        "batch_size": "batch_size", "decay": "decay", "eval_every": "eval_every",
        "valid_fraction": "valid_fraction",
    })
    pt.PretrainConfig(**pt_kwargs, seed=cfg["seed"])  # named-field errors up front
    if "data.sources" not in cfg:
        raise ValueError("config key 'data.sources' is required for pretrain")
    out_dir = _run_dir(args, "pretrain")

    sources_raw = _load_language_pairs(cfg, cfg["data.sources"])
    vocab_pairs = [p for pairs in sources_raw.values() for p in pairs]
    if "data.target" in cfg:
        target_raw = _load_language_pairs(cfg, cfg["data.target"])
        vocab_pairs += [p for pairs in target_raw.values() for p in pairs]
    vocab = corpus.build_vocab(vocab_pairs, cfg["data.vocab_max_size"],
                               cfg["data.vocab_min_freq"])
    encoder = mdl.EncoderConfig(vocab_size=vocab.size, **_encoder_kwargs(cfg))
    corpora = {
        lang: corpus.deduplicate(corpus.encode_pairs(pairs, vocab))
        for lang, pairs in sources_raw.items()
    }
    est = pt.MlmPretrainer(encoder=encoder, seed=cfg["seed"], **pt_kwargs).fit(corpora)

    vocab.save(out_dir / "vocab.json")
    mdl.save_checkpoint(est.checkpoint_, out_dir / "pretrained.ckpt")
    pt.write_history_csv(out_dir / "pretrain_history.csv", est.history_)
    echo_config(cfg, out_dir)
    last = est.history_[-1]
    print(
        f"pretrain: {len(vocab_pairs)} pairs, vocab {vocab.size}, "
        f"{last.step} steps, final loss {last.train_loss:.4f} -> {out_dir}"
    )
    return 0


def cmd_meta(args) -> int:
    cfg = build_config(args.config, args.set)
    meta_kwargs = _section_kwargs(cfg, "meta", {
        "alpha": "alpha", "beta": "beta", "m": "window", "k": "tasks_per_epoch",
        "inner_steps": "inner_steps", "order": "order",
        "outer_aggregation": "outer_aggregation", "epochs": "epochs",
        "patience": "patience",
    })
    meta_mod.MetaConfig(**meta_kwargs, seed=cfg["seed"])
    if "data.sources" not in cfg:
        raise ValueError("config key 'data.sources' is required for meta")
    batch_size = cfg.get("meta.batch_size", 64)
    out_dir = _run_dir(args, "meta")

    ckpt = mdl.load_checkpoint(args.ckpt)
    vocab = corpus.Vocabulary.load(_vocab_path_for(args.ckpt, args.vocab))
    sources_raw = _load_language_pairs(cfg, cfg["data.sources"])
    seeds = np.random.SeedSequence(cfg["seed"]).spawn(len(sources_raw))
    corpora = {}
    for child, lang in zip(seeds, sorted(sources_raw)):
        deduped = corpus.deduplicate(corpus.encode_pairs(sources_raw[lang], vocab))
        corpora[lang] = corpus.generate_negatives(
            deduped, seed=int(np.random.default_rng(child).integers(0, 2**31 - 1))
        )
    pool = corpus.build_batch_pool(corpora, batch_size, cfg["seed"])
    est = meta_mod.MetaLearner(
        init_checkpoint=ckpt, seed=cfg["seed"], force=args.force, **meta_kwargs
    ).fit(pool)

    mdl.save_checkpoint(est.checkpoint_, out_dir / "meta.ckpt")
    meta_mod.write_history_csv(out_dir / "meta_history.csv", est.history_)
    vocab.save(out_dir / "vocab.json")
    echo_config(cfg, out_dir)
    print(
        f"meta: {len(pool)} batches in pool, {len(est.history_)} tasks, "
        f"final query loss {est.history_[-1].query_loss:.4f} -> {out_dir}"
    )
    return 0


def _target_split(cfg: dict, vocab) -> corpus.CorpusSplit:
    if "data.target" not in cfg:
        raise ValueError("config key 'data.target' is required")
    target_raw = _load_language_pairs(cfg, cfg["data.target"])
    (lang, pairs), = target_raw.items()
    deduped = corpus.deduplicate(corpus.encode_pairs(pairs, vocab))
    fractions = tuple(cfg["data.split"])
    raw_split = corpus.split_pairs(deduped, fractions, cfg["seed"])
    children = np.random.SeedSequence(cfg["seed"]).spawn(2)
    return corpus.CorpusSplit(
        train=corpus.generate_negatives(
            raw_split.train, int(np.random.default_rng(children[0]).integers(0, 2**31 - 1))
        ),
        valid=corpus.generate_negatives(
            raw_split.valid, int(np.random.default_rng(children[1]).integers(0, 2**31 - 1))
        ),
        test=raw_split.test,
    )


def _finetune_kwargs(cfg: dict) -> dict:
    return _section_kwargs(cfg, "finetune", {
        "lr": "lr", "warmup_steps": "warmup_steps", "total_steps": "total_steps",
        "batch_size": "batch_size", "objective": "objective", "margin": "margin",
        "eval_every": "eval_every", "decay": "decay",
    })


def cmd_finetune(args) -> int:
    cfg = build_config(args.config, args.set)
    ft_kwargs = _finetune_kwargs(cfg)
    ft.FinetuneConfig(**ft_kwargs, seed=cfg["seed"])
    if bool(args.ckpt) == bool(args.scratch):
        raise ValueError("finetune: pass exactly one of --ckpt or --scratch")
    out_dir = _run_dir(args, "finetune")

    if args.ckpt:
        ckpt = mdl.load_checkpoint(args.ckpt)
        vocab = corpus.Vocabulary.load(_vocab_path_for(args.ckpt, args.vocab))
        est = ft.MatchFinetuner(init_checkpoint=ckpt, seed=cfg["seed"],
                                force=args.force, **ft_kwargs)
    else:
        if not args.vocab:
            raise ValueError("finetune --scratch needs --vocab")
        _validate_encoder_early(cfg)
        vocab = corpus.Vocabulary.load(args.vocab)
        encoder = mdl.EncoderConfig(vocab_size=vocab.size, **_encoder_kwargs(cfg))
        est = ft.MatchFinetuner(encoder=encoder, seed=cfg["seed"], **ft_kwargs)

    split = _target_split(cfg, vocab)
    est.fit(split)

    mdl.save_checkpoint(est.checkpoint_, out_dir / "finetuned.ckpt")
    ft.write_history_csv(out_dir / "finetune_history.csv", est.history_)
    ft.write_summary_json(out_dir / "finetune_summary.json", est.summary_)
    vocab.save(out_dir / "vocab.json")
    echo_config(cfg, out_dir)
    print(
        f"finetune: best valid accuracy {est.summary_['best_valid_accuracy']:.4f} "
        f"at step {est.summary_['best_step']} -> {out_dir}"
    )
    return 0


def cmd_eval(args) -> int:
    ckpt = mdl.load_checkpoint(args.ckpt)
    check_phase(ckpt, ("finetuned",), force=args.force)
    vocab = corpus.Vocabulary.load(_vocab_path_for(args.ckpt, args.vocab))
    raw = corpus.load_pairs(args.test, args.format)
    pairs = corpus.deduplicate(corpus.encode_pairs(raw, vocab))
    n = args.candidates if args.candidates else min(100, len(pairs))
    report = search_mod.evaluate_checkpoint(ckpt, pairs, n)
    text = report.to_json()
    if args.out:
        out_dir = _run_dir(args, "eval")
        (out_dir / "eval_report.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    print(f"eval: mrr {report.mrr:.4f} acc@1 {report.acc_at[1]:.4f} over {n} candidates")
    return 0


def cmd_search(args) -> int:
    ckpt = mdl.load_checkpoint(args.ckpt)
    vocab = corpus.Vocabulary.load(_vocab_path_for(args.ckpt, args.vocab))
    searcher = search_mod.CodeSearcher(ckpt, force=args.force)
    query = vocab.encode_nl(args.query)
    if not query:
        raise ValueError("search: empty query after tokenization")
    snippets = []
    display = {}
    with open(args.codebase, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "code" not in rec:
                raise ValueError(f"{args.codebase}: record {i} missing field 'code'")
            sid = rec.get("id", i)
            snippets.append((sid, vocab.encode_pl(rec["code"])))
            display[sid] = rec["code"]
    result = searcher.rank(query, snippets)
    for rank, (sid, score) in enumerate(result.top(args.k), start=1):
        snippet = display[sid].replace("\n", " ")[:80]
        print(f"{rank}\t{score:.6f}\t{sid}\t{snippet}")
    return 0


def cmd_sweep(args) -> int:
    cfg = build_config(args.config, args.set)
    ft_kwargs = _finetune_kwargs(cfg)
    ft.FinetuneConfig(**ft_kwargs, seed=cfg["seed"])
    out_dir = _run_dir(args, "sweep")

    inits: dict[str, mdl.Checkpoint | None] = {}
    vocab = None
    encoder = None
    for item in args.ckpt or []:
        if "=" not in item:
            raise ValueError(f"sweep --ckpt expects label=path, got {item!r}")
        label, path = item.split("=", 1)
        ckpt = mdl.load_checkpoint(path)
        inits[label] = ckpt
        if vocab is None:
            vocab = corpus.Vocabulary.load(_vocab_path_for(path, args.vocab))
            encoder = ckpt.config
    if args.scratch:
        inits[args.scratch] = None
    if not inits:
        raise ValueError("sweep: no starting points; pass --ckpt label=path")
    if vocab is None:
        if not args.vocab:
            raise ValueError("sweep with only --scratch needs --vocab")
        vocab = corpus.Vocabulary.load(args.vocab)
        _validate_encoder_early(cfg)
        encoder = mdl.EncoderConfig(vocab_size=vocab.size, **_encoder_kwargs(cfg))

    split = _target_split(cfg, vocab)
    rows = search_mod.data_size_sweep(
        inits, split, cfg["sweep.sizes"], cfg["sweep.seeds"],
        finetune_params=ft_kwargs, encoder=encoder, n_candidates=cfg["eval.candidates"],
    )
    search_mod.write_sweep_csv(out_dir / "sweep.csv", rows)
    summary = search_mod.summarize_sweep(rows)
    serializable = {f"{k[0]}@{k[1]}": v for k, v in summary.items()}
    (out_dir / "sweep_summary.json").write_text(
        json.dumps(serializable, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    echo_config(cfg, out_dir)
    print(f"sweep: {len(rows)} runs over sizes {cfg['sweep.sizes']} -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codesearch",
        description="Cross-domain code search: pretrain, adapt, fine-tune, search.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="flat key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")
        p.add_argument("--out", help="run directory (default: $%s/<command>-<time>)"
                       % RUN_ROOT_ENV)

    p = sub.add_parser("synth", help="generate the synthetic multi-language corpus")
    p.add_argument("--out")
    p.add_argument("--pairs", type=int, default=250)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="synthetic grammar spec (flat key=value)")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="masked-token pretraining on source languages")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("meta", help="task-window adaptation from a pretrained checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab")
    p.add_argument("--force", action="store_true", help="bypass phase gating")
    p.set_defaults(fn=cmd_meta)

    p = sub.add_parser("finetune", help="target-language matching classifier")
    common(p)
    p.add_argument("--ckpt")
    p.add_argument("--scratch", action="store_true", help="random init (baseline)")
    p.add_argument("--vocab")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="ranked-retrieval metrics on a test file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--candidates", type=int)
    p.add_argument("--format", default="jsonl", choices=["jsonl", "sql-json"])
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("search", help="rank a codebase against a query")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--codebase", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--vocab")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("sweep", help="training-set-size sweep with repeats")
    common(p)
    p.add_argument("--ckpt", action="append", metavar="LABEL=PATH")
    p.add_argument("--scratch", metavar="LABEL", help="add a random-init curve")
    p.add_argument("--vocab")
    p.set_defaults(fn=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface a clean diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
