"""Config-driven command line tying the pipeline together.

Settings resolve in three layers: per-command defaults, then a flat
key=value config file (`--config`), then explicit flags. Unknown keys are
rejected. Every artifact-writing command embeds its effective config in a
manifest, and no output carries a timestamp, so seeded reruns are
byte-identical. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bpe, data
from .checkpoint import MANIFEST_NAME
from .encoder import preset
from .errors import ConfigError, FormatError, NumericError, RangeError, ShapeError, UsageError
from .pretrain import PretrainHyper, RtdPretrainer
from .rouge import TokenizationPolicy, aggregate, score_pair
from .seq2seq import (
    GENERATION_PROFILES,
    DecoderConfig,
    FinetuneHyper,
    GenerationParams,
    Seq2SeqModel,
    build_seq2seq,
    finetune,
    prepare_pairs,
    summarize_file,
)

_REQUIRED = object()


@dataclass(frozen=True)
class Opt:
    kind: type
    default: object
    help: str


def _parse_bool(raw: str) -> bool:
    low = str(raw).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


_COMMON_GEN = {
    "profile": Opt(str, "billsum-short", "length profile: billsum-short | billsum-long | pubmed"),
    "max_input_length": Opt(int, 0, "input token cap (0 = take from profile)"),
    "max_target_length": Opt(int, 0, "target token cap (0 = take from profile)"),
}

OPTIONS: dict[str, dict[str, Opt]] = {
    "train-tokenizer": {
        "corpus": Opt(str, _REQUIRED, "input corpus file"),
        "input_format": Opt(str, "text", "corpus layout: text (one doc per line) | jsonl"),
        "vocab_size": Opt(int, 64000, "total vocabulary size including specials and bytes"),
        "out": Opt(str, _REQUIRED, "output directory for vocab.jsonl and merges.txt"),
    },
    "prepare-data": {
        "input": Opt(str, _REQUIRED, "JSONL documents with a text field"),
        "tokenizer": Opt(str, _REQUIRED, "tokenizer directory"),
        "out": Opt(str, _REQUIRED, "output chunk file"),
        "sequence_length": Opt(int, 4096, "tokens per training chunk"),
        "batch_size": Opt(int, 1000, "documents tokenized per batch"),
        "per_subset_cap": Opt(int, 500000, "max documents kept per subset"),
        "workers": Opt(int, 1, "tokenizer worker processes (BLF_WORKERS mirrors this)"),
    },
    "pretrain": {
        "chunks": Opt(str, _REQUIRED, "chunk file from prepare-data"),
        "out": Opt(str, _REQUIRED, "output directory"),
        "preset": Opt(str, "tiny", "encoder preset: tiny | small | base"),
        "vocab_size": Opt(int, 0, "override preset vocabulary size (0 = preset value)"),
        "window": Opt(int, 0, "override attention window (0 = preset value)"),
        "max_positions": Opt(int, 0, "override position capacity (0 = preset value)"),
        "steps": Opt(int, 500, "total optimization steps to reach"),
        "seed": Opt(int, 0, "root seed for all substreams"),
        "batch_size": Opt(int, 32, "sequences per step"),
        "base_lr": Opt(float, 0.0, "peak learning rate (0 = 5e-4, or 3e-4 for base)"),
        "warmup_steps": Opt(int, 10000, "linear warmup length"),
        "total_steps": Opt(int, 100000, "schedule end for linear decay"),
        "mlm_probability": Opt(float, 0.25, "independent masking rate"),
        "disc_weight": Opt(float, 50.0, "discriminator loss scale"),
        "depth_divisor": Opt(int, 0, "generator depth divisor (0 = 4, or 3 for base)"),
        "resume": Opt(str, "", "checkpoint directory to continue from"),
    },
    "finetune": {
        "train": Opt(str, _REQUIRED, "training JSONL with text and summary fields"),
        "validation": Opt(str, _REQUIRED, "validation JSONL"),
        "encoder": Opt(str, _REQUIRED, "encoder or pretraining checkpoint directory"),
        "tokenizer": Opt(str, _REQUIRED, "tokenizer directory"),
        "out": Opt(str, _REQUIRED, "output directory"),
        "decoder_layers": Opt(int, 6, "decoder depth"),
        "batch_size": Opt(int, 32, "pairs per step"),
        "lr": Opt(float, 7e-5, "constant learning rate (0 = evaluation-only epochs)"),
        "patience": Opt(int, 3, "non-improving epochs tolerated"),
        "max_epochs": Opt(int, 30, "epoch cap"),
        "seed": Opt(int, 0, "root seed (decoder init and batch order)"),
        **_COMMON_GEN,
    },
    "generate": {
        "model": Opt(str, _REQUIRED, "fine-tuned seq2seq checkpoint directory"),
        "tokenizer": Opt(str, _REQUIRED, "tokenizer directory"),
        "input": Opt(str, _REQUIRED, "JSONL records with a text field"),
        "out": Opt(str, _REQUIRED, "output summaries JSONL"),
        "num_beams": Opt(int, 4, "beam width"),
        "no_repeat_ngram_size": Opt(int, 3, "repetition ban size (0 disables)"),
        "length_penalty": Opt(float, 1.0, "beam score length exponent"),
        **_COMMON_GEN,
    },
    "rouge": {
        "predictions": Opt(str, _REQUIRED, "JSONL with id and summary"),
        "references": Opt(str, _REQUIRED, "JSONL with id and summary"),
        "out": Opt(str, "", "optional JSON report path"),
        "lowercase": Opt(bool, True, "lowercase before tokenizing"),
        "stemming": Opt(bool, True, "Porter-stem tokens longer than three characters"),
    },
    "inspect": {
        "checkpoint": Opt(str, _REQUIRED, "checkpoint directory"),
    },
}


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="blf", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)
    subparsers = {}
    for command, table in OPTIONS.items():
        sp = subs.add_parser(command)
        sp.add_argument("--config", default=None, help="flat key=value settings file")
        for key, opt in table.items():
            kind = _parse_bool if opt.kind is bool else opt.kind
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kind,
                            default=None, help=opt.help)
        subparsers[command] = sp
    return parser, subparsers


def _read_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            out[key.strip()] = value.strip()
    return out


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    table = OPTIONS[command]
    effective = {k: (None if o.default is _REQUIRED else o.default) for k, o in table.items()}
    if "workers" in table and os.environ.get("BLF_WORKERS"):
        effective["workers"] = int(os.environ["BLF_WORKERS"])
    if args.config:
        for key, raw in _read_config_file(args.config).items():
            if key not in table:
                raise ConfigError(f"unknown setting {key!r} for {command}")
            opt = table[key]
            try:
                effective[key] = _parse_bool(raw) if opt.kind is bool else opt.kind(raw)
            except ValueError as exc:
                raise ConfigError(f"setting {key!r}: {exc}") from exc
    for key in table:
        value = getattr(args, key)
        if value is not None:
            effective[key] = value
    missing = [k for k, o in table.items() if o.default is _REQUIRED and effective[k] is None]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): {', '.join(missing)}")
    return effective


def _write_json(path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: expected an object")
            rec.setdefault("id", f"line-{lineno}")
            out.append(rec)
    return out


def _tokenizer_paths(directory) -> tuple[Path, Path]:
    d = Path(directory)
    return d / "vocab.jsonl", d / "merges.txt"


def _load_tokenizer(directory) -> bpe.ByteBpeModel:
    vocab, merges = _tokenizer_paths(directory)
    return bpe.load(vocab, merges)


def _checkpoint_config(directory) -> dict:
    path = Path(directory) / MANIFEST_NAME
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise FormatError(f"{directory}: no checkpoint manifest") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return manifest


def _resolve_lengths(cfg: dict) -> tuple[int, int]:
    profile = cfg["profile"]
    if profile not in GENERATION_PROFILES:
        raise ConfigError(
            f"unknown profile {profile!r}; choose from {', '.join(sorted(GENERATION_PROFILES))}"
        )
    base = GENERATION_PROFILES[profile]
    max_in = cfg["max_input_length"] or base.max_input_length
    max_tgt = cfg["max_target_length"] or base.max_target_length
    return max_in, max_tgt


# --- commands ---------------------------------------------------------------------


def cmd_train_tokenizer(cfg: dict) -> int:
    if cfg["input_format"] not in ("text", "jsonl"):
        raise ConfigError(f"input_format must be text or jsonl, got {cfg['input_format']!r}")
    if cfg["input_format"] == "jsonl":
        texts = [rec.text for rec in data.ingest(cfg["corpus"])]
    else:
        with open(cfg["corpus"], "r", encoding="utf-8") as f:
            texts = [line.rstrip("\n") for line in f]
        texts = [t for t in texts if t]
    model = bpe.train_tokenizer(texts, vocab_size=cfg["vocab_size"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    vocab_path, merges_path = _tokenizer_paths(out)
    model.save(vocab_path, merges_path)
    stats = bpe.corpus_stats(model, texts)
    _write_json(out / "manifest.json",
                {"command": "train-tokenizer", "config": cfg, "stats": stats})
    print(f"vocabulary: {len(model.id_to_token)} tokens")
    print(f"corpus: {stats['chars']} chars, {stats['tokens']} tokens, "
          f"{stats['chars_per_token']:.4f} chars/token")
    return 0


def cmd_prepare_data(cfg: dict) -> int:
    tokenizer = _load_tokenizer(cfg["tokenizer"])
    spec = data.SplitSpec(per_subset_cap=cfg["per_subset_cap"])
    seen = 0

    def counted():
        nonlocal seen
        for rec in data.cap_subsets(data.ingest(cfg["input"]), spec):
            seen += 1
            yield rec

    dataset = data.concat_and_chunk(
        counted(), tokenizer, L=cfg["sequence_length"],
        batch_size=cfg["batch_size"], workers=cfg["workers"],
    )
    if seen == 0:
        raise UsageError(f"{cfg['input']}: no documents to prepare")
    data.write_chunks(cfg["out"], dataset)
    manifest = data.chunk_manifest(dataset, extra={"command": "prepare-data", "config": cfg})
    _write_json(f"{cfg['out']}.manifest.json", manifest)
    print(f"documents: {seen}")
    print(f"chunks: {dataset.chunks.shape[0]} x {dataset.sequence_length}")
    print(f"tokens: {dataset.total_stream_tokens} streamed, {dataset.total_dropped} dropped")
    return 0


def _pretrain_trainer(cfg: dict) -> RtdPretrainer:
    if cfg["resume"]:
        return RtdPretrainer.resume(cfg["resume"])
    overrides = {
        k: cfg[k] for k in ("vocab_size", "window", "max_positions") if cfg[k]
    }
    enc_cfg = preset(cfg["preset"], **overrides)
    hyper = PretrainHyper(
        batch_size=cfg["batch_size"],
        base_lr=cfg["base_lr"] or (3e-4 if cfg["preset"] == "base" else 5e-4),
        warmup_steps=cfg["warmup_steps"],
        total_steps=cfg["total_steps"],
        disc_weight=cfg["disc_weight"],
        mlm_probability=cfg["mlm_probability"],
        depth_divisor=cfg["depth_divisor"] or (3 if cfg["preset"] == "base" else 4),
    )
    return RtdPretrainer(enc_cfg, hyper, seed=cfg["seed"])


def cmd_pretrain(cfg: dict) -> int:
    dataset = data.read_chunks(cfg["chunks"])
    trainer = _pretrain_trainer(cfg)
    if trainer.step_count > cfg["steps"]:
        raise UsageError(
            f"checkpoint is already at step {trainer.step_count}, past the target {cfg['steps']}"
        )
    remaining = cfg["steps"] - trainer.step_count
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    last = None
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as f:
        if remaining:
            for metrics in trainer.run(dataset.chunks, remaining, dump_dir=out):
                f.write(json.dumps(metrics, sort_keys=True) + "\n")
                last = metrics
    trainer.checkpoint(out / "checkpoint")
    trainer.export_encoder(out / "encoder")
    _write_json(out / "manifest.json", {
        "command": "pretrain", "config": cfg,
        "final_step": trainer.step_count, "last_metrics": last,
    })
    print(f"step {trainer.step_count}: checkpoint at {out / 'checkpoint'}")
    if last is not None:
        print(f"final total loss {last['total']:.4f} "
              f"(gen {last['gen_loss']:.4f}, disc {last['disc_loss']:.4f})")
    return 0


def cmd_finetune(cfg: dict) -> int:
    tokenizer = _load_tokenizer(cfg["tokenizer"])
    max_in, max_tgt = _resolve_lengths(cfg)
    enc_manifest = _checkpoint_config(cfg["encoder"])["config"]
    hidden, heads = enc_manifest["hidden"], enc_manifest["heads"]
    dec_cfg = DecoderConfig(
        hidden=hidden, layers=cfg["decoder_layers"], heads=heads,
        intermediate=4 * hidden, max_target_positions=max_tgt,
    )
    model = build_seq2seq(cfg["encoder"], dec_cfg, seed=cfg["seed"])
    train_pairs = prepare_pairs(_read_jsonl(cfg["train"]), tokenizer, max_in, max_tgt)
    val_pairs = prepare_pairs(_read_jsonl(cfg["validation"]), tokenizer, max_in, max_tgt)
    hyper = FinetuneHyper(
        batch_size=cfg["batch_size"], lr=cfg["lr"], patience=cfg["patience"],
        max_epochs=cfg["max_epochs"], seed=cfg["seed"],
    )
    out = Path(cfg["out"])
    result = finetune(model, train_pairs, val_pairs, hyper, checkpoint_dir=out / "checkpoint")
    _write_json(out / "history.json", {"command": "finetune", "config": cfg, **result})
    print(f"epochs run: {result['epochs_run']} (early stop: {result['stopped_early']})")
    print(f"best epoch {result['best_epoch']}: validation loss {result['best_validation_loss']:.6f}")
    return 0


def cmd_generate(cfg: dict) -> int:
    model = Seq2SeqModel.load(cfg["model"])
    tokenizer = _load_tokenizer(cfg["tokenizer"])
    max_in, max_tgt = _resolve_lengths(cfg)
    params = GenerationParams(
        num_beams=cfg["num_beams"], no_repeat_ngram_size=cfg["no_repeat_ngram_size"],
        max_input_length=max_in, max_target_length=max_tgt,
        length_penalty=cfg["length_penalty"],
    )
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    stats = summarize_file(model, tokenizer, params, cfg["input"], cfg["out"])
    _write_json(f"{cfg['out']}.manifest.json",
                {"command": "generate", "config": cfg, **stats})
    print(f"summaries: {stats['written']} written, {stats['errors']} errors -> {cfg['out']}")
    return 0


def cmd_rouge(cfg: dict) -> int:
    preds = _read_jsonl(cfg["predictions"])
    refs = _read_jsonl(cfg["references"])
    pred_map = {}
    for rec in preds:
        if rec["id"] in pred_map:
            raise UsageError(f"duplicate prediction id {rec['id']!r}")
        pred_map[rec["id"]] = rec
    missing_preds = [r["id"] for r in refs
                     if r["id"] not in pred_map or "summary" not in pred_map[r["id"]]]
    ref_ids = {r["id"] for r in refs}
    missing_refs = [rid for rid in pred_map if rid not in ref_ids]
    if missing_preds or missing_refs:
        if missing_preds:
            print("missing predictions for ids: " + ", ".join(missing_preds), file=sys.stderr)
        if missing_refs:
            print("missing references for ids: " + ", ".join(missing_refs), file=sys.stderr)
        return 1
    policy = TokenizationPolicy(lowercase=cfg["lowercase"], stemming=cfg["stemming"])
    pair_scores = {}
    for ref in refs:
        if "summary" not in ref:
            raise FormatError(f"reference {ref['id']!r} has no summary field")
        pair_scores[ref["id"]] = score_pair(pred_map[ref["id"]]["summary"], ref["summary"], policy)
    agg = aggregate(list(pair_scores.values()))
    print(f"pairs scored: {len(pair_scores)}")
    print(f"{'metric':<10} {'precision':>10} {'recall':>10} {'f1':>10}")
    for metric in ("rouge1", "rouge2", "rougeL", "rougeLsum"):
        row = agg[metric]
        print(f"{metric:<10} {row['precision']:>10.5f} {row['recall']:>10.5f} {row['f1']:>10.5f}")
    if cfg["out"]:
        _write_json(cfg["out"], {"command": "rouge", "config": cfg,
                                 "pairs": pair_scores, "aggregate": agg})
    return 0


def cmd_inspect(cfg: dict) -> int:
    manifest = _checkpoint_config(cfg["checkpoint"])
    for key in ("version", "dtype", "params"):
        if key not in manifest:
            raise FormatError(f"{cfg['checkpoint']}: manifest lacks {key!r}")
    count = sum(int(np.prod(entry["shape"], dtype=np.int64)) for entry in manifest["params"])
    print(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"parameters: {count}")
    return 0


_DISPATCH = {
    "train-tokenizer": cmd_train_tokenizer,
    "prepare-data": cmd_prepare_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "generate": cmd_generate,
    "rouge": cmd_rouge,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser, subparsers = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return 0 if exc.code == 0 else 2
    try:
        cfg = resolve_config(args.command, args)
        return _DISPATCH[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        print(subparsers[args.command].format_usage(), end="", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, NumericError, RangeError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
