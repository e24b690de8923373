"""Batch command line: train / eval / predict / segment / gradcheck.

Exit codes: 0 ok, 2 usage, 3 data error, 4 checkpoint error,
5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Dict, List, Optional

from .config import ConfigError, ModelConfig, TrainConfig, config_to_dict, load_config
from .gradcheck import model_gradient_check
from .metrics import compute_metrics
from .model import init_params, predict_label
from .tensor import Rng, no_grad
from .text import (DataError, build_embedding_matrix, build_vocab, encode_batch,
                   load_jsonl_dataset, load_lexicon, load_word2vec_text,
                   prepare_example)
from .train import (CheckpointError, evaluate, load_checkpoint, predict_scores,
                    save_checkpoint, train)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_GRADCHECK = 5

_OVERRIDE_FLAGS = {
    "lr": "lr", "batch": "batch_size", "epochs": "epochs", "d": "d",
    "n_blocks": "n_blocks", "heads": "n_heads", "k": "k", "dg": "d_g",
    "alpha": "alpha", "beta": "beta", "dropout": "dropout", "l2": "l2",
    "max_len": "max_len", "clip_norm": "clip_norm",
}


def _add_override_flags(sub: argparse.ArgumentParser):
    sub.add_argument("--lr", type=float)
    sub.add_argument("--batch", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--d", type=int)
    sub.add_argument("--n-blocks", type=int, dest="n_blocks")
    sub.add_argument("--heads", type=int)
    sub.add_argument("--k", type=int)
    sub.add_argument("--dg", type=int)
    sub.add_argument("--alpha", type=float)
    sub.add_argument("--beta", type=float)
    sub.add_argument("--dropout", type=float)
    sub.add_argument("--l2", type=float)
    sub.add_argument("--max-len", type=int, dest="max_len")
    sub.add_argument("--clip-norm", type=float, dest="clip_norm")


def _collect_overrides(args) -> Dict:
    out = {}
    for flag, key in _OVERRIDE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcdn",
                                     description="Multi-level causality detection")
    subs = parser.add_subparsers(dest="command", required=True)

    p_train = subs.add_parser("train", help="fit a model and write a checkpoint")
    p_train.add_argument("--train", required=True, dest="train_path")
    p_train.add_argument("--valid", required=True, dest="valid_path")
    p_train.add_argument("--lexicon", required=True)
    p_train.add_argument("--embeddings", required=True)
    p_train.add_argument("--config")
    p_train.add_argument("--output", required=True, help="output directory")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--runs", type=int, default=1)
    _add_override_flags(p_train)

    p_eval = subs.add_parser("eval", help="write a metrics report as JSON")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--lexicon", required=True)
    p_eval.add_argument("--output", required=True)

    p_pred = subs.add_parser("predict", help="score raw sentences (one per line)")
    p_pred.add_argument("--input", required=True)
    p_pred.add_argument("--model", required=True)
    p_pred.add_argument("--lexicon", required=True)
    p_pred.add_argument("--output", required=True)

    p_seg = subs.add_parser("segment", help="write BL/L/AL spans as JSONL")
    p_seg.add_argument("--input", required=True)
    p_seg.add_argument("--lexicon", required=True)
    p_seg.add_argument("--output", required=True)

    p_grad = subs.add_parser("gradcheck",
                             help="finite-difference check on a reduced model")
    p_grad.add_argument("--seed", type=int, default=1)
    return parser


def _artifact_header(cfg_doc: Dict, seed: Optional[int]) -> str:
    return json.dumps({"config": cfg_doc, "seed": seed}, sort_keys=True)


def _cmd_train(args) -> int:
    overrides = _collect_overrides(args)
    explicit_d = "d" in overrides
    cfg, tcfg = load_config(args.config, overrides)
    lexicon = load_lexicon(args.lexicon)
    emb_tokens, emb_matrix = load_word2vec_text(args.embeddings)
    if emb_matrix.shape[1] != cfg.d:
        if explicit_d or (args.config and "d" in json.load(open(args.config))):
            raise DataError(f"embedding dimension {emb_matrix.shape[1]} "
                            f"conflicts with configured d={cfg.d}")
        overrides["d"] = int(emb_matrix.shape[1])
        cfg, tcfg = load_config(args.config, overrides)
    train_set = load_jsonl_dataset(args.train_path, lexicon)
    valid_set = load_jsonl_dataset(args.valid_path, lexicon)
    vocab = build_vocab((ex.tokens for ex in list(train_set) + list(valid_set)),
                        emb_tokens)
    os.makedirs(args.output, exist_ok=True)
    cfg_doc = config_to_dict(cfg, tcfg)
    cfg_doc.update({"seed": args.seed, "runs": args.runs})
    with open(os.path.join(args.output, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg_doc, fh, sort_keys=True, indent=2)
    for run in range(args.runs):
        seed = args.seed + run
        tcfg.seed = seed
        rng = Rng(seed)
        word = build_embedding_matrix(vocab, emb_tokens, emb_matrix, rng)
        params = init_params(cfg, len(vocab), rng, word_matrix=word)
        suffix = "" if args.runs == 1 else f"_run{run}"
        log_path = os.path.join(args.output, f"train_log{suffix}.jsonl")
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write(_artifact_header(cfg_doc, seed) + "\n")
        best, history = train(params, cfg, tcfg, train_set, valid_set, vocab)
        with open(log_path, "a", encoding="utf-8") as fh:
            for entry in history:
                fh.write(json.dumps(entry) + "\n")
        save_checkpoint(os.path.join(args.output, f"model{suffix}.mcdn"),
                        cfg, vocab, best)
        report = evaluate(best, cfg, valid_set, vocab, tcfg.batch_size)
        print(f"run {run}: best valid F1 {max(h['valid_f1'] for h in history):.4f} "
              f"(final {report.f1:.4f})")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg, vocab, params = load_checkpoint(args.model)
    lexicon = load_lexicon(args.lexicon)
    dataset = load_jsonl_dataset(args.data, lexicon)
    report = evaluate(params, cfg, dataset, vocab)
    doc = report.to_dict()
    doc["config"] = {"d": cfg.d, "n_blocks": cfg.n_blocks, "n_heads": cfg.n_heads,
                     "k": cfg.k, "d_g": cfg.d_g, "max_len": cfg.max_len,
                     "alpha": cfg.alpha, "beta": cfg.beta}
    with open(args.output, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
    print(f"F1 {report.f1:.4f}  AUROC {report.auroc:.4f}  AUPRC {report.auprc:.4f}")
    return EXIT_OK


def _read_sentences(path: str) -> List[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def _cmd_predict(args) -> int:
    cfg, vocab, params = load_checkpoint(args.model)
    lexicon = load_lexicon(args.lexicon)
    sentences = _read_sentences(args.input)
    examples = [prepare_example(s, lexicon) for s in sentences]
    scores = predict_scores(params, cfg, examples, vocab)
    cfg_doc = {"d": cfg.d, "max_len": cfg.max_len}
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write(_artifact_header(cfg_doc, None) + "\n")
        for sent, ex, score in zip(sentences, examples, scores):
            row = {"sentence": sent,
                   "altlex": None if ex.no_altlex else " ".join(ex.tokens[ex.l[0]:ex.l[1]]),
                   "probability": float(score),
                   "label": int(score >= 0.5)}
            if ex.no_altlex:
                row["no_altlex"] = True
            fh.write(json.dumps(row) + "\n")
    return EXIT_OK


def _cmd_segment(args) -> int:
    lexicon = load_lexicon(args.lexicon)
    sentences = _read_sentences(args.input)
    with open(args.output, "w", encoding="utf-8") as fh:
        for sent in sentences:
            ex = prepare_example(sent, lexicon)
            row = {"sentence": sent, "tokens": ex.tokens,
                   "bl": list(ex.bl), "l": list(ex.l), "al": list(ex.al)}
            if ex.no_altlex:
                row["no_altlex"] = True
            fh.write(json.dumps(row) + "\n")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    result = model_gradient_check(seed=args.seed)
    print(f"max relative error {result.max_rel_error:.3e} "
          f"(threshold {result.threshold:.1e}, {result.elapsed_s:.1f}s)")
    return EXIT_OK if result.passed else EXIT_GRADCHECK


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"train": _cmd_train, "eval": _cmd_eval, "predict": _cmd_predict,
                "segment": _cmd_segment, "gradcheck": _cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, ConfigError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
