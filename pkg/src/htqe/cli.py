"""Command-line entry point.

Exit codes: 0 success, 1 runtime/numeric failure, 2 usage or config error,
3 file or parse error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable

from . import analysis, dataset, evaluation, training
from .embeddings import EmbeddingFormatError, load_embeddings
from .model import ModelConfig

log = logging.getLogger("htqe")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_FILE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _widths(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_str(text: str) -> str | None:
    return None if text.strip() == "" else text.strip()


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "embed_dim": (int, 200),
    "conv_widths": (_widths, (2,)),
    "conv_channels": (int, 100),
    "lstm_hidden": (int, 100),
    "attention_dim": (_opt_int, None),
    "num_lstm_layers": (int, 1),
    "share_attention": (_bool, False),
    "max_len": (_opt_int, None),
    "learning_rate": (float, 0.001),
    "l2_lambda": (float, 1e-3),
    "dropout": (float, 0.5),
    "batch_size": (int, 32),
    "epochs": (int, 30),
    "seed": (int, 0),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "adam_eps": (float, 1e-8),
    "dev_fraction": (float, 0.1),
    "l2_embeddings": (_bool, False),
    "l2_biases": (_bool, False),
    "freeze_embeddings": (_bool, False),
    "lowercase_source": (_bool, False),
    "n_train": (_opt_int, None),
    "checkpoint_dtype": (str, "float64"),
    "clamped_metrics": (_bool, False),
    "corpus": (_opt_str, None),
    "src_embeddings": (_opt_str, None),
    "tgt_embeddings": (_opt_str, None),
    "checkpoint": (_opt_str, None),
    "out": (str, "."),
}

# command-line flag -> config key
FLAG_KEYS = {
    "corpus": "corpus", "src_embeddings": "src_embeddings", "tgt_embeddings": "tgt_embeddings",
    "checkpoint": "checkpoint", "out": "out", "seed": "seed", "epochs": "epochs",
    "batch_size": "batch_size", "lr": "learning_rate", "lambda_": "l2_lambda", "dropout": "dropout",
    "conv_widths": "conv_widths", "hidden": "lstm_hidden", "freeze_embeddings": "freeze_embeddings",
    "clamped_metrics": "clamped_metrics",
}

MODEL_KEYS = ("embed_dim", "conv_widths", "conv_channels", "lstm_hidden", "attention_dim",
              "num_lstm_layers", "share_attention", "max_len")
TRAIN_KEYS = ("learning_rate", "l2_lambda", "dropout", "batch_size", "epochs", "seed", "beta1",
              "beta2", "adam_eps", "dev_fraction", "l2_embeddings", "l2_biases")


def read_config_file(path) -> dict[str, Any]:
    """Flat ``key=value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from None
    values = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = SCHEMA[key][0](raw)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return values


def resolve_config(args: argparse.Namespace) -> dict[str, Any]:
    resolved = {k: default for k, (_, default) in SCHEMA.items()}
    if getattr(args, "config", None):
        resolved.update(read_config_file(args.config))
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is None or (value is False and key in ("freeze_embeddings", "clamped_metrics")):
            continue
        if isinstance(value, str) and key not in ("corpus", "src_embeddings", "tgt_embeddings",
                                                   "checkpoint", "out"):
            try:
                value = SCHEMA[key][0](value)
            except ValueError as exc:
                raise UsageError(f"--{attr.rstrip('_').replace('_', '-')}: {exc}") from None
        resolved[key] = value
    return resolved


def format_config(cfg: dict[str, Any]) -> str:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k}={fmt(cfg[k])}\n" for k in sorted(cfg))


def model_config(cfg) -> ModelConfig:
    try:
        return ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})
    except ValueError as exc:
        raise UsageError(f"invalid model configuration: {exc}") from None


def train_config(cfg) -> training.TrainConfig:
    try:
        return training.TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})
    except ValueError as exc:
        raise UsageError(f"invalid training configuration: {exc}") from None


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(format_config(cfg), encoding="utf-8")
    log.info("resolved config:\n%s", format_config(cfg))
    return out


def _require(cfg, key: str, flag: str) -> str:
    if not cfg.get(key):
        raise UsageError(f"missing required {flag}")
    return cfg[key]


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


# ---------------------------------------------------------------- subcommands

def cmd_train(args, cfg) -> int:
    corpus_path = _require(cfg, "corpus", "--corpus")
    mcfg, tcfg = model_config(cfg), train_config(cfg)
    if cfg["checkpoint_dtype"] not in ("float64", "float32"):
        raise UsageError("checkpoint_dtype must be float64 or float32")
    out = _out_dir(cfg)
    corpus = dataset.parse_tsv(corpus_path)
    if cfg["n_train"] is not None:
        try:
            corpus, test = dataset.split(corpus, cfg["n_train"], training.sub_seed(tcfg.seed, "split", 1))
        except ValueError as exc:
            raise UsageError(f"n_train: {exc}") from None
        dataset.write_tsv(test, out / "test.tsv")
    src = tgt = None
    if cfg["src_embeddings"]:
        src = load_embeddings(cfg["src_embeddings"], mcfg.embed_dim,
                              seed=training.sub_seed(tcfg.seed, "embeddings", 2),
                              lowercase=cfg["lowercase_source"])
    if cfg["tgt_embeddings"]:
        tgt = load_embeddings(cfg["tgt_embeddings"], mcfg.embed_dim,
                              seed=training.sub_seed(tcfg.seed, "embeddings", 3))
    log_path = out / "train_log.jsonl"
    with log_path.open("w", encoding="utf-8", newline="\n") as fh:
        def on_epoch(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()

        model, history = training.train(mcfg, tcfg, corpus, src, tgt,
                                        freeze_embeddings=cfg["freeze_embeddings"], on_epoch=on_epoch)
    best = training.best_record(history)
    meta = {"train_config": tcfg.to_dict(), "seed": tcfg.seed, "epoch": best["epoch"],
            "metrics": {"dev_pearson": best["dev_pearson"], "dev_mse": best["dev_mse"]}}
    # only the file name is honoured so the checkpoint stays inside the output directory
    ckpt = out / (Path(cfg["checkpoint"]).name if cfg["checkpoint"] else "model.ckpt")
    training.save_checkpoint(model, ckpt, meta, dtype=cfg["checkpoint_dtype"])
    print(f"saved checkpoint to {ckpt} (best epoch {best['epoch']})")
    return EXIT_OK


def _load_model(cfg):
    path = _require(cfg, "checkpoint", "--checkpoint")
    return training.load_checkpoint(path).model


def cmd_evaluate(args, cfg) -> int:
    _require(cfg, "checkpoint", "--checkpoint")
    corpus_path = _require(cfg, "corpus", "--corpus")
    out = _out_dir(cfg)
    model = _load_model(cfg)
    corpus = dataset.parse_tsv(corpus_path)
    report = evaluation.evaluate(model, corpus, clamped=cfg["clamped_metrics"])
    text = report.render()
    _write(out / "report.txt", text)
    _write(out / "report.json", report.to_json() + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    _require(cfg, "checkpoint", "--checkpoint")
    corpus_path = _require(cfg, "corpus", "--corpus")
    out = _out_dir(cfg)
    model = _load_model(cfg)
    pairs = dataset.parse_pairs_tsv(corpus_path)
    preds = model.predict(list(pairs.examples))
    lines = []
    for ex, pred in zip(pairs, preds):
        c = pred.clamped
        lines.append("\t".join([" ".join(ex.source_tokens), " ".join(ex.target_tokens),
                                *(repr(float(getattr(c, a))) for a in dataset.ASPECTS)]))
    _write(out / "predictions.tsv", "".join(line + "\n" for line in lines))
    print(f"wrote {len(lines)} predictions to {out / 'predictions.tsv'}")
    return EXIT_OK


def cmd_attention(args, cfg) -> int:
    _require(cfg, "checkpoint", "--checkpoint")
    if not args.source or not args.target:
        raise UsageError("attention needs --source and --target")
    out = _out_dir(cfg)
    model = _load_model(cfg)
    try:
        example = dataset.Example(tuple(args.source.split()), tuple(args.target.split()), None, "pair")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    record = model.attention_weights(example)
    text = record.to_json()
    _write(out / "attention.json", text + "\n")
    print(text)
    return EXIT_OK


def cmd_agreement(args, cfg) -> int:
    if not args.ratings:
        raise UsageError("missing required --ratings")
    out = _out_dir(cfg)
    matrices = analysis.read_ratings_csv(args.ratings)
    alphas = {a: analysis.krippendorff_alpha(m, metric=args.metric) for a, m in matrices.items()}
    _write(out / "agreement.json", json.dumps({"metric": args.metric, "alpha": alphas}, indent=2) + "\n")
    for a, v in alphas.items():
        print(f"{a.upper()}\t{'undef' if v is None else f'{v:.4f}'}")
    return EXIT_OK


def cmd_describe(args, cfg) -> int:
    corpus_path = _require(cfg, "corpus", "--corpus")
    out = _out_dir(cfg)
    stats = analysis.score_descriptives(dataset.parse_tsv(corpus_path))
    text = analysis.render_descriptives(stats)
    _write(out / "describe.txt", text)
    _write(out / "describe.json", json.dumps(stats, indent=2) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_analyze_errors(args, cfg) -> int:
    if not args.errors:
        raise UsageError("missing required --errors")
    if args.components < 1:
        raise UsageError("--components must be >= 1")
    out = _out_dir(cfg)
    profiles = analysis.read_error_profiles(args.errors)
    summary = analysis.analyze_error_profiles(profiles, args.components, args.standardize)
    _write(out / "error_pca.json", json.dumps(summary, indent=2) + "\n")
    print(f"wrote {out / 'error_pca.json'}")
    return EXIT_OK


def cmd_gen_synthetic(args, cfg) -> int:
    if args.n is None:
        raise UsageError("missing required --n")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = _out_dir(cfg)
    corpus = dataset.gen_synthetic(args.n, cfg["seed"])
    dataset.write_tsv(corpus, out / "synthetic.tsv")
    print(f"wrote {len(corpus)} pairs to {out / 'synthetic.tsv'}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict, "attention": cmd_attention,
    "agreement": cmd_agreement, "describe": cmd_describe, "analyze-errors": cmd_analyze_errors,
    "gen-synthetic": cmd_gen_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file; flags override it")
    common.add_argument("--out", help="output directory (all files are written here)")
    common.add_argument("--seed", help="run seed")

    parser = argparse.ArgumentParser(prog="htqe", description="Fine-grained translation quality estimation")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def model_flags(p):
        p.add_argument("--corpus")
        p.add_argument("--src-embeddings", dest="src_embeddings")
        p.add_argument("--tgt-embeddings", dest="tgt_embeddings")
        p.add_argument("--checkpoint")
        p.add_argument("--epochs")
        p.add_argument("--batch-size", dest="batch_size")
        p.add_argument("--lr")
        p.add_argument("--lambda", dest="lambda_")
        p.add_argument("--dropout")
        p.add_argument("--conv-widths", dest="conv_widths")
        p.add_argument("--hidden")
        p.add_argument("--freeze-embeddings", dest="freeze_embeddings", action="store_true")
        p.add_argument("--clamped-metrics", dest="clamped_metrics", action="store_true")

    for name in ("train", "evaluate", "predict", "describe"):
        model_flags(sub.add_parser(name, parents=[common]))
    p = sub.add_parser("attention", parents=[common])
    model_flags(p)
    p.add_argument("--source", help="space-tokenized source sentence")
    p.add_argument("--target", help="space-tokenized target sentence")
    p = sub.add_parser("agreement", parents=[common])
    p.add_argument("--ratings", help="CSV: unit,annotator,ut,ts,iw,tm")
    p.add_argument("--metric", default="interval", choices=("interval", "nominal", "ordinal", "ratio"))
    p = sub.add_parser("analyze-errors", parents=[common])
    p.add_argument("--errors", help="error-profile CSV")
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--standardize", action="store_true")
    p = sub.add_parser("gen-synthetic", parents=[common])
    p.add_argument("--n", type=int)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("TQE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def run(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"htqe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"htqe {args.command}: file error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except (dataset.CorpusFormatError, EmbeddingFormatError, analysis.AnalysisFormatError,
            training.CheckpointError, UnicodeDecodeError) as exc:
        print(f"htqe {args.command}: parse error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except (training.TrainingDiverged, FloatingPointError, ValueError, RuntimeError) as exc:
        print(f"htqe {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
