"""Command-line entry point: preprocess, train, evaluate, ablate, predict.

Settings come from built-in defaults, then an optional ``--config`` file of
``key=value`` lines, then command-line flags; later sources win.

Exit codes: 0 success, 1 other failure, 2 bad input, 3 checkpoint or
vocabulary problem, 4 bad inference input.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import sys
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from . import data as dp
from . import plots
from .evaluation import Metrics, aggregate, rank_labels, rank_topk
from .graph import build_graph
from .model import LOSS_MODES, VARIANTS, ConfigError
from .training import (CheckpointError, FitResult, TrainConfig, TrainingError, fit, load_checkpoint,
                       save_checkpoint)

log = logging.getLogger("tagnn")

EXIT_OK, EXIT_OTHER, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_INFERENCE = 0, 1, 2, 3, 4
SKIP_FAIL_FRACTION = 0.10


class InputError(ValueError):
    pass


class InferenceInputError(ValueError):
    pass


def _fraction(text: str) -> float:
    value = float(Fraction(str(text).strip()))
    if not 0 < value <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {text}")
    return value


def _flag(text) -> bool:
    if isinstance(text, bool):
        return text
    return str(text).strip().lower() in ("1", "true", "yes", "on")


# key -> (parser, default)
SETTINGS: dict[str, tuple[Any, Any]] = {
    "data": (str, None),
    "format": (str, "prepared"),
    "out": (str, "runs"),
    "variant": (str, "full"),
    "loss": (str, "categorical"),
    "d": (int, 100),
    "batch": (int, 100),
    "lr": (float, 0.001),
    "l2": (float, 1e-5),
    "decay_factor": (float, 0.1),
    "decay_every": (int, 3),
    "epochs": (int, 30),
    "patience": (int, 10),
    "steps": (int, 1),
    "seed": (int, 0),
    "threads": (int, 1),
    "k": (int, 20),
    "fraction": (_fraction, 1.0),
    "test_window_days": (float, None),
    "min_item_count": (int, 5),
    "checkpoint": (str, None),
    "test": (str, None),
    "vocab": (str, None),
    "session": (str, None),
    "check_normalization": (_flag, False),
    "dump_graph": (_flag, False),
}


@dataclasses.dataclass
class RunConfig:
    values: dict[str, Any]

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            d=self.d, batch_size=self.batch, lr=self.lr, decay_factor=self.decay_factor,
            decay_every=self.decay_every, l2=self.l2, max_epochs=self.epochs, patience=self.patience,
            seed=self.seed, variant=self.variant, loss=self.loss, steps=self.steps, k=self.k,
        )


def read_config_file(path) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def resolve_config(file_values: Mapping[str, Any], flag_values: Mapping[str, Any]) -> RunConfig:
    """Merge defaults < config file < flags, rejecting unknown keys."""
    merged = {key: default for key, (_, default) in SETTINGS.items()}
    for source in (file_values, flag_values):
        for key, value in source.items():
            if key not in SETTINGS:
                raise ConfigError(f"unknown setting {key!r}")
            if value is None:
                continue
            try:
                merged[key] = SETTINGS[key][0](value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
    if merged["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {merged['variant']!r}")
    if merged["loss"] not in LOSS_MODES:
        raise ConfigError(f"unknown loss {merged['loss']!r}")
    if merged["format"] not in dp.FORMATS + ("prepared",):
        raise ConfigError(f"unknown format {merged['format']!r}")
    if merged["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return RunConfig(merged)


# ---------------------------------------------------------------------------
# helpers


def _require_file(path, what: str) -> Path:
    if path is None:
        raise InputError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _prepared(cfg: RunConfig) -> tuple[Path, dp.ItemVocabulary]:
    if cfg.format != "prepared":
        raise InputError(f"--data must be a prepared directory here (run `tagnn preprocess` on {cfg.format} logs first)")
    if cfg.data is None:
        raise InputError("missing --data")
    root = Path(cfg.data)
    vocab_path = _require_file(cfg.vocab or root / "vocab.txt", "vocabulary file")
    return root, dp.ItemVocabulary.load(vocab_path)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _block(values: Mapping[str, Any]) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


@contextlib.contextmanager
def _threads(n: int):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(cfg: RunConfig) -> int:
    raw = _require_file(cfg.data, "raw input file")
    if cfg.format == "prepared":
        raise InputError("preprocess needs --format yoochoose or --format diginetica")
    out = _out_dir(cfg)
    parsed = dp.parse_events(raw, cfg.format)
    if parsed.rows and parsed.skipped / parsed.rows > SKIP_FAIL_FRACTION:
        raise InputError(f"{parsed.skipped} of {parsed.rows} rows could not be parsed")
    sessions, vocab = dp.build_and_filter(parsed.events, cfg.min_item_count)
    days = cfg.test_window_days
    if days is None:
        days = 1.0 if cfg.format == "yoochoose" else 7.0
    train, test = dp.split_by_time(sessions, int(days * dp.DAY_MS))
    if cfg.fraction < 1:
        train = dp.select_recent_fraction(train, cfg.fraction)
        seen = {i for s in train for i in s.items}
        test = [dp.Session([i for i in s.items if i in seen], s.session_id, s.end_time) for s in test]
        test = [s for s in test if len(s) >= 2]
        if not test:
            raise dp.SplitError("no test session survives the training fraction")
    train, test, vocab = dp.compact_vocabulary(vocab, train, test)
    train_ex, test_ex = dp.expand_all(train), dp.expand_all(test)

    dp.write_examples(out / "train.txt", train_ex)
    dp.write_examples(out / "test.txt", test_ex)
    vocab.save(out / "vocab.txt")
    stats = {
        "format": cfg.format,
        "rows": parsed.rows,
        "skipped_rows": parsed.skipped,
        "sessions": len(sessions),
        "items": len(vocab),
        "train_sessions": len(train),
        "test_sessions": len(test),
        "train_examples": len(train_ex),
        "test_examples": len(test_ex),
        "test_window_days": days,
        "fraction": cfg.fraction,
        "vocab_hash": vocab.digest(),
    }
    if parsed.warning:
        stats["warning"] = parsed.warning
    _write(out / "stats.txt", _block(stats))
    sys.stdout.write(_block(stats))
    return EXIT_OK


def _load_training_set(cfg: RunConfig):
    root, vocab = _prepared(cfg)
    train_path = _require_file(root / "train.txt", "training examples")
    return dp.read_examples(train_path, len(vocab)), vocab


def _train_one(cfg: RunConfig, examples, vocab, out: Path, prefix: str = "") -> FitResult:
    tc = cfg.train_config()
    lines = []

    def on_epoch(rec):
        lines.append(rec.as_line())
        print(f"{prefix}{rec.as_line()}", flush=True)

    result = fit(examples, len(vocab), tc, vocab.digest(), on_epoch=on_epoch)
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    header = f"# started {stamp}\nepoch, lr, train_loss, val_p20, val_mrr20\n"
    _write(out / "train_log.csv", header + "".join(f"{ln}\n" for ln in lines))
    save_checkpoint(out / "checkpoint.tagn", result.best)
    plots.plot_training(result.history, out / "training.png")
    return result


def cmd_train(cfg: RunConfig) -> int:
    examples, vocab = _load_training_set(cfg)
    out = _out_dir(cfg)
    print("epoch, lr, train_loss, val_p20, val_mrr20")
    result = _train_one(cfg, examples, vocab, out)
    print(f"best_epoch={result.best.epoch}\nbest_val={result.best.best_metric:.2f}\n"
          f"checkpoint={out / 'checkpoint.tagn'}")
    return EXIT_OK


def _evaluate_checkpoint(cfg: RunConfig) -> tuple[Metrics, np.ndarray]:
    ckpt_path = _require_file(cfg.checkpoint, "checkpoint")
    if cfg.test is not None:
        test_path = _require_file(cfg.test, "test examples")
        vocab = dp.ItemVocabulary.load(_require_file(cfg.vocab, "vocabulary file"))
    else:
        root, vocab = _prepared(cfg)
        test_path = _require_file(root / "test.txt", "test examples")
    ckpt = load_checkpoint(ckpt_path, vocab_hash=vocab.digest())
    examples = dp.read_examples(test_path, len(vocab))
    if not examples:
        raise InputError(f"{test_path} holds no examples")
    if cfg.k > len(vocab):
        raise InputError(f"k={cfg.k} exceeds the {len(vocab)} items in the vocabulary")
    model = ckpt.model()
    ranks = rank_labels(model, examples, cfg.batch)
    return aggregate(ranks, cfg.k), ranks


def cmd_evaluate(cfg: RunConfig) -> int:
    metrics, ranks = _evaluate_checkpoint(cfg)
    text = metrics.as_table() + "\n" + metrics.as_block()
    sys.stdout.write(text)
    if cfg.out:
        out = _out_dir(cfg)
        _write(out / "metrics.txt", text)
        plots.plot_hit_curve(ranks, cfg.k, out / "hit_curve.png")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    examples, vocab = _load_training_set(cfg)
    root = Path(cfg.data)
    test = dp.read_examples(_require_file(root / "test.txt", "test examples"), len(vocab))
    out = _out_dir(cfg)
    from .evaluation import evaluate

    results: dict[str, Metrics] = {}
    for variant in VARIANTS:
        vcfg = RunConfig(dict(cfg.values, variant=variant))
        vout = out / variant
        vout.mkdir(exist_ok=True)
        try:
            fitted = _train_one(vcfg, examples, vocab, vout, prefix=f"[{variant}] ")
            results[variant] = evaluate(fitted.best.model(), test, cfg.k, cfg.batch)
        except Exception as exc:
            done = ", ".join(results) or "none"
            raise TrainingError(f"variant {variant} failed ({exc}); completed variants: {done}") from exc

    head = f"{'variant':<12}{'P@' + str(cfg.k):>10}{'MRR@' + str(cfg.k):>10}"
    rows = [head, "-" * len(head)]
    block = {}
    for name, m in results.items():
        rows.append(f"{name:<12}{m.precision_at_k:>10.2f}{m.mrr_at_k:>10.2f}")
        block[f"{name}.precision_at_{cfg.k}"] = f"{m.precision_at_k:.2f}"
        block[f"{name}.mrr_at_{cfg.k}"] = f"{m.mrr_at_k:.2f}"
    text = "\n".join(rows) + "\n\n" + _block(block)
    _write(out / "ablation.txt", text)
    plots.plot_ablation(results, out / "ablation.png", cfg.k)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(cfg: RunConfig) -> int:
    ckpt_path = _require_file(cfg.checkpoint, "checkpoint")
    if cfg.vocab is not None:
        vocab = dp.ItemVocabulary.load(_require_file(cfg.vocab, "vocabulary file"))
    else:
        _, vocab = _prepared(cfg)
    ckpt = load_checkpoint(ckpt_path, vocab_hash=vocab.digest())
    if not cfg.session:
        raise InferenceInputError("missing --session")
    prefix = [vocab.index(item.strip()) for item in cfg.session.split(",")]
    k = min(cfg.k, len(vocab))
    model = ckpt.model()
    probs = model.probabilities(model.batch([prefix])).data[0]
    if cfg.dump_graph:
        print(build_graph(prefix).dump(vocab.external))
    for rank, idx in enumerate(rank_topk(probs, k), 1):
        print(f"{rank} {vocab.external(int(idx))} {float(probs[idx]):.6f}")
    if cfg.check_normalization:
        print(f"probability_sum={float(np.sum(probs, dtype=np.float64)):.6f}")
    return EXIT_OK


HELP = {
    "preprocess": "turn a raw click log into prepared train/test/vocabulary files",
    "train": "fit a model on prepared data and write the best checkpoint",
    "evaluate": "report P@k and MRR@k of a checkpoint on prepared test data",
    "ablate": "train and evaluate every session-representation variant",
    "predict": "top-k next items for one session",
}

COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="key=value settings file")
    common.add_argument("--data", help="raw log (preprocess) or prepared directory")
    common.add_argument("--format", choices=dp.FORMATS + ("prepared",))
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--loss", choices=LOSS_MODES)
    common.add_argument("--d", type=int, help="hidden size")
    common.add_argument("--batch", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--l2", type=float)
    common.add_argument("--decay-factor", type=float)
    common.add_argument("--decay-every", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--patience", type=int)
    common.add_argument("--steps", type=int, help="GGNN propagation steps")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--k", type=int)
    common.add_argument("--fraction", help="e.g. 1/64")
    common.add_argument("--test-window-days", type=float)
    common.add_argument("--min-item-count", type=int)
    common.add_argument("--checkpoint")
    common.add_argument("--test", help="prepared test file (overrides --data)")
    common.add_argument("--vocab", help="vocabulary file (overrides --data)")
    common.add_argument("--session", help="comma-separated external item ids")
    common.add_argument("--check-normalization", action="store_true")
    common.add_argument("--dump-graph", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tagnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_INPUT
    command = args.pop("command")
    verbose = args.pop("verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    config_path = args.pop("config", None)
    try:
        file_values = read_config_file(_require_file(config_path, "config file")) if config_path else {}
        cfg = resolve_config(file_values, args)
        with _threads(cfg.threads):
            return COMMANDS[command](cfg)
    except (dp.UnknownItemError, InferenceInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFERENCE
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (InputError, ConfigError, dp.DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingError, ad.NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
