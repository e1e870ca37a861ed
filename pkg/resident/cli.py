"""
Command-Line Interface

    resident train      --train a.tsv [--dev d.tsv] [--preset run3] --out m.rsid
    resident predict    --model m.rsid [--in sentences.txt] [--group B --fallback hr] [--probs]
    resident evaluate   --model m.rsid --test t.tsv [--group B] [--confusion cm.tsv]
    resident clean      --in tweets.tsv [--out clean.tsv] [--drop-english]
    resident gradcheck  [--seed 0] [--seeds 1]
    resident synthesize --out-dir data/ [--n-train 2000] [--n-test 500]

Data goes to standard output, diagnostics to standard error. Exit codes:
0 success, 1 runtime or data error, 2 usage error.
"""

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from resident.config import (
    FALLBACK_LABEL,
    MODEL_DEFAULTS,
    RUN_PRESETS,
    TRAIN_DEFAULTS,
    load_config_file,
    log_level,
)
from resident.data_pipeline import (
    TASK_A,
    ClassifierPredicate,
    Dataset,
    Example,
    LabelVocab,
    clean_tweet,
    filter_english,
    is_english_by_stopwords,
    load_tsv,
    resolve_group,
    write_tsv,
)
from resident.exceptions import ConfigurationError, ResidentError
from resident.gradcheck import SUITES, run_gradcheck
from resident.metrics import (
    ConfusionMatrix,
    MetricsReport,
    baseline_accuracy,
    baseline_row,
    confusion_matrix,
    cross_group_rate,
    format_results_table,
    metrics,
    project_predictions,
    report_record,
    result_row,
    results_table,
    write_report_jsonl,
)
from resident.optim import History, TrainConfig, train
from resident.resnet_model import (
    ModelConfig,
    build_model,
    load_model,
    predict_labels,
    predict_proba,
    save_model,
)
from resident.synthetic import generate_corpus

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Architecture flags; any of these conflicts with --preset
ARCH_FLAGS = (
    "n_blocks",
    "d_b",
    "conv_filters",
    "windows",
    "pool",
    "merge_mode",
    "block_dropout",
    "gru_hidden",
    "gru_dropout",
    "max_len",
)
TRAIN_FLAGS = ("batch_size", "max_epochs", "patience", "seed", "shuffle")


def resolve_settings(
    preset: Optional[str] = None,
    config_path: Optional[PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Merge model and training settings: overrides > config file > preset > defaults.

    Args:
        preset: Run preset name (run1, run2, run3)
        config_path: Optional JSON config file
        overrides: Explicit values; None entries are ignored

    Returns:
        Flat dictionary with every ModelConfig (except n_classes) and TrainConfig field
    """
    settings: Dict[str, Any] = {**MODEL_DEFAULTS, **TRAIN_DEFAULTS}
    if preset is not None:
        if preset not in RUN_PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {list(RUN_PRESETS)}")
        settings["n_blocks"] = RUN_PRESETS[preset]
    if config_path is not None:
        settings.update(load_config_file(config_path))
    settings.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return settings


def split_settings(settings: Mapping[str, Any], n_classes: int) -> Tuple[ModelConfig, TrainConfig]:
    model_cfg = ModelConfig(n_classes=n_classes, **{k: settings[k] for k in MODEL_DEFAULTS})
    train_cfg = TrainConfig(**{k: settings[k] for k in TRAIN_DEFAULTS})
    return model_cfg, train_cfg


def run_training(
    train_path: PathLike,
    out_path: PathLike,
    settings: Mapping[str, Any],
    dev_path: Optional[PathLike] = None,
    metrics_path: Optional[PathLike] = None,
) -> History:
    """Load data, build and train a model, and save it to ``out_path``."""
    train_set = load_tsv(train_path)
    dev_set = load_tsv(dev_path) if dev_path else None

    codes = set(train_set.gold_labels())
    if dev_set is not None:
        codes |= set(dev_set.gold_labels())
    labels = LabelVocab.from_labels(codes)
    train_set = Dataset(train_set.examples, labels, train_set.skipped)
    if dev_set is not None:
        dev_set = Dataset(dev_set.examples, labels, dev_set.skipped)

    model_cfg, train_cfg = split_settings(settings, len(labels))
    model = build_model(model_cfg, labels, seed=train_cfg.seed)
    model, history = train(model, train_set, dev_set, train_cfg, metrics_path)
    save_model(model, out_path)
    return history


@dataclass
class Evaluation:
    report: MetricsReport
    confusion: ConfusionMatrix
    baseline: float
    remapped: int = 0


def run_evaluation(
    model_path: PathLike,
    test_path: PathLike,
    group: Optional[str] = None,
    fallback: str = FALLBACK_LABEL,
    batch_size: int = TRAIN_DEFAULTS["batch_size"],
) -> Evaluation:
    """
    Score a saved model on a TSV file, optionally projecting onto a language group.

    Raises:
        ConfigurationError: If test labels are missing from the model vocabulary
            or fall outside the requested group
    """
    model = load_model(model_path)
    test_set = load_tsv(test_path)

    missing = sorted(set(test_set.gold_labels()) - set(model.labels))
    if missing:
        raise ConfigurationError(f"test labels not in the model vocabulary: {', '.join(missing)}")

    preds = predict_labels(model, test_set.texts(), batch_size)
    remapped = 0
    labels = model.labels
    if group is not None:
        members = resolve_group(group)
        outside = sorted(set(test_set.gold_labels()) - members)
        if outside:
            raise ConfigurationError(f"test labels outside group {group}: {', '.join(outside)}")
        preds, remapped = project_predictions(preds, members, fallback)
        labels = LabelVocab(sorted(members))

    cm = confusion_matrix(test_set.gold_labels(), preds, labels)
    report = metrics(cm)
    if set(labels) <= TASK_A.labels:
        logger.info(f"Cross-group confusion rate: {cross_group_rate(cm, TASK_A):.4f}")
    return Evaluation(report, cm, baseline_accuracy(test_set, "uniform"), remapped)


def _read_lines(path: Optional[PathLike]) -> List[str]:
    text = Path(path).read_text(encoding="utf-8") if path else sys.stdin.read()
    if not text:
        return []
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return [line[:-1] if line.endswith("\r") else line for line in lines]


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {name: getattr(args, name) for name in ARCH_FLAGS + TRAIN_FLAGS}
    settings = resolve_settings(args.preset, args.config, overrides)
    history = run_training(args.train, args.out, settings, args.dev, args.metrics)
    logger.info(f"✓ Best epoch {history.best_epoch} of {history.epochs_run}; model at {args.out}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    lines = _read_lines(args.input)
    probs = predict_proba(model, lines, args.batch_size)
    preds = [model.labels.code(int(i)) for i in probs.argmax(axis=1)]
    if args.group is not None:
        preds, _ = project_predictions(preds, resolve_group(args.group), args.fallback)

    out = sys.stdout
    for pred, row in zip(preds, probs):
        if args.probs:
            out.write(pred + "\t" + "\t".join(f"{p:.6f}" for p in row) + "\n")
        else:
            out.write(pred + "\n")
    logger.info(f"✓ Predicted {len(preds)} line(s)")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    evaluation = run_evaluation(args.model, args.test, args.group, args.fallback, args.batch_size)
    test_set_name = args.test_set or Path(args.test).stem
    run_name = args.run or Path(args.model).stem

    table = results_table(
        [
            result_row(test_set_name, run_name, evaluation.report),
            baseline_row(test_set_name, evaluation.baseline),
        ]
    )
    sys.stdout.write(format_results_table(table) + "\n")

    if args.confusion:
        evaluation.confusion.to_tsv(args.confusion)
    if args.report_json:
        write_report_jsonl(
            [report_record(test_set_name, run_name, evaluation.report)], args.report_json
        )
    return 0


def _english_predicate(args: argparse.Namespace, texts: Sequence[str]) -> Callable[[str], bool]:
    if not args.english_model:
        return is_english_by_stopwords
    model = load_model(args.english_model)
    if args.english_label not in model.labels:
        raise ConfigurationError(
            f"English label {args.english_label!r} not in model labels {list(model.labels)}"
        )
    column = model.labels.index(args.english_label)
    scores = dict(zip(texts, predict_proba(model, texts)[:, column]))
    return ClassifierPredicate(scores.__getitem__, args.english_threshold)


def cmd_clean(args: argparse.Namespace) -> int:
    dataset = load_tsv(args.input)
    cleaned = [Example.from_text(clean_tweet(e.text), e.label) for e in dataset]
    kept = [e for e in cleaned if e.text]
    if len(kept) < len(cleaned):
        logger.warning(f"Dropped {len(cleaned) - len(kept)} line(s) left empty by clean-up")
    result = Dataset(kept, dataset.labels, dataset.skipped)

    if args.drop_english:
        result = filter_english(result, _english_predicate(args, result.texts()))

    if args.out:
        write_tsv(result, args.out)
    else:
        sys.stdout.write("".join(f"{e.text}\t{e.label}\n" for e in result))
    logger.info(f"✓ Kept {len(result)} of {len(dataset)} line(s)")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    failed = []
    for seed in range(args.seed, args.seed + args.seeds):
        report = run_gradcheck(seed, SUITES)
        sys.stdout.write(f"seed {seed}\n{report.format()}")
        failed.extend(f"{name} (seed {seed})" for name in report.failures)
    if failed:
        sys.stderr.write(f"ERROR: gradient check failed: {', '.join(failed)}\n")
        return 1
    return 0


def cmd_synthesize(args: argparse.Namespace) -> int:
    corpus = generate_corpus(args.n_train, args.n_test, args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tsv(corpus.train, out_dir / "train.tsv")
    write_tsv(corpus.test, out_dir / "test.tsv")
    return 0


def _add_group_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--group",
        help='Project predictions onto a group: "B", a task-A group name, or comma-separated codes',
    )
    parser.add_argument(
        "--fallback", default=FALLBACK_LABEL, help="Label for out-of-group predictions"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resident", description="Byte-level residual network language identification"
    )
    parser.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Log level (default: $RESIDENT_LOG_LEVEL or INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a model")
    p.add_argument("--train", required=True, help="Training TSV")
    p.add_argument("--dev", help="Development TSV (default: hold out 10%% of --train)")
    p.add_argument("--out", required=True, help="Output model file")
    p.add_argument("--metrics", help="Per-epoch JSON-lines metrics file")
    p.add_argument("--preset", choices=sorted(RUN_PRESETS), help="Submitted run configuration")
    p.add_argument("--config", help="JSON file with model/training settings")
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--d-b", type=int, help="Byte embedding size")
    p.add_argument("--conv-filters", type=int)
    p.add_argument("--windows", type=int, nargs=2, metavar=("FIRST", "SECOND"))
    p.add_argument("--pool", type=int)
    p.add_argument("--merge-mode", choices=["concat", "add"])
    p.add_argument("--block-dropout", type=float)
    p.add_argument("--gru-hidden", type=int)
    p.add_argument("--gru-dropout", type=float)
    p.add_argument("--max-len", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-shuffle", dest="shuffle", action="store_const", const=False)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("predict", help="Label one sentence per input line")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", help="Input file (default: standard input)")
    p.add_argument("--probs", action="store_true", help="Append per-class probabilities")
    p.add_argument("--batch-size", type=int, default=TRAIN_DEFAULTS["batch_size"])
    _add_group_flags(p)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("evaluate", help="Score a model on a labelled TSV")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--confusion", help="Write the confusion matrix as TSV")
    p.add_argument("--report-json", help="Write the metrics as JSON lines")
    p.add_argument("--run", help="Run name in the results table (default: model file stem)")
    p.add_argument("--test-set", help="Test set name in the results table")
    p.add_argument("--batch-size", type=int, default=TRAIN_DEFAULTS["batch_size"])
    _add_group_flags(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("clean", help="Strip links, usernames and hashtags from tweets")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", help="Output TSV (default: standard output)")
    p.add_argument("--drop-english", action="store_true")
    p.add_argument("--english-model", help="Model used to score English instead of stop words")
    p.add_argument("--english-label", default="en")
    p.add_argument("--english-threshold", type=float, default=0.5)
    p.set_defaults(handler=cmd_clean)

    p = sub.add_parser("gradcheck", help="Finite-difference check of every gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="Number of consecutive seeds")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("synthesize", help="Write a synthetic similar-language corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=2000, help="Training sentences per language")
    p.add_argument("--n-test", type=int, default=500, help="Test sentences per language")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_synthesize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train" and args.preset:
            explicit = [
                f"--{name.replace('_', '-')}"
                for name in ARCH_FLAGS
                if getattr(args, name) is not None
            ]
            if explicit:
                parser.error(f"--preset cannot be combined with {', '.join(explicit)}")
        if args.command == "gradcheck" and args.seeds < 1:
            parser.error("--seeds must be at least 1")
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=args.log_level or log_level(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
        force=True,
    )

    try:
        return args.handler(args)
    except (ResidentError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        sys.stderr.write(f"ERROR: {e}\n")
        return 1
