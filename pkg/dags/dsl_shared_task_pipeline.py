"""
# DSL Shared Task Pipeline - Clean, Train, Evaluate

This DAG reproduces the shared-task workflow for discriminating between
similar languages with the `resident` byte-level ResNet + bi-GRU classifier.

## Overview

The pipeline performs the following steps:
1. **Clean**: Strips hyperlinks, usernames and hashtags from the Twitter (B) test
   data and drops tweets that look English
2. **Train**: Trains one model per configured run preset (run1/run2/run3 = 5/4/3
   residual blocks)
3. **Evaluate**: Scores every run on the newswire (A) test set, and on the cleaned
   Twitter set with out-of-group predictions mapped to `hr`
4. **Validate**: Fails the run when any A-task accuracy is below the floor

## Configuration

### Airflow Variables (Optional):
- `dsl_train_path`: Training TSV (default: data/train.tsv)
- `dsl_dev_path`: Development TSV (default: none, 10% of training is held out)
- `dsl_test_path`: A-task test TSV (default: data/test.tsv)
- `dsl_b_test_path`: Raw Twitter test TSV (default: none, B evaluation skipped)
- `dsl_run_presets`: Comma-separated presets to train (default: run1,run2,run3)
- `dsl_work_dir`: Output directory for models and reports (default: /tmp/resident)
- `dsl_min_accuracy`: Accuracy floor for validation (default: 0.5)
"""

import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from airflow.decorators import dag, task
from airflow.exceptions import AirflowException
from airflow.models import Variable
from pendulum import datetime as pendulum_datetime

# Add the project root to the path so the resident package is importable
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from resident import PROJECT_ROOT
from resident.cli import resolve_settings, run_evaluation, run_training
from resident.data_pipeline import (
    Dataset,
    Example,
    clean_tweet,
    filter_english,
    is_english_by_stopwords,
    load_tsv,
    write_tsv,
)
from resident.metrics import (
    baseline_row,
    format_results_table,
    report_record,
    result_row,
    results_table,
    write_report_jsonl,
)

logger = logging.getLogger(__name__)

# Configuration defaults
DEFAULT_TRAIN_PATH = str(PROJECT_ROOT / "data" / "train.tsv")
DEFAULT_TEST_PATH = str(PROJECT_ROOT / "data" / "test.tsv")
DEFAULT_WORK_DIR = "/tmp/resident"
DEFAULT_PRESETS = "run1,run2,run3"
DEFAULT_MIN_ACCURACY = "0.5"
B_TEST_SET = "B"


@dag(
    dag_id="dsl_shared_task_pipeline",
    start_date=pendulum_datetime(2024, 1, 1),
    schedule=None,
    catchup=False,
    max_active_runs=1,
    doc_md=__doc__,
    default_args={
        "owner": "language_identification",
        "retries": 0,
        "email_on_failure": False,
        "email_on_retry": False,
    },
    tags=["dsl", "language_identification", "resnet", "training"],
    description="Train and evaluate byte-level ResNet language identifiers per run preset",
)
def dsl_shared_task_pipeline():
    """Main DAG function for the DSL shared task pipeline."""

    @task
    def clean_twitter_data() -> Optional[str]:
        """
        Clean the raw Twitter test file, if one is configured.

        Returns:
            Path of the cleaned TSV, or None when no B-task data is configured
        """
        try:
            raw_path = Variable.get("dsl_b_test_path", "")
            if not raw_path:
                logger.info("No Twitter test data configured, skipping clean-up")
                return None

            work_dir = Path(Variable.get("dsl_work_dir", DEFAULT_WORK_DIR))
            work_dir.mkdir(parents=True, exist_ok=True)

            raw = load_tsv(raw_path)
            cleaned = [Example.from_text(clean_tweet(e.text), e.label) for e in raw]
            kept = Dataset([e for e in cleaned if e.text], raw.labels, raw.skipped)
            if len(kept) < len(cleaned):
                logger.warning(f"⚠ Dropped {len(cleaned) - len(kept)} tweet(s) left empty")
            kept = filter_english(kept, is_english_by_stopwords)

            out_path = work_dir / "b_test_clean.tsv"
            write_tsv(kept, out_path)
            logger.info(f"✓ Cleaned Twitter data: {len(kept)} of {len(raw)} tweets kept")
            return str(out_path)

        except Exception as e:
            logger.error(f"Failed to clean Twitter data: {e}", exc_info=True)
            raise AirflowException(f"Twitter clean-up failed: {e}")

    @task
    def train_runs() -> Dict[str, str]:
        """
        Train one model per configured run preset.

        Returns:
            Dictionary mapping preset names to model file paths
        """
        try:
            presets = [
                p.strip() for p in Variable.get("dsl_run_presets", DEFAULT_PRESETS).split(",")
            ]
            train_path = Variable.get("dsl_train_path", DEFAULT_TRAIN_PATH)
            dev_path = Variable.get("dsl_dev_path", "") or None
            work_dir = Path(Variable.get("dsl_work_dir", DEFAULT_WORK_DIR))
            work_dir.mkdir(parents=True, exist_ok=True)

            logger.info(f"Training {len(presets)} run(s) on {train_path}")
            model_paths = {}
            for preset in [p for p in presets if p]:
                model_path = work_dir / f"{preset}.rsid"
                history = run_training(
                    train_path,
                    model_path,
                    resolve_settings(preset=preset),
                    dev_path=dev_path,
                    metrics_path=work_dir / f"{preset}_metrics.jsonl",
                )
                model_paths[preset] = str(model_path)
                logger.info(f"✓ {preset}: best epoch {history.best_epoch}, saved {model_path}")

            return model_paths

        except Exception as e:
            logger.error(f"Failed to train runs: {e}", exc_info=True)
            raise AirflowException(f"Training failed: {e}")

    @task
    def evaluate_runs(
        model_paths: Dict[str, str], b_test_path: Optional[str]
    ) -> List[Dict[str, Any]]:
        """
        Evaluate every trained run and write the results table.

        Args:
            model_paths: Preset name -> model file
            b_test_path: Cleaned Twitter test file, or None

        Returns:
            One record per (test set, run) with the aggregate metrics
        """
        try:
            test_path = Variable.get("dsl_test_path", DEFAULT_TEST_PATH)
            work_dir = Path(Variable.get("dsl_work_dir", DEFAULT_WORK_DIR))

            targets = [("A", test_path, None)]
            if b_test_path:
                targets.append((B_TEST_SET, b_test_path, B_TEST_SET))

            rows, records = [], []
            for test_set, path, group in targets:
                baseline = None
                for run, model_path in sorted(model_paths.items()):
                    evaluation = run_evaluation(model_path, path, group=group)
                    rows.append(result_row(test_set, run, evaluation.report))
                    records.append(report_record(test_set, run, evaluation.report))
                    baseline = evaluation.baseline
                if baseline is not None:
                    rows.append(baseline_row(test_set, baseline))

            table = format_results_table(results_table(rows))
            (work_dir / "results.txt").write_text(table + "\n", encoding="utf-8")
            write_report_jsonl(records, work_dir / "results.jsonl")

            logger.info("=" * 80)
            for line in table.splitlines():
                logger.info(line)
            logger.info("=" * 80)

            return [
                {k: r[k] for k in ("test_set", "run", "accuracy", "f1_macro")} for r in records
            ]

        except Exception as e:
            logger.error(f"Failed to evaluate runs: {e}", exc_info=True)
            raise AirflowException(f"Evaluation failed: {e}")

    @task
    def validate_results(results: List[Dict[str, Any]]) -> Dict[str, Any]:
        """
        Check that every A-task run clears the accuracy floor.

        Args:
            results: Records from evaluate_runs

        Returns:
            Validation summary
        """
        try:
            floor = float(Variable.get("dsl_min_accuracy", DEFAULT_MIN_ACCURACY))
            a_rows = [r for r in results if r["test_set"] == "A"]
            if not a_rows:
                raise ValueError("No A-task results to validate")

            failing = [r["run"] for r in a_rows if r["accuracy"] < floor]
            if failing:
                raise ValueError(f"Runs below accuracy {floor}: {', '.join(failing)}")

            best = max(a_rows, key=lambda r: r["accuracy"])
            logger.info(f"✓ All {len(a_rows)} run(s) above {floor}; best {best['run']}")
            return {"runs_validated": len(a_rows), "best_run": best["run"], "floor": floor}

        except Exception as e:
            logger.error(f"Result validation failed: {e}", exc_info=True)
            raise AirflowException(f"Validation failed: {e}")

    # Define task dependencies
    b_test_path = clean_twitter_data()
    model_paths = train_runs()
    results = evaluate_runs(model_paths, b_test_path)
    validate_results(results)


# Instantiate the DAG
dsl_shared_task_pipeline()
