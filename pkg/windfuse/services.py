"""Service layer between the command line and the domain modules.

Each method runs one lifecycle step and writes its artifacts through an
ArtifactStore, keeping argument handling out of the modelling code.
"""

import io
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

from windfuse import evaluation, fusion, ingest, interpret, synth
from windfuse.artifacts import ArtifactStore
from windfuse.config import RunConfig
from windfuse.core import Dataset, validate_observation
from windfuse.errors import ModelError

logger = logging.getLogger(__name__)

BUNDLE_NAME = "pipeline.zip"


class PipelineService:
    """Service for the synth / train / evaluate / compare / explain / predict steps."""

    @staticmethod
    def validate_dataset(ds: Dataset) -> Tuple[bool, List[str]]:
        """Validates every observation's ranges and missingness.

        Args:
            ds: The dataset to check.

        Returns:
            A tuple (is_valid, error_messages_list); messages carry 1-based row numbers.
        """
        errors = []
        for i, obs in enumerate(ds.observations):
            for violation in validate_observation(obs):
                errors.append(f"row {i + 1}: {violation}")
        return len(errors) == 0, errors

    @staticmethod
    def resolve_config(
        base: RunConfig, seed: Optional[int], overrides: Dict[str, Any]
    ) -> RunConfig:
        """Applies the seed flag and dotted overrides on top of a base config."""
        if seed is not None:
            overrides = {"seed": seed, **overrides}
        return base.with_overrides(overrides) if overrides else base

    @staticmethod
    def load_dataset(path: str, store: ArtifactStore) -> Dataset:
        """Parses and validates a CSV, recording its digest for the manifest.

        Range violations are logged as warnings; they do not stop the run.
        """
        store.add_input(path)
        ds = ingest.parse_csv(path)
        is_valid, errors = PipelineService.validate_dataset(ds)
        if not is_valid:
            for message in errors[:20]:
                logger.warning("%s", message)
            if len(errors) > 20:
                logger.warning("... %d more violations", len(errors) - 20)
        logger.info("loaded %d observations from %s", len(ds), path)
        return ds

    @staticmethod
    def bundle_path(model: str) -> str:
        """Accepts a bundle file or a directory holding pipeline.zip."""
        if os.path.isdir(model):
            return os.path.join(model, BUNDLE_NAME)
        return model

    @staticmethod
    def load_pipeline(model: str, store: ArtifactStore) -> fusion.Pipeline:
        path = PipelineService.bundle_path(model)
        if not os.path.exists(path):
            raise ModelError(f"pipeline bundle not found: {path}")
        store.add_input(path)
        return fusion.load_pipeline(path)

    # --- Steps ---

    @staticmethod
    def synth(spec: synth.SynthSpec, store: ArtifactStore) -> Dict[str, float]:
        ds = synth.generate(spec)
        ingest.write_csv(ds, store.path("data.csv"))
        bayes = synth.bayes_accuracy(spec)
        logger.info("Bayes-optimal accuracy of this generator: %.4f", bayes)
        return {"bayes_accuracy": bayes}

    @staticmethod
    def _emit_curves(pipeline: fusion.Pipeline, store: ArtifactStore):
        for stem, records in sorted(pipeline.curves.items()):
            if not records:
                continue
            for path in evaluation.emit_curves(records, store.ensure(), stem):
                store.record(path)

    @staticmethod
    def train(ds: Dataset, config: RunConfig, store: ArtifactStore) -> Dict[str, Optional[float]]:
        """Fits on the training split, reports on the held-out split, saves the bundle."""
        split = ingest.train_test_split(ds, config.eval.train_fraction, config.seed)
        pipeline = fusion.fit_pipeline(ds, split.train_indices, config)
        fusion.save_pipeline(pipeline, store.path(BUNDLE_NAME))

        test = list(split.test_indices)
        predictions = fusion.predict_batch(pipeline, ds, test)
        fusion.predictions_to_csv(predictions, store.path("predictions.csv"), row_ids=test)
        report = evaluation.evaluate(ds.labels_array(test), [p.p_high for p in predictions])
        store.write_text("report.json", evaluation.report_to_json(report))
        evaluation.report_to_csv(report, store.path("report.csv"))
        PipelineService._emit_curves(pipeline, store)
        return report.as_dict()

    @staticmethod
    def evaluate(ds: Dataset, config: RunConfig, folds: int, store: ArtifactStore) -> Dict[str, Optional[float]]:
        """Stratified k-fold cross-validation of the full recipe."""
        result = evaluation.cross_validate(
            evaluation.pipeline_factory(config), ds, folds, config.seed
        )
        store.write_text("cv_report.json", evaluation.cv_to_json(result))
        evaluation.cv_to_csv(result, store.path("cv_report.csv"))
        for name in ("accuracy", "macro_f1", "roc_auc"):
            logger.info("cv %s: mean=%s std=%s", name, result.mean[name], result.std[name])
        return {f"mean_{k}": v for k, v in result.mean.items()}

    @staticmethod
    def compare(ds: Dataset, config: RunConfig, store: ArtifactStore) -> Dict[str, Optional[float]]:
        """Baseline comparison plus modality robustness on one split."""
        split = ingest.train_test_split(ds, config.eval.train_fraction, config.seed)
        table, pipeline = evaluation.compare_baselines(ds, split, config)
        evaluation.emit_comparison(table, store.path("comparison.csv"))
        robustness = evaluation.modality_robustness(pipeline, ds, split.test_indices)
        evaluation.emit_robustness(robustness, store.path("robustness.csv"))
        return {f"{row.model}_accuracy": row.accuracy for row in table}

    @staticmethod
    def explain(
        pipeline: fusion.Pipeline, ds: Dataset, method: str, store: ArtifactStore
    ) -> Dict[str, Optional[float]]:
        """Sensitivity, ablation and their contrast on the held-out split.

        The split is re-derived from the bundle's config, so explanations
        use rows the pipeline was not fitted on when ``ds`` is its training file.
        """
        config = pipeline.config
        split = ingest.train_test_split(ds, config.eval.train_fraction, config.seed)
        samples = interpret.select_correct_high(
            pipeline, ds, split.test_indices, config.eval.all_samples
        )
        if method == "exact-meta":
            sensitivity = interpret.exact_meta_report(pipeline, samples)
        else:
            sensitivity = interpret.sensitivity_fd(pipeline, samples, config.eval.sensitivity_h)
        ablation = interpret.ablate(pipeline, samples)

        s_frame = interpret.sensitivity_frame(sensitivity)
        a_frame = interpret.ablation_frame(ablation)
        interpret.write_frame(s_frame, store.path("sensitivity.csv"))
        interpret.write_frame(a_frame, store.path("ablation.csv"))
        text = io.StringIO()
        text.write(interpret.text_table(s_frame, f"Sensitivity ({sensitivity.method}, {sensitivity.n_samples} samples)"))
        text.write("\n")
        text.write(interpret.text_table(a_frame, f"Ablation (baseline confidence {ablation.baseline_conf:.4f})"))
        if method != "exact-meta":
            contrast = interpret.contrast_report(sensitivity, ablation)
            c_frame = interpret.contrast_frame(contrast)
            interpret.write_frame(c_frame, store.path("contrast.csv"))
            text.write("\n")
            text.write(interpret.text_table(c_frame, f"Rank contrast ({len(contrast.flagged)} flagged)"))
        store.write_text("explain.txt", text.getvalue())
        print(text.getvalue(), end="")

        values = {f"impact_{n}": v for n, v in zip(ablation.names, ablation.impact)}
        values.update({f"sensitivity_{n}": v for n, v in zip(sensitivity.names, sensitivity.values)})
        return values

    @staticmethod
    def predict(pipeline: fusion.Pipeline, ds: Dataset, store: ArtifactStore) -> Dict[str, Optional[float]]:
        """Scores every row; adds a report when the rows are labeled."""
        predictions = fusion.predict_batch(pipeline, ds)
        fusion.predictions_to_csv(predictions, store.path("predictions.csv"))
        if all(obs.label is not None for obs in ds.observations):
            report = evaluation.evaluate(ds.labels_array(), [p.p_high for p in predictions])
            store.write_text("report.json", evaluation.report_to_json(report))
            return report.as_dict()
        return {"n_predictions": float(len(predictions))}
