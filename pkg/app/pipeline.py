"""
Stage orchestration: dataset generation, per-stage training, evaluation and
the end-to-end run (recognition, then sizing and characterization for every
frame recognition flags).
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Optional

import numpy as np

from app.agents.characterization import CharacterizationAgent
from app.agents.recognition import RecognitionAgent
from app.agents.report import ReportAgent, round_significant
from app.agents.sizing import SizingAgent
from app.config import PipelineSettings
from app.errors import ConfigValidationError, DatasetError, GeometryError, MissingArtifactError
from app.models import FindingReport, Manifest, PhantomSample, RecognitionLabel, Split, Verdict
from app.nn.network import NetworkSpec, Params
from app.nn.serialize import load_params, save_params
from app.nn.train import TrainingResult
from app.phantom.augment import augment_dataset
from app.phantom.generator import generate_dataset, generate_pretext
from app.phantom.split import split_dataset
from app.phantom.store import read_dataset, write_dataset
from app.services import characterization as char_service
from app.services import recognition as recog_service
from app.services import segmentation as seg_service
from app.services import sizing as size_service
from app.services.segmentation import AidUNetSpec

logger = logging.getLogger(__name__)

STAGES = ("recognition", "segmentation", "sizing", "characterization")
ARTIFACTS = {
    "recognition": "recognizer.cce",
    "segmentation": "segmenter.cce",
    "characterization": "characterizer.cce",
    "sizing": "sizer.json",
}


def artifact_path(settings: PipelineSettings, stage: str) -> Path:
    return Path(settings.paths.model_dir) / ARTIFACTS[stage]


def require_artifact(settings: PipelineSettings, stage: str) -> Path:
    path = artifact_path(settings, stage)
    if not path.is_file():
        raise MissingArtifactError(stage, path)
    return path


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(round_significant(payload), indent=2) + "\n", encoding="utf-8")


# --- Networks ---

def recognizer_net(settings: PipelineSettings) -> NetworkSpec:
    return recog_service.build_recognizer(settings.phantom.image_size)


def segmenter_spec(settings: PipelineSettings, sub_depth: Optional[int] = None) -> AidUNetSpec:
    seg = settings.segmentation
    return AidUNetSpec(
        direct_depth=seg.direct_depth,
        sub_depth=seg.sub_depth if sub_depth is None else sub_depth,
        base_channels=seg.base_channels,
        convs_per_block=seg.convs_per_block,
    )


def segmenter_net(settings: PipelineSettings, sub_depth: Optional[int] = None) -> NetworkSpec:
    try:
        return seg_service.build_aid_u_net(segmenter_spec(settings, sub_depth), settings.phantom.image_size)
    except ValueError as e:
        raise ConfigValidationError(str(e)) from e


def characterizer_net(settings: PipelineSettings) -> NetworkSpec:
    return char_service.build_characterizer(settings.phantom.image_size)


# --- Dataset lifecycle ---

def generate(settings: PipelineSettings) -> Manifest:
    """Renders, splits and writes the phantom dataset."""
    phantom = settings.phantom
    samples = generate_dataset(phantom, phantom.n_polyp, phantom.n_normal, settings.seed)
    manifest = split_dataset(samples, settings.split.test_fraction, settings.seed, settings.split.val_fraction)
    write_dataset(settings.paths.dataset_dir, samples, manifest)
    return manifest


def load_split(settings: PipelineSettings, *splits: Split) -> list[PhantomSample]:
    manifest, samples = read_dataset(settings.paths.dataset_dir)
    wanted = {r.id for r in manifest.records if r.split in splits}
    return [s for s in samples if s.id in wanted]


# --- Training ---

def train_recognizer(settings: PipelineSettings) -> recog_service.TransferResult:
    cfg = settings.recognition
    train = load_split(settings, Split.TRAIN)
    val = load_split(settings, Split.VAL)
    if not train:
        raise DatasetError("No training samples in the dataset")
    net = recognizer_net(settings)
    if cfg.fine_tune_last_k > len(net.learnable_nodes()):
        raise ConfigValidationError(
            f"recognition.fine_tune_last_k={cfg.fine_tune_last_k} exceeds the {len(net.learnable_nodes())} learnable layers"
        )
    train = augment_dataset(train, cfg.augment_factor, settings.stage_seed("recognition-augment"),
                            settings.phantom, settings.phantom.augment)
    pretext = generate_pretext(settings.phantom, settings.phantom.pretext_count, settings.stage_seed("pretext"))
    result = recog_service.pretrain_then_finetune(
        net,
        pretext,
        recog_service.recognition_arrays(train),
        settings.stage_train(cfg.pretrain, "recognition-pretrain"),
        cfg.fine_tune_last_k,
        finetune_cfg=settings.stage_train(cfg.finetune, "recognition-finetune"),
        val=recog_service.recognition_arrays(val) if val else None,
    )
    save_params(artifact_path(settings, "recognition"), result.params)
    return result


def _segmentation_arrays(samples: list[PhantomSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


def train_segmenter_stage(settings: PipelineSettings, sub_depth: Optional[int] = None,
                          save: bool = True) -> tuple[NetworkSpec, TrainingResult]:
    train = load_split(settings, Split.TRAIN)
    val = load_split(settings, Split.VAL)
    if not train:
        raise DatasetError("No training samples in the dataset")
    net = segmenter_net(settings, sub_depth)
    result = seg_service.train_segmenter(
        net, *_segmentation_arrays(train), settings.stage_train(settings.segmentation.train, "segmentation"),
        val=_segmentation_arrays(val) if val else None,
    )
    if save:
        save_params(artifact_path(settings, "segmentation"), result.params)
    return net, result


def train_characterizer_stage(settings: PipelineSettings) -> TrainingResult:
    cfg = settings.characterization
    train = [s for s in load_split(settings, Split.TRAIN) if s.has_polyp]
    val = [s for s in load_split(settings, Split.VAL) if s.has_polyp]
    train = augment_dataset(train, cfg.augment_factor, settings.stage_seed("characterization-augment"),
                            settings.phantom, settings.phantom.augment)
    images, labels = char_service.characterization_arrays(train)
    if len(labels) == 0:
        raise DatasetError("No polyp samples to train the characterizer on")
    result, _ = char_service.train_characterizer(
        characterizer_net(settings), images, labels,
        settings.stage_train(cfg.train, "characterization"),
        val=char_service.characterization_arrays(val) if len({s.neoplastic for s in val}) == 2 else None,
    )
    save_params(artifact_path(settings, "characterization"), result.params)
    return result


def _truth_pairs(settings: PipelineSettings, samples: list[PhantomSample]) -> list[dict]:
    """CCE size measured on the ground-truth mask paired with the HP size."""
    rows = []
    for sample in samples:
        if not sample.has_polyp:
            continue
        try:
            cce_mm, _ = size_service.estimate_cce_mm(sample.mask, settings.phantom.periphery_band_px,
                                                     settings.phantom.fov_mm)
        except GeometryError as e:
            logger.warning(f"{sample.id}: skipped for sizing: {e}")
            continue
        rows.append({"id": sample.id, "cce_mm": cce_mm, "hp_mm": sample.hp_mm, "flagged": False})
    return rows


def fit_sizer(settings: PipelineSettings) -> size_service.SizeRegressor:
    cfg = settings.sizing
    rows = _truth_pairs(settings, load_split(settings, Split.TRAIN, Split.VAL))
    if len(rows) >= 5:
        flagged = size_service.remove_outliers(
            [r["cce_mm"] for r in rows], [r["hp_mm"] for r in rows], cfg.outlier_mad_multiplier, cfg.outlier_floor_mm
        )
        for row, flag in zip(rows, flagged):
            row["flagged"] = bool(flag)
    kept = [r for r in rows if not r["flagged"]]
    regressor = size_service.SizeRegressor(cfg.kernel_scale, cfg.ridge).fit(
        [r["cce_mm"] for r in kept], [r["hp_mm"] for r in kept]
    )
    regressor.save(artifact_path(settings, "sizing"))
    size_service.write_pairs_csv(Path(settings.paths.report_dir) / "sizing_pairs.csv", rows)
    return regressor


# --- Evaluation ---

def _load(settings: PipelineSettings, stage: str) -> Params:
    return load_params(require_artifact(settings, stage))


def evaluate_recognition(settings: PipelineSettings, test: list[PhantomSample]) -> dict:
    images, labels = recog_service.recognition_arrays(test)
    report = recog_service.evaluate(recognizer_net(settings), _load(settings, "recognition"), images, labels,
                                    settings.recognition.tie_break_positive)
    return report.model_dump()


def _segmentation_scores(net: NetworkSpec, params: Params, settings: PipelineSettings,
                         test: list[PhantomSample], rows: Optional[list] = None) -> dict:
    seg = settings.segmentation
    dices, verdicts, merged = [], [], []
    for sample in test:
        if not sample.has_polyp:
            continue
        result = seg_service.segment(net, params, sample.image, seg.threshold, seg.min_region_px)
        regions = result.region_masks()
        verdict = seg_service.judge(regions, sample.mask, seg.wrong_region_iou)
        merged_verdict = seg_service.judge_merged(regions, sample.mask, seg.wrong_region_iou)
        score = seg_service.dice(result.mask, sample.mask)
        dices.append(score)
        verdicts.append(verdict)
        merged.append(merged_verdict)
        if rows is not None:
            rows.append({"id": sample.id, "verdict": verdict.value, "merged_verdict": merged_verdict.value,
                         "dice": score, "regions": len(result.regions)})
    n = len(dices)
    if n == 0:
        raise DatasetError("No polyp samples in the test split")
    return {
        "images": n,
        "mean_dice": float(np.mean(dices)),
        "correct_rate": sum(v == Verdict.CORRECT for v in verdicts) / n,
        "merged_correct_rate": sum(v == Verdict.CORRECT for v in merged) / n,
        "verdicts": {v.value: sum(x == v for x in verdicts) for v in Verdict},
    }


def evaluate_segmentation(settings: PipelineSettings, test: list[PhantomSample]) -> dict:
    rows: list[dict] = []
    scores = _segmentation_scores(segmenter_net(settings), _load(settings, "segmentation"), settings, test, rows)
    results_path = Path(settings.paths.report_dir) / "segmentation_results.jsonl"
    results_path.parent.mkdir(parents=True, exist_ok=True)
    with results_path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(round_significant(row)) + "\n")
    summary = {"aid_u_net": scores}
    if settings.segmentation.compare_baseline and settings.segmentation.sub_depth > 0:
        net, result = train_segmenter_stage(settings, sub_depth=0, save=False)
        summary["u_net"] = _segmentation_scores(net, result.params, settings, test)
        logger.info(f"Plain U-Net mean Dice {summary['u_net']['mean_dice']:.3f} vs "
                    f"AID-U-Net {scores['mean_dice']:.3f}")
    return summary


def evaluate_sizing(settings: PipelineSettings, test: list[PhantomSample]) -> dict:
    regressor = size_service.SizeRegressor.load(require_artifact(settings, "sizing"))
    rows = _truth_pairs(settings, test)
    if not rows:
        raise DatasetError("No measurable polyp samples in the test split")
    cce = [r["cce_mm"] for r in rows]
    hp = [r["hp_mm"] for r in rows]
    predicted = regressor.predict(cce).tolist()
    size_service.write_pairs_csv(Path(settings.paths.report_dir) / "sizing_test_pairs.csv", rows)
    cce_vs_hp = size_service.confusion(list(zip(cce, hp)))
    logger.info("CCE vs HP size buckets:\n" + size_service.format_confusion(cce_vs_hp))
    return {
        "pairs": len(rows),
        "rmse": size_service.rmse(predicted, hp),
        "identity_rmse": size_service.rmse(cce, hp),
        "bucket_agreement": size_service.bucket_agreement([max(p, 0.0) for p in predicted], hp),
        "confusion_cce_vs_hp": cce_vs_hp.tolist(),
        "confusion_predicted_vs_hp": size_service.confusion([(max(p, 0.0), h) for p, h in zip(predicted, hp)]).tolist(),
    }


def evaluate_characterization(settings: PipelineSettings, test: list[PhantomSample]) -> dict:
    cfg = settings.characterization
    net, params = characterizer_net(settings), _load(settings, "characterization")
    polyps = [s for s in test if s.has_polyp]
    if not polyps:
        raise DatasetError("No polyp samples in the test split")
    predicted, largest = [], {layer: [] for layer in cfg.gram_layers}
    for sample in polyps:
        mask = sample.mask if cfg.mask_restricted else None
        neoplastic, _, spectrum = char_service.characterize(net, params, sample.image, cfg.gram_layers, mask=mask)
        predicted.append(int(neoplastic))
        for entry in spectrum.layers:
            largest[entry.layer].append((sample.neoplastic, entry.largest))
    truth = [int(s.neoplastic) for s in polyps]
    report = recog_service.screening_metrics(*recog_service.confusion_counts(predicted, truth))
    supports = char_service.class_supports(largest)
    _write_json(Path(settings.paths.report_dir) / "overlap.json", [s.model_dump() for s in supports])
    return {"metrics": report.model_dump(), "supports": [s.model_dump() for s in supports]}


_EVALUATORS = {
    "recognition": evaluate_recognition,
    "segmentation": evaluate_segmentation,
    "sizing": evaluate_sizing,
    "characterization": evaluate_characterization,
}


def evaluate(settings: PipelineSettings, stage: Optional[str] = None) -> dict:
    """Evaluates one stage (or all) on the test split and writes evaluation.json."""
    stages = [stage] if stage else list(STAGES)
    for name in stages:
        require_artifact(settings, name)
    test = load_split(settings, Split.TEST)
    results = {}
    for name in stages:
        logger.info(f"Evaluating {name} on {len(test)} test samples", extra={"stage": name})
        results[name] = _EVALUATORS[name](settings, test)
    _write_json(Path(settings.paths.report_dir) / "evaluation.json", results)
    return results


def format_evaluation(results: dict) -> str:
    """One summary line for the CLI."""
    parts = []
    if "recognition" in results:
        r = results["recognition"]
        parts.append(f"sensitivity={_fmt(r['sensitivity'])} specificity={_fmt(r['specificity'])} npv={_fmt(r['npv'])}")
    if "segmentation" in results:
        s = results["segmentation"]["aid_u_net"]
        parts.append(f"dice={_fmt(s['mean_dice'])} correct={_fmt(s['correct_rate'])} "
                     f"merged_correct={_fmt(s['merged_correct_rate'])}")
    if "sizing" in results:
        s = results["sizing"]
        parts.append(f"rmse={_fmt(s['rmse'])} identity_rmse={_fmt(s['identity_rmse'])}")
    if "characterization" in results:
        c = results["characterization"]["metrics"]
        parts.append(f"characterization_accuracy={_fmt(c['accuracy'])}")
    return " ".join(parts)


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.6g}"


# --- End-to-end run ---

class _Runner:
    """Per-image processing shared by worker threads; holds only read-only state."""

    def __init__(self, settings: PipelineSettings):
        report_dir = Path(settings.paths.report_dir)
        stages = settings.stages
        self.recognition = RecognitionAgent(
            recognizer_net(settings), _load(settings, "recognition"),
            saliency_dir=report_dir / "saliency" if stages.write_saliency else None,
            tie_break_positive=settings.recognition.tie_break_positive,
        )
        self.sizing = None
        if stages.enable_sizing:
            seg = settings.segmentation
            self.sizing = SizingAgent(
                segmenter_net(settings), _load(settings, "segmentation"),
                size_service.SizeRegressor.load(require_artifact(settings, "sizing")),
                band_px=settings.phantom.periphery_band_px, fov_mm=settings.phantom.fov_mm,
                threshold=seg.threshold, min_region_px=seg.min_region_px, wrong_region_iou=seg.wrong_region_iou,
                overlay_dir=report_dir / "overlays" if stages.write_overlays else None,
                mask_dir=report_dir / "masks",
            )
        self.characterization = None
        if stages.enable_characterization:
            cfg = settings.characterization
            self.characterization = CharacterizationAgent(
                characterizer_net(settings), _load(settings, "characterization"), cfg.gram_layers,
                spectrum_dir=report_dir / "spectra", mask_restricted=cfg.mask_restricted,
            )
        for sub in ("saliency", "overlays", "masks", "spectra"):
            (report_dir / sub).mkdir(parents=True, exist_ok=True)

    def __call__(self, sample: PhantomSample) -> FindingReport:
        try:
            label, confidence, saliency_path = self.recognition.run(sample)
        except Exception as e:
            stage = self.recognition.stage
            logger.error(f"{sample.id}: {stage} failed: {e}", exc_info=True, extra={"image_id": sample.id})
            return FindingReport(id=sample.id, error=f"{stage}: {e}")

        fields: dict[str, Any] = {}
        errors = []
        if label == RecognitionLabel.C_POLYP:
            for agent in (self.sizing, self.characterization):
                if agent is None:
                    continue
                try:
                    fields.update(agent.run(sample))
                except Exception as e:
                    logger.error(f"{sample.id}: {agent.stage} failed: {e}", exc_info=True,
                                 extra={"image_id": sample.id, "stage": agent.stage})
                    errors.append(f"{agent.stage}: {e}")
        return FindingReport(
            id=sample.id,
            recognition_label=label,
            recognition_confidence=confidence,
            saliency_path=saliency_path,
            error="; ".join(errors) or None,
            **fields,
        )


def run_pipeline(settings: PipelineSettings, samples: Optional[list[PhantomSample]] = None) -> list[FindingReport]:
    """
    Runs every test-split frame (or `samples`) through the pipeline and writes
    the report. Findings come back in input order whatever the worker count.
    """
    runner = _Runner(settings)
    if samples is None:
        samples = load_split(settings, Split.TEST)
    logger.info(f"Running pipeline on {len(samples)} images with {settings.workers} worker(s)")
    if settings.workers > 1:
        with ThreadPoolExecutor(max_workers=settings.workers) as pool:
            findings = list(pool.map(runner, samples))
    else:
        findings = [runner(s) for s in samples]
    ReportAgent(settings.paths.report_dir).run(findings)
    return findings
