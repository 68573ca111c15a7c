"""
Two-stage localization pipeline: CAM generation, pseudo labels, class-agnostic
segmentation, standalone classification, inference and evaluation.
Each stage reads and writes artifacts through the run's ArtifactStore.
"""

import logging
import shutil
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .config import PipelineConfig
from .gppl import EmptyCamError, PseudoLabel, make_pseudo_label
from .layers import Module
from .localization import (
    BOX_COLUMNS,
    BBox,
    EvalRecord,
    binarize,
    evaluate,
    extract_bbox,
    records_from_frame,
    records_to_frame,
    report_json,
    report_text,
)
from .mffnet import (
    MFFNet,
    NetConfig,
    accuracy,
    build_model,
    compute_cam,
    fused_maps,
    predict_topk,
    train_classifier,
    train_mffnet,
)
from .segmentation import SegmentationNet, pixel_accuracy, predict_masks, train_segmenter
from .storage import ArtifactStore, MissingArtifactError, create_artifact_store
from .synthdata import dump_dataset, generate, to_arrays

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "train-cam", "make-pseudo", "train-seg", "train-cls", "infer", "eval")

TRAIN_FILES = ("data/train_images.arr", "data/train_manifest.csv")
TEST_FILES = ("data/test_images.arr", "data/test_manifest.csv")
CAM_MODEL = "mffnet1"
SEG_MODEL = "mffnet2"
CLS_MODEL = "classifier"


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and chains the cause."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage} failed: {cause}")


class Pipeline:
    """Runs pipeline stages for one configuration and output directory."""

    def __init__(self, config: PipelineConfig, store: Optional[ArtifactStore] = None):
        self.config = config
        self.store = store or create_artifact_store(config.out_dir)
        self._handlers: Dict[str, Callable[[], Optional[Dict]]] = {
            "gen-data": self.gen_data,
            "train-cam": self.train_cam,
            "make-pseudo": self.make_pseudo,
            "train-seg": self.train_seg,
            "train-cls": self.train_cls,
            "infer": self.infer,
            "eval": self.eval,
        }

    def stage_plan(self) -> List[str]:
        """Stages in execution order; the segmentation branch drops out without use_seg."""
        skipped = set() if self.config.use_seg else {"make-pseudo", "train-seg"}
        return [s for s in STAGES if s not in skipped]

    def run(self) -> Dict:
        for stage in self.stage_plan():
            self.run_stage(stage)
        return self.store.load_json("report.json")

    def run_stage(self, name: str) -> Optional[Dict]:
        if name not in self._handlers:
            raise ValueError(f"unknown stage '{name}', expected one of {STAGES}")
        logger.info(f"Stage {name} starting in {self.store.root}")
        try:
            result = self._handlers[name]()
        except Exception as e:
            logger.error(f"Stage {name} failed: {e}")
            raise StageError(name, e) from e
        self._record_manifest(name)
        logger.info(f"Stage {name} done")
        return result

    def _record_manifest(self, stage: str):
        path = "run_manifest.json"
        completed: List[str] = []
        if self.store.path(path).exists():
            previous = self.store.load_json(path)
            if previous.get("config") == self.config.to_dict():
                completed = previous.get("stages_completed", [])
        if stage not in completed:
            completed.append(stage)
        self.store.save_json(path, {"config": self.config.to_dict(), "seed": self.config.seed,
                                    "stages_completed": completed})

    # data ------------------------------------------------------------

    def _split_files(self, split: str) -> Tuple[str, str]:
        return TRAIN_FILES if split == "train" else TEST_FILES

    def load_split(self, split: str) -> Tuple[np.ndarray, pd.DataFrame]:
        images_file, manifest_file = self._split_files(split)
        self.store.require([self.store.path(images_file), self.store.path(manifest_file)])
        return self.store.load_array(images_file), self.store.load_table(manifest_file)

    def gen_data(self):
        cfg = self.config
        synth = cfg.synth_config()
        splits = {"train": generate(cfg.n_train, cfg.seed, synth, start=0),
                  "test": generate(cfg.n_test, cfg.seed, synth, start=cfg.n_train)}
        for split, samples in splits.items():
            images, _, frame = to_arrays(samples)
            images_file, manifest_file = self._split_files(split)
            self.store.save_array(images_file, images)
            self.store.save_table(manifest_file, frame)
            if cfg.dump_png:
                dump_dataset(samples, self.store.path("data", "png", split))
        logger.info(f"Wrote {cfg.n_train} train and {cfg.n_test} test samples")

    # models ----------------------------------------------------------

    def save_model(self, name: str, kind: str, model: Module, net_config: NetConfig, losses: List[float]):
        self.store.save_checkpoint(name, model.state_dict(),
                                   {"kind": kind, "net": net_config.to_manifest(), "seed": self.config.seed})
        self.store.save_table(f"logs/{name}_loss.csv", pd.DataFrame({"step": np.arange(len(losses)), "loss": losses}))

    def load_model(self, name: str) -> Module:
        state, manifest = self.store.load_checkpoint(name)
        net_config = NetConfig.from_manifest(manifest["net"])
        kind = manifest["kind"]
        model = SegmentationNet(net_config) if kind == "segmenter" else build_model(kind, net_config)
        model.load_state_dict(state)
        return model

    def train_cam(self):
        cfg = self.config
        images, frame = self.load_split("train")
        labels = frame["label"].to_numpy()
        net_config = cfg.net_config(0)
        result = train_mffnet(images, labels, net_config, cfg.train_config(cfg.cls_steps, 0), use_aux=cfg.use_aux)
        self.save_model(CAM_MODEL, "mffnet", result.model, net_config, result.losses)
        logger.info(f"{CAM_MODEL} train accuracy {accuracy(result.model, images, labels):.3f}")

    def _cam_for(self, model: MFFNet, fused: np.ndarray, class_id: int, size: Tuple[int, int]):
        return compute_cam(fused, model.classifier.weight, int(class_id), out_size=size, mode=self.config.upsample)

    def make_pseudo(self):
        cfg = self.config
        images, frame = self.load_split("train")
        self.store.require([self.store.path("checkpoints", CAM_MODEL, "manifest.json")])
        model = self.load_model(CAM_MODEL)
        maps = fused_maps(model, images)
        size = images.shape[2:]

        for directory in ("pseudo", "cams"):
            shutil.rmtree(self.store.path(directory), ignore_errors=True)
        kept = skipped = 0
        for fused, label, index in zip(maps, frame["label"], frame["index"]):
            cam = self._cam_for(model, fused, label, size)
            try:
                pseudo, enhanced = make_pseudo_label(cam, cfg.pseudo_mode, cfg.t_gauss, cfg.t_fg, cfg.t_bg)
            except EmptyCamError:
                logger.warning(f"Empty CAM for training image {index}; skipped")
                skipped += 1
                continue
            self.store.save_png(f"pseudo/{index:05d}.png", pseudo.classes)
            self.store.save_array(f"cams/{index:05d}.arr", enhanced.values.astype(np.float32))
            if cfg.dump_png:
                self.store.save_png(f"cams/png/{index:05d}.png", np.round(enhanced.values * 255))
            kept += 1
        self.store.save_json("logs/pseudo_summary.json", {"kept": kept, "skipped": skipped, "mode": cfg.pseudo_mode})
        logger.info(f"Wrote {kept} pseudo labels ({cfg.pseudo_mode}); {skipped} images skipped for empty CAMs")

    def train_seg(self):
        cfg = self.config
        pseudo_dir = self.store.path("pseudo")
        self.store.require([pseudo_dir])
        files = self.store.list_files("pseudo", "*.png")
        if not files:
            raise MissingArtifactError([pseudo_dir / "*.png"])
        images, frame = self.load_split("train")
        row_of = {int(index): row for row, index in enumerate(frame["index"])}
        rows = [row_of[int(p.stem)] for p in files]
        labels = [PseudoLabel.from_plane(self.store.load_png(f"pseudo/{p.name}")) for p in files]
        net_config = cfg.net_config(1)
        result = train_segmenter(images[rows], labels, net_config, cfg.train_config(cfg.seg_steps, 1))
        self.save_model(SEG_MODEL, "segmenter", result.model, net_config, result.losses)
        masks = predict_masks(result.model, images[rows])
        logger.info(f"{SEG_MODEL} pixel accuracy vs pseudo labels {pixel_accuracy(masks, labels, cfg.tau):.3f}")

    def train_cls(self):
        cfg = self.config
        if cfg.classifier == "reuse":
            logger.info(f"classifier=reuse: classification comes from {CAM_MODEL}, nothing to train")
            return
        images, frame = self.load_split("train")
        labels = frame["label"].to_numpy()
        net_config = cfg.net_config(2)
        result = train_classifier(images, labels, net_config, cfg.train_config(cfg.cls_steps, 2))
        self.save_model(CLS_MODEL, "classifier", result.model, net_config, result.losses)
        logger.info(f"{CLS_MODEL} train accuracy {accuracy(result.model, images, labels):.3f}")

    # inference and evaluation ----------------------------------------

    def _required_models(self) -> List[str]:
        names = [CLS_MODEL if self.config.classifier == "separate" else CAM_MODEL]
        names.append(SEG_MODEL if self.config.use_seg else CAM_MODEL)
        return sorted(set(names))

    def infer(self):
        cfg = self.config
        images, frame = self.load_split("test")
        self.store.require([self.store.path("checkpoints", n, "manifest.json") for n in self._required_models()])
        classifier = self.load_model(CLS_MODEL if cfg.classifier == "separate" else CAM_MODEL)
        ranks = predict_topk(classifier, images, k=5)
        size = images.shape[2:]

        shutil.rmtree(self.store.path("masks"), ignore_errors=True)
        if cfg.use_seg:
            masks = predict_masks(self.load_model(SEG_MODEL), images)
            tau = cfg.tau
        else:
            cam_model = self.load_model(CAM_MODEL)
            maps = fused_maps(cam_model, images)
            masks = np.stack([self._cam_for(cam_model, fused, r[0], size).values for fused, r in zip(maps, ranks)])
            tau = cfg.cam_tau

        records = []
        for mask, rank, row in zip(masks, ranks, frame.to_dict(orient="records")):
            index = int(row["index"])
            plane = binarize(mask, tau)
            self.store.save_array(f"masks/{index:05d}.arr", mask.astype(np.float32))
            if cfg.dump_png:
                self.store.save_png(f"masks/png/{index:05d}.png", plane * 255)
            records.append(EvalRecord(
                pred_box=extract_bbox(plane),
                class_ranks=list(rank),
                gt_box=BBox(*(int(row[c]) for c in BOX_COLUMNS)),
                gt_class=int(row["label"]),
                index=index,
            ))
        self.store.save_table("records.csv", records_to_frame(records))
        empty = sum(r.pred_box is None for r in records)
        logger.info(f"Inferred {len(records)} test images ({empty} empty masks)")

    def eval(self) -> Dict:
        self.store.require([self.store.path("records.csv")])
        metrics = evaluate(records_from_frame(self.store.load_table("records.csv")))
        self.store.save_text("report.json", report_json(metrics))
        self.store.save_text("report.txt", report_text(metrics))
        return metrics


def run_stage(name: str, config: PipelineConfig) -> Optional[Dict]:
    """Run exactly one stage against config.out_dir."""
    return Pipeline(config).run_stage(name)


def run_pipeline(config: PipelineConfig) -> Dict:
    """Run every stage in order and return the metrics report."""
    return Pipeline(config).run()
