"""
Mini-batch training loop with per-epoch held-out evaluation
"""

import logging
import time
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ai_models.checkpoint import save_checkpoint
from ai_models.losses import binary_sigmoid_loss, cross_entropy_loss
from ai_models.model_zoo import TrgModel
from config.run_config import RunConfig
from config.settings import CHECKPOINT_FILE, METRICS_FILE
from core.exceptions import DivergenceError, MetricError, NumericError
from core.tensor import Tape, Tensor, add, backward, mul, stable_sigmoid
from monitoring.resource_monitor import ResourceMonitor
from synthetic.grammar import SyntheticDataset
from synthetic.sampling import SamplingMode, sample_frames
from training.metrics import MetricsLog, MetricsReport, mean_average_precision, rank_classes, topk_precision
from training.optimizer import lr_at, sgd_step
from utils.helpers import substream

logger = logging.getLogger(__name__)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


class Trainer:
    def __init__(self, model: TrgModel, config: RunConfig, monitor: Optional[ResourceMonitor] = None):
        self.model = model
        self.config = config
        self.schedule = config.schedule().validate()
        self.state = config.optimizer_state().validate()
        self.mode = SamplingMode(config.sampling)
        self.multi_label = config.label_mode == "multi"
        self.grammar = config.grammar()
        self.dtype = np.dtype(model.config.dtype)
        self.monitor = monitor
        self.log = MetricsLog()
        self._warned_topk = False

    # --- helpers ---------------------------------------------------------------

    def _clip(self, frames: np.ndarray, training: bool, rng=None, clip: int = 0, num_clips: int = 1) -> Tensor:
        return sample_frames(
            frames, self.config.frames, self.mode, self.config.stride,
            training=training, rng=rng, clip=clip, num_clips=num_clips, dtype=self.dtype,
        )

    def _loss(self, logits: Tensor, label) -> Tensor:
        if self.multi_label:
            return binary_sigmoid_loss(logits, label)
        return cross_entropy_loss(logits, int(label))

    def _scores(self, logits: np.ndarray) -> np.ndarray:
        return stable_sigmoid(logits) if self.multi_label else softmax(logits)

    def _top5_k(self, num_classes: int) -> int:
        if num_classes < 5 and not self._warned_topk:
            logger.warning(f"Only {num_classes} classes: top-5 is reported as top-{num_classes}")
            self._warned_topk = True
        return min(5, num_classes)

    def _report(self, epoch: int, split: str, losses: List[float], scores: np.ndarray,
                dataset: SyntheticDataset, started: float) -> MetricsReport:
        num_classes = scores.shape[1]
        ranked = rank_classes(scores)
        if self.multi_label:
            labels = np.stack([np.asarray(s.label) for s in dataset.samples])
            truths = [self.grammar.class_from_label(l) for l in labels]
            try:
                m_ap = mean_average_precision(scores, labels)
            except MetricError:
                m_ap = None
        else:
            truths = [int(s.label) for s in dataset.samples]
            m_ap = None
        return MetricsReport(
            epoch=epoch,
            split=split,
            loss=float(np.mean(losses)),
            top1=topk_precision(ranked, truths, 1),
            top5=topk_precision(ranked, truths, self._top5_k(num_classes)),
            map=m_ap,
            wall_time=time.time() - started,
        )

    # --- training --------------------------------------------------------------

    def train_epoch(self, dataset: SyntheticDataset, epoch: int) -> MetricsReport:
        started = time.time()
        self.state.lr = lr_at(epoch, self.schedule)
        params = self.model.named_parameters()
        order = substream(self.config.seed, "sampling", epoch).permutation(len(dataset))
        scores = np.zeros((len(dataset), self.model.config.num_classes))
        losses = []

        batch_size = self.config.batch_size
        for step, start in enumerate(range(0, len(order), batch_size)):
            batch = order[start:start + batch_size]
            self.model.zero_grad()
            try:
                with Tape():
                    total = None
                    for index in batch:
                        sample = dataset[index]
                        rng = substream(self.config.seed, "sampling", epoch, int(index) + 1)
                        logits = self.model.logits(self._clip(sample.frames, True, rng), training=True)
                        scores[index] = self._scores(logits.data.astype(np.float64))
                        loss = self._loss(logits, sample.label)
                        total = loss if total is None else add(total, loss)
                    batch_loss = mul(total, 1.0 / len(batch))
                backward(batch_loss)
                sgd_step(params, self.state)
            except NumericError as e:
                raise DivergenceError(epoch, step, float("nan"), str(e)) from e
            losses.append(batch_loss.item())
            logger.debug(f"epoch {epoch} step {step}: loss={losses[-1]:.6f}")

        return self._report(epoch, "train", losses, scores, dataset, started)

    def evaluate(self, dataset: SyntheticDataset, epoch: int = 0, split: str = "val",
                 num_clips: Optional[int] = None) -> MetricsReport:
        """Scores averaged over evenly offset deterministic clips per sample"""
        started = time.time()
        num_clips = num_clips or self.config.num_test_clips
        scores = np.zeros((len(dataset), self.model.config.num_classes))
        losses = []
        for i, sample in enumerate(dataset.samples):
            clip_losses = []
            for j in range(num_clips):
                logits = self.model.logits(self._clip(sample.frames, False, clip=j, num_clips=num_clips))
                scores[i] += self._scores(logits.data.astype(np.float64)) / num_clips
                clip_losses.append(self._loss(logits, sample.label).item())
            losses.append(float(np.mean(clip_losses)))
        return self._report(epoch, split, losses, scores, dataset, started)

    def fit(
        self,
        train_set: SyntheticDataset,
        val_set: SyntheticDataset,
        out_dir: Optional[Path] = None,
    ) -> MetricsLog:
        logger.info(
            f"Training {self.model} on {len(train_set)} samples, "
            f"validating on {len(val_set)} for {self.schedule.epochs} epochs"
        )
        metrics_path = checkpoint_path = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            metrics_path, checkpoint_path = out_dir / METRICS_FILE, out_dir / CHECKPOINT_FILE

        for epoch in range(self.schedule.epochs):
            train_report = self.train_epoch(train_set, epoch)
            val_report = self.evaluate(val_set, epoch)
            for report in (train_report, val_report):
                self.log.append(report)
                logger.info(report.describe())
            if metrics_path is not None:
                self.log.to_csv(metrics_path)
            if self.monitor is not None:
                self.monitor.log_snapshot(f"epoch {epoch}")

        if checkpoint_path is not None:
            save_checkpoint(self.model, checkpoint_path)
        if self.monitor is not None:
            logger.info(f"Peak RSS during training: {self.monitor.peak_memory_mb():.1f}MB")
        return self.log


def train(model: TrgModel, train_set: SyntheticDataset, val_set: SyntheticDataset, config: RunConfig,
          out_dir: Optional[Path] = None) -> Tuple[MetricsLog, TrgModel]:
    trainer = Trainer(model, config, ResourceMonitor())
    return trainer.fit(train_set, val_set, out_dir), model
