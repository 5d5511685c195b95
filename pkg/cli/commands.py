"""
Command implementations: data generation, training, evaluation, checks and studies
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ai_models.checkpoint import load_checkpoint
from ai_models.model_zoo import TemporalVariant, TrgModel, build_variant
from cli.plotting import plot_csv
from config.run_config import RunConfig
from config.settings import (
    CHECKPOINT_FILE,
    GRADCHECK_CHANNELS,
    GRADCHECK_FRAMES,
    GRADCHECK_HEADS,
    GRADCHECK_SIZE,
)
from core.exceptions import ConfigurationError, DimensionError, InspectionError
from core.gradcheck import GroupReport, check_gradients
from core.tensor import Tensor, mul, sum_
from core.trg_block import SimilarityKind, TrgLayerParams, trg_forward
from synthetic.dataset_io import read_dataset, write_dataset
from synthetic.grammar import SyntheticDataset, generate
from synthetic.sampling import sample_frames
from training.metrics import MetricsLog, MetricsReport, param_count
from training.trainer import Trainer, train
from utils.helpers import file_checksum, substream

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = [TemporalVariant.AVGPOOL, TemporalVariant.CONCAT, TemporalVariant.ELEMAVG, TemporalVariant.FULL]


def _write_table(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


# --- data -----------------------------------------------------------------------

def cmd_gen_data(config: RunConfig, out_path: Optional[Path] = None) -> Path:
    config.validate()
    path = Path(out_path) if out_path else config.dataset_path()
    dataset = generate(config.grammar(), config.train_count + config.val_count, config.seed, config.workers)
    write_dataset(dataset, path)
    counts = dataset.class_counts()
    print(f"✅ Wrote {len(dataset)} samples to {path}")
    print(f"📊 {len(counts)} classes: " + ", ".join(f"{c}={n}" for c, n in enumerate(counts)))
    print(f"🔑 sha256 {file_checksum(path)}")
    return path


def load_splits(config: RunConfig, path: Optional[Path] = None) -> Tuple[SyntheticDataset, SyntheticDataset]:
    """First train_count samples train, the next val_count held out"""
    path = Path(path) if path else config.dataset_path()
    if not path.exists():
        raise ConfigurationError(f"dataset {path} not found; run gen-data first")
    dataset = read_dataset(path)
    expected = (config.raw_frames, config.in_channels, config.height, config.width)
    if len(dataset) and tuple(dataset.frame_shape) != expected:
        raise DimensionError(f"dataset frames {dataset.frame_shape} do not match config {expected}")
    if dataset.num_classes != len(config.class_strings):
        raise DimensionError(f"dataset has {dataset.num_classes} classes, config {len(config.class_strings)}")
    if len(dataset) < config.train_count + config.val_count:
        raise ConfigurationError(
            f"dataset holds {len(dataset)} samples, config needs {config.train_count + config.val_count}"
        )
    dataset.resolve_classes(config.grammar())
    train_set, rest = dataset.split(config.train_count)
    return train_set, rest.subset(range(config.val_count))


def _load_model(config: RunConfig, checkpoint: Optional[Path]) -> TrgModel:
    path = Path(checkpoint) if checkpoint else Path(config.out_dir) / CHECKPOINT_FILE
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} not found; run train first")
    return load_checkpoint(path)


def _build(config: RunConfig) -> TrgModel:
    return build_variant(config.model_config(), substream(config.seed, "init"))


# --- training and evaluation ----------------------------------------------------

def cmd_train(config: RunConfig) -> MetricsLog:
    config.validate()
    train_set, val_set = load_splits(config)
    model = _build(config)
    for line in param_count(model).describe():
        logger.info(line)
    log, _ = train(model, train_set, val_set, config, Path(config.out_dir))
    best = log.best("val")
    print(f"✅ Training finished: {len(log.reports) // 2} epochs, outputs in {config.out_dir}")
    if best is not None:
        print(f"🏆 Best validation top-1: {best.top1:.4f} (epoch {best.epoch})")
    return log


def cmd_eval(config: RunConfig, checkpoint: Optional[Path] = None, dataset: Optional[Path] = None) -> MetricsReport:
    config.validate()
    model = _load_model(config, checkpoint)
    config = config.override(frames=model.config.frames, label_mode=model.config.label_mode)
    _, val_set = load_splits(config, dataset)
    report = Trainer(model, config).evaluate(val_set, epoch=0, split="eval")
    log = MetricsLog([report])
    path = log.to_csv(Path(config.out_dir) / "eval_metrics.csv")
    print(f"✅ {report.describe()}")
    print(f"📄 Metrics written to {path}")
    return report


# --- gradient check -------------------------------------------------------------

def gradcheck_problem(
    kind: SimilarityKind,
    heads: int = GRADCHECK_HEADS,
    seed: int = 0,
) -> Tuple[Callable[[], Tensor], Dict[str, List[Tensor]]]:
    """Tiny float64 TRG layer without batch norm; loss = sum(R * H) for a fixed random R"""
    rng = substream(seed, "projection", list(SimilarityKind).index(kind), heads)
    shape = (GRADCHECK_FRAMES, GRADCHECK_CHANNELS, GRADCHECK_SIZE, GRADCHECK_SIZE)
    params = TrgLayerParams.create(
        rng, GRADCHECK_CHANNELS, GRADCHECK_SIZE, GRADCHECK_SIZE,
        heads=heads, kind=kind, batchnorm=False, dtype=np.float64,
    )
    x = Tensor(rng.uniform(0.1, 1.0, shape), requires_grad=True, name="input")
    projection = Tensor(rng.standard_normal(shape))

    def loss() -> Tensor:
        return sum_(mul(trg_forward(x, params), projection))

    groups = {
        "similarity_transform": list(params.sim_kernels),
        "spatial_transform": list(params.spatial_kernels),
        "similarity_params": [s.weight for s in params.similarities if s.weight is not None],
        "aggregator": [params.w_prime],
        "input": [x],
    }
    return loss, {name: tensors for name, tensors in groups.items() if tensors}


def cmd_gradcheck(
    config: RunConfig,
    heads: int = GRADCHECK_HEADS,
    kinds: Sequence[SimilarityKind] = tuple(SimilarityKind),
) -> Tuple[bool, List[Tuple[SimilarityKind, GroupReport]]]:
    results = []
    for kind in kinds:
        fn, groups = gradcheck_problem(SimilarityKind(kind), heads, config.seed)
        for report in check_gradients(fn, groups):
            results.append((kind, report))
            print(f"[{SimilarityKind(kind).value:<8}] {report.describe()}")
    passed = all(r.passed for _, r in results)
    print("✅ Gradient check PASSED" if passed else "❌ Gradient check FAILED")
    return passed, results


# --- studies --------------------------------------------------------------------

def _final_scores(config: RunConfig, train_set, val_set, out_dir: Path) -> MetricsReport:
    model = _build(config)
    log, _ = train(model, train_set, val_set, config, out_dir)
    return log.last("val")


def cmd_ablate(config: RunConfig) -> pd.DataFrame:
    """Train every temporal-head variant with identical seeds and schedule"""
    config.validate()
    train_set, val_set = load_splits(config)
    rows = []
    for variant in ABLATION_VARIANTS:
        run = config.override(variant=variant.value)
        logger.info(f"Ablation: training variant {variant.value}")
        final = _final_scores(run, train_set, val_set, Path(config.out_dir) / "ablate" / variant.value)
        rows.append({"variant": variant.value, "top1": final.top1, "top5": final.top5})
        print(f"📊 {variant.value:<8} top1={final.top1:.4f} top5={final.top5:.4f}")
    table = pd.DataFrame(rows, columns=["variant", "top1", "top5"])
    path = _write_table(table, Path(config.out_dir) / "ablation.csv")
    print(f"✅ Ablation table written to {path}")
    return table


def cmd_sweep_heads(config: RunConfig, heads: Optional[Sequence[int]] = None) -> pd.DataFrame:
    config.validate()
    heads = list(heads or config.heads_sweep)
    train_set, val_set = load_splits(config)
    rows = []
    for n in heads:
        run = config.override(heads=n, variant=TemporalVariant.FULL.value)
        logger.info(f"Head sweep: training with {n} heads")
        final = _final_scores(run, train_set, val_set, Path(config.out_dir) / "sweep" / f"heads{n}")
        rows.append({"heads": n, "top1": final.top1, "top5": final.top5})
        print(f"📊 heads={n:<3} top1={final.top1:.4f} top5={final.top5:.4f}")
    table = pd.DataFrame(rows, columns=["heads", "top1", "top5"])
    path = _write_table(table, Path(config.out_dir) / "sweep_heads.csv")
    print(f"✅ Head sweep written to {path}")
    return table


def cmd_compare_sampling(config: RunConfig) -> pd.DataFrame:
    """AvgPool and full TRG under sparse and dense frame sampling"""
    config.validate()
    train_set, val_set = load_splits(config)
    stride = min(config.stride, config.raw_frames // config.frames)
    if stride < 1:
        raise ConfigurationError(f"{config.frames} frames cannot be densely sampled from {config.raw_frames}")
    if stride != config.stride:
        logger.warning(f"Dense stride reduced from {config.stride} to {stride} to fit {config.raw_frames} frames")
    rows = []
    for sampling in ("sparse", "dense"):
        for variant in (TemporalVariant.AVGPOOL, TemporalVariant.FULL):
            run = config.override(sampling=sampling, stride=stride, variant=variant.value)
            final = _final_scores(run, train_set, val_set, Path(config.out_dir) / "sampling" / f"{sampling}_{variant.value}")
            rows.append({"sampling": sampling, "variant": variant.value, "top1": final.top1, "top5": final.top5})
            print(f"📊 {sampling:<6} {variant.value:<8} top1={final.top1:.4f}")
    table = pd.DataFrame(rows, columns=["sampling", "variant", "top1", "top5"])
    path = _write_table(table, Path(config.out_dir) / "sampling.csv")
    print(f"✅ Sampling comparison written to {path}")
    return table


# --- inspection and export ------------------------------------------------------

def _inspection_inputs(config: RunConfig, checkpoint: Optional[Path], dataset: Optional[Path]):
    model = _load_model(config, checkpoint)
    path = Path(dataset) if dataset else config.dataset_path()
    if not path.exists():
        raise ConfigurationError(f"dataset {path} not found; run gen-data first")
    return model, read_dataset(path)


def cmd_inspect_adjacency(
    config: RunConfig,
    index: int,
    checkpoint: Optional[Path] = None,
    dataset: Optional[Path] = None,
    out_dir: Optional[Path] = None,
    frames: Optional[int] = None,
) -> List[Path]:
    """Per-head adjacency matrices of every TRG layer for one sample"""
    model, data = _inspection_inputs(config, checkpoint, dataset)
    if not 0 <= index < len(data):
        raise InspectionError(f"sample index {index} out of range for {len(data)} samples")
    if not model.layers:
        raise InspectionError(f"{model.variant.value} model has no temporal graph to inspect")
    clip = sample_frames(
        data[index].frames, frames or model.config.frames, config.sampling, config.stride,
        dtype=model.config.dtype,
    )
    _, traces = model.features_traced(clip)
    out_dir = Path(out_dir) if out_dir else Path(config.out_dir) / "adjacency"
    paths = []
    for layer, trace in enumerate(traces):
        prefix = f"sample{index}_layer{layer}"
        paths.extend(trace.adjacency.export_csv(out_dir, prefix=prefix))
        weights = trace.export_head_weights(out_dir, prefix=prefix)
        if weights is not None:
            paths.append(weights)
    print(f"✅ Wrote {len(paths)} adjacency and head-weight tables to {out_dir}")
    return paths


def cmd_export_embeddings(
    config: RunConfig,
    checkpoint: Optional[Path] = None,
    dataset: Optional[Path] = None,
    out_path: Optional[Path] = None,
) -> Path:
    """Classifier-input feature vector and label of every sample, one CSV row each"""
    model, data = _inspection_inputs(config, checkpoint, dataset)
    rows = []
    for i, sample in enumerate(data.samples):
        clip = sample_frames(sample.frames, model.config.frames, config.sampling, config.stride,
                             dtype=model.config.dtype)
        vector = model.embedding(clip)
        label = sample.label if np.ndim(sample.label) == 0 else "".join(map(str, sample.label))
        rows.append({"index": i, "label": label, **{f"f{j}": v for j, v in enumerate(vector)}})
    path = Path(out_path) if out_path else Path(config.out_dir) / "embeddings.csv"
    _write_table(pd.DataFrame(rows), path)
    print(f"✅ Exported {len(rows)} embeddings to {path}")
    return path


def cmd_plot(csv_path: Path, out_path: Path, y: str = "top1") -> Path:
    path = plot_csv(csv_path, out_path, y)
    print(f"✅ Chart written to {path}")
    return path
