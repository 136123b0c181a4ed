"""Training, evaluation, ablation grid and weight sweep."""

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

from .config import RunConfig, mode_name, parse_mode, save_config, with_modes
from .datapipe import Corpus, Sample, generate_corpus, images_only, load_corpus
from .errors import ConfigError, InvalidInputError
from .labelgen import LabelBundle, LabelGenerator
from .losskernels import LossWeights, dense_bce_loss, total_loss
from .metrics import METRIC_NAMES, MetricsReport, corpus_report
from .tinynet import Checkpoint, NetParams, OptimizerState, TinySegNet, adam_step
from .utils import PathLike, rng_stream

logger = logging.getLogger(__name__)

COMPONENTS = ("pixel", "alignment", "contrastive", "correlation")
SWEEP_PARAMS = ("lambda", "beta")


@dataclass
class TrainItem:
    image_id: str
    image: np.ndarray
    bundle: LabelBundle


@dataclass
class TrainHistory:
    """Per-step loss components and per-epoch validation results."""

    steps: List[Dict[str, Any]] = field(default_factory=list)
    epochs: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_miou: Optional[float] = None
    wall_time: float = 0.0
    config: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainHistory":
        return cls(**data)

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path: PathLike) -> "TrainHistory":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        """Hash of everything but wall-clock timing."""
        payload = {"steps": self.steps,
                   "epochs": [{k: v for k, v in e.items() if k != "seconds"} for e in self.epochs]}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _sum_grads(per_sample: List[NetParams], scale: float) -> NetParams:
    total = {name: np.zeros_like(g) for name, g in per_sample[0].items()}
    for grads in per_sample:
        for name, g in grads.items():
            total[name] += g
    return {name: g * scale for name, g in total.items()}


class Trainer:
    """Trains the network on one label mode and loss mode."""

    def __init__(self, cfg: RunConfig, use_rich: bool = False):
        self.cfg = cfg
        self.use_rich = use_rich and RICH_AVAILABLE
        self.net = TinySegNet(seed=cfg.seed)
        self.optimizer = OptimizerState.for_params(self.net.params, lr=cfg.lr)
        self.history = TrainHistory(config=cfg.to_dict())
        self.step = 0

    def prepare(self, samples: Sequence[Sample]) -> List[TrainItem]:
        """Build the label bundles of the training split."""
        if not samples:
            raise InvalidInputError("training split is empty")
        if self.cfg.label_mode in ("M", "H"):
            missing = [s.image_id for s in samples if s.prompt_mask is None]
            if missing:
                raise ConfigError(f"label mode {self.cfg.label_mode} needs prompt masks; "
                                  f"{len(missing)} samples have none (first: {missing[0]})")

        results = LabelGenerator(self.cfg.label_mode, self.cfg.workers).run(samples)
        for error in results['errors']:
            logger.warning("Dropping training sample: %s", error)
        by_id = {s.image_id: s for s in samples}
        items = [TrainItem(r.image_id, by_id[r.image_id].image, r.bundle) for r in results['records']]
        if not items:
            raise InvalidInputError("no usable training samples")
        return items

    def sample_step(self, index: int, item: TrainItem) -> Tuple[NetParams, Dict[str, float], List[str]]:
        """Loss components and parameter gradients of one image."""
        rng = rng_stream(self.cfg.seed, self.step, index)
        F, m, cache = self.net.forward_train(item.image)
        components = {name: 0.0 for name in COMPONENTS}
        if self.cfg.loss_mode == "P":
            res = dense_bce_loss(m, item.bundle.foreground)
            components["pixel"] = res.value
        else:
            res = total_loss(m, F, item.bundle, self.cfg.weights, rng,
                             terms=self.cfg.terms, topo_form=self.cfg.topo_form)
            components.update(res.terms)
        components["total"] = res.value
        grads = self.net.backward(cache, res.grad_prediction, res.grad_features)
        return grads, components, sorted(res.skipped)

    def train_batch(self, batch: Sequence[Tuple[int, TrainItem]], executor: ThreadPoolExecutor) -> Dict[str, Any]:
        """Concurrent forward/backward, reduction in batch order, one Adam step."""
        future_to_pos = {executor.submit(self.sample_step, idx, item): pos for pos, (idx, item) in enumerate(batch)}
        outputs: Dict[int, Any] = {}
        for future in as_completed(future_to_pos):
            outputs[future_to_pos[future]] = future.result()
        ordered = [outputs[pos] for pos in range(len(batch))]

        grads = _sum_grads([o[0] for o in ordered], 1.0 / len(batch))
        self.net.params, self.optimizer = adam_step(self.net.params, grads, self.optimizer)

        record: Dict[str, Any] = {"step": self.step}
        for name in COMPONENTS + ("total",):
            record[name] = float(np.mean([o[1][name] for o in ordered]))
        skipped: Dict[str, int] = {}
        for o in ordered:
            for flag in o[2]:
                skipped[flag] = skipped.get(flag, 0) + 1
        record["skipped"] = skipped
        if not np.isfinite(record["total"]):
            raise InvalidInputError(f"non-finite loss at step {self.step}")
        self.history.steps.append(record)
        self.step += 1
        return record

    def validate(self, samples: Sequence[Sample], epoch: int, run_dir: Path) -> Optional[MetricsReport]:
        if not samples:
            return None
        images, gts, ids = images_only(samples)
        report = evaluate(self.checkpoint(epoch), images, gts, ids=ids, workers=self.cfg.workers)
        miou = report.mean("iou")
        self.history.epochs.append({"epoch": epoch, "step": self.step, "summary": report.summary(),
                                    "undefined_precision": report.undefined_precision})
        if self.history.best_miou is None or miou > self.history.best_miou:
            self.history.best_miou = miou
            self.history.best_epoch = epoch
            self.checkpoint(epoch).save(run_dir / "best.npz")
        logger.info("epoch %d: test mIoU %.4f (best %.4f @ %d)", epoch, miou,
                    self.history.best_miou, self.history.best_epoch)
        return report

    def checkpoint(self, epoch: int) -> Checkpoint:
        meta = {"epoch": epoch, "step": self.step, "config": self.cfg.to_dict(),
                "rng": {"seed": self.cfg.seed, "next_epoch": epoch + 1, "next_step": self.step}}
        return Checkpoint(params=self.net.params, optimizer=self.optimizer, meta=meta)

    def fit(self, corpus: Corpus) -> Tuple[Path, TrainHistory]:
        cfg = self.cfg
        run_dir = cfg.run_dir
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, run_dir / "config.json")
        items = self.prepare(corpus.train)
        start = time.perf_counter()

        logger.info("Training %s: %d images, %d epochs, batch %d, terms %s", cfg.name, len(items),
                    cfg.epochs, cfg.batch_size, ",".join(cfg.terms) or "pixel")
        if cfg.epochs == 0 or not corpus.test:
            self.validate(corpus.test, 0, run_dir)

        progress = None
        if self.use_rich:
            progress = Progress(TextColumn("[bold blue]{task.description}"), BarColumn(),
                                TextColumn("{task.completed}/{task.total} steps"), TimeElapsedColumn())
        batches_per_epoch = -(-len(items) // cfg.batch_size)
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            if progress is not None:
                progress.start()
                task = progress.add_task(cfg.name, total=cfg.epochs * batches_per_epoch)
            try:
                for epoch in range(1, cfg.epochs + 1):
                    order = rng_stream(cfg.seed, epoch).permutation(len(items))
                    for b in range(batches_per_epoch):
                        chosen = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                        record = self.train_batch([(int(i), items[i]) for i in chosen], executor)
                        logger.debug("step %d total %.5f", record["step"], record["total"])
                        if progress is not None:
                            progress.advance(task)
                    self.validate(corpus.test, epoch, run_dir)
            finally:
                if progress is not None:
                    progress.stop()

        self.checkpoint(cfg.epochs).save(run_dir / "last.npz")
        best = run_dir / "best.npz"
        if not best.exists():
            self.checkpoint(cfg.epochs).save(best)
        self.history.wall_time = time.perf_counter() - start
        self.history.save(run_dir / "history.json")
        return best, self.history


def resolve_corpus(cfg: RunConfig) -> Corpus:
    """The configured corpus directory, or a freshly generated synthetic corpus."""
    if cfg.corpus:
        return load_corpus(cfg.corpus)
    return generate_corpus(cfg.synth, workers=cfg.workers)


def train(cfg: RunConfig, corpus: Optional[Corpus] = None, use_rich: bool = False) -> Tuple[Path, TrainHistory]:
    """Train one configuration; returns the best checkpoint path and the history."""
    corpus = corpus if corpus is not None else resolve_corpus(cfg)
    return Trainer(cfg, use_rich=use_rich).fit(corpus)


def predict(params: NetParams, images: Sequence[np.ndarray], workers: int = 4) -> List[np.ndarray]:
    net = TinySegNet(params=params)
    preds: Dict[int, np.ndarray] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_index = {executor.submit(net.predict, img): i for i, img in enumerate(images)}
        for future in as_completed(future_to_index):
            preds[future_to_index[future]] = future.result()
    return [preds[i] for i in range(len(images))]


def evaluate(checkpoint: Union[Checkpoint, PathLike], images: Sequence[np.ndarray], gts: Sequence[np.ndarray],
             ids: Optional[Sequence[str]] = None, threshold: float = 0.5, workers: int = 4) -> MetricsReport:
    """Prompt-free inference on images, scored against ground truth."""
    if not images:
        raise InvalidInputError("evaluation set is empty")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    return corpus_report(predict(ckpt.params, images, workers), gts, threshold=threshold, ids=ids)


# --- ablation and sweep ----------------------------------------------------

def _score(cfg: RunConfig, corpus: Corpus, use_rich: bool) -> MetricsReport:
    best, _ = train(cfg, corpus, use_rich=use_rich)
    images, gts, ids = images_only(corpus.test)
    report = evaluate(best, images, gts, ids=ids, workers=cfg.workers)
    report.save(cfg.run_dir, stem="test_metrics")
    return report


def _summary_row(reports: List[MetricsReport]) -> Dict[str, Any]:
    pooled = MetricsReport(rows=[row for r in reports for row in r.rows])
    summary = pooled.summary()
    row: Dict[str, Any] = {}
    for name in METRIC_NAMES:
        row[f"{name}_mean"] = summary[name]["mean"]
        row[f"{name}_std"] = summary[name]["std"]
    row["seed_iou"] = ";".join(f"{r.mean('iou'):.6f}" for r in reports)
    return row


def _write_table(rows: List[Dict[str, Any]], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def ablation_grid(base: RunConfig, modes: Sequence[str], seeds: Sequence[int] = (0,),
                  corpus: Optional[Corpus] = None, out_path: Optional[PathLike] = None,
                  use_rich: bool = False) -> List[Dict[str, Any]]:
    """One row per mode (e.g. 'A3', 'E3'): test metrics pooled over seeds as mean and std."""
    if not modes:
        raise ConfigError("ablation needs at least one mode")
    parsed = [parse_mode(m) for m in modes]
    corpus = corpus if corpus is not None else resolve_corpus(base)
    if not corpus.test:
        raise InvalidInputError("ablation needs a non-empty test split")

    rows = []
    for loss_mode, label_mode in parsed:
        reports = [_score(with_modes(base, loss_mode, label_mode, seed), corpus, use_rich) for seed in seeds]
        rows.append({"mode": mode_name(loss_mode, label_mode), "loss_mode": loss_mode,
                     "label_mode": label_mode, "seeds": len(seeds), **_summary_row(reports)})
    _write_table(rows, out_path or Path(base.output_dir) / "ablation.csv")
    return rows


def sweep(base: RunConfig, param: str, values: Sequence[float], seeds: Sequence[int] = (0,),
          corpus: Optional[Corpus] = None, out_path: Optional[PathLike] = None,
          use_rich: bool = False) -> List[Dict[str, Any]]:
    """Test metrics as one loss weight (lambda or beta) varies."""
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    corpus = corpus if corpus is not None else resolve_corpus(base)

    rows = []
    for value in values:
        weights = base.weights.to_dict()
        weights[param] = float(value)
        reports = []
        for seed in seeds:
            cfg = replace(base, weights=LossWeights.from_dict(weights), seed=seed,
                          run_name=f"sweep_{param}_{value:g}_s{seed}")
            reports.append(_score(cfg, corpus, use_rich))
        rows.append({"param": param, "value": float(value), "seeds": len(seeds), **_summary_row(reports)})
    _write_table(rows, out_path or Path(base.output_dir) / f"sweep_{param}.csv")
    return rows


def load_ablation_table(path: PathLike) -> List[Dict[str, Any]]:
    """Read an ablation or sweep CSV back, with numeric columns as floats."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row: Dict[str, Any] = {}
            for key, value in raw.items():
                if key.endswith(("_mean", "_std")) or key == "value":
                    row[key] = float(value)
                elif key == "seeds":
                    row[key] = int(value)
                else:
                    row[key] = value
            rows.append(row)
    return rows
