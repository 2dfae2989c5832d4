"""Training loop and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import SgdMomentumState, Tape, backward, sgd_step
from .autodiff.checkpoint import atomic_write
from .confmap import SigmaSchedule, make_schedule, multi_stage_loss, stage_targets, to_map_space
from .dataset import Sample
from .localization import Detection, PeakParams, find_peaks
from .metrics import CountingReport, build_report, match_points
from .network import Model, image_tensor, save_model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 4
    sigma_max: float = 3.0
    sigma_min: float = 1.0
    tau: float = 0.35
    delta: float = 1.0
    match_radius: float = 3.0  # map-space pixels
    seed: int = 0
    checkpoint_every: int = 1
    eval_batch_size: int = 16

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.match_radius < 0:
            raise ValueError("match_radius must be >= 0")
        make_schedule(2, self.sigma_max, self.sigma_min)
        PeakParams(self.tau, self.delta)

    @property
    def peak_params(self) -> PeakParams:
        return PeakParams(self.tau, self.delta)

    def schedule(self, stages: int) -> SigmaSchedule:
        return make_schedule(stages, self.sigma_max, self.sigma_min)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    probe_loss: float  # loss on the first training batch with end-of-epoch parameters
    val_mae: float
    val_rmse: float
    val_r2: float
    val_precision: float
    val_recall: float
    val_f_measure: float
    wall_time: float = field(compare=False)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: Optional[int] = None

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch records must be appended in order")
        self.records.append(rec)

    def to_csv(self) -> str:
        """Per-epoch metrics; wall time is excluded so identical runs give identical files."""
        names = [f.name for f in fields(EpochRecord) if f.name != "wall_time"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.records:
            w.writerow([getattr(r, n) if n == "epoch" else repr(float(getattr(r, n))) for n in names])
        return buf.getvalue()

    def timing_tsv(self) -> str:
        return "epoch\twall_time_s\n" + "".join(f"{r.epoch}\t{r.wall_time:.3f}\n" for r in self.records)


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def _stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def _targets(model: Model, samples: Sequence[Sample], schedule: SigmaSchedule) -> list[np.ndarray]:
    cfg = model.config
    h, w = samples[0].image.shape[:2]
    pts = [to_map_space(s.points, cfg.stride) for s in samples]
    return stage_targets(pts, schedule, h // cfg.stride, w // cfg.stride)


def batch_loss(model: Model, samples: Sequence[Sample], schedule: SigmaSchedule) -> float:
    """Multi-stage loss of one batch, without recording gradients."""
    maps = model(image_tensor(_stack_images(samples)))
    return multi_stage_loss(maps, _targets(model, samples, schedule)).item()


def predict(model: Model, images: np.ndarray, params: PeakParams = PeakParams(),
            batch_size: int = 16) -> list[list[Detection]]:
    """Detections (map and image space) for a stack of (n, h, w, 3) uint8 images."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    out = []
    for sl in _batches(len(images), batch_size):
        final = model(image_tensor(images[sl]))[-1].data
        out.extend(find_peaks(final[i, 0], params, model.config.stride) for i in range(final.shape[0]))
    return out


def evaluate(model: Model, samples: Sequence[Sample], config: TrainConfig = TrainConfig(),
             bounds: Optional[tuple[int, int]] = None, return_details: bool = False):
    """Run detection on every sample and score it against the annotations.

    Matching happens in image space with radius ``match_radius * stride``.
    """
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    dets = predict(model, _stack_images(samples), config.peak_params, config.eval_batch_size)
    radius = config.match_radius * model.config.stride
    results = [
        match_points(s.points.points, [d.image_position for d in ds], radius, s.image_id)
        for s, ds in zip(samples, dets)
    ]
    report = build_report(results, bounds)
    return (report, results, dets) if return_details else report


def _better(report: CountingReport, best: Optional[CountingReport]) -> bool:
    if best is None:
        return True
    if report.mae != best.mae:
        return report.mae < best.mae
    return report.f_measure > best.f_measure


def train(model: Model, samples: Sequence[Sample], config: TrainConfig = TrainConfig(),
          run_dir=None, schedule: Optional[SigmaSchedule] = None) -> tuple[Model, TrainLog]:
    """Fit ``model`` on the ``train`` split, selecting the epoch with the best validation MAE.

    On return the model holds the best-validation parameters. With ``run_dir``
    the configs, ``best.pkc`` (+ ``best.cfg``), ``last.pkc`` every
    ``checkpoint_every`` epochs, ``train_log.csv`` and ``timing.tsv`` are written there.
    """
    train_set = [s for s in samples if s.split == "train"]
    val_set = [s for s in samples if s.split == "val"]
    if not train_set or not val_set:
        raise ValueError(f"need non-empty train and val splits, got {len(train_set)} / {len(val_set)}")
    schedule = schedule or config.schedule(model.config.stages)
    if len(schedule) != model.config.stages:
        raise ValueError(f"schedule has {len(schedule)} sigmas but the model has {model.config.stages} stages")
    sizes = {s.image.shape[:2] for s in train_set + val_set}
    if sizes != {(model.config.input_size, model.config.input_size)}:
        raise ValueError(f"sample sizes {sorted(sizes)} do not match input_size {model.config.input_size}")

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        atomic_write(run_dir / "train.cfg", config.to_text())
        atomic_write(run_dir / "model.cfg", model.config.to_text())

    images = _stack_images(train_set)
    targets = _targets(model, train_set, schedule)
    probe = slice(0, min(config.batch_size, len(train_set)))
    state = SgdMomentumState(config.learning_rate, config.momentum)
    trainlog = TrainLog()
    best_report, best_arrays = None, None

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        total, seen = 0.0, 0
        for sl in _batches(len(order), config.batch_size):
            idx = order[sl]
            with Tape():
                maps = model(image_tensor(images[idx]))
                loss = multi_stage_loss(maps, [t[idx] for t in targets])
            value = loss.item()
            if not math.isfinite(value):
                if best_arrays is not None:
                    model.load_arrays(best_arrays)
                raise TrainingDiverged(f"loss became {value} in epoch {epoch}; best checkpoint kept")
            backward(loss)
            sgd_step(model.params, state)
            total += value * len(idx)
            seen += len(idx)

        probe_maps = model(image_tensor(images[probe]))
        probe_loss = multi_stage_loss(probe_maps, [t[probe] for t in targets]).item()
        report = evaluate(model, val_set, config)
        rec = EpochRecord(epoch, total / seen, probe_loss, report.mae, report.rmse, report.r2,
                          report.precision, report.recall, report.f_measure, time.perf_counter() - start)
        trainlog.append(rec)
        log.info("epoch %d loss %.5f val MAE %.3f F %.3f", epoch, rec.train_loss, report.mae, report.f_measure)

        if _better(report, best_report):
            best_report = report
            best_arrays = {k: v.copy() for k, v in model.state_arrays().items()}
            trainlog.best_epoch = epoch
            if run_dir is not None:
                save_model(model, run_dir / "best.pkc")
        if run_dir is not None:
            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                save_model(model, run_dir / "last.pkc")
            atomic_write(run_dir / "train_log.csv", trainlog.to_csv())
            atomic_write(run_dir / "timing.tsv", trainlog.timing_tsv())

    model.load_arrays(best_arrays)
    return model, trainlog
