"""Training, evaluation and ablation orchestration.

Every random draw in a run comes from ``default_rng([seed, stream, step])``,
so the batch, the target batch and the projections of step ``t`` depend only
on the seed and ``t``. Resuming therefore needs no generator state, and runs
that differ only in their alignment settings see the same source batches.
"""
from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..pseudo import PseudoBoxSet
from ..toydet.evaluate import THRESHOLDS, MapReport, evaluate_map
from ..toydet.model import ToyDetector
from ..toydet.scenes import CLASS_NAMES, Scene, make_dataset
from ..toydet.snapshot import read_snapshot
from ..toydet.train import AlignSettings, TrainState, pseudo_labels, source_batch, target_batch, train_step
from .checkpoint import load_for_resume, read_checkpoint, save_checkpoint
from .config import RunConfig
from .metrics import CsvLog, loss_columns

log = logging.getLogger(__name__)

SOURCE_STREAM, TARGET_STREAM, PROJECTION_STREAM = 1, 2, 3
SPLITS = ("src-train", "tgt-train", "tgt-test")


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step])


@dataclass
class Datasets:
    source: list[Scene]
    target: list[Scene]
    test: list[Scene]


def load_datasets(cfg: RunConfig) -> Datasets:
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        parts = [read_snapshot(root / name)[0] for name in SPLITS]
        return Datasets(*parts)
    shift = cfg.shift()
    return Datasets(make_dataset(cfg.seed, "src-train", cfg.source_size),
                    make_dataset(cfg.seed, "tgt-train", cfg.target_size, shift),
                    make_dataset(cfg.seed, "tgt-test", cfg.test_size, shift))


def _pseudo_to_tensors(sets: list[PseudoBoxSet] | None) -> dict[str, np.ndarray]:
    if sets is None:
        return {}
    out = {"pseudo.count": np.array([float(len(sets))])}
    for i, s in enumerate(sets):
        rows = [list(b) + [sc] for b, sc in zip(s.boxes, s.scores)]
        out[f"pseudo.{i}"] = np.array(rows, dtype=np.float64).reshape(-1, 5)
    return out


def _pseudo_from_tensors(tensors: dict[str, np.ndarray]) -> list[PseudoBoxSet] | None:
    if "pseudo.count" not in tensors:
        return None
    sets = []
    for i in range(int(tensors["pseudo.count"][0])):
        rows = tensors[f"pseudo.{i}"]
        sets.append(PseudoBoxSet(boxes=[tuple(float(v) for v in r[:4]) for r in rows],
                                 scores=[float(r[4]) for r in rows]))
    return sets


@dataclass
class TrainResult:
    config: RunConfig
    out_dir: Path
    checkpoint: Path
    report: MapReport
    detector: ToyDetector = field(repr=False)


class Trainer:
    """Owns one run: detector, optimiser state, pseudo labels and logs."""

    def __init__(self, cfg: RunConfig, data: Datasets):
        self.cfg = cfg
        self.data = data
        self.det = ToyDetector(cfg.detector(), seed=cfg.seed)
        self.settings = cfg.align()
        self.pretrain_settings = AlignSettings(placement="none")
        self.state = self._fresh_state(pretraining=cfg.pretrain_steps > 0)
        self.pseudo: list[PseudoBoxSet] | None = None
        self.step = 0
        self.epoch = max(1, cfg.target_size // cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.pretrain_steps + self.cfg.steps

    def _fresh_state(self, pretraining: bool) -> TrainState:
        lr = self.cfg.lr_pretrain if pretraining else self.cfg.lr_det
        return TrainState.create(self.det, self.cfg.seed, lr, self.cfg.lr_disc, self.cfg.disc_hidden)

    # state transfer --------------------------------------------------------
    def tensors(self) -> dict[str, np.ndarray]:
        out = self.state.state_dict()
        out["run.step"] = np.array([float(self.step)])
        out.update(_pseudo_to_tensors(self.pseudo))
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.step = int(tensors["run.step"][0])
        in_pretrain = self.cfg.pretrain_steps > 0 and self.step <= self.cfg.pretrain_steps
        self.state = self._fresh_state(pretraining=in_pretrain)
        self.state.load_state_dict(tensors)
        self.pseudo = _pseudo_from_tensors(tensors)

    def load_detector(self, det_state: dict[str, np.ndarray], step: int) -> None:
        """Start from given detector weights as if ``step`` steps had run (shared pretraining)."""
        self.det.load_state_dict(det_state)
        self.step = step

    # one step ----------------------------------------------------------------
    def train_one(self):
        cfg, t = self.cfg, self.step
        if t == cfg.pretrain_steps and cfg.pretrain_steps > 0:
            self.state = self._fresh_state(pretraining=False)
        adapting = t >= cfg.pretrain_steps
        settings = self.settings if adapting else self.pretrain_settings
        rs = step_rng(cfg.seed, SOURCE_STREAM, t)
        src = source_batch([self.data.source[i] for i in rs.choice(len(self.data.source), cfg.batch_size,
                                                                   replace=False)])
        tgt = None
        if settings.placement != "none":
            k = t - cfg.pretrain_steps
            if k % self.epoch == 0 or self.pseudo is None:
                self.pseudo = pseudo_labels(self.det, self.data.target, cfg.tau)
            rt = step_rng(cfg.seed, TARGET_STREAM, t)
            idx = rt.choice(len(self.data.target), cfg.batch_size, replace=False)
            tgt = target_batch([self.data.target[j] for j in idx], [self.pseudo[j] for j in idx])
        bundle = train_step(self.state, src, tgt, settings, step_rng(cfg.seed, PROJECTION_STREAM, t))
        self.step += 1
        return bundle, ("adapt" if adapting else "pretrain")

    def evaluate(self, scenes: Sequence[Scene] | None = None) -> MapReport:
        return evaluate_map(self.det, scenes if scenes is not None else self.data.test, class_names=CLASS_NAMES)


def _eval_row(step: int, rep: MapReport) -> dict:
    row = {"step": step}
    for t in THRESHOLDS:
        row[f"map{int(round(100 * t))}"] = rep.map_at(t)
    for t in THRESHOLDS[2:]:
        row[f"ratio{int(round(100 * t))}"] = rep.ratio(t)
    return row


EVAL_COLUMNS = ["step"] + [f"map{int(round(100 * t))}" for t in THRESHOLDS] + \
    [f"ratio{int(round(100 * t))}" for t in THRESHOLDS[2:]]


def run_train(cfg: RunConfig, resume: str | Path | None = None, data: Datasets | None = None,
              init: tuple[dict[str, np.ndarray], int] | None = None,
              stop_at: int | None = None) -> TrainResult:
    """Train under ``cfg``; writes config, logs, checkpoints and a final target report.

    ``init`` seeds the detector with shared pretrained weights (used by the
    ablation); ``stop_at`` ends the run early, which is how interrupted runs
    are simulated.
    """
    cfg.validate()
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    tensors = load_for_resume(resume, cfg) if resume else None
    data = data or load_datasets(cfg)
    trainer = Trainer(cfg, data)
    if tensors is not None:
        trainer.load_tensors(tensors)
    elif init is not None:
        trainer.load_detector(*init)
    (out / "config.txt").write_text(cfg.serialize())

    cols = loss_columns(cfg.placement, cfg.backbone_mode, cfg.decoder_mode)
    start = trainer.step if (tensors is not None or init is not None) else None
    end = trainer.total_steps if stop_at is None else min(stop_at, trainer.total_steps)
    # eval rows carry the count of completed steps, so the checkpoint's own row survives a resume
    with CsvLog(out / "metrics.csv", cols, start) as mlog, \
            CsvLog(out / "eval.csv", EVAL_COLUMNS, None if start is None else start + 1) as elog, \
            CsvLog(out / "timings.csv", ["step", "seconds"], start) as tlog:
        while trainer.step < end:
            t0 = time.perf_counter()
            bundle, phase = trainer.train_one()
            row = bundle.as_row()
            row.update(step=trainer.step - 1, phase=phase)
            mlog.append(row)
            tlog.append({"step": trainer.step - 1, "seconds": round(time.perf_counter() - t0, 6)})
            if cfg.eval_every and trainer.step % cfg.eval_every == 0:
                elog.append(_eval_row(trainer.step, trainer.evaluate()))
            if cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step{trainer.step:06d}.daal", cfg, trainer.tensors())
            if trainer.step % 250 == 0:
                log.info("step %d/%d %s total=%.4f", trainer.step, trainer.total_steps, phase, bundle.total)
        report = trainer.evaluate()
        interrupted = trainer.step < trainer.total_steps
        if interrupted:
            # leave the logs as an uninterrupted run would have them at this step
            ckpt = save_checkpoint(out / f"step{trainer.step:06d}.daal", cfg, trainer.tensors())
            return TrainResult(cfg, out, ckpt, report, trainer.det)
        if not (cfg.eval_every and trainer.step % cfg.eval_every == 0):
            elog.append(_eval_row(trainer.step, report))
    ckpt = save_checkpoint(out / "final.daal", cfg, trainer.tensors())
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv())
    return TrainResult(cfg, out, ckpt, report, trainer.det)


def pretrain(cfg: RunConfig, data: Datasets) -> dict[str, np.ndarray]:
    """Detector weights after the source-only stage of ``cfg``."""
    trainer = Trainer(cfg, data)
    while trainer.step < cfg.pretrain_steps:
        trainer.train_one()
    return trainer.det.state_dict()


def run_eval(checkpoint: str | Path, scenes: Sequence[Scene] | None = None,
             out_dir: str | Path | None = None, predictor: Callable | None = None) -> MapReport:
    """Target mAP of a checkpoint; writes ``eval_report.txt`` and ``eval_report.csv`` when ``out_dir`` is set.

    Without ``scenes`` the held-out target split of the checkpoint's own
    configuration is regenerated. ``predictor`` replaces the detector (used
    to inject oracle predictions).
    """
    _, cfg, tensors = read_checkpoint(checkpoint)
    det = ToyDetector(cfg.detector(), seed=cfg.seed)
    det.load_state_dict(tensors)
    if scenes is None:
        scenes = make_dataset(cfg.seed, "tgt-test", cfg.test_size, cfg.shift())
    report = evaluate_map(predictor or det, scenes, class_names=CLASS_NAMES, num_classes=len(CLASS_NAMES))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.txt").write_text(report.to_text())
        (out / "eval_report.csv").write_text(report.to_csv())
    return report


# ablation ------------------------------------------------------------------

VARIANTS: dict[str, dict] = {
    "source-only": dict(placement="none"),
    "backbone": dict(placement="backbone", backbone_mode="oaa"),
    "decoder": dict(placement="decoder", decoder_mode="ota"),
    "backbone+decoder": dict(placement="backbone+decoder", backbone_mode="oaa", decoder_mode="ota"),
    "ga+ota": dict(placement="backbone+decoder", backbone_mode="ga", decoder_mode="ota"),
    "oaa+ada": dict(placement="backbone+decoder", backbone_mode="oaa", decoder_mode="ada"),
}

# (lower, higher, strict): mean target mAP@0.5 of ``higher`` must exceed that of ``lower``
ORDERINGS = (
    ("source-only", "backbone", True),
    ("source-only", "decoder", True),
    ("backbone", "backbone+decoder", True),
    ("decoder", "backbone+decoder", True),
    ("ga+ota", "backbone+decoder", False),
    ("oaa+ada", "backbone+decoder", False),
)


@dataclass
class AblationResult:
    seeds: list[int]
    variants: list[str]
    reports: dict[tuple[str, int], MapReport]

    def values(self, variant: str, t: float = 0.5) -> list[float]:
        return [self.reports[(variant, s)].map_at(t) for s in self.seeds]

    def mean(self, variant: str, t: float = 0.5) -> float:
        return statistics.fmean(self.values(variant, t))

    def sd(self, variant: str, t: float = 0.5) -> float:
        v = self.values(variant, t)
        return statistics.stdev(v) if len(v) > 1 else 0.0

    def mean_ratio(self, variant: str, t: float) -> float:
        return statistics.fmean(self.reports[(variant, s)].ratio(t) for s in self.seeds)

    def orderings(self) -> dict[str, bool]:
        out = {}
        for lo, hi, strict in ORDERINGS:
            if lo in self.variants and hi in self.variants:
                a, b = self.mean(lo), self.mean(hi)
                out[f"{lo} {'<' if strict else '<='} {hi}"] = b > a if strict else b >= a
        return out

    def to_csv(self) -> str:
        head = "variant,seed," + ",".join(f"map{int(round(100 * t))}" for t in THRESHOLDS)
        lines = [head]
        for v in self.variants:
            for s in self.seeds:
                r = self.reports[(v, s)]
                lines.append(f"{v},{s}," + ",".join(f"{r.map_at(t):.6f}" for t in THRESHOLDS))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max(len(v) for v in self.variants) + 2
        lines = ["variant".ljust(width) + "mAP50 mean +- sd".rjust(20) + "mAP80/50".rjust(10) + "mAP90/50".rjust(10)]
        for v in self.variants:
            lines.append(v.ljust(width) + f"{100 * self.mean(v):6.1f} +- {100 * self.sd(v):4.1f}".rjust(20)
                         + f"{self.mean_ratio(v, 0.8):10.3f}{self.mean_ratio(v, 0.9):10.3f}")
        lines.append("")
        for name, ok in self.orderings().items():
            lines.append(f"{'holds ' if ok else 'FAILS '} {name}")
        return "\n".join(lines) + "\n"


def run_ablation(base: RunConfig, seeds: Sequence[int], variants: Sequence[str] | None = None,
                 progress: Callable[[str], None] | None = None) -> AblationResult:
    """Train every variant per seed from one shared source-only pretraining."""
    if len(seeds) < 3:
        raise ValueError("an ablation needs at least three seeds")
    names = list(variants or VARIANTS)
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants: {', '.join(unknown)}")
    root = base.output_path()
    reports: dict[tuple[str, int], MapReport] = {}
    for seed in seeds:
        seed_cfg = replace(base, seed=seed)
        data = load_datasets(seed_cfg)
        shared = (pretrain(seed_cfg, data), seed_cfg.pretrain_steps)
        for name in names:
            cfg = replace(seed_cfg, out_dir=str(root / f"seed{seed}" / name), **VARIANTS[name])
            res = run_train(cfg, data=data, init=shared)
            reports[(name, seed)] = res.report
            if progress:
                progress(f"seed {seed} {name}: mAP50 {res.report.map_at(0.5):.3f}")
    result = AblationResult(list(seeds), names, reports)
    root.mkdir(parents=True, exist_ok=True)
    (root / "ablation.csv").write_text(result.to_csv())
    (root / "ablation.txt").write_text(result.to_text())
    return result
