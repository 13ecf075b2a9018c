"""One optimisation step of detection plus backbone and decoder alignment."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import ndnum as nd
from ..ndnum import Tensor
from ..oaa import (Discriminator, DiscriminatorHead, discriminate, domain_bce, global_align_loss,
                   masked_align_loss, oaa_loss)
from ..ota import sample_projections, sliced_w2
from ..pseudo import Detection, PseudoBoxSet, batch_masks, filter_detections, ground_truth_boxes
from .evaluate import predict
from .loss import detection_loss, match_predictions
from .model import ToyDetector, xyxy_to_cxcywh

log = logging.getLogger(__name__)

PLACEMENTS = ("none", "backbone", "decoder", "backbone+decoder")


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{i}"] = m.copy()
            out[f"{prefix}.v{i}"] = v.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(state[f"{prefix}.t"][0])
        self.m = [np.array(state[f"{prefix}.m{i}"]) for i in range(len(self.params))]
        self.v = [np.array(state[f"{prefix}.v{i}"]) for i in range(len(self.params))]


@dataclass(frozen=True)
class AlignSettings:
    placement: str = "backbone+decoder"
    backbone_mode: str = "oaa"     # "oaa" (global + masked) or "ga" (global only)
    decoder_mode: str = "ota"      # "ota" (sliced Wasserstein) or "ada" (adversarial)
    lam: float = 1.0
    beta: float = 1.0
    num_projections: int = 256
    freeze_discriminator: bool = False
    grl_factor: float = 1.0
    ada_weight: float = 1.0        # weight of the adversarial decoder baseline; beta scales only OTA

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}")
        if self.backbone_mode not in ("oaa", "ga"):
            raise ValueError("backbone_mode must be 'oaa' or 'ga'")
        if self.decoder_mode not in ("ota", "ada"):
            raise ValueError("decoder_mode must be 'ota' or 'ada'")
        if self.lam < 0 or self.beta < 0 or self.ada_weight < 0:
            raise ValueError("alignment weights must be non-negative")
        if self.num_projections < 1:
            raise ValueError("need at least one projection")

    @property
    def backbone(self) -> bool:
        return "backbone" in self.placement

    @property
    def decoder(self) -> bool:
        return "decoder" in self.placement


@dataclass
class Batch:
    images: np.ndarray               # (B, S, S, 3)
    boxes: list[np.ndarray]          # per image, normalised cx, cy, w, h (source only)
    labels: list[np.ndarray]
    box_sets: list[PseudoBoxSet]     # pixel xyxy boxes that drive the weight masks


def source_batch(scenes) -> Batch:
    size = scenes[0].image.shape[0]
    return Batch(
        images=np.stack([s.image for s in scenes]),
        boxes=[xyxy_to_cxcywh(s.boxes, size) for s in scenes],
        labels=[s.labels for s in scenes],
        box_sets=[ground_truth_boxes(s.boxes) for s in scenes],
    )


def target_batch(scenes, pseudo: list[PseudoBoxSet]) -> Batch:
    return Batch(images=np.stack([s.image for s in scenes]), boxes=[], labels=[], box_sets=list(pseudo))


@dataclass
class LossBundle:
    det: float
    det_cls: float
    det_l1: float
    det_iou: float
    global_align: float | None = None
    masked_align: float | None = None
    oaa: float | None = None
    ota: float | None = None
    ada: float | None = None
    total: float = 0.0

    def as_row(self) -> dict[str, float | None]:
        return dict(self.__dict__)


@dataclass
class TrainState:
    det: ToyDetector
    disc: Discriminator
    dec_head: DiscriminatorHead
    opt_det: Adam
    opt_disc: Adam
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, det: ToyDetector, seed: int, lr_det: float, lr_disc: float, disc_hidden: int = 32):
        disc = Discriminator(det.cfg.channels, hidden=disc_hidden, seed=seed + 1)
        dec_head = DiscriminatorHead(det.cfg.dim, disc_hidden, np.random.default_rng(seed + 2))
        return cls(det, disc, dec_head, Adam(det.parameters(), lr_det),
                   Adam(disc.parameters() + dec_head.parameters(), lr_disc))

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.det.state_dict()
        out.update(self.disc.state_dict())
        for name in ("w1", "b1", "w2", "b2"):
            out[f"dechead.{name}"] = getattr(self.dec_head, name).data.copy()
        out.update(self.opt_det.state_dict("opt_det"))
        out.update(self.opt_disc.state_dict("opt_disc"))
        out["state.step"] = np.array([float(self.step)])
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.det.load_state_dict(state)
        self.disc.load_state_dict(state)
        for name in ("w1", "b1", "w2", "b2"):
            getattr(self.dec_head, name).data = np.array(state[f"dechead.{name}"])
        self.opt_det.load_state_dict(state, "opt_det")
        self.opt_disc.load_state_dict(state, "opt_disc")
        self.step = int(state["state.step"][0])


def _probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def compute_losses(state: TrainState, src: Batch, tgt: Batch | None, settings: AlignSettings,
                   rng: np.random.Generator | None):
    """Build the full objective; returns ``(total, parts)`` where parts are graph tensors."""
    det = state.det
    out_s = det.forward(src.images)
    probs = _probs(out_s.logits.data)
    assignments = [match_predictions(out_s.boxes.data[i], probs[i], src.boxes[i], src.labels[i])
                   for i in range(len(src.labels))]
    dl = detection_loss(assignments, out_s.boxes, out_s.logits, src.boxes, src.labels)
    parts: dict[str, Tensor] = {"det": dl.total, "det_cls": dl.cls, "det_l1": dl.l1, "det_iou": dl.iou}
    total = dl.total
    if settings.placement == "none" or tgt is None:
        return total, parts

    out_t = det.forward(tgt.images)
    if len(tgt.images) != len(src.images):
        raise ValueError("source and target batches must have equal sizes")
    grl = 0.0 if settings.freeze_discriminator else settings.grl_factor
    if settings.backbone:
        state.disc.grl_factor = grl
        ss = discriminate(out_s.pyramid, state.disc, "source")
        st = discriminate(out_t.pyramid, state.disc, "target")
        ld = global_align_loss(ss, st)
        parts["global_align"] = ld
        if settings.backbone_mode == "oaa":
            geo = det.pyramid_geometry()
            lm = masked_align_loss(ss, st, batch_masks(src.box_sets, geo), batch_masks(tgt.box_sets, geo))
            parts["masked_align"] = lm
            loaa = oaa_loss(ld, lm, settings.lam)
        else:
            loaa = ld
        parts["oaa"] = loaa
        total = total + loaa
    if settings.decoder:
        if settings.decoder_mode == "ota":
            if rng is None:
                raise ValueError("optimal-transport alignment needs a projection generator")
            proj = sample_projections(settings.num_projections, det.cfg.dim, rng)
            lota = sliced_w2(out_s.decoder, out_t.decoder, proj)
            parts["ota"] = lota
            total = total + lota * settings.beta
        else:
            lada = domain_bce(out_s.decoder, out_t.decoder, state.dec_head, grl)
            parts["ada"] = lada
            total = total + lada * settings.ada_weight
    return total, parts


def train_step(state: TrainState, src: Batch, tgt: Batch | None, settings: AlignSettings,
               rng: np.random.Generator | None) -> LossBundle:
    """Single backward pass over the combined objective, then one update of each optimiser."""
    try:
        total, parts = compute_losses(state, src, tgt, settings, rng)
    except nd.NonFiniteError as exc:
        raise TrainingError(f"step {state.step}: non-finite value in forward pass ({exc})") from exc
    values = {k: v.item() for k, v in parts.items()}
    if not np.isfinite(total.item()):
        raise TrainingError(f"step {state.step}: non-finite loss, components {values}")
    state.opt_det.zero_grad()
    state.opt_disc.zero_grad()
    nd.backward(total)
    for p in state.det.parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"step {state.step}: non-finite gradient in {p.name}, components {values}")
    state.opt_det.step()
    if not settings.freeze_discriminator and settings.placement != "none":
        state.opt_disc.step()
    state.step += 1
    return LossBundle(total=total.item(), **values)


def pseudo_labels(det: ToyDetector, scenes, tau: float = 0.5) -> list[PseudoBoxSet]:
    """Class-agnostic boxes the current model is confident about, one set per scene."""
    images = np.stack([s.image for s in scenes])
    size = det.cfg.image_size
    out = []
    for pred in predict(det, images):
        dets = [Detection(tuple(np.clip(b, 0, size)), float(sc), int(lb))
                for b, sc, lb in zip(pred.boxes, pred.scores, pred.labels)]
        out.append(filter_detections(dets, tau))
    return out
