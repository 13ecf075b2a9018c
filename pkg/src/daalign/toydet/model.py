"""A one-block query detector small enough for float64 gradient checks.

Image patches are embedded per pyramid level (linear + ReLU), projected to a
shared token width, and probed by learned object queries through a single
cross-attention block. Each query owns a learned positional preference, so
attention logits are a content term plus a smooth locality term; the box
centre is the attention-weighted centroid of token positions refined by a
learned offset, which keeps localisation learnable within a few hundred steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import ndnum as nd
from ..ndnum import Tensor
from ..oaa import FeaturePyramid


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    strides: tuple[int, ...] = (4, 8)
    channels: tuple[int, ...] = (16, 32)
    dim: int = 32
    num_queries: int = 8
    num_classes: int = 3
    ffn_hidden: int = 64
    locality: float = 40.0


@dataclass
class DetectorOutput:
    pyramid: FeaturePyramid
    decoder: Tensor      # (B*M, d) pre-head query features
    boxes: Tensor        # (B, M, 4) normalised cx, cy, w, h in (0, 1)
    logits: Tensor       # (B, M, K+1), last column is background

    @property
    def batch(self) -> int:
        return self.boxes.shape[0]


def patchify(images: np.ndarray, stride: int) -> np.ndarray:
    """``(B, S, S, 3)`` -> ``(B*h*w, stride*stride*3)`` non-overlapping patches, row-major cells."""
    b, s1, s2, c = images.shape
    if s1 % stride or s2 % stride:
        raise ValueError(f"image {s1}x{s2} is not divisible by stride {stride}")
    h, w = s1 // stride, s2 // stride
    x = images.reshape(b, h, stride, w, stride, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b * h * w, stride * stride * c)


def _query_grid(m: int) -> np.ndarray:
    cols = int(np.ceil(np.sqrt(2 * m)))
    rows = int(np.ceil(m / cols))
    pts = [((i + 0.5) / cols, (j + 0.5) / rows) for j in range(rows) for i in range(cols)]
    return np.array(pts[:m])


class ToyDetector:
    def __init__(self, cfg: DetectorConfig = DetectorConfig(), seed: int = 0, zero_heads: bool = False):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, k = cfg.dim, cfg.num_classes
        p: dict[str, Tensor] = {}

        def w(name, fan_in, shape, gain=2.0):
            p[name] = nd.parameter(rng.standard_normal(shape) * np.sqrt(gain / fan_in), name=name)

        def zeros(name, shape):
            p[name] = nd.parameter(np.zeros(shape), name=name)

        for lv, (s, c) in enumerate(zip(cfg.strides, cfg.channels)):
            fan = s * s * 3
            w(f"embed{lv}.w", fan, (fan, c))
            zeros(f"embed{lv}.b", (1, c))
            w(f"proj{lv}.w", c, (c, d), gain=1.0)
            zeros(f"proj{lv}.b", (1, d))
        p["query.content"] = nd.parameter(rng.standard_normal((cfg.num_queries, d)) * 0.5, name="query.content")
        ref = _query_grid(cfg.num_queries)
        qpos = np.zeros((cfg.num_queries, 3 + len(cfg.strides)))
        qpos[:, 0:2] = ref
        qpos[:, 2] = 1.0
        p["query.pos"] = nd.parameter(qpos * cfg.locality, name="query.pos")
        for name in ("attn.wq", "attn.wk", "attn.wv"):
            w(name, d, (d, d), gain=1.0)
        w("ffn.w1", d, (d, cfg.ffn_hidden))
        zeros("ffn.b1", (1, cfg.ffn_hidden))
        w("ffn.w2", cfg.ffn_hidden, (cfg.ffn_hidden, d), gain=0.5)
        zeros("ffn.b2", (1, d))
        w("box.w1", d + 4, (d + 4, cfg.ffn_hidden))
        zeros("box.b1", (1, cfg.ffn_hidden))
        for name, fan, out in (("head.offset", cfg.ffn_hidden, 2), ("head.size", cfg.ffn_hidden, 2),
                               ("head.cls", d, k + 1)):
            if zero_heads:
                zeros(f"{name}.w", (fan, out))
            else:
                w(f"{name}.w", fan, (fan, out), gain=0.1)
            zeros(f"{name}.b", (1, out))
        p["head.size.b"].data[:] = np.log(0.25 / 0.75)  # start at a typical object extent
        self.params = p
        self._geometry_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # parameter plumbing -------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        groups: dict[str, list[Tensor]] = {}
        for name, t in self.params.items():
            groups.setdefault(name.split(".")[0].rstrip("0123456789"), []).append(t)
        return groups

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"det.{k}": v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            arr = state[f"det.{k}"]
            if arr.shape != v.shape:
                raise ValueError(f"det.{k}: shape {arr.shape} != {v.shape}")
            v.data = np.array(arr, dtype=np.float64)

    def pyramid_geometry(self) -> list[tuple[int, int, int]]:
        s = self.cfg.image_size
        return [(s // st, s // st, st) for st in self.cfg.strides]

    def _token_geometry(self) -> tuple[np.ndarray, np.ndarray]:
        """Positional features ``(T, 3 + L)`` and token centres ``(T, 2)`` in [0, 1]."""
        s = self.cfg.image_size
        feats, centres = [], []
        nl = len(self.cfg.strides)
        for lv, st in enumerate(self.cfg.strides):
            n = s // st
            rr, cc = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
            x = ((cc + 0.5) * st / s).reshape(-1)
            y = ((rr + 0.5) * st / s).reshape(-1)
            onehot = np.zeros((x.size, nl))
            onehot[:, lv] = 1.0
            feats.append(np.column_stack([x, y, -(x * x + y * y) / 2.0, onehot]))
            centres.append(np.column_stack([x, y]))
        return np.vstack(feats), np.vstack(centres)

    # forward ------------------------------------------------------------
    def forward(self, images: np.ndarray) -> DetectorOutput:
        cfg, p = self.cfg, self.params
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        b, s1, s2, _ = images.shape
        if s1 != cfg.image_size or s2 != cfg.image_size:
            raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} images, got {s1}x{s2}")
        d, m = cfg.dim, cfg.num_queries

        levels, tokens = [], []
        for lv, st in enumerate(cfg.strides):
            patches = patchify(images, st)
            n = patches.shape[0]
            ones = Tensor(np.ones((n, 1)))
            feat = nd.relu(Tensor(patches) @ p[f"embed{lv}.w"] + ones @ p[f"embed{lv}.b"])
            h = s1 // st
            levels.append(nd.reshape(feat, (b, h, h, cfg.channels[lv])))
            tok = feat @ p[f"proj{lv}.w"] + ones @ p[f"proj{lv}.b"]
            tokens.append(nd.reshape(tok, (b, h * h, d)))
        tok = nd.concat(tokens, axis=1)                      # (B, T, d)
        t = tok.shape[1]
        flat = nd.reshape(tok, (b * t, d))

        posfeat, centres = self._token_geometry()
        qc = p["query.content"] @ p["attn.wq"]               # (M, d)
        content = (flat @ p["attn.wk"]) @ qc.T * (1.0 / np.sqrt(d))   # (B*T, M)
        pos = Tensor(np.tile(posfeat, (b, 1))) @ p["query.pos"].T     # (B*T, M)
        logits = nd.transpose(nd.reshape(content + pos, (b, t, m)))   # (B, M, T)
        attn = nd.softmax(logits)
        values = nd.reshape(flat @ p["attn.wv"], (b, t, d))
        out = attn @ values                                  # (B, M, d)
        mom_in = np.concatenate([centres, centres ** 2], axis=1)
        moments = nd.reshape(attn @ Tensor(np.broadcast_to(mom_in, (b, t, 4)).copy()), (b * m, 4))

        q_rep = nd.concat([nd.reshape(p["query.content"], (1, m, d))] * b, axis=0)
        f0 = nd.reshape(out + q_rep, (b * m, d))
        ones = Tensor(np.ones((b * m, 1)))
        hid = nd.relu(f0 @ p["ffn.w1"] + ones @ p["ffn.b1"])
        dec = f0 + hid @ p["ffn.w2"] + ones @ p["ffn.b2"]   # (B*M, d)

        c = nd.gather(moments, [0, 1], axis=1)
        spread = nd.gather(moments, [2, 3], axis=1) - nd.square(c)
        c_logit = nd.log(c) - nd.log(1.0 - c)
        geo = nd.concat([dec, nd.concat([c, spread * 10.0], axis=1)], axis=1)
        bh = nd.relu(geo @ p["box.w1"] + ones @ p["box.b1"])
        cxcy = nd.sigmoid(c_logit + bh @ p["head.offset.w"] + ones @ p["head.offset.b"])
        wh = nd.sigmoid(bh @ p["head.size.w"] + ones @ p["head.size.b"])
        boxes = nd.reshape(nd.concat([cxcy, wh], axis=1), (b, m, 4))
        cls = nd.reshape(dec @ p["head.cls.w"] + ones @ p["head.cls.b"], (b, m, cfg.num_classes + 1))
        return DetectorOutput(FeaturePyramid(levels, list(cfg.strides)), dec, boxes, cls)

    __call__ = forward


def detector_forward(det: ToyDetector, images: np.ndarray) -> DetectorOutput:
    return det.forward(images)


def cxcywh_to_xyxy(boxes: np.ndarray, image_size: float = 1.0) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1) * image_size


def xyxy_to_cxcywh(boxes: np.ndarray, image_size: float = 1.0) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64) / image_size
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)
