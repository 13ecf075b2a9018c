"""Run configuration: plain ``key = value`` text, typed, validated and hashable."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..toydet.model import DetectorConfig
from ..toydet.scenes import DEFAULT_SHIFT, DomainShiftConfig
from ..toydet.train import PLACEMENTS, AlignSettings

OUTPUT_ROOT_ENV = "DAALIGN_OUTPUT_ROOT"

# keys that only steer how long or where a run goes; a resume may change them
RUNTIME_KEYS = frozenset({"steps", "checkpoint_every", "eval_every", "out_dir"})


class ConfigError(ValueError):
    pass


def _doc(text: str, default):
    return field(default=default, metadata={"doc": text})


@dataclass(frozen=True)
class RunConfig:
    seed: int = _doc("root of every random stream in the run", 0)
    # target-domain scenario
    haze: float = _doc("additive colour-cast strength", DEFAULT_SHIFT.haze)
    brightness: float = _doc("additive grey offset", DEFAULT_SHIFT.brightness)
    texture_freq: float = _doc("cycles per width of target streak texture (0 disables)", DEFAULT_SHIFT.texture_freq)
    noise_sigma: float = _doc("per-pixel sensor noise along the cast axis", DEFAULT_SHIFT.noise_sigma)
    # model sizes
    dim: int = _doc("token and query width d", 32)
    num_queries: int = _doc("object queries M", 8)
    disc_hidden: int = _doc("hidden width of every discriminator head", 32)
    # alignment
    placement: str = _doc("none | backbone | decoder | backbone+decoder", "backbone+decoder")
    backbone_mode: str = _doc("oaa (global + object-masked) or ga (global only)", "oaa")
    decoder_mode: str = _doc("ota (sliced Wasserstein) or ada (adversarial)", "ota")
    tau: float = _doc("pseudo-label score threshold, kept when score > tau", 0.5)
    lam: float = _doc("weight of the object-masked adversarial term", 1.0)
    beta: float = _doc("weight of the sliced Wasserstein term", 1.0)
    num_projections: int = _doc("random projections K per step", 256)
    ada_weight: float = _doc("weight of the adversarial decoder baseline", 1.0)
    grl_factor: float = _doc("gradient reversal scale", 1.0)
    freeze_discriminator: bool = _doc("no discriminator updates and no reversed gradient", False)
    # optimisation
    lr_det: float = _doc("detector learning rate during adaptation", 2e-4)
    lr_disc: float = _doc("discriminator learning rate", 4e-3)
    pretrain_steps: int = _doc("source-only steps before adaptation starts", 0)
    lr_pretrain: float = _doc("detector learning rate while pretraining", 1e-3)
    steps: int = _doc("adaptation steps after pretraining", 2000)
    batch_size: int = _doc("images per domain per step", 16)
    # data
    source_size: int = _doc("labelled source training scenes", 1024)
    target_size: int = _doc("unlabelled target training scenes; one epoch between pseudo-label refreshes", 512)
    test_size: int = _doc("held-out target scenes for evaluation", 300)
    data_dir: str = _doc("optional snapshot root with src-train, tgt-train, tgt-test", "")
    # bookkeeping
    checkpoint_every: int = _doc("checkpoint cadence in steps (0: final only)", 0)
    eval_every: int = _doc("target mAP cadence in steps (0: final only)", 0)
    out_dir: str = _doc("run directory, relative paths resolve under $" + OUTPUT_ROOT_ENV, "runs/default")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        for name in ("lam", "beta", "ada_weight", "grl_factor", "haze", "noise_sigma", "texture_freq"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.num_projections < 1:
            raise ConfigError("num_projections must be at least 1")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {', '.join(PLACEMENTS)}")
        if self.backbone_mode not in ("oaa", "ga"):
            raise ConfigError("backbone_mode must be oaa or ga")
        if self.decoder_mode not in ("ota", "ada"):
            raise ConfigError("decoder_mode must be ota or ada")
        for name in ("lr_det", "lr_disc", "lr_pretrain"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("dim", "num_queries", "disc_hidden", "batch_size", "source_size", "target_size", "test_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("steps", "pretrain_steps", "checkpoint_every", "eval_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.batch_size > min(self.source_size, self.target_size):
            raise ConfigError("batch_size exceeds a training set")

    # derived views ---------------------------------------------------------
    def shift(self) -> DomainShiftConfig:
        return DomainShiftConfig(self.haze, self.brightness, self.texture_freq, self.noise_sigma, self.seed)

    def detector(self) -> DetectorConfig:
        return DetectorConfig(dim=self.dim, num_queries=self.num_queries)

    def align(self) -> AlignSettings:
        return AlignSettings(placement=self.placement, backbone_mode=self.backbone_mode,
                             decoder_mode=self.decoder_mode, lam=self.lam, beta=self.beta,
                             num_projections=self.num_projections, freeze_discriminator=self.freeze_discriminator,
                             grl_factor=self.grl_factor, ada_weight=self.ada_weight)

    def output_path(self) -> Path:
        return resolve_output(self.out_dir)

    # text form -----------------------------------------------------------
    def serialize(self, include_runtime: bool = True) -> str:
        lines = []
        for f in fields(self):
            if not include_runtime and f.name in RUNTIME_KEYS:
                continue
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.serialize(include_runtime=False).encode("utf-8")).digest()

    def with_overrides(self, pairs: dict[str, str]) -> "RunConfig":
        return replace(self, **_coerce_all(pairs))


def resolve_output(path: str | Path) -> Path:
    """Relative output paths land under ``$DAALIGN_OUTPUT_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES.get(key)
    if kind is None:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return raw


def _coerce_all(pairs: dict[str, str]) -> dict:
    return {k: _coerce(k, v) for k, v in pairs.items()}


def parse_pairs(lines) -> dict[str, str]:
    out: dict[str, str] = {}
    for num, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"line {num}: expected key = value, got {line.strip()!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if key in out:
            raise ConfigError(f"line {num}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    return (base or RunConfig()).with_overrides(parse_pairs(text.splitlines()))


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Config file (optional) then flag overrides; flags win."""
    cfg = parse_config(Path(path).read_text()) if path else RunConfig()
    return cfg.with_overrides(overrides or {})


def toy_benchmark_config(**overrides) -> RunConfig:
    """Settings for the synthetic directional study.

    The unnormalised sliced Wasserstein sum over 256 projections and 128
    query features sits three orders of magnitude above the adversarial
    terms, hence the small beta. Full-strength gradient reversal destabilises
    the detector when both alignments act on the patch embedding at once, so
    it is halved. A shared source-only pretraining stage stands in for the
    pretrained initialisation pseudo labels need.
    """
    base = RunConfig(beta=3e-4, grl_factor=0.5, pretrain_steps=3000, steps=600, out_dir="runs/ablation")
    return replace(base, **overrides)
