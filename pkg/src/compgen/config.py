"""Run configuration: one JSON file covering scene, model, training and evaluation.

Schema (every key optional; missing keys take the defaults below)::

    {
      "seed": 0,
      "scene": {"K": 2, "M": 2, "N": 64, "w": 0.08, "delta": 0.125, ...},
      "model": {"M_hat": 3, "enc_hidden": [128, 128], "decoder": "additive", ...},
      "train": {"epochs": 150, "warmup": 50, "lam": 1.0, ...},
      "data":  {"train": 20000, "id_test": 2000, "ood_test": 2000},
      "eval":  {"contrast_codes": 100, "heatmap_resolution": 16, ...},
      "ablate": {"seeds": 5, "workers": 1, "decoders": [...], "lams": [0.0, 1.0]}
    }

The master ``seed`` fixes every subsystem seed (scene sampling, weight init,
minibatch order) through :func:`compgen.seeding.derive_seed`; seed fields
inside the sub-sections are overwritten.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import DECODER_KINDS, ModelConfig
from .objectives import TrainConfig
from .scene import SceneConfig
from .seeding import derive_seed


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


@dataclass(frozen=True)
class DataConfig:
    train: int = 20000
    id_test: int = 2000
    ood_test: int = 2000

    def __post_init__(self):
        for k in ("train", "id_test", "ood_test"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k}: need a positive count, got {getattr(self, k)}")


@dataclass(frozen=True)
class EvalConfig:
    contrast_codes: int = 100
    heatmap_resolution: int = 16
    heatmap_mode: str = "full_ae"
    theory_points: int = 100
    ks_samples: int = 10000

    def __post_init__(self):
        if self.heatmap_mode not in ("full_ae", "isolated_decoder", "both"):
            raise ValueError(f"heatmap_mode: expected full_ae, isolated_decoder or both, got {self.heatmap_mode!r}")
        if self.heatmap_resolution < 8:
            raise ValueError(f"heatmap_resolution: need >= 8, got {self.heatmap_resolution}")


@dataclass(frozen=True)
class AblateConfig:
    seeds: int = 5
    workers: int = 1
    decoders: tuple = DECODER_KINDS
    lams: tuple = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "decoders", tuple(self.decoders))
        object.__setattr__(self, "lams", tuple(float(v) for v in self.lams))
        if self.seeds < 1:
            raise ValueError(f"seeds: need >= 1, got {self.seeds}")
        for d in self.decoders:
            if d not in DECODER_KINDS:
                raise ValueError(f"decoders: unknown decoder {d!r}")


_SECTIONS = {"scene": SceneConfig, "model": ModelConfig, "train": TrainConfig,
             "data": DataConfig, "eval": EvalConfig, "ablate": AblateConfig}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        unknown = set(d) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown top-level key")
        parts = {}
        for name, klass in _SECTIONS.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(name, "section must be a JSON object")
            known = {f.name for f in fields(klass)}
            bad = set(sub) - known
            if bad:
                raise ConfigError(f"{name}.{sorted(bad)[0]}", "unknown field")
            try:
                parts[name] = klass(**sub)
            except (TypeError, ValueError) as e:
                raise ConfigError(name, str(e)) from None
        master = d.get("seed", 0) if seed is None else seed
        if not isinstance(master, int) or isinstance(master, bool) or not 0 <= master < 2 ** 64:
            raise ConfigError("seed", f"need an integer in [0, 2^64), got {master!r}")
        return cls(seed=master, **parts).resolved()

    @classmethod
    def load(cls, path=None, seed: int | None = None) -> "RunConfig":
        if path is None:
            return cls.from_dict({}, seed)
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e}") from e
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError("<json>", f"{path}: {e}") from None
        return cls.from_dict(d, seed)

    def resolved(self) -> "RunConfig":
        """Cross-check sections and push the master seed into every subsystem."""
        if self.model.N != self.scene.N:
            raise ConfigError("model.N", f"model N={self.model.N} differs from scene N={self.scene.N}")
        if self.model.K != self.scene.K:
            raise ConfigError("model.K", f"model K={self.model.K} differs from scene K={self.scene.K}")
        return replace(
            self,
            scene=replace(self.scene, seed=derive_seed(self.seed, "scene")),
            model=replace(self.model, init_seed=derive_seed(self.seed, "model/init")),
            train=replace(self.train, seed=derive_seed(self.seed, "train")),
        )

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed).resolved()

    def to_dict(self) -> dict:
        d = {"seed": self.seed}
        for name in _SECTIONS:
            sub = getattr(self, name)
            d[name] = sub.to_dict() if hasattr(sub, "to_dict") else asdict(sub)
        d["ablate"]["decoders"] = list(self.ablate.decoders)
        d["ablate"]["lams"] = list(self.ablate.lams)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
