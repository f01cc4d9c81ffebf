"""Run configuration: INI file with sections, overridable from the command line.

Sections and keys (all optional; defaults shown by `hsiadv synth --print-config`):

    [dataset]  cube, labels, classes, bands, height, width, patch_size,
               max_per_class, train_fraction
    [models]   surrogate, targets, tap, epochs, lr, momentum, batch_size
    [attack]   methods, epsilons, alpha, mu, copies, iterations,
               spatial_divisions, spectral_divisions, eta, enlargement,
               stabilizer, ce_only
    [transforms] kinds, scale_low, scale_high, dropout_rate, noise_sigma,
               dct_drop_fraction, include_identity, equal_blocks
    [defense]  noise_intensity, filter_window
    [output]   dir
    [run]      seed, workers

Command-line overrides use ``--set section.key=value``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attacks import ATTACK_METHODS, AttackConfig
from .losses import LossConfig
from .models import ARCHITECTURES
from .transforms import TRANSFORM_KINDS, TransformRegistry


@dataclass
class DatasetSection:
    cube: str = "scene.hsc"
    labels: str = "scene.hsl"
    classes: int = 3
    bands: int = 12
    height: int = 64
    width: int = 64
    patch_size: int = 16
    max_per_class: int = 150
    train_fraction: float = 0.6


@dataclass
class ModelsSection:
    surrogate: str = "cnn-a"
    targets: tuple[str, ...] = ("cnn-b",)
    tap: int = 3
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32


@dataclass
class AttackSection:
    methods: tuple[str, ...] = ("fgsm", "mi-fgsm", "ours-fgsm", "ours-mi-fgsm")
    epsilons: tuple[float, ...] = (0.01, 0.03)
    alpha: float = 2.0 / 255.0
    mu: float = 1.0
    copies: int = 10
    iterations: int = 20
    spatial_divisions: int = 3
    spectral_divisions: int = 3
    eta: float = 0.1
    enlargement: float = 1.2
    stabilizer: float = 1e-6
    ce_only: bool = False


@dataclass
class TransformsSection:
    kinds: tuple[str, ...] = TRANSFORM_KINDS
    scale_low: float = 0.7
    scale_high: float = 1.3
    dropout_rate: float = 0.1
    noise_sigma: float = 0.02
    dct_drop_fraction: float = 0.25
    include_identity: bool = False
    equal_blocks: bool = False


@dataclass
class DefenseSection:
    noise_intensity: float = 0.1
    filter_window: int = 7


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    models: ModelsSection = field(default_factory=ModelsSection)
    attack: AttackSection = field(default_factory=AttackSection)
    transforms: TransformsSection = field(default_factory=TransformsSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    output_dir: str = "out"
    seed: int = 7
    workers: int = 2

    # -- derived objects ------------------------------------------------------
    def registry(self) -> TransformRegistry:
        t = self.transforms
        return TransformRegistry(
            kinds=tuple(t.kinds),
            seed=self.seed,
            scale_range=(t.scale_low, t.scale_high),
            dropout_rate=t.dropout_rate,
            noise_sigma=t.noise_sigma,
            dct_drop_fraction=t.dct_drop_fraction,
            include_identity=t.include_identity,
        )

    def loss_config(self) -> LossConfig:
        a = self.attack
        return LossConfig(
            aux_weight=a.eta,
            enlargement=a.enlargement,
            stabilizer=a.stabilizer,
            tap=self.models.tap,
            ce_only=a.ce_only,
        )

    def attack_config(self, method: str, epsilon: float) -> AttackConfig:
        a = self.attack
        return AttackConfig(
            epsilon=epsilon,
            alpha=a.alpha,
            mu=a.mu,
            copies=a.copies,
            iterations=a.iterations,
            spatial_divisions=a.spatial_divisions,
            spectral_divisions=a.spectral_divisions,
            loss=self.loss_config(),
            method=method,
            seed=self.seed,
            registry=self.registry(),
            equal_blocks=self.transforms.equal_blocks,
        )

    def out_path(self, *parts) -> Path:
        return Path(self.output_dir).joinpath(*parts)

    def validate(self) -> None:
        if self.dataset.classes < 2:
            raise ValueError("dataset.classes must be >= 2")
        if self.models.surrogate not in ARCHITECTURES:
            raise ValueError(f"unknown surrogate {self.models.surrogate!r}")
        for t in self.models.targets:
            if t not in ARCHITECTURES:
                raise ValueError(f"unknown target {t!r}")
        for m in self.attack.methods:
            if m not in ATTACK_METHODS:
                raise ValueError(f"unknown attack method {m!r}")
        for eps in self.attack.epsilons:
            if eps < 0:
                raise ValueError("attack.epsilons must be >= 0")
        if not 0 < self.dataset.train_fraction < 1:
            raise ValueError("dataset.train_fraction must be in (0, 1)")
        if self.workers < 1:
            raise ValueError("run.workers must be >= 1")
        # constructing the derived objects runs their own validation
        self.registry()
        self.loss_config()


_SECTION_NAMES = {
    "dataset": "dataset",
    "models": "models",
    "attack": "attack",
    "transforms": "transforms",
    "defense": "defense",
}
_TOP_LEVEL = {
    ("output", "dir"): "output_dir",
    ("run", "seed"): "seed",
    ("run", "workers"): "workers",
}


def _parse_value(current, raw: str):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        items = [s.strip() for s in raw.split(",") if s.strip()]
        if current and isinstance(current[0], float):
            return tuple(float(s) for s in items)
        return tuple(items)
    return raw


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if (section, key) in _TOP_LEVEL:
        attr = _TOP_LEVEL[(section, key)]
        setattr(cfg, attr, _parse_value(getattr(cfg, attr), raw))
        return
    if section not in _SECTION_NAMES:
        raise ValueError(f"unknown config section [{section}]")
    target = getattr(cfg, _SECTION_NAMES[section])
    names = {f.name for f in fields(target)}
    if key not in names:
        raise ValueError(f"unknown key {key!r} in section [{section}]")
    setattr(target, key, _parse_value(getattr(target, key), raw))


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from an INI file plus ``section.key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        _apply(cfg, section.strip(), key.strip(), raw)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    """Render the configuration in INI form (the format load_config reads)."""
    def fmt(value):
        if isinstance(value, tuple):
            return ",".join(str(v) for v in value)
        return str(value)

    lines = []
    for section, attr in _SECTION_NAMES.items():
        lines.append(f"[{section}]")
        for f in fields(getattr(cfg, attr)):
            lines.append(f"{f.name} = {fmt(getattr(getattr(cfg, attr), f.name))}")
        lines.append("")
    lines += ["[output]", f"dir = {cfg.output_dir}", "", "[run]",
              f"seed = {cfg.seed}", f"workers = {cfg.workers}", ""]
    return "\n".join(lines)
