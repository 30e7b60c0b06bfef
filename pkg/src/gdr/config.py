"""Experiment configuration: JSON schema, named presets, validation.

Unknown keys are rejected so typos fail loudly. A config either names a
``preset`` or spells out the ``levels`` list explicitly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .grid import GridError
from .regression import LevelSpec, RegressionConfig

PRESETS: dict[str, dict] = {
    # clinical-scale schedules (sigma mm, downsample, gamma)
    "paper-2d": {
        "levels": [[60.0, 4, 0.1], [30.0, 2, 0.1], [15.0, 1, 0.1]],
        "k": 10,
    },
    "paper-3d": {
        "levels": [[48.0, 4, 0.05], [24.0, 2, 0.075], [12.0, 1, 0.1]],
        "k": 5,
    },
    # desk-scale schedules for the shipped phantoms (~64 mm extents); the
    # fine level stays integrable for the unmasked baseline even on heavily
    # corrupted series
    "desk-2d": {
        "levels": [[12.0, 4, 0.1], [6.0, 2, 0.05], [4.0, 1, 0.05]],
        "k": 8,
    },
    "desk-3d": {
        "levels": [[12.0, 4, 0.1], [6.0, 2, 0.05], [4.0, 1, 0.05]],
        "k": 3,
    },
}


class ConfigError(ValueError):
    pass


_SCHEMA: dict[str, type | tuple[type, ...]] = {
    "series_dir": str,
    "output_dir": str,
    "mode": str,
    "driver": str,
    "preset": str,
    "levels": list,
    "k": int,
    "epsilon": (int, float),
    "lbfgs_history": int,
    "max_iters": int,
    "warmup_iters": int,
    "template_refine_iters": int,
    "max_halvings": int,
    "seed": int,
}


@dataclass
class ExperimentConfig:
    series_dir: str = ""
    output_dir: str = ""
    mode: str = "gdr"
    driver: str = "fot"
    preset: str | None = None
    levels: list[LevelSpec] = field(default_factory=list)
    k: int = 4
    epsilon: float = 1e-4
    lbfgs_history: int = 3
    max_iters: int = 200
    warmup_iters: int = 3
    template_refine_iters: int = 40
    max_halvings: int = 30
    seed: int = 0

    def regression_config(self) -> RegressionConfig:
        if not self.levels:
            raise ConfigError("config resolves to no levels")
        return RegressionConfig(
            levels=tuple(self.levels),
            mode=self.mode,
            driver=self.driver,
            k=self.k,
            epsilon=self.epsilon,
            lbfgs_history=self.lbfgs_history,
            max_iters=self.max_iters,
            warmup_iters=self.warmup_iters,
            template_refine_iters=self.template_refine_iters,
            max_halvings=self.max_halvings,
        )


def _parse_levels(raw) -> list[LevelSpec]:
    levels = []
    for item in raw:
        if isinstance(item, dict):
            extra = set(item) - {"sigma_mm", "downsample", "gamma"}
            if extra:
                raise ConfigError(f"unknown level keys {sorted(extra)}")
            levels.append(
                LevelSpec(float(item["sigma_mm"]), int(item["downsample"]),
                          float(item["gamma"]))
            )
        elif isinstance(item, (list, tuple)) and len(item) == 3:
            levels.append(LevelSpec(float(item[0]), int(item[1]), float(item[2])))
        else:
            raise ConfigError(f"bad level entry {item!r}")
    return levels


def config_from_dict(doc: dict) -> ExperimentConfig:
    unknown = set(doc) - set(_SCHEMA)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    for key, typ in _SCHEMA.items():
        if key in doc and not isinstance(doc[key], typ):
            raise ConfigError(f"config key {key!r} has wrong type {type(doc[key]).__name__}")
    cfg = ExperimentConfig()
    preset = doc.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}; available: {sorted(PRESETS)}"
            )
        cfg.preset = preset
        cfg.levels = _parse_levels(PRESETS[preset]["levels"])
        cfg.k = PRESETS[preset]["k"]
    if "levels" in doc:
        cfg.levels = _parse_levels(doc["levels"])
    for key in ("series_dir", "output_dir", "mode", "driver", "k", "epsilon",
                "lbfgs_history", "max_iters", "warmup_iters",
                "template_refine_iters", "max_halvings", "seed"):
        if key in doc:
            setattr(cfg, key, doc[key])
    cfg.epsilon = float(cfg.epsilon)
    if cfg.mode not in ("gdr", "gir"):
        raise ConfigError(f"mode must be gdr or gir, got {cfg.mode!r}")
    if cfg.driver not in ("fot", "foi"):
        raise ConfigError(f"driver must be fot or foi, got {cfg.driver!r}")
    if not cfg.levels:
        raise ConfigError("config needs a preset or an explicit levels list")
    try:
        cfg.regression_config()
    except GridError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_experiment_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(doc)


def config_echo(cfg: ExperimentConfig) -> dict:
    doc = asdict(cfg)
    doc["levels"] = [[lv.sigma_mm, lv.downsample, lv.gamma] for lv in cfg.levels]
    return doc
