"""Run configuration: INI sections for extraction, encoder, pre-training, downstream and paths."""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .downstream import DownstreamSettings, Scenario
from .encoder import PASE, PASE_PLUS, EncoderConfig, default_config, desk_config
from .features import DEFAULT_SPEC, ExtractionSpec, parse_workers, workers_label
from .pretrain import LossWeights, PretrainConfig

SCALES = ("full", "desk")


class ConfigError(ValueError):
    pass


def _defaults() -> dict[str, dict]:
    ds = DownstreamSettings()
    return {
        "extraction": {k: getattr(DEFAULT_SPEC, k) for k in DEFAULT_SPEC.__dataclass_fields__},
        "encoder": {"variant": PASE_PLUS, "scale": "full"},
        "pretrain": {
            "workers": "WLP", "reweighted": False, "epochs": 10, "batch_size": 32, "lr": 5e-4,
            "grad_clip": 5.0, "chunk_len": 16000, "normalize_targets": True, "first_k": 10,
            "normalize_weights": False, "crops_per_clip": 1, "seed": 0,
        },
        "downstream": {
            "scenario": Scenario.FROZEN.value, "trials": 10, "subsample": "", "lr": ds.lr,
            "batch_size": ds.batch_size, "patience": ds.patience, "max_epochs": ds.max_epochs,
            "threshold": ds.threshold,
        },
        "paths": {"corpus": "", "features": "", "checkpoints": "checkpoints", "reports": "reports"},
    }


def _coerce(value, like, where: str):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected {type(like).__name__}, got {value!r}") from None
    return str(value)


@dataclass
class RunConfig:
    """Typed, validated view of a run's INI configuration."""

    sections: dict = field(default_factory=_defaults)

    def __post_init__(self):
        base = _defaults()
        for name, values in self.sections.items():
            if name not in base:
                raise ConfigError(f"unknown section [{name}]")
            for key, value in values.items():
                if key not in base[name]:
                    raise ConfigError(f"unknown key {key!r} in [{name}]")
                base[name][key] = _coerce(value, base[name][key], f"[{name}] {key}")
        self.sections = base
        self._validate()

    def _validate(self):
        enc = self.sections["encoder"]
        if enc["variant"] not in (PASE, PASE_PLUS):
            raise ConfigError(f"[encoder] variant must be {PASE} or {PASE_PLUS}")
        if enc["scale"] not in SCALES:
            raise ConfigError(f"[encoder] scale must be one of {SCALES}")
        try:
            parse_workers(self.sections["pretrain"]["workers"])
            Scenario(self.sections["downstream"]["scenario"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.subsample_sizes()

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]

    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls({s: dict(parser[s]) for s in parser.sections()})

    def override(self, section: str, **values) -> "RunConfig":
        """Copy with ``values`` (``None`` entries ignored) replacing ``section`` keys."""
        sections = json.loads(json.dumps(self.sections))
        sections[section].update({k: v for k, v in values.items() if v is not None})
        return RunConfig(sections)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for name in sorted(self.sections):
            parser[name] = {k: str(v) for k, v in sorted(self.sections[name].items())}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path

    def digest(self) -> str:
        blob = json.dumps(self.sections, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # -- typed views ------------------------------------------------------------

    def extraction_spec(self) -> ExtractionSpec:
        return ExtractionSpec(**self.sections["extraction"])

    def encoder_config(self) -> EncoderConfig:
        enc = self.sections["encoder"]
        build = desk_config if enc["scale"] == "desk" else default_config
        return build(enc["variant"])

    def pretrain_config(self) -> PretrainConfig:
        p = self.sections["pretrain"]
        workers = parse_workers(p["workers"])
        return PretrainConfig(
            workers=workers_label(workers), weighting=LossWeights.equal(workers),
            encoder=self.encoder_config(), extraction=self.extraction_spec(),
            chunk_len=p["chunk_len"], batch_size=p["batch_size"], epochs=p["epochs"], lr=p["lr"],
            grad_clip=p["grad_clip"], seed=p["seed"], normalize_targets=p["normalize_targets"],
            first_k=p["first_k"], normalize_weights=p["normalize_weights"],
            crops_per_clip=p["crops_per_clip"],
        )

    def downstream_settings(self) -> DownstreamSettings:
        d = self.sections["downstream"]
        return DownstreamSettings(lr=d["lr"], batch_size=d["batch_size"], patience=d["patience"],
                                  max_epochs=d["max_epochs"], threshold=d["threshold"])

    def subsample_sizes(self) -> list[int | None]:
        """Training-set sizes to sweep; ``[None]`` means the full split."""
        raw = str(self.sections["downstream"]["subsample"]).strip()
        if not raw:
            return [None]
        try:
            sizes = [int(v) for v in raw.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"[downstream] subsample must be comma-separated integers, got {raw!r}") from None
        if any(n < 1 for n in sizes):
            raise ConfigError("[downstream] subsample sizes must be positive")
        return sizes or [None]
