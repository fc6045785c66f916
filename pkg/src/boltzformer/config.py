"""Run configuration: a flat ``key = value`` file with five sections.

Grammar (``configparser`` INI subset)::

    [section]          one of encoder, decoder, sampler, train, data
    key = value        ints, floats, booleans (true/false/on/off/1/0),
                       strings, or comma-separated int lists
    # comment          full-line comments only

Unknown sections or keys are errors that name the offending line. Anything
not given falls back to the defaults in :data:`SCHEMA`. ``--set
section.key=value`` overrides from the command line win over the file.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .boltzmann import SamplerConfig
from .decoder import DecoderConfig, default_schedule
from .encoder import EncoderConfig
from .errors import ConfigError
from .model import ModelConfig
from .synthdata import SPLITS, SceneConfig
from .train import TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "encoder": {
        "level_sizes": (_ints, (8, 16, 32)),
        "semantic_size": (int, 32),
    },
    "decoder": {
        "layers": (int, 9),
        "queries": (int, 10),
        "dim": (int, 64),
        "heads": (int, 8),
        "schedule": (_ints, default_schedule()),
        "mlp_depth": (int, 2),
        "text_prior": (_bool, True),
        "update_text": (_bool, True),
        "attn_scale": (str, "d"),
        "prompt_tokens": (int, 4),
        "pigma_hidden": (int, 16),
        "pigma_correction": (_bool, True),
        "pigma_input": (str, "logits"),
        "init_seed": (int, 0),
    },
    "sampler": {
        "policy": (str, "boltzmann"),
        "tau0": (float, 1.0),
        "sample_ratio": (float, 0.10),
        "threshold_value": (float, 0.5),
        "seed": (int, 0),
    },
    "train": {
        "lr": (float, 2e-4),
        "weight_decay": (float, 1e-2),
        "batch_size": (int, 16),
        "max_epochs": (int, 30),
        "patience": (int, 5),
        "aug_prob": (float, 0.5),
        "seed": (int, 0),
        "eval_batch_size": (int, 50),
    },
    "data": {
        "image_size": (int, 64),
        "area_min": (float, 2e-5),
        "area_max": (float, 0.2),
        "max_distractors": (int, 3),
        "noise": (float, 0.05),
        "n_classes": (int, 4),
        "seed": (int, 0),
        "train_limit": (int, SPLITS["train"][1] - SPLITS["train"][0]),
        "val_limit": (int, SPLITS["val"][1] - SPLITS["val"][0]),
        "test_limit": (int, SPLITS["test"][1] - SPLITS["test"][0]),
    },
}


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line number of every ``key =`` inside its section (for error messages)."""
    out: dict[tuple[str, str], int] = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if m := re.fullmatch(r"\[([^\]]+)\]", s):
            section = m.group(1).strip()
            out[(section, "")] = no
        elif section is not None and (m := re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)):
            out[(section, m.group(1).strip().lower())] = no
    return out


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()}
                                                                      for s, keys in SCHEMA.items()})
    source: str = "<defaults>"

    def __getitem__(self, dotted: str) -> Any:
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    # --- construction -------------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                           inline_comment_prefixes=None, default_section="\x00none")
        try:
            parser.read_string(text, source=source)
        except configparser.DuplicateOptionError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from None
        except configparser.DuplicateSectionError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: duplicate section [{exc.section}]") from None
        except configparser.MissingSectionHeaderError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: key outside any [section]") from None
        except configparser.ParsingError as exc:
            lineno = exc.errors[0][0] if exc.errors else "?"
            raise ConfigError(f"{source}:{lineno}: cannot parse line") from None
        lines = _key_lines(text)
        cfg = cls(source=source)
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{source}:{lines.get((section, ''), '?')}: unknown section [{section}]")
            for key, raw in parser.items(section):
                cfg._assign(section, key, raw, f"{source}:{lines.get((section, key), '?')}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: Sequence[str] = ()) -> "RunConfig":
        if path is None:
            cfg = cls()
        else:
            path = Path(path)
            try:
                text = path.read_text()
            except OSError as exc:
                raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
            cfg = cls.from_text(text, str(path))
        cfg.apply_overrides(overrides)
        return cfg

    def _assign(self, section: str, key: str, raw: str, where: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        parse = SCHEMA[section][key][0]
        try:
            self.values[section][key] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {section}.{key}: {exc}") from None

    def apply_overrides(self, overrides: Sequence[str]) -> None:
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            dotted, raw = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
            self._assign(section, key.strip().lower(), raw.strip(), f"--set {item}")
        self.validate()

    def updated(self, **dotted: Any) -> "RunConfig":
        out = RunConfig({s: dict(v) for s, v in self.values.items()}, self.source)
        for name, value in dotted.items():
            section, key = name.split("__", 1)
            out.values[section][key] = value
        out.validate()
        return out

    # --- typed views ----------------------------------------------------------------

    def validate(self) -> None:
        self.model_config()
        self.train_config()
        self.scene_config()
        for split in SPLITS:
            if self.values["data"][f"{split}_limit"] < 1:
                raise ConfigError(f"data.{split}_limit must be >= 1")

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**self.values["sampler"])

    def model_config(self) -> ModelConfig:
        e, d, data = self.values["encoder"], self.values["decoder"], self.values["data"]
        enc = EncoderConfig(input_size=data["image_size"], in_channels=1, dim=d["dim"],
                            level_sizes=e["level_sizes"], semantic_size=e["semantic_size"])
        dec = DecoderConfig(layers=d["layers"], queries=d["queries"], dim=d["dim"], heads=d["heads"],
                            sampler=self.sampler_config(), schedule=d["schedule"], mlp_depth=d["mlp_depth"],
                            text_prior=d["text_prior"], update_text=d["update_text"], attn_scale=d["attn_scale"])
        if d["attn_scale"] not in ("d", "sqrt_d"):
            raise ConfigError(f"decoder.attn_scale must be 'd' or 'sqrt_d', got {d['attn_scale']!r}")
        if d["pigma_input"] not in ("logits", "probabilities"):
            raise ConfigError(f"decoder.pigma_input must be 'logits' or 'probabilities', got {d['pigma_input']!r}")
        return ModelConfig(encoder=enc, decoder=dec, n_classes=data["n_classes"], prompt_tokens=d["prompt_tokens"],
                           pigma_hidden=d["pigma_hidden"], pigma_correction=d["pigma_correction"],
                           pigma_input=d["pigma_input"], init_seed=d["init_seed"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.values["train"])

    def scene_config(self) -> SceneConfig:
        data = self.values["data"]
        return SceneConfig(**{k: data[k] for k in ("image_size", "area_min", "area_max", "max_distractors",
                                                   "noise", "n_classes", "seed")})

    def limit(self, split: str) -> int:
        return self.values["data"][f"{split}_limit"]

    # --- output -----------------------------------------------------------------------

    def to_text(self) -> str:
        blocks = []
        for section, keys in SCHEMA.items():
            lines = [f"[{section}]"] + [f"{k} = {_fmt(self.values[section][k])}" for k in keys]
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"

    def write(self, directory: str | Path, name: str = "resolved_config.ini") -> Path:
        path = Path(directory) / name
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_text())
        return path

    def as_mapping(self) -> Mapping[str, Mapping[str, Any]]:
        return self.values
