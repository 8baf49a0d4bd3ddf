"""INI run configuration with strict key checking.

Sections: ``[problem]``, ``[model]``, ``[training]``, ``[data]``, ``[run]``.
Every key is typed; unknown sections or keys are reported with their line number.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass, field

from .training import TrainingConfig


class ConfigError(ValueError):
    pass


_REQUIRED = object()

# (type, default); _REQUIRED marks keys without a default
SCHEMA: dict[str, dict[str, tuple]] = {
    "problem": {
        "kind": (str, _REQUIRED),  # gmm_toy | latent_toy | blur | mask | identity
        "sigma_y": (float, _REQUIRED),
        "kernel_size": (int, 11),
        "length_scale": (float, 0.3),
        "gp_std": (float, 0.25),
        "n_tracks": (int, 8),
        "latent_w": (str, "2.0,-1.0,0.5,1.5"),
        "latent_lam": (float, 1.0),
        "latent_rho": (float, 0.3),
    },
    "model": {
        "kernel": (str, "sgs"),
        "L": (int, _REQUIRED),
        "L0": (int, None),
        "d_z": (int, None),
        "gamma": (float, 0.1),
        "rho": (float, 0.5),
        "lam": (float, 1.0),
        "hidden": (int, 64),
        "beta_min": (float, 0.1),
        "beta_max": (float, 20.0),
        "discriminator_hidden": (int, 128),
    },
    "training": {},  # filled from TrainingConfig below
    "data": {
        "images": (str, None),
        "pad": (int, 2),
        "max_images": (int, None),
        "n_train": (int, 4096),
        "n_val": (int, 32),
        "sw_pairs": (int, 1000),
    },
    "run": {
        "seed": (int, 0),
        "output_dir": (str, "run"),
    },
}


def _training_schema() -> dict[str, tuple]:
    out = {}
    for f in dataclasses.fields(TrainingConfig):
        typ = {"float": float, "int": int, "bool": bool}[f.type if isinstance(f.type, str) else f.type.__name__]
        default = _REQUIRED if f.default is dataclasses.MISSING else f.default
        out[f.name] = (typ, default)
    return out


SCHEMA["training"] = _training_schema()


@dataclass
class RunConfig:
    problem: dict
    model: dict
    training: TrainingConfig
    data: dict
    run: dict
    path: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def seed(self) -> int:
        return self.run["seed"]

    @property
    def output_dir(self) -> str:
        return self.run["output_dir"]

    def to_dict(self) -> dict:
        return {"problem": self.problem, "model": self.model, "training": self.training.to_dict(),
                "data": self.data, "run": self.run}


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    """Map (section, key) to the 1-based line where it is defined."""
    where, section = {}, None
    for i, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            where[(section, "")] = i
            continue
        m = re.match(r"([^=:\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            where[(section, m.group(1).strip())] = i
    return where


def _convert(typ, raw: str, section: str, key: str, line: int):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"line {line}: [{section}] {key} = {raw!r} is not a valid {typ.__name__}") from None


def parse_config_text(text: str, path: str | None = None, base_dir: str | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case-sensitive (L vs L0)
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from None
    lines = _line_numbers(text)
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"line {lines.get((section, ''), '?')}: unknown section [{section}]")
    for section, schema in SCHEMA.items():
        got = dict(parser[section]) if parser.has_section(section) else {}
        for key in got:
            if key not in schema:
                raise ConfigError(f"line {lines.get((section, key), '?')}: unknown key {key!r} in [{section}]")
        sec = {}
        for key, (typ, default) in schema.items():
            if key in got:
                sec[key] = _convert(typ, got[key], section, key, lines.get((section, key), 0))
            elif default is _REQUIRED:
                where = lines.get((section, ""))
                loc = f"line {where}: " if where else ""
                raise ConfigError(f"{loc}missing required key {key!r} in [{section}]")
            else:
                sec[key] = default
        values[section] = sec

    m = values["model"]
    if m["kernel"] not in ("sgs", "latino"):
        raise ConfigError(f"line {lines.get(('model', 'kernel'), '?')}: kernel must be sgs or latino")
    if m["L0"] is None:
        m["L0"] = m["L"] // 4
    if not 0 <= m["L0"] <= m["L"]:
        raise ConfigError(f"line {lines.get(('model', 'L0'), lines.get(('model', 'L'), '?'))}: need 0 <= L0 <= L")
    kinds = ("gmm_toy", "latent_toy", "blur", "mask", "identity")
    if values["problem"]["kind"] not in kinds:
        raise ConfigError(f"line {lines.get(('problem', 'kind'), '?')}: problem kind must be one of {', '.join(kinds)}")
    base = base_dir if base_dir is not None else (os.path.dirname(os.path.abspath(path)) if path else os.getcwd())
    d = values["data"]
    if values["problem"]["kind"] in ("blur", "mask", "identity"):
        if not d["images"]:
            raise ConfigError(f"[data] images is required for problem kind {values['problem']['kind']!r}")
        d["images"] = os.path.join(base, d["images"])
        if not os.path.exists(d["images"]):
            raise ConfigError(f"line {lines.get(('data', 'images'), '?')}: no such file {d['images']}")
    values["run"]["output_dir"] = os.path.join(base, values["run"]["output_dir"])
    try:
        training = TrainingConfig(**values["training"])
    except ValueError as exc:
        raise ConfigError(f"[training]: {exc}") from None
    return RunConfig(values["problem"], m, training, d, values["run"], path, values)


def load_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text, path)
