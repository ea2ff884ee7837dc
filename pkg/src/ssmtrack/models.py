"""Bundle of the three learned components and their (de)serialization.

Structural sizes are stored as scalar ``<prefix>.config.<field>`` entries
alongside the parameters so a file is self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import weights
from .errors import WeightFormatError
from .hssm import HssmConfig, HssmParams, init_hssm
from .velossm import PredictorParams, UpdaterParams, VeloSSMConfig, init_predictor, init_updater

PREFIX_P, PREFIX_U, PREFIX_H = "velossm_p", "velossm_u", "hssm"
_MODES = {"euler": 0.0, "zoh": 1.0}
DEFAULT_WEIGHTS = "default_weights.s3mw"


@dataclass
class Models:
    predictor: PredictorParams
    updater: UpdaterParams
    hssm: HssmParams

    def parameters(self) -> list:
        out = []
        for prefix, obj in self.parts():
            out += list(weights.named_tensors(obj, prefix).values())
        return out

    def parts(self):
        return ((PREFIX_P, self.predictor), (PREFIX_U, self.updater), (PREFIX_H, self.hssm))


def init_models(vcfg: VeloSSMConfig | None = None, hcfg: HssmConfig | None = None, seed: int = 0) -> Models:
    vcfg = vcfg or VeloSSMConfig(d=16, state=8, layers=2)
    hcfg = hcfg or HssmConfig()
    return Models(init_predictor(vcfg, seed), init_updater(vcfg, seed + 1), init_hssm(hcfg, seed + 2))


def _config_entries(prefix: str, cfg) -> dict[str, np.ndarray]:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        out[f"{prefix}.config.{f.name}"] = np.array(_MODES[v] if f.name == "mode" else float(v))
    return out


def _config_from(prefix: str, cls, entries) -> object:
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}.config.{f.name}"
        if key not in entries:
            raise WeightFormatError(f"missing config entry {key}")
        v = float(entries[key])
        if f.name == "mode":
            kwargs[f.name] = {0.0: "euler", 1.0: "zoh"}[v]
        elif f.name == "pos_encoding":
            kwargs[f.name] = bool(v)
        else:
            kwargs[f.name] = int(v)
    return cls(**kwargs)


def models_state(models: Models) -> dict[str, np.ndarray]:
    entries = {}
    for prefix, obj in models.parts():
        entries.update(_config_entries(prefix, obj.config))
        entries.update(weights.state_dict(obj, prefix))
    return entries


def save_models(models: Models, path) -> None:
    weights.save(path, models_state(models))


def models_from_entries(entries) -> Models:
    vcfg_p = _config_from(PREFIX_P, VeloSSMConfig, entries)
    vcfg_u = _config_from(PREFIX_U, VeloSSMConfig, entries)
    hcfg = _config_from(PREFIX_H, HssmConfig, entries)
    m = Models(init_predictor(vcfg_p), init_updater(vcfg_u), init_hssm(hcfg))
    for prefix, obj in m.parts():
        weights.load_into(obj, prefix, entries)
    return m


def load_models(path=None) -> Models:
    """Load a bundle; ``None`` means the weights shipped with the package (random init if absent)."""
    if path is not None:
        return models_from_entries(weights.load(path))
    ref = resources.files("ssmtrack") / "data" / DEFAULT_WEIGHTS
    if ref.is_file():
        return models_from_entries(weights.loads(ref.read_bytes()))
    return init_models()


def default_weights_path() -> Path:
    return Path(__file__).parent / "data" / DEFAULT_WEIGHTS
