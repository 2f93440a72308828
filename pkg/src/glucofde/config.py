"""Pipeline configuration: YAML file merged over shipped defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources

import yaml

from .data import SynthConfig
from .errors import ConfigError, DomainError
from .evolve import EvolutionConfig
from .preprocess import PreprocessConfig
from .sindy import SindyLibrarySpec

METHODS = ("mean", "sindy", "isige")
SECTIONS = ("paths", "seed", "threads", "synthetic", "preprocess", "clustering", "split",
            "evolution", "sindy", "methods", "report")


def default_config_dict():
    text = resources.files("glucofde").joinpath("data/default_config.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base, override, where=""):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _method_list(value):
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    value = list(value or [])
    bad = [m for m in value if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s): {', '.join(bad)} (choose from {', '.join(METHODS)})")
    if not value:
        raise ConfigError("at least one method is required")
    return [m for m in METHODS if m in value]


@dataclass
class PipelineConfig:
    raw: dict

    @classmethod
    def load(cls, path=None, overrides=None):
        user = {}
        if path:
            try:
                with open(path) as fh:
                    user = yaml.safe_load(fh) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except yaml.YAMLError as exc:
                raise ConfigError(f"invalid YAML in {path}: {exc}") from None
            if not isinstance(user, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
        unknown = set(user) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        merged = _merge(default_config_dict(), user)
        merged = _merge(merged, overrides or {})
        cfg = cls(merged)
        cfg.validate()
        return cfg

    # typed views -----------------------------------------------------------

    @property
    def seed(self):
        return int(self.raw["seed"])

    def section_seed(self, section):
        return int(self.raw.get(section, {}).get("seed", self.seed))

    @property
    def out(self):
        return self.raw["paths"]["out"]

    @property
    def raw_path(self):
        return self.raw["paths"].get("raw")

    @property
    def grammar_path(self):
        return self.raw["paths"].get("grammar")

    @property
    def threads(self):
        return int(self.raw.get("threads", 1))

    @property
    def methods(self):
        return _method_list(self.raw["methods"])

    def synthetic(self):
        d = dict(self.raw.get("synthetic") or {})
        d["preprocess"] = self.preprocess()
        d.pop("seed", None)
        return SynthConfig.from_dict(d)

    def preprocess(self):
        return PreprocessConfig.from_dict(self.raw.get("preprocess"))

    def clustering(self):
        c = dict(self.raw["clustering"])
        k = int(c.get("k", 15))
        if k < 1:
            raise ConfigError("clustering.k must be at least 1")
        return {"k": k, "restarts": int(c.get("restarts", 100)),
                "elbow_ks": [int(v) for v in c.get("elbow_ks", [])],
                "max_iter": int(c.get("max_iter", 300)), "seed": self.section_seed("clustering")}

    def evolution(self):
        d = dict(self.raw.get("evolution") or {})
        d["seed"] = self.section_seed("evolution")
        return EvolutionConfig.from_dict(d)

    def sindy(self):
        d = dict(self.raw.get("sindy") or {})
        try:
            spec = SindyLibrarySpec.from_dict(d.get("library"))
        except (TypeError, ValueError, DomainError) as exc:
            raise ConfigError(f"sindy.library: {exc}") from None
        return {"spec": spec, "lambda": float(d.get("lambda", 0.5)), "max_iters": int(d.get("max_iters", 20)),
                "ridge": d.get("ridge"), "standardize": bool(d.get("standardize", True))}

    def report_formats(self):
        return list((self.raw.get("report") or {}).get("formats", ["csv", "json", "svg"]))

    def validate(self):
        self.methods  # noqa: B018 - raises on bad values
        self.preprocess()
        self.clustering()
        self.evolution()
        self.sindy()
        self.synthetic()
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")

    def hash(self):
        """Digest of everything except file locations, so moving a run keeps its identity."""
        body = {k: v for k, v in self.raw.items() if k != "paths"}
        blob = json.dumps(body, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]
