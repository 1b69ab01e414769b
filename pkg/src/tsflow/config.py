"""Run configuration: YAML file + ``--section.key value`` overrides, validated as a whole."""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from tsflow.cfm import TrainConfig
from tsflow.data import Dataset, SyntheticSpec, gen_synthetic, load_dataset
from tsflow.gp import KINDS, KernelSpec
from tsflow.sampling import SamplerConfig

SEED_ENV = "TSFLOW_SEED"


class ConfigError(ValueError):
    """All validation problems of one config, reported together."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


def _fields(cls, skip=()) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def default_tree() -> dict:
    """The full config schema with default values."""
    train = {k: _plain(v) for k, v in _fields(TrainConfig, skip=("seed", "prior", "hidden_dim",
                                                                   "num_blocks", "time_embed_dim")).items()}
    train["coupling"] = "auto"
    synth = _fields(SyntheticSpec, skip=("seed", "period", "context_len", "pred_len"))
    return {
        "seed": 0,
        "output_dir": "run",
        "dataset": {
            "path": None,
            "format": "csv",
            "period": 24,
            "context_len": 24,
            "pred_len": 24,
            "synthetic": None,
        },
        "model": {"conditional": True, "hidden_dim": 64, "num_blocks": 3, "time_embed_dim": 64},
        "prior": {"kind": "OU", "length_scale": None, "white_noise": KernelSpec().white_noise},
        "train": train,
        "sampler": {k: _plain(v) for k, v in _fields(SamplerConfig, skip=("seed",)).items()},
        "_synthetic_defaults": synth,
    }


@dataclass(frozen=True)
class RunConfig:
    tree: dict
    prior: KernelSpec
    train: TrainConfig
    sampler: SamplerConfig
    synthetic: SyntheticSpec | None

    @property
    def seed(self) -> int:
        return self.tree["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.tree["output_dir"])

    @property
    def conditional(self) -> bool:
        return self.tree["model"]["conditional"]

    @property
    def context_len(self) -> int:
        return self.tree["dataset"]["context_len"]

    @property
    def pred_len(self) -> int:
        return self.tree["dataset"]["pred_len"]

    def load_dataset(self) -> Dataset:
        d = self.tree["dataset"]
        if self.synthetic is not None:
            return gen_synthetic(self.synthetic)
        return load_dataset(d["path"], d["format"], d["period"], d["context_len"], d["pred_len"])

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)


def parse_overrides(args: list[str]) -> dict[str, Any]:
    """``["--train.epochs", "1", "--prior.kind=SE"]`` -> ``{"train.epochs": 1, ...}``."""
    out: dict[str, Any] = {}
    i = 0
    while i < len(args):
        tok = args[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError([f"unexpected argument {tok!r}; overrides look like --section.key value"])
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError([f"override --{key} has no value"])
            raw = args[i + 1]
            i += 2
        out[key] = yaml.safe_load(raw)
    return out


def _merge(base: dict, upd: dict, prefix: str, errors: list[str]):
    for k, v in upd.items():
        name = f"{prefix}{k}"
        if k not in base or k.startswith("_"):
            errors.append(f"{name}: unknown key")
        elif isinstance(base[k], dict) and k != "synthetic":
            if not isinstance(v, dict):
                errors.append(f"{name}: expected a mapping")
            else:
                _merge(base[k], v, name + ".", errors)
        else:
            base[k] = v


def _set_dotted(tree: dict, key: str, value, errors: list[str]):
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        if p == "synthetic" and node.get(p) is None:
            node[p] = {}
        if not isinstance(node.get(p), dict):
            errors.append(f"{key}: unknown key")
            return
        node = node[p]
    leaf = parts[-1]
    in_synth = len(parts) > 1 and parts[-2] == "synthetic"
    if leaf.startswith("_") or (leaf not in node and not in_synth):
        errors.append(f"{key}: unknown key")
        return
    node[leaf] = value


def _check_types(tree: dict, defaults: dict, prefix: str, errors: list[str]):
    for k, dv in defaults.items():
        if k.startswith("_") or k == "synthetic":
            continue
        v = tree[k]
        name = f"{prefix}{k}"
        if isinstance(dv, dict):
            _check_types(v, dv, name + ".", errors)
        elif isinstance(dv, bool):
            if not isinstance(v, bool):
                errors.append(f"{name}: expected true/false, got {v!r}")
        elif isinstance(dv, int) and not isinstance(dv, bool):
            if not isinstance(v, int) or isinstance(v, bool):
                errors.append(f"{name}: expected an integer, got {v!r}")
        elif isinstance(dv, float):
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                errors.append(f"{name}: expected a number, got {v!r}")
        elif isinstance(dv, list):
            if not isinstance(v, list):
                errors.append(f"{name}: expected a list, got {v!r}")


def _build(ctor, kwargs: dict, name: str, errors: list[str]):
    try:
        return ctor(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{name}: {exc}")
        return None


def resolve(tree: dict, errors: list[str] | None = None) -> RunConfig:
    """Validate a merged tree and build the typed sections; raises ConfigError.

    ``errors`` carries problems found earlier (unknown keys) so that every
    violation is reported in one go.
    """
    defaults = default_tree()
    errors = list(errors or [])
    n_before = len(errors)
    _check_types(tree, defaults, "", errors)
    if tree["dataset"]["path"] is not None and not isinstance(tree["dataset"]["path"], str):
        errors.append(f"dataset.path: expected a string, got {tree['dataset']['path']!r}")
    if len(errors) > n_before:
        # later checks assume well-typed values
        raise ConfigError(errors)
    d = tree["dataset"]
    for key in ("period", "context_len", "pred_len"):
        if d[key] < 1:
            errors.append(f"dataset.{key}: must be >= 1, got {d[key]}")
    if d["format"] not in ("csv", "jsonl"):
        errors.append(f"dataset.format: expected csv or jsonl, got {d['format']!r}")
    synthetic = None
    if d["path"] is None and d["synthetic"] is None:
        errors.append("dataset.path: required (or give dataset.synthetic)")
    elif d["path"] is not None and d["synthetic"] is not None:
        errors.append("dataset.path: give either a path or dataset.synthetic, not both")
    elif d["path"] is not None and not Path(d["path"]).is_file():
        errors.append(f"dataset.path: file not found: {d['path']}")
    elif d["synthetic"] is not None:
        if not isinstance(d["synthetic"], dict):
            errors.append("dataset.synthetic: expected a mapping")
        else:
            spec = dict(defaults["_synthetic_defaults"])
            unknown = set(d["synthetic"]) - set(spec)
            for k in sorted(unknown):
                errors.append(f"dataset.synthetic.{k}: unknown key")
            spec.update({k: v for k, v in d["synthetic"].items() if k in spec})
            spec.update(seed=tree["seed"], period=d["period"], context_len=d["context_len"],
                        pred_len=d["pred_len"])
            synthetic = _build(SyntheticSpec, spec, "dataset.synthetic", errors)
            if synthetic is not None and synthetic.kind not in ("sine-mix", "ar1", "ou-path"):
                errors.append(f"dataset.synthetic.kind: unknown kind {synthetic.kind!r}")
    if tree["prior"]["kind"] not in KINDS:
        errors.append(f"prior.kind: expected one of {KINDS}, got {tree['prior']['kind']!r}")
        prior = None
    else:
        prior = _build(KernelSpec, dict(tree["prior"]), "prior", errors)

    m = tree["model"]
    for key in ("hidden_dim", "num_blocks", "time_embed_dim"):
        if m[key] < 1:
            errors.append(f"model.{key}: must be >= 1, got {m[key]}")
    if m["time_embed_dim"] % 2:
        errors.append("model.time_embed_dim: must be even")

    t = dict(tree["train"])
    if t["coupling"] == "auto":
        t["coupling"] = "gpr" if m["conditional"] else "ot"
    elif m["conditional"] and t["coupling"] != "gpr":
        errors.append("train.coupling: a conditional model trains with 'gpr' coupling")
    elif not m["conditional"] and t["coupling"] == "gpr":
        errors.append("train.coupling: an unconditional model uses 'ot' or 'independent'")
    if t["normalization"] not in ("none", "mean-scale", "freq-zscore"):
        errors.append(f"train.normalization: unknown kind {t['normalization']!r}")
    if t["norm_scope"] not in ("dataset", "series"):
        errors.append(f"train.norm_scope: expected dataset or series, got {t['norm_scope']!r}")
    if not 0 < t["ema_momentum"] < 1:
        errors.append(f"train.ema_momentum: must lie in (0, 1), got {t['ema_momentum']}")
    if not t["lr"] > 0:
        errors.append(f"train.lr: must be > 0, got {t['lr']}")
    if any(not isinstance(x, int) or x < 1 for x in t["lags"]):
        errors.append(f"train.lags: expected positive integers, got {t['lags']}")
    t["lags"] = tuple(t["lags"])
    train = None
    if prior is not None:
        train = _build(
            TrainConfig,
            dict(t, seed=tree["seed"], prior=prior, hidden_dim=m["hidden_dim"],
                 num_blocks=m["num_blocks"], time_embed_dim=m["time_embed_dim"]),
            "train", errors,
        )

    s = dict(tree["sampler"])
    s["kappa_range"] = tuple(s["kappa_range"])
    if len(s["kappa_range"]) != 2 or not 0 < s["kappa_range"][0] <= s["kappa_range"][1] < 1:
        errors.append(f"sampler.kappa_range: expected [lo, hi] inside (0, 1), got {list(s['kappa_range'])}")
    if s["n_samples"] < 0:
        errors.append(f"sampler.n_samples: must be >= 0, got {s['n_samples']}")
    sampler = _build(SamplerConfig, dict(s, seed=tree["seed"]), "sampler", errors)
    if errors:
        raise ConfigError(errors)
    clean = {k: v for k, v in tree.items() if not k.startswith("_")}
    clean["prior"]["length_scale"] = prior.length_scale
    clean["train"]["coupling"] = t["coupling"]
    return RunConfig(clean, prior, train, sampler, synthetic)


def load_config(path=None, overrides: dict[str, Any] | None = None, env=None, base: dict | None = None) -> RunConfig:
    """Defaults <- ``base`` tree <- YAML file <- overrides <- ``TSFLOW_SEED``."""
    env = os.environ if env is None else env
    tree = default_tree()
    errors: list[str] = []
    if base is not None:
        _merge(tree, copy.deepcopy(base), "", errors)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError([f"config: file not found: {path}"])
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"config: cannot parse {path}: {exc}"]) from None
        if not isinstance(data, dict):
            raise ConfigError([f"config: {path} must hold a mapping"])
        _merge(tree, data, "", errors)
    for key, value in (overrides or {}).items():
        _set_dotted(tree, key, value, errors)
    if env.get(SEED_ENV):
        try:
            tree["seed"] = int(env[SEED_ENV])
        except ValueError:
            errors.append(f"{SEED_ENV}: expected an integer, got {env[SEED_ENV]!r}")
    return resolve(copy.deepcopy(tree), errors)
