"""Run configuration: INI-style sections with typed keys, presets and
line-numbered diagnostics.

Example::

    [run]
    preset = two-moons

    [train]
    epochs = 40
    seed = 3

Every key has a default (the ``[train]`` defaults are the reference
hyperparameters: lr 1e-4, batch 256, K 10, 5 warmup epochs, grad-norm 100,
weight decay 1e-5, 50 rampup epochs).  A preset replaces a subset of them;
keys in the file win over the preset.  Unknown sections or keys are errors.
"""
from __future__ import annotations

import configparser
import copy
import math
import re
from typing import Any, Dict, Optional

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "run": {"preset": ""},
    "data": {
        "dataset": "two-moons",  # two-moons | gaussian-grid | mnist14 | mnist28 | idx | csv
        "path": "data/mnist",     # directory with IDX files, or CSV file for dataset=csv
        "test_path": "",          # CSV test file for dataset=csv
        "n_train": 2000,
        "n_test": 2000,
        "noise": 0.05,
        "train_subset": 0,        # 0 = use all training samples
        "val_fraction": 0.1,
        "seed": 1234,
    },
    "model": {
        "n_blocks": 8,
        "hidden_width": 128,
        "scale_clamp": 2.0,
        "n_prototypes": 10,
        "kmeans_init": True,
        "kmeans_iters": 25,
        "class_prior": "",        # comma separated; empty = uniform
    },
    "train": {
        "lr": 1e-4,
        "batch_size": 256,
        "epochs": 150,
        "warmup_epochs": 5.0,
        "max_grad_norm": 100.0,
        "weight_decay": 1e-5,
        "cr_rampup_epochs": 50.0,
        "cr_target": "model",
        "ema_decay": 0.999,
        "use_ema": True,
        "pretrain_epochs": 0,
        "pretrain_lr": 0.0,       # 0 = same as lr
        "seed": 0,
    },
    "loss": {"lambda_cr": 1.0, "lambda_div": 1.0, "lambda_elbo": 1.0},
    "augment": {
        "hflip_prob": 0.5,
        "rotate_deg": 15.0,
        "translate_frac": 0.04,
        "shear_deg": 10.0,
        "jitter_sigma": 0.0,
    },
    "eval": {
        "bins": 15,
        "noise_s": 0.2,
        "truncation": "0.5,1,2,inf",
        "n_samples": 8,
        "patch": 4,
        "stride": 0,              # 0 = patch size
        "batch_restore": 8,
        "rot_images": 50,
        "interp_steps": 8,
        "seed": 0,
    },
    "output": {"dir": "runs/default"},
}

_MOONS = {
    "data": {"dataset": "two-moons", "n_train": 2000, "n_test": 2000, "noise": 0.05,
             "val_fraction": 0.1},
    "model": {"n_blocks": 4, "hidden_width": 64, "n_prototypes": 4, "kmeans_init": False},
    "train": {"lr": 3e-3, "batch_size": 128, "epochs": 40, "warmup_epochs": 1.0,
              "cr_rampup_epochs": 10.0, "ema_decay": 0.99},
    "loss": {"lambda_cr": 0.1, "lambda_div": 1.0, "lambda_elbo": 1.0},
    "augment": {"hflip_prob": 0.0, "rotate_deg": 0.0, "translate_frac": 0.0,
                "shear_deg": 0.0, "jitter_sigma": 0.02},
    "eval": {"noise_s": 0.01},
}

_MNIST = {
    "data": {"dataset": "mnist14", "train_subset": 10000, "val_fraction": 0.0},
    "model": {"n_blocks": 8, "hidden_width": 128, "n_prototypes": 5},
    "train": {"lr": 1e-3, "batch_size": 128, "epochs": 20, "warmup_epochs": 1.0,
              "cr_rampup_epochs": 5.0},
    "loss": {"lambda_cr": 0.05, "lambda_div": 1.0, "lambda_elbo": 0.05},
    # digits are not mirror symmetric
    "augment": {"hflip_prob": 0.0, "rotate_deg": 10.0},
    "eval": {"patch": 4, "noise_s": 0.2},
}

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "two-moons": _MOONS,
    "gaussian-grid": {
        **_MOONS,
        "data": {"dataset": "gaussian-grid", "n_train": 3000, "n_test": 3000,
                 "val_fraction": 0.1},
        "model": {"n_blocks": 4, "hidden_width": 64, "n_prototypes": 3, "kmeans_init": True},
    },
    "mnist14": _MNIST,
    "mnist28": {**_MNIST, "data": {"dataset": "mnist28", "train_subset": 10000,
                                   "val_fraction": 0.0},
                "model": {"n_blocks": 8, "hidden_width": 256, "n_prototypes": 5},
                "loss": {"lambda_cr": 0.0125, "lambda_div": 1.0, "lambda_elbo": 0.0125},
                "eval": {"patch": 4}},
}


class ConfigError(ValueError):
    pass


def _coerce(section: str, key: str, raw: str, default: Any, where: str) -> Any:
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}[{section}] {key}: cannot parse {raw!r} as "
                          f"{type(default).__name__}") from None


def _line_of(text: str, section: Optional[str], key: Optional[str] = None) -> str:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return f"line {n}: "
            continue
        if key is not None and current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return f"line {n}: "
    return ""


def merge(base: Dict, override: Dict) -> Dict:
    out = copy.deepcopy(base)
    for section, values in override.items():
        if section not in out:
            raise ConfigError(f"[{section}]: unknown section")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"[{section}] {key}: unknown key")
            out[section][key] = value
    return out


def preset(name: str) -> Dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(PRESETS)})")
    return merge(DEFAULTS, PRESETS[name])


def parse(text: str, preset_name: Optional[str] = None) -> Dict:
    """Parse config text into a full nested dict of typed values."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as err:
        raise ConfigError(str(err).splitlines()[0]) from None
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"{_line_of(text, section)}[{section}]: unknown section")
        for key in cp[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{_line_of(text, section, key)}[{section}] {key}: unknown key")
    name = preset_name or (cp["run"].get("preset", "").strip() if cp.has_section("run") else "")
    cfg = preset(name) if name else copy.deepcopy(DEFAULTS)
    cfg["run"]["preset"] = name
    for section in cp.sections():
        for key, raw in cp[section].items():
            if section == "run" and key == "preset":
                continue
            cfg[section][key] = _coerce(section, key, raw, DEFAULTS[section][key],
                                        _line_of(text, section, key))
    return cfg


def load(path, preset_name: Optional[str] = None) -> Dict:
    with open(path) as f:
        return parse(f.read(), preset_name)


def apply_overrides(cfg: Dict, assignments) -> Dict:
    """Apply ``section.key=value`` strings."""
    for item in assignments or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if section not in DEFAULTS:
            raise ConfigError(f"[{section}]: unknown section")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"[{section}] {key}: unknown key")
        cfg[section][key] = _coerce(section, key, raw, DEFAULTS[section][key], "override ")
    return cfg


def dumps(cfg: Dict) -> str:
    lines = []
    for section in DEFAULTS:
        lines.append(f"[{section}]")
        for key in DEFAULTS[section]:
            v = cfg[section][key]
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v) if math.isfinite(v) else str(v)
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)


def estimator_params(cfg: Dict) -> Dict[str, Any]:
    """Keyword arguments for :class:`ProtoFlowClassifier`."""
    m, t, l, a = cfg["model"], cfg["train"], cfg["loss"], cfg["augment"]
    prior = [float(v) for v in m["class_prior"].split(",")] if m["class_prior"] else None
    return dict(
        n_prototypes=m["n_prototypes"], n_blocks=m["n_blocks"], hidden_width=m["hidden_width"],
        scale_clamp=m["scale_clamp"], lr=t["lr"], batch_size=t["batch_size"],
        epochs=t["epochs"], warmup_epochs=t["warmup_epochs"], max_grad_norm=t["max_grad_norm"],
        weight_decay=t["weight_decay"], lambda_cr=l["lambda_cr"], lambda_div=l["lambda_div"],
        lambda_elbo=l["lambda_elbo"], cr_rampup_epochs=t["cr_rampup_epochs"],
        cr_target=t["cr_target"], ema_decay=t["ema_decay"], use_ema=t["use_ema"],
        pretrain_epochs=t["pretrain_epochs"], pretrain_lr=t["pretrain_lr"] or None,
        kmeans_init=m["kmeans_init"], kmeans_iters=m["kmeans_iters"],
        augmentation=dict(a), class_prior=prior, val_fraction=cfg["data"]["val_fraction"],
        random_state=t["seed"],
    )
