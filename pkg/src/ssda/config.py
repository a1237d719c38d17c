"""Run configuration files: JSON with nested sections, dotted-key overrides,
and validation that reports every problem at once."""

from __future__ import annotations

import json
from pathlib import Path

from .augment import AugOp, AugPolicy
from .data import SHIFT_KINDS, ShiftSpec
from .losses import HyperParams
from .training import PRESETS, TrainConfig, config_to_dict, default_dataset_dict


class ConfigError(ValueError):
    """One or more configuration problems; ``errors`` lists them all."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


def default_config_dict() -> dict:
    return config_to_dict(TrainConfig())


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        loaded = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from exc
    if not isinstance(loaded, dict):
        raise ConfigError([f"{path}: config must be a JSON object"])
    return loaded


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(text: str) -> tuple[str, object]:
    """Parse one ``dotted.key=value`` pair; values are JSON literals when
    they parse, bare strings otherwise."""
    if "=" not in text:
        raise ConfigError([f"override {text!r} is not of the form KEY=VALUE"])
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError([f"override {text!r} has an empty key"])
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(config_dict: dict, overrides: list[str]) -> dict:
    out = json.loads(json.dumps(config_dict))
    errors = []
    for text in overrides:
        key, value = parse_override(text)
        parts = key.split(".")
        node = out
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node.get(part), dict):
                errors.append(f"override key {key!r}: {'.'.join(parts[: i + 1])!r} is not a section")
                node = None
                break
            node = node[part]
        if node is None:
            continue
        leaf = parts[-1]
        if leaf not in node:
            errors.append(f"override key {key!r} does not exist in the configuration")
            continue
        node[leaf] = value
    if errors:
        raise ConfigError(errors)
    return out


def _validate_dataset(ds, errors: list[str]) -> None:
    if not isinstance(ds, dict):
        errors.append("dataset: must be an object")
        return
    kind = ds.get("kind", "synthetic")
    if kind == "synthetic":
        known = set(default_dataset_dict()) | {"seed"}
        for key in ds:
            if key not in known:
                errors.append(f"dataset.{key}: unknown synthetic benchmark field")
        try:
            spec_fields = {k: v for k, v in ds.items() if k != "kind"}
            spec = ShiftSpec(**{**spec_fields, "seed": spec_fields.get("seed", 0)})
            errors.extend(f"dataset: {msg}" for msg in spec.problems())
        except TypeError as exc:
            errors.append(f"dataset: {exc}")
    elif kind == "files":
        for key in ("source", "target", "manifest"):
            if not ds.get(key):
                errors.append(f"dataset.{key}: required for kind 'files'")
    else:
        errors.append(f"dataset.kind: must be 'synthetic' or 'files', got {kind!r}")
    if kind != "synthetic" and ds.get("shift_kind") not in (None, *SHIFT_KINDS):
        errors.append(f"dataset.shift_kind: unknown kind {ds.get('shift_kind')!r}")


def _build_policy(policy_dict, errors: list[str]) -> AugPolicy | None:
    try:
        weak_ops = tuple(AugOp(op["kind"], tuple(op["magnitude_range"]))
                         for op in policy_dict["weak_ops"])
        strong_ops = tuple(AugOp(op["kind"], tuple(op["magnitude_range"]))
                           for op in policy_dict["strong_ops"])
        return AugPolicy(weak_ops, strong_ops, int(policy_dict["strong_ops_per_draw"]))
    except (KeyError, TypeError, ValueError) as exc:
        errors.append(f"policy: {exc}")
        return None


def config_from_dict(config_dict: dict) -> TrainConfig:
    """Validate a config dict (collecting every problem) and build TrainConfig."""
    errors: list[str] = []
    defaults = default_config_dict()
    for key in config_dict:
        if key not in defaults:
            errors.append(f"unknown configuration key {key!r}")
    d = _merge(defaults, {k: v for k, v in config_dict.items() if k in defaults})

    def check_num(key, value, *, minimum=None, strict=False):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            errors.append(f"{key}: expected a number, got {value!r}")
            return False
        if minimum is not None and (value <= minimum if strict else value < minimum):
            op = ">" if strict else ">="
            errors.append(f"{key}: must be {op} {minimum}, got {value}")
            return False
        return True

    check_num("seed", d["seed"], minimum=0)
    check_num("lr", d["lr"], minimum=0, strict=True)
    check_num("momentum", d["momentum"], minimum=0)
    if isinstance(d["momentum"], (int, float)) and not d["momentum"] < 1:
        errors.append(f"momentum: must be < 1, got {d['momentum']}")
    for key in ("iterations_stage1", "iterations_stage2"):
        check_num(key, d[key], minimum=0)
    for key in ("batch_source", "batch_unlabeled", "batch_anchor", "k_shot"):
        check_num(key, d[key], minimum=1)
    check_num("eval_every", d["eval_every"], minimum=0)
    if d["eval_model"] not in ("student", "teacher"):
        errors.append(f"eval_model: must be 'student' or 'teacher', got {d['eval_model']!r}")
    if d["preset"] != "custom" and d["preset"] not in PRESETS:
        errors.append(f"preset: unknown preset {d['preset']!r}")
    if not isinstance(d["hidden_dims"], list) or not all(
        isinstance(h, int) and h > 0 for h in d["hidden_dims"]
    ):
        errors.append(f"hidden_dims: expected a list of positive ints, got {d['hidden_dims']!r}")

    hyper = None
    if isinstance(d["hyper"], dict):
        unknown = set(d["hyper"]) - set(defaults["hyper"])
        for key in sorted(unknown):
            errors.append(f"hyper.{key}: unknown hyperparameter")
        try:
            hyper = HyperParams(**{k: v for k, v in d["hyper"].items() if k not in unknown})
        except (TypeError, ValueError) as exc:
            errors.append(f"hyper: {exc}")
    else:
        errors.append("hyper: must be an object")

    policy = _build_policy(d["policy"], errors) if isinstance(d["policy"], dict) else None
    if policy is None and not isinstance(d["policy"], dict):
        errors.append("policy: must be an object")

    _validate_dataset(d["dataset"], errors)

    if errors:
        raise ConfigError(errors)
    return TrainConfig(
        seed=int(d["seed"]),
        hidden_dims=tuple(d["hidden_dims"]),
        lr=float(d["lr"]),
        momentum=float(d["momentum"]),
        iterations_stage1=int(d["iterations_stage1"]),
        iterations_stage2=int(d["iterations_stage2"]),
        batch_source=int(d["batch_source"]),
        batch_unlabeled=int(d["batch_unlabeled"]),
        batch_anchor=int(d["batch_anchor"]),
        k_shot=int(d["k_shot"]),
        eval_every=int(d["eval_every"]),
        eval_model=d["eval_model"],
        stage2_consistency_on=bool(d["stage2_consistency_on"]),
        stage1_use_anchors=bool(d["stage1_use_anchors"]),
        stage1_augment_source=bool(d["stage1_augment_source"]),
        checkpoint_dir=d["checkpoint_dir"],
        preset=d["preset"],
        hyper=hyper,
        policy=policy,
        dataset=d["dataset"],
    )


def resolve_config(config_path=None, overrides: list[str] | None = None) -> TrainConfig:
    """Defaults <- config file <- --set overrides, then validate."""
    d = default_config_dict()
    if config_path is not None:
        d = _merge(d, load_config_file(config_path))
    if overrides:
        d = apply_overrides(d, overrides)
    return config_from_dict(d)
