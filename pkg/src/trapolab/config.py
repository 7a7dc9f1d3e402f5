"""Flat ``section.key = value`` experiment configuration.

Every key has a type and a documented default; unknown keys are rejected.
Lists are comma separated.  ``#`` starts a comment.  The resolved config
(all defaults materialised) has a canonical text form whose hash names
run directories.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from trapolab.env import FamilyParams
from trapolab.errors import ConfigError, SpecInvalid
from trapolab.microgroup import MicroGroupSpec

SECTIONS = ("tasks", "policy", "trsft", "rl", "micro", "gmm", "train", "eval", "report")


@dataclass(frozen=True)
class Key:
    kind: str  # int, float, bool, str, ints, floats, strs
    default: Any
    doc: str


KEYS: dict = {
    "tasks.path": Key("str", "", "task file to load; empty means generate from the keys below"),
    "tasks.count": Key("int", 500, "number of tasks to generate"),
    "tasks.seed": Key("int", 0, "task generation seed"),
    "tasks.modulus": Key("int", 7, "arithmetic modulus (2..10)"),
    "tasks.ops": Key("strs", ("+", "*"), "operations drawn for chain steps"),
    "tasks.min_len": Key("int", 1, "shortest regular chain"),
    "tasks.max_len": Key("int", 3, "longest regular chain"),
    "tasks.hard_fraction": Key("float", 0.3, "fraction of hard-tail tasks"),
    "tasks.hard_min_len": Key("int", 6, "shortest hard chain"),
    "tasks.hard_max_len": Key("int", 8, "longest hard chain"),
    "policy.context_order": Key("int", 2, "tokens of history in the context key"),
    "policy.align_prompt": Key("bool", True, "include the current prompt step in the context key"),
    "policy.warmstart_steps": Key("int", 800, "SFT steps that build the initial policy (0 = uniform)"),
    "policy.warmstart_ops": Key("strs", ("+",), "operations seen during warm start"),
    "policy.warmstart_lr": Key("float", 2.0, "warm-start learning rate"),
    "policy.warmstart_batch": Key("int", 16, "warm-start sequences per step"),
    "policy.warmstart_tasks": Key("int", 200, "size of the warm-start task pool"),
    "policy.max_len": Key("int", 32, "maximum response length in tokens"),
    "policy.temperature": Key("float", 1.0, "rollout sampling temperature"),
    "trsft.alpha": Key("float", 0.1, "trust-region threshold; 0 recovers SFT"),
    "trsft.scale": Key("float", 1.0, "weight of the TrSFT term in the combined gradient"),
    "rl.group_size": Key("int", 8, "rollouts per prompt; must equal sum(micro.n) for micro-group regimes"),
    "rl.lr": Key("float", 0.5, "learning rate of every training update"),
    "micro.n": Key("ints", (4, 2, 1, 1), "sampling budget per micro-group"),
    "micro.L": Key("floats", (0.0, 0.2, 0.5, 1.0), "expert prefix ratio per micro-group"),
    "micro.t": Key("floats", (-1.0, 0.5, 0.7, 0.9), "pass-rate threshold per micro-group (guided iff rate <= t)"),
    "micro.trace": Key("bool", False, "write per-prompt guidance decisions"),
    "gmm.objective": Key("str", "sft", "sft or trsft"),
    "gmm.steps": Key("int", 1000, "gradient steps"),
    "gmm.lr": Key("float", 0.2, "learning rate"),
    "gmm.batch": Key("int", 256, "expert samples per step"),
    "gmm.sigma": Key("float", 0.6, "component std of the canonical expert and initial target"),
    "gmm.alpha_c_ratio": Key("float", 0.1, "TrSFT density threshold as a fraction of the initial peak density"),
    "gmm.eps": Key("float", 2e-3, "density level below which a point is void"),
    "gmm.kl_samples": Key("int", 4096, "fixed expert samples for the KL estimate"),
    "gmm.snapshots": Key("ints", (0, 50, 100, 1000), "steps whose parameters are saved"),
    "gmm.seed": Key("int", 0, "sampling seed"),
    "train.regime": Key("str", "trapo", "trapo, grpo_only, sft_only, sft_then_rl, microgroup_only or microgroup_plus_sft"),
    "train.steps": Key("int", 200, "optimizer steps"),
    "train.batch_size": Key("int", 16, "prompts per step"),
    "train.seed": Key("int", 0, "run seed"),
    "train.sft_fraction": Key("float", 0.5, "share of steps spent on SFT in sft_then_rl"),
    "train.metrics_every": Key("int", 1, "record metrics every this many steps"),
    "train.checkpoint_every": Key("int", 0, "write a checkpoint every this many steps (0 = final only)"),
    "train.workers": Key("int", 1, "rollout worker threads"),
    "eval.every": Key("int", 0, "in-training evaluation cadence in steps (0 = off)"),
    "eval.rollouts": Key("int", 4, "unguided rollouts per task for reward evaluation"),
    "eval.temperature": Key("float", 0.6, "sampling temperature for evaluation and pass@k"),
    "eval.n": Key("int", 8, "rollouts per task for pass@k"),
    "eval.k": Key("ints", (1, 2, 4, 8), "k values for pass@k"),
    "eval.seed": Key("int", 0, "evaluation seed"),
    "report.width": Key("float", 6.4, "figure width in inches"),
    "report.height": Key("float", 4.0, "figure height in inches"),
}


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _split(s: str) -> list:
    return [p.strip() for p in s.split(",") if p.strip()]


def parse_value(key: str, raw) -> Any:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    kind = KEYS[key].kind
    if not isinstance(raw, str):
        raw = format_value(kind, raw)
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return _parse_bool(raw)
        if kind == "str":
            return raw.strip().strip('"')
        if kind == "ints":
            return tuple(int(x) for x in _split(raw))
        if kind == "floats":
            return tuple(float(x) for x in _split(raw))
        if kind == "strs":
            return tuple(_split(raw))
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    raise AssertionError(kind)


def format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "floats", "strs"):
        return ", ".join(repr(float(v)) if kind == "floats" else str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = parse_value(key, raw)
    return out


class ExperimentConfig(Mapping):
    """Resolved configuration: every key present, typed."""

    def __init__(self, values: Mapping | None = None):
        resolved = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            resolved[k] = parse_value(k, v)
        self._values = resolved

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls(parse_text(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text)

    def with_overrides(self, overrides: Mapping) -> "ExperimentConfig":
        return ExperimentConfig({**self._values, **overrides})

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(KEYS[k].kind, v)}\n" for k, v in sorted(self._values.items()))

    def hash(self, exclude=("train.seed", "gmm.seed")) -> str:
        text = "".join(f"{k} = {format_value(KEYS[k].kind, v)}\n"
                       for k, v in sorted(self._values.items()) if k not in exclude)
        return hashlib.sha256(text.encode()).hexdigest()[:10]

    # -- typed views -------------------------------------------------------

    def family(self) -> FamilyParams:
        try:
            return FamilyParams(self["tasks.modulus"], self["tasks.ops"], self["tasks.min_len"],
                                self["tasks.max_len"], self["tasks.hard_fraction"],
                                self["tasks.hard_min_len"], self["tasks.hard_max_len"])
        except ValueError as exc:
            raise ConfigError(f"tasks: {exc}") from None

    def micro(self) -> MicroGroupSpec:
        spec = MicroGroupSpec(self["micro.n"], self["micro.L"], self["micro.t"])
        try:
            spec.validate()
        except SpecInvalid as exc:
            raise ConfigError(f"micro: {exc}") from None
        return spec

    def train_config(self, tasks, family: FamilyParams | None = None):
        from trapolab.trainer import MICRO_REGIMES, TrainRunConfig

        regime = self["train.regime"]
        micro = self.micro() if regime in MICRO_REGIMES else MicroGroupSpec.default()
        cfg = TrainRunConfig(
            regime=regime, tasks=tasks, family=family or self.family(),
            steps=self["train.steps"], batch_size=self["train.batch_size"],
            group_size=self["rl.group_size"], lr=self["rl.lr"],
            alpha=self["trsft.alpha"], trsft_scale=self["trsft.scale"], micro=micro,
            sft_fraction=self["train.sft_fraction"], context_order=self["policy.context_order"],
            align_prompt=self["policy.align_prompt"], warmstart_steps=self["policy.warmstart_steps"],
            warmstart_ops=self["policy.warmstart_ops"], warmstart_lr=self["policy.warmstart_lr"],
            warmstart_batch=self["policy.warmstart_batch"], warmstart_tasks=self["policy.warmstart_tasks"],
            max_len=self["policy.max_len"], temperature=self["policy.temperature"],
            eval_temperature=self["eval.temperature"],
            seed=self["train.seed"], metrics_every=self["train.metrics_every"],
            eval_every=self["eval.every"], eval_rollouts=self["eval.rollouts"],
            checkpoint_every=self["train.checkpoint_every"], workers=self["train.workers"],
        )
        return cfg.validate()


def documentation() -> str:
    """Markdown table of every key."""
    rows = ["| key | default | meaning |", "| --- | --- | --- |"]
    for k, spec in KEYS.items():
        rows.append(f"| `{k}` | `{format_value(spec.kind, spec.default)}` | {spec.doc} |")
    return "\n".join(rows)
