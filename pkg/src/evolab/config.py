"""Run configuration: INI schema, defaults, presets, validation.

A run is fully described by seven sections. Every key has a default, so a
minimal config is just the section headers; validation reports all unknown
or invalid entries at once. Resolved configs render back to canonical INI
text, which is what run manifests snapshot.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

from .dynamics import TemperatureControllerConfig
from .env import EnvConfig
from .errors import ConfigError
from .policy import FeatureSpec

SECTION_ORDER = ("env", "policy", "reward", "method", "unlabeled", "dynamics", "budget")

DEFAULTS: dict[str, dict[str, str]] = {
    "env": {
        "seed": "2024",
        "rows_min": "2",
        "rows_max": "4",
        "cols_min": "2",
        "cols_max": "4",
        "hops_min": "1",
        "hops_max": "3",
        "train_queries": "500",
        "val_queries": "200",
        "unlabeled_queries": "500",
    },
    "policy": {
        "rollouts_per_query": "16",
        "base_lr": "0.08",
        "warmup_ratio": "0.1",
        "batch_size": "8",
        "feature_buckets": "28",
        "generic_scale": "0.25",
    },
    "reward": {
        "use_prm": "false",
        "strategy": "none",
        "k": "2",
        "alpha": "0.2",
        "mc_completions": "8",
        "prm_questions": "200",
        "prm_rollouts": "16",
        "prm_max_rows_per_question": "4",
        "prm_train_steps": "600",
        "prm_lr": "0.05",
        "prm_batch_rows": "16",
        "prm_holdout_fraction": "0.2",
        "completer_multiplier": "5",
    },
    "method": {
        "mode": "evolve",
        "init_from": "last",
        "optimizer_continuous": "true",
        "interval_fraction": "0.25",
    },
    "unlabeled": {
        "enabled": "false",
        "t_mixin": "0.0",
        "oracle": "false",
        "vote_weight": "prm_aggregate",
        "ratio": "1.0",
    },
    "dynamics": {
        "monitor_temperatures": "0.5,0.7,1.0,1.2,1.5,1.7,2.0",
        "pass_k_values": "1,2,4,8,16",
        "eval_every": "1",
        "controller_enabled": "false",
        "controller_grid": "0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0,1.1,1.2,1.3,1.4,1.5,1.6",
        "controller_period": "2",
        "initial_temperature": "1.0",
        "controller_rollouts": "16",
    },
    "budget": {
        "total_steps": "2000",
        "warmup_steps": "300",
        "warmup_cap_per_query": "4",
        "max_iterations": "1000",
    },
}

INTERVAL_CHOICES = (0.0625, 0.125, 0.25, 0.5, 1.0)
T_MIXIN_CHOICES = (0.0, 0.25, 0.5, 0.75)


@dataclass(frozen=True)
class TrainMethodConfig:
    mode: str = "evolve"                 # evolve | sft_only
    init_from: str = "last"              # last | first
    optimizer_continuous: bool = True
    interval_fraction: float = 0.25

    def validate(self) -> None:
        problems = []
        if self.mode not in ("evolve", "sft_only"):
            problems.append(f"method.mode must be 'evolve' or 'sft_only', got {self.mode!r}")
        if self.init_from not in ("last", "first"):
            problems.append(f"method.init_from must be 'last' or 'first', got {self.init_from!r}")
        if self.init_from == "first" and self.optimizer_continuous:
            problems.append(
                "method: optimizer continuity from a reset model is incoherent "
                "(init_from=first with optimizer_continuous=true)"
            )
        if self.interval_fraction not in INTERVAL_CHOICES:
            problems.append(
                f"method.interval_fraction must be one of {INTERVAL_CHOICES}, "
                f"got {self.interval_fraction}"
            )
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class UnlabeledConfig:
    enabled: bool = False
    t_mixin: float = 0.0
    oracle: bool = False
    vote_weight: str = "prm_aggregate"   # prm_aggregate | uniform
    ratio: float = 1.0

    def validate(self) -> None:
        problems = []
        if self.t_mixin not in T_MIXIN_CHOICES:
            problems.append(
                f"unlabeled.t_mixin must be one of {T_MIXIN_CHOICES}, got {self.t_mixin}"
            )
        if self.vote_weight not in ("prm_aggregate", "uniform"):
            problems.append(
                "unlabeled.vote_weight must be 'prm_aggregate' or 'uniform', "
                f"got {self.vote_weight!r}"
            )
        if self.ratio <= 0:
            problems.append(f"unlabeled.ratio must be positive, got {self.ratio}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class RewardConfig:
    use_prm: bool = False
    strategy: str = "none"               # none | topk | threshold | randomk
    k: int = 2
    alpha: float = 0.2
    mc_completions: int = 8
    prm_questions: int = 200
    prm_rollouts: int = 16
    prm_max_rows_per_question: int = 4
    prm_train_steps: int = 600
    prm_lr: float = 0.05
    prm_batch_rows: int = 16
    prm_holdout_fraction: float = 0.2
    completer_multiplier: int = 5

    def validate(self) -> None:
        problems = []
        if self.strategy not in ("none", "topk", "threshold", "randomk"):
            problems.append(f"reward.strategy must be none/topk/threshold/randomk, got {self.strategy!r}")
        if self.k < 1:
            problems.append(f"reward.k must be >= 1, got {self.k}")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append(f"reward.alpha must be in [0, 1], got {self.alpha}")
        if self.mc_completions < 1:
            problems.append(f"reward.mc_completions must be >= 1, got {self.mc_completions}")
        if not 0.0 <= self.prm_holdout_fraction < 1.0:
            problems.append(
                f"reward.prm_holdout_fraction must be in [0, 1), got {self.prm_holdout_fraction}"
            )
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class PolicyConfig:
    rollouts_per_query: int = 16
    base_lr: float = 0.08
    warmup_ratio: float = 0.1
    batch_size: int = 8
    feature_buckets: int = 28
    generic_scale: float = 0.25

    def validate(self) -> None:
        problems = []
        if self.rollouts_per_query < 1:
            problems.append(f"policy.rollouts_per_query must be >= 1, got {self.rollouts_per_query}")
        if self.base_lr <= 0:
            problems.append(f"policy.base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            problems.append(f"policy.batch_size must be >= 1, got {self.batch_size}")
        if self.feature_buckets < 1:
            problems.append(f"policy.feature_buckets must be >= 1, got {self.feature_buckets}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class EnvSetup:
    cfg: EnvConfig = field(default_factory=EnvConfig)
    seed: int = 2024
    train_queries: int = 500
    val_queries: int = 200
    unlabeled_queries: int = 500

    def validate(self) -> None:
        self.cfg.validate()
        problems = []
        if self.train_queries < 1:
            problems.append(f"env.train_queries must be >= 1, got {self.train_queries}")
        if self.val_queries < 1:
            problems.append(f"env.val_queries must be >= 1, got {self.val_queries}")
        if self.unlabeled_queries < 0:
            problems.append(f"env.unlabeled_queries must be >= 0, got {self.unlabeled_queries}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class DynamicsConfig:
    monitor_temperatures: tuple[float, ...] = (0.5, 0.7, 1.0, 1.2, 1.5, 1.7, 2.0)
    pass_k_values: tuple[int, ...] = (1, 2, 4, 8, 16)
    eval_every: int = 1
    controller_enabled: bool = False
    controller: TemperatureControllerConfig = field(default_factory=TemperatureControllerConfig)
    controller_rollouts: int = 16

    def validate(self) -> None:
        problems = []
        if not self.monitor_temperatures or any(t <= 0 for t in self.monitor_temperatures):
            problems.append("dynamics.monitor_temperatures must be non-empty and positive")
        if not self.pass_k_values or any(k < 1 for k in self.pass_k_values):
            problems.append("dynamics.pass_k_values must be non-empty positive integers")
        if self.eval_every < 1:
            problems.append(f"dynamics.eval_every must be >= 1, got {self.eval_every}")
        if problems:
            raise ConfigError("; ".join(problems))
        self.controller.validate()


@dataclass(frozen=True)
class BudgetConfig:
    total_steps: int = 2000
    warmup_steps: int = 300
    warmup_cap_per_query: int = 4
    max_iterations: int = 1000

    def validate(self) -> None:
        problems = []
        if self.total_steps < 1:
            problems.append(f"budget.total_steps must be >= 1, got {self.total_steps}")
        if self.warmup_steps < 0:
            problems.append(f"budget.warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.warmup_cap_per_query < 1:
            problems.append(
                f"budget.warmup_cap_per_query must be >= 1, got {self.warmup_cap_per_query}"
            )
        if self.max_iterations < 1:
            problems.append(f"budget.max_iterations must be >= 1, got {self.max_iterations}")
        if problems:
            raise ConfigError("; ".join(problems))


@dataclass(frozen=True)
class RunConfig:
    env: EnvSetup
    policy: PolicyConfig
    reward: RewardConfig
    method: TrainMethodConfig
    unlabeled: UnlabeledConfig
    dynamics: DynamicsConfig
    budget: BudgetConfig

    def feature_spec(self) -> FeatureSpec:
        return FeatureSpec(
            n_buckets=self.policy.feature_buckets,
            generic_scale=self.policy.generic_scale,
            max_steps=self.env.cfg.max_steps,
        )

    def validate(self) -> None:
        for sub in (self.env, self.policy, self.reward, self.method, self.unlabeled,
                    self.dynamics, self.budget):
            sub.validate()


# --- presets -----------------------------------------------------------------

def _continuous_base() -> dict:
    return {
        ("method", "mode"): "evolve",
        ("method", "init_from"): "last",
        ("method", "optimizer_continuous"): "true",
        ("method", "interval_fraction"): "0.25",
        ("reward", "use_prm"): "false",
        ("reward", "strategy"): "none",
    }


def _prm_topk(base: dict) -> dict:
    out = dict(base)
    out[("reward", "use_prm")] = "true"
    out[("reward", "strategy")] = "topk"
    out[("reward", "k")] = "2"
    return out


def _build_presets() -> dict[str, dict]:
    presets: dict[str, dict] = {}
    presets["sft_only"] = {("method", "mode"): "sft_only"}
    presets["iterative_rft"] = {
        ("method", "mode"): "evolve",
        ("method", "init_from"): "last",
        ("method", "optimizer_continuous"): "false",
        ("method", "interval_fraction"): "1.0",
        ("reward", "use_prm"): "false",
        ("reward", "strategy"): "none",
    }
    presets["rest_em"] = dict(presets["iterative_rft"])
    presets["rest_em"][("method", "init_from")] = "first"
    presets["continuous"] = _continuous_base()
    random2 = _continuous_base()
    random2[("reward", "strategy")] = "randomk"
    random2[("reward", "k")] = "2"
    presets["continuous_random2"] = random2
    thresh = _prm_topk(_continuous_base())
    thresh[("reward", "strategy")] = "threshold"
    thresh[("reward", "alpha")] = "0.2"
    presets["continuous_prm_threshold"] = thresh
    presets["continuous_prm_topk"] = _prm_topk(_continuous_base())
    mstar = _prm_topk(_continuous_base())
    mstar[("dynamics", "controller_enabled")] = "true"
    presets["mstar"] = mstar
    oracle = _continuous_base()
    oracle.update({
        ("unlabeled", "enabled"): "true",
        ("unlabeled", "oracle"): "true",
        ("unlabeled", "t_mixin"): "0.0",
    })
    presets["unlabeled_oracle_t0"] = oracle
    oracle_prm = _prm_topk(_continuous_base())
    oracle_prm.update({
        ("unlabeled", "enabled"): "true",
        ("unlabeled", "oracle"): "true",
        ("unlabeled", "t_mixin"): "0.0",
    })
    presets["unlabeled_oracle_prm_t0"] = oracle_prm
    for frac, name in ((0.0, "t0"), (0.25, "t25"), (0.5, "t50"), (0.75, "t75")):
        p = _prm_topk(_continuous_base())
        p.update({
            ("unlabeled", "enabled"): "true",
            ("unlabeled", "oracle"): "false",
            ("unlabeled", "t_mixin"): str(frac),
        })
        presets[f"unlabeled_prm_{name}"] = p
    return presets


PRESETS = _build_presets()


# --- parsing / rendering -----------------------------------------------------

def _parse_bool(raw: str, where: str, problems: list[str]) -> bool:
    if raw.lower() in ("true", "1", "yes", "on"):
        return True
    if raw.lower() in ("false", "0", "no", "off"):
        return False
    problems.append(f"{where}: expected a boolean, got {raw!r}")
    return False


def _parse_int(raw: str, where: str, problems: list[str]) -> int:
    try:
        return int(raw)
    except ValueError:
        problems.append(f"{where}: expected an integer, got {raw!r}")
        return 0


def _parse_float(raw: str, where: str, problems: list[str]) -> float:
    try:
        return float(raw)
    except ValueError:
        problems.append(f"{where}: expected a number, got {raw!r}")
        return 0.0


def _parse_float_list(raw: str, where: str, problems: list[str]) -> tuple[float, ...]:
    try:
        return tuple(float(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError:
        problems.append(f"{where}: expected a comma-separated list of numbers, got {raw!r}")
        return ()


def _parse_int_list(raw: str, where: str, problems: list[str]) -> tuple[int, ...]:
    try:
        return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError:
        problems.append(f"{where}: expected a comma-separated list of integers, got {raw!r}")
        return ()


def _merge(config_text: str | None, preset: str | None) -> dict[str, dict[str, str]]:
    merged = {s: dict(kv) for s, kv in DEFAULTS.items()}
    problems: list[str] = []
    if config_text is not None:
        parser = configparser.ConfigParser()
        try:
            parser.read_string(config_text)
        except configparser.Error as exc:
            raise ConfigError(f"config does not parse: {exc}") from exc
        for section in SECTION_ORDER:
            if not parser.has_section(section):
                problems.append(f"missing section [{section}]")
        for section in parser.sections():
            if section not in DEFAULTS:
                problems.append(f"unknown section [{section}]")
                continue
            for key, value in parser.items(section):
                if key not in DEFAULTS[section]:
                    problems.append(f"unknown key {section}.{key}")
                else:
                    merged[section][key] = value.strip()
    if preset is not None:
        if preset not in PRESETS:
            known = ", ".join(sorted(PRESETS))
            raise ConfigError(f"unknown preset {preset!r}; known presets: {known}")
        for (section, key), value in PRESETS[preset].items():
            merged[section][key] = value
    if problems:
        raise ConfigError("; ".join(problems))
    return merged


def _build(merged: dict[str, dict[str, str]]) -> RunConfig:
    problems: list[str] = []
    e, p, r = merged["env"], merged["policy"], merged["reward"]
    m, u, d, b = merged["method"], merged["unlabeled"], merged["dynamics"], merged["budget"]

    env = EnvSetup(
        cfg=EnvConfig(
            rows_min=_parse_int(e["rows_min"], "env.rows_min", problems),
            rows_max=_parse_int(e["rows_max"], "env.rows_max", problems),
            cols_min=_parse_int(e["cols_min"], "env.cols_min", problems),
            cols_max=_parse_int(e["cols_max"], "env.cols_max", problems),
            hops_min=_parse_int(e["hops_min"], "env.hops_min", problems),
            hops_max=_parse_int(e["hops_max"], "env.hops_max", problems),
        ),
        seed=_parse_int(e["seed"], "env.seed", problems),
        train_queries=_parse_int(e["train_queries"], "env.train_queries", problems),
        val_queries=_parse_int(e["val_queries"], "env.val_queries", problems),
        unlabeled_queries=_parse_int(e["unlabeled_queries"], "env.unlabeled_queries", problems),
    )
    policy = PolicyConfig(
        rollouts_per_query=_parse_int(p["rollouts_per_query"], "policy.rollouts_per_query", problems),
        base_lr=_parse_float(p["base_lr"], "policy.base_lr", problems),
        warmup_ratio=_parse_float(p["warmup_ratio"], "policy.warmup_ratio", problems),
        batch_size=_parse_int(p["batch_size"], "policy.batch_size", problems),
        feature_buckets=_parse_int(p["feature_buckets"], "policy.feature_buckets", problems),
        generic_scale=_parse_float(p["generic_scale"], "policy.generic_scale", problems),
    )
    reward = RewardConfig(
        use_prm=_parse_bool(r["use_prm"], "reward.use_prm", problems),
        strategy=r["strategy"],
        k=_parse_int(r["k"], "reward.k", problems),
        alpha=_parse_float(r["alpha"], "reward.alpha", problems),
        mc_completions=_parse_int(r["mc_completions"], "reward.mc_completions", problems),
        prm_questions=_parse_int(r["prm_questions"], "reward.prm_questions", problems),
        prm_rollouts=_parse_int(r["prm_rollouts"], "reward.prm_rollouts", problems),
        prm_max_rows_per_question=_parse_int(
            r["prm_max_rows_per_question"], "reward.prm_max_rows_per_question", problems),
        prm_train_steps=_parse_int(r["prm_train_steps"], "reward.prm_train_steps", problems),
        prm_lr=_parse_float(r["prm_lr"], "reward.prm_lr", problems),
        prm_batch_rows=_parse_int(r["prm_batch_rows"], "reward.prm_batch_rows", problems),
        prm_holdout_fraction=_parse_float(
            r["prm_holdout_fraction"], "reward.prm_holdout_fraction", problems),
        completer_multiplier=_parse_int(
            r["completer_multiplier"], "reward.completer_multiplier", problems),
    )
    method = TrainMethodConfig(
        mode=m["mode"],
        init_from=m["init_from"],
        optimizer_continuous=_parse_bool(
            m["optimizer_continuous"], "method.optimizer_continuous", problems),
        interval_fraction=_parse_float(m["interval_fraction"], "method.interval_fraction", problems),
    )
    unlabeled = UnlabeledConfig(
        enabled=_parse_bool(u["enabled"], "unlabeled.enabled", problems),
        t_mixin=_parse_float(u["t_mixin"], "unlabeled.t_mixin", problems),
        oracle=_parse_bool(u["oracle"], "unlabeled.oracle", problems),
        vote_weight=u["vote_weight"],
        ratio=_parse_float(u["ratio"], "unlabeled.ratio", problems),
    )
    dynamics = DynamicsConfig(
        monitor_temperatures=_parse_float_list(
            d["monitor_temperatures"], "dynamics.monitor_temperatures", problems),
        pass_k_values=_parse_int_list(d["pass_k_values"], "dynamics.pass_k_values", problems),
        eval_every=_parse_int(d["eval_every"], "dynamics.eval_every", problems),
        controller_enabled=_parse_bool(
            d["controller_enabled"], "dynamics.controller_enabled", problems),
        controller=TemperatureControllerConfig(
            grid=_parse_float_list(d["controller_grid"], "dynamics.controller_grid", problems),
            period=_parse_int(d["controller_period"], "dynamics.controller_period", problems),
            initial=_parse_float(
                d["initial_temperature"], "dynamics.initial_temperature", problems),
        ),
        controller_rollouts=_parse_int(
            d["controller_rollouts"], "dynamics.controller_rollouts", problems),
    )
    budget = BudgetConfig(
        total_steps=_parse_int(b["total_steps"], "budget.total_steps", problems),
        warmup_steps=_parse_int(b["warmup_steps"], "budget.warmup_steps", problems),
        warmup_cap_per_query=_parse_int(
            b["warmup_cap_per_query"], "budget.warmup_cap_per_query", problems),
        max_iterations=_parse_int(b["max_iterations"], "budget.max_iterations", problems),
    )
    if problems:
        raise ConfigError("; ".join(problems))
    cfg = RunConfig(env, policy, reward, method, unlabeled, dynamics, budget)
    cfg.validate()
    return cfg


def render_ini(merged: dict[str, dict[str, str]]) -> str:
    out = io.StringIO()
    for section in SECTION_ORDER:
        out.write(f"[{section}]\n")
        for key in DEFAULTS[section]:
            out.write(f"{key} = {merged[section][key]}\n")
        out.write("\n")
    return out.getvalue()


def resolve_config(config_text: str | None = None, preset: str | None = None) -> tuple[RunConfig, str]:
    """Merge defaults, config file, and preset; return (config, canonical INI)."""
    merged = _merge(config_text, preset)
    cfg = _build(merged)
    return cfg, render_ini(merged)
