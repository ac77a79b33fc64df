"""Run configuration: defaults, JSON loading, validation with field paths."""

import dataclasses
import json
from dataclasses import dataclass

from s2qlab.errors import LoadError

ALGORITHMS = ("s2q", "qmix", "wqmix", "s2q_comm")
VARIANTS = ("full", "oracle", "independent", "no_wTD", "no_soft", "random")
MODES = ("neural", "tabular")
MIXERS = ("monotonic", "sum")


@dataclass
class RunConfig:
    # environment
    env: str = "matrix_fig1"          # matrix_fig1 | coord_reach | path to JSON
    preset: str = "easy"              # matrix off-diagonal preset
    off_diagonal: float = None        # overrides the preset when set
    steps_pre_shift: int = 20_000
    steps_post_shift: int = 50_000
    total_steps: int = 20_000         # used for non-matrix envs
    # algorithm
    algorithm: str = "s2q"
    variant: str = "full"
    mode: str = "neural"
    K: int = 2
    temperature: float = 0.1
    alpha: float = 1.0
    w_c: float = 0.9
    use_floor: bool = False
    floor_c: float = 0.1
    # behavior
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 10_000
    fix_prob: float = 0.5
    # learner
    buffer_capacity: int = 5000
    batch_size: int = 128
    target_update_interval: int = 200
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-5
    grad_clip_norm: float = 10.0
    gamma: float = None               # resolved from the environment spec
    tabular_lr: float = 0.2
    # architecture
    history_window: int = None        # resolved: 1 for matrix, 4 otherwise
    utility_hidden: int = 32
    critic_hidden: tuple = (64,)
    mixer: str = "monotonic"
    mixer_embed: int = 8
    hyper_hidden: int = 32
    latent_dim: int = 8
    coder_hidden: int = 32
    # run control
    seed: int = 0
    log_interval: int = 100
    adaptation_sustain: int = 500
    stop_when_adapted: bool = False
    out_dir: str = "runs/latest"

    def validate(self):
        def bad(field, msg):
            raise LoadError(f"config.{field}: {msg}")

        if self.algorithm not in ALGORITHMS:
            bad("algorithm", f"must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.variant not in VARIANTS:
            bad("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if self.mode not in MODES:
            bad("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.mixer not in MIXERS:
            bad("mixer", f"must be one of {MIXERS}, got {self.mixer!r}")
        if self.K < 0:
            bad("K", "must be nonnegative")
        if self.temperature <= 0:
            bad("temperature", "must be positive")
        if self.alpha < 0:
            bad("alpha", "must be nonnegative")
        if not (0 < self.w_c <= 1):
            bad("w_c", "must lie in (0, 1]")
        if self.floor_c <= 0:
            bad("floor_c", "must be positive")
        if not (0 <= self.fix_prob <= 1):
            bad("fix_prob", "must lie in [0, 1]")
        if self.epsilon_start < self.epsilon_end:
            bad("epsilon_start", "must be >= epsilon_end")
        for field in ("steps_pre_shift", "steps_post_shift", "total_steps",
                      "epsilon_anneal_steps", "buffer_capacity", "batch_size",
                      "target_update_interval", "log_interval",
                      "adaptation_sustain", "utility_hidden", "mixer_embed",
                      "hyper_hidden", "latent_dim", "coder_hidden"):
            if getattr(self, field) <= 0:
                bad(field, "must be positive")
        if self.history_window is not None and self.history_window <= 0:
            bad("history_window", "must be positive")
        if self.mode == "tabular" and self.algorithm != "s2q":
            bad("mode", "tabular mode supports algorithm='s2q' only")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["critic_hidden"] = list(self.critic_hidden)
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_INT_FIELDS = {n for n, f in _FIELDS.items() if f.type in (int, "int")}
_FLOAT_FIELDS = {n for n, f in _FIELDS.items() if f.type in (float, "float")}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise LoadError("config: top level must be an object")
    kwargs = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            raise LoadError(f"config.{key}: unknown key")
        try:
            if key == "critic_hidden":
                value = tuple(int(v) for v in value)
            elif key in _INT_FIELDS and value is not None:
                value = int(value)
            elif key in _FLOAT_FIELDS and value is not None:
                value = float(value)
        except (TypeError, ValueError):
            raise LoadError(f"config.{key}: cannot coerce {value!r}")
        kwargs[key] = value
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        raise LoadError(f"{path}: empty config file")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)
