"""Flat key-value run configuration.

Files are lines of `section.key = value` with `#` comments. Every key has
a declared type and default; unknown keys and malformed values are
rejected by name. The effective configuration echoes back as sorted
`key = value` lines so a run directory always records exactly what ran.
"""

from __future__ import annotations

from .model import BlockSpec, ExitHeadSpec, ModelConfig
from .objectives import LABEL_SOURCES, MODES, LossConfig
from .perturb import KINDS, PerturbationConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "RunConfig", "parse_config_text", "load_config"]


class ConfigError(Exception):
    pass


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(x.strip()) for x in s.split(",") if x.strip())


def _parse_float_list(s: str) -> tuple[float, ...]:
    return tuple(float(x.strip()) for x in s.split(",") if x.strip())


def _parse_str_list(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _choice(*options: str):
    def parse(s: str) -> str:
        if s not in options:
            raise ValueError(f"expected one of {options}, got {s!r}")
        return s

    return parse


_DEFAULT_PHI_GRID = tuple(round(0.1 * i, 1) for i in range(11))

# key -> (parser, default)
_SPEC: dict[str, tuple] = {
    "data.source": (_choice("synthetic", "windows", "csv"), "synthetic"),
    "data.path": (str, ""),
    "data.num_classes": (int, 6),
    "data.channels": (int, 3),
    "data.length": (int, 400),
    "data.per_class": (int, 100),
    "data.groups": (int, 10),
    "data.noise_std": (float, 0.1),
    "data.seed": (int, 0),
    "data.train_fraction": (float, 0.7),
    "data.split_seed": (int, 0),
    "data.normalize": (_parse_bool, True),
    "model.filters": (_parse_int_list, (8, 16, 24, 32, 64)),
    "model.kernel": (int, 4),
    "model.pool": (int, 4),
    "model.hidden_units": (int, 32),
    "model.dropout": (float, 0.1),
    "model.dropout_blocks": (_parse_int_list, (2, 4)),
    "model.l2_rate": (float, 1e-4),
    "train.learning_rate": (float, 3e-4),
    "train.epochs": (int, 100),
    "train.batch_size": (int, 32),
    "train.seed": (int, 0),
    "train.eval_every": (int, 0),
    "loss.mode": (_choice(*MODES), "cet"),
    "loss.lambda": (float, 0.5),
    "loss.kappa_min": (float, 0.5),
    "loss.kappa_max": (float, 0.9),
    "loss.label_source": (_choice(*LABEL_SOURCES), "pseudo"),
    "loss.tau": (float, 2.0),
    "perturb.enabled": (_parse_str_list, KINDS),
    "perturb.additive_sigma": (float, 0.2),
    "perturb.multiplicative_sigma": (float, 0.2),
    "perturb.warp_sigma": (float, 0.3),
    "perturb.warp_knots": (int, 4),
    "perturb.mask_length": (int, 100),
    "eval.phi_grid": (_parse_float_list, _DEFAULT_PHI_GRID),
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return str(v)


class RunConfig:
    """Typed view over the flat key table, with builders for the
    dataclass configs the library consumes."""

    def __init__(self, values: dict | None = None):
        self.values = {k: d for k, (_, d) in _SPEC.items()}
        for k, v in (values or {}).items():
            if k not in _SPEC:
                raise ConfigError(f"unknown config key {k!r}")
            self.values[k] = v

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in _SPEC:
            raise ConfigError(f"unknown config key {key!r}")
        parser = _SPEC[key][0]
        try:
            self.values[key] = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: {exc}") from exc

    def echo_text(self) -> str:
        lines = [f"{k} = {_format_value(self.values[k])}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    # -- builders ------------------------------------------------------------

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lam=self["loss.lambda"],
            kappa_min=self["loss.kappa_min"],
            kappa_max=self["loss.kappa_max"],
            label_source=self["loss.label_source"],
            tau=self["loss.tau"],
            mode=self["loss.mode"],
        )

    def perturb_config(self) -> PerturbationConfig:
        return PerturbationConfig(
            additive_sigma=self["perturb.additive_sigma"],
            multiplicative_sigma=self["perturb.multiplicative_sigma"],
            warp_sigma=self["perturb.warp_sigma"],
            warp_knots=self["perturb.warp_knots"],
            mask_length=self["perturb.mask_length"],
            enabled=self["perturb.enabled"],
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self["train.learning_rate"],
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            seed=self["train.seed"],
            loss=self.loss_config(),
            perturb=self.perturb_config(),
            eval_every=self["train.eval_every"],
        )

    def model_config(self, channels_in: int, length_in: int, num_classes: int) -> ModelConfig:
        filters = self["model.filters"]
        dropout_blocks = set(self["model.dropout_blocks"])
        bad = [b for b in dropout_blocks if not 1 <= b <= len(filters)]
        if bad:
            raise ConfigError(f"config key 'model.dropout_blocks': block {bad[0]} outside 1..{len(filters)}")
        blocks = tuple(
            BlockSpec(
                filters=f,
                kernel=self["model.kernel"],
                pool=self["model.pool"],
                dropout_rate=self["model.dropout"] if i in dropout_blocks else 0.0,
            )
            for i, f in enumerate(filters, start=1)
        )
        return ModelConfig(
            channels_in=channels_in,
            length_in=length_in,
            num_classes=num_classes,
            blocks=blocks,
            head=ExitHeadSpec(hidden_units=self["model.hidden_units"], num_classes=num_classes),
            l2_rate=self["model.l2_rate"],
            seed=self["train.seed"],
        )

    def phi_grid(self) -> tuple[float, ...]:
        return self["eval.phi_grid"]


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key in seen:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            cfg.set(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}: line {lineno}: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))
