"""Run configuration: flat ``key = value`` text merged with command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import SynthConfig
from .neck import VARIANTS, NeckConfig
from .train import TrainConfig

NO_C2_SUFFIX = "-no-c2"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    variant: str = "full"
    use_c2: bool = True
    out: str = "runs/default"
    precision: int = 32
    data_dir: str = "data/synth"
    # synthetic dataset; 1200 images split 1000/200/0
    synth_count: int = 1200
    synth_image_size: int = 128
    synth_classes: int = 2
    synth_hard_fraction: float = 0.16
    synth_size_mix: tuple[float, ...] = (0.4, 0.4, 0.2)
    synth_texture_amplitude: float = 15.0
    synth_blur_radius: float = 2.0
    synth_max_lesions: int = 3
    synth_empty_fraction: float = 0.1
    synth_train_fraction: float = 1000 / 1200
    synth_val_fraction: float = 200 / 1200
    # neck
    neck_width: int = 48
    neck_heads: int = 3
    neck_rates: tuple[int, ...] = (1, 2, 3)
    neck_kernel: int = 3
    # optimisation
    steps: int = 900
    batch_size: int = 8
    lr: float = 0.01
    warmup: int = 50
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 35.0
    # evaluation; empty checkpoint means <out>/checkpoint.bin
    checkpoint: str = ""
    predictions: str = ""
    eval_split: str = "val"
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    # ablation
    ablate_variants: tuple[str, ...] = ("fpn-baseline", "full", "full-no-c2")
    ablate_seeds: tuple[int, ...] = (1, 2, 3)
    jobs: int = 1
    gradcheck_blocks: tuple[str, ...] = ()  # empty: every registered block

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        for v in self.ablate_variants:
            parse_variant(v)
        if not self.ablate_seeds:
            raise ConfigError("ablate_seeds is empty")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    # ---- derived configs -------------------------------------------------
    def synth(self) -> SynthConfig:
        return SynthConfig(
            seed=self.seed, image_size=self.synth_image_size, count=self.synth_count, classes=self.synth_classes,
            hard_fraction=self.synth_hard_fraction, size_mix=tuple(self.synth_size_mix),
            texture_amplitude=self.synth_texture_amplitude, blur_radius=self.synth_blur_radius,
            max_lesions=self.synth_max_lesions, empty_fraction=self.synth_empty_fraction,
            train_fraction=self.synth_train_fraction, val_fraction=self.synth_val_fraction,
        )

    def neck(self) -> NeckConfig:
        return NeckConfig(self.neck_width, self.variant, self.use_c2, self.neck_heads, tuple(self.neck_rates), self.neck_kernel)

    def train(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr, warmup=self.warmup, momentum=self.momentum,
            weight_decay=self.weight_decay, grad_clip=self.grad_clip, seed=self.seed, precision=self.precision,
        )

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoint.bin"

    def with_variant(self, name: str, seed: int, out: str) -> "RunConfig":
        variant, use_c2 = parse_variant(name)
        return replace(self, variant=variant, use_c2=use_c2, seed=seed, out=out, checkpoint="", predictions="")

    # ---- text form -------------------------------------------------------
    def echo(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def parse_variant(name: str) -> tuple[str, bool]:
    """'full-no-c2' -> ('full', False); plain names keep C2."""
    base, use_c2 = (name[: -len(NO_C2_SUFFIX)], False) if name.endswith(NO_C2_SUFFIX) else (name, True)
    if base not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {VARIANTS} (optionally with {NO_C2_SUFFIX!r})")
    return base, use_c2


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(text_values: dict[str, str], overrides: dict[str, object]) -> RunConfig:
    """Defaults <- config file <- flag overrides (already typed)."""
    base = {f.name: f.default for f in fields(RunConfig)}
    values = {k: _parse(v, base[k], k) for k, v in text_values.items()}
    for k, v in overrides.items():
        if k not in base:
            raise ConfigError(f"unknown key {k!r}")
        if v is not None:
            values[k] = v
    return RunConfig(**{**base, **values})


def load(path: str | Path | None, overrides: dict[str, object] | None = None) -> RunConfig:
    text = {} if path is None else parse_text(Path(path).read_text(), str(path))
    return resolve(text, overrides or {})
