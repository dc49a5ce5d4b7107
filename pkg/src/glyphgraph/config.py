"""Flat key=value configuration with documented defaults.

Unknown keys are rejected; the effective config (defaults merged with
overrides) is echoed into the output directory of every training run.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError


@dataclass
class Config:
    # model
    d: int = 64                     # feature width shared across the pipeline
    patch_size: int = 8             # pixels per patch edge
    input_size: int = 64            # image edge in pixels
    encoder_blocks: int = 4         # transformer blocks in the patch encoder
    adapter_layers: int = 3         # adaptation layers on top of the encoder
    heads: int = 8                  # attention heads at every attention site
    reasoning_steps: int = 3        # graph reasoning iterations
    queries: int = 8                # learned pooling queries
    use_query_pool: bool = False    # enable learned-query pooling
    pyramid_levels: int = 3         # feature-pyramid depth
    tau_add: float = 0.5            # similarity above which an edge is added
    tau_prune: float = 0.3          # similarity below which an edge is pruned
    dynamic_edges: bool = True      # enable per-step edge updates
    max_regions: int = 4            # region proposals kept per glyph
    region_threshold: float = 1.5   # norm threshold multiplier for proposals
    region_reach: float = 0.75      # spatial-edge centroid reach (of grid diagonal)
    edge_dim: int = 8               # edge feature width
    dropout: float = 0.1            # adapter dropout rate
    leaky_slope: float = 0.2        # negative slope in attention logits
    # training
    lambda1: float = 1.0            # character loss weight
    lambda2: float = 0.5            # component loss weight
    lambda3: float = 0.25           # structural loss weight
    lambda4: float = 0.5            # semantic loss weight
    beta: float = 0.1               # adjacency term weight inside the structural loss
    batch: int = 8                  # samples per optimizer step
    phase_epochs: tuple = (30, 20, 50)
    phase_lrs: tuple = (1e-4, 5e-5, 5e-6)
    weight_decay: float = 0.01
    seed: int = 7
    split_mode: str = "instance"    # instance | character
    iou_threshold: float = 0.3      # region-to-component matching threshold
    augment: bool = True            # train-time shift/rotation jitter
    # paths
    dataset: str = ""
    out: str = ""

    def validate(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} must be divisible by heads={self.heads}")
        if self.input_size % self.patch_size != 0:
            raise ConfigError(f"input_size={self.input_size} not divisible by patch_size={self.patch_size}")
        if self.reasoning_steps < 1:
            raise ConfigError("reasoning_steps must be >= 1")
        if not (0.0 <= self.tau_prune < self.tau_add <= 1.0):
            raise ConfigError(f"need 0 <= tau_prune < tau_add <= 1, got {self.tau_prune}, {self.tau_add}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_regions < 1:
            raise ConfigError("max_regions must be >= 1")
        if self.pyramid_levels < 1:
            raise ConfigError("pyramid_levels must be >= 1")
        if len(self.phase_epochs) != 3 or len(self.phase_lrs) != 3:
            raise ConfigError("phase_epochs and phase_lrs must each list three values")
        for w in (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.beta):
            if w < 0:
                raise ConfigError("loss weights must be non-negative")
        if self.split_mode not in ("instance", "character"):
            raise ConfigError(f"split_mode must be instance or character, got {self.split_mode!r}")
        return self


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name, kind, raw):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"key {name}: expected a boolean, got {raw!r}")
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {name}: expected an integer, got {raw!r}") from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {name}: expected a number, got {raw!r}") from None
    if kind is tuple:
        parts = [p for p in raw.split(",") if p.strip()]
        try:
            return tuple(int(p) if p.strip().isdigit() else float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"key {name}: expected comma-separated numbers, got {raw!r}") from None
    return raw


def parse_config_text(text, base=None):
    """Apply key=value lines (with # comments) onto a base Config."""
    cfg = base or Config()
    typed = {f.name: type(getattr(Config(), f.name)) for f in fields(Config)}
    values = {f.name: getattr(cfg, f.name) for f in fields(Config)}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in values:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, typed[key], raw)
    return Config(**values).validate()


def load_config(path, base=None):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config_text(text, base)


def config_to_text(cfg):
    lines = []
    for f in fields(Config):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
