"""Run configuration: documented key=value text files plus flag overrides.

Config files hold one ``key = value`` pair per line; ``#`` starts a
comment. Keys mirror the CLI flag names (dashes become underscores) and
flags always win over file values. Unknown keys are rejected so typos
fail loudly.
"""

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import DataFormatError

DEFAULT_DATA_DIR = os.environ.get("F4_DATA_DIR", "data")


@dataclass
class RunConfig:
    preset: str = "lenet-300-100"
    dims: str = ""  # comma-separated layer sizes for preset=custom
    batchnorm: bool = False  # custom preset only
    input_dim: int = 0  # 0 = preset default
    dataset: str = "mnist"  # mnist | synthetic
    data_dir: str = DEFAULT_DATA_DIR
    synth_train: int = 6000
    synth_test: int = 1500
    lam: float = 0.0
    lr: float = 1e-3
    omega_lr: float = 0.0  # 0 = follow lr
    ste_lr: float = 0.0  # fine-tune phase lr; 0 = follow lr
    lr_decay_epoch: int = 0  # 0 = constant lr; else decay from this epoch
    lr_decay_factor: float = 0.2
    epochs_pretrain: int = 10
    epochs_ste: int = 10
    batch_size: int = 128
    seed: int = 0
    reassign_every: int = 1  # steps between entropy-constrained reassignments
    omega_update_every: int = 1  # steps between basis-coefficient updates
    limit_train: int = 0  # 0 = full training set
    out: str = ""
    # energy proxy coefficients
    c_add: float = 1.0
    c_mul: float = 4.0
    c_fifo: float = 0.5
    repeat_discount: float = 0.5
    c_offchip: float = 100.0
    c_onchip: float = 5.0

    def model_dims(self):
        if self.preset != "custom":
            return None
        try:
            dims = tuple(int(d) for d in self.dims.split(",") if d.strip())
        except ValueError as e:
            raise DataFormatError(f"bad dims {self.dims!r}: {e}") from None
        if len(dims) < 2:
            raise DataFormatError("custom preset needs at least two dims")
        return dims

    def effective_omega_lr(self):
        return self.omega_lr if self.omega_lr > 0 else self.effective_ste_lr()

    def effective_ste_lr(self):
        return self.ste_lr if self.ste_lr > 0 else self.lr

    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {
    f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
    for f in fields(RunConfig)
}


def _coerce(key, raw):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise DataFormatError(f"bad boolean for {key}: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_file(path):
    """Key/value dict from a config file; values typed per RunConfig."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"config file not found: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise DataFormatError(f"{path}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise DataFormatError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as e:
            raise DataFormatError(f"{path}:{lineno}: {e}") from None
    return values


def build_config(file_path=None, overrides=None):
    """RunConfig from defaults, then config file, then flag overrides."""
    values = {}
    if file_path:
        values.update(parse_config_file(file_path))
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    return RunConfig(**values)
