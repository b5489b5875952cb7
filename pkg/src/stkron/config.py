"""Flat ``key = value`` experiment configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Optional, Tuple, Union

from .errors import BadInputError

ESTIMATORS = ("sample", "kron", "dc-kron", "toeplitz-kron", "nonrect", "multires")
LABEL_RULES = ("center", "any", "majority")


@dataclass
class ExperimentConfig:
    """Everything ``fit`` and ``score`` need besides the tensor.

    ``tie`` groups ``rows x cols`` tiles of neighbouring blocks onto one
    shared model (``None`` fits every block separately).  ``crop`` is
    ``(row0, row1, col0, col1)`` applied to every frame before blocking.
    ``halo`` is a cell count, ``"block"`` (one block's extent) or ``None``
    (whole scale).
    """

    block_grid: Tuple[int, int] = (1, 1)
    tie: Optional[Tuple[int, int]] = None
    clip_frames: int = 20
    model_frames: int = 8
    window_stride: int = 1
    test_stride: int = 4
    buffer_frames: int = 10
    calibration_folds: int = 0
    leave_out: bool = True
    estimator: str = "kron"
    rank: int = 3
    inscale_rank: Optional[int] = None
    shrinkage: float = 0.0
    ridge: float = 0.05
    lam: float = 0.0
    delta_n: int = 0
    halo: Union[None, int, str] = "block"
    cut_level: Optional[int] = None
    em_iter: int = 30
    extension: str = "markov"
    shifts: List[Tuple[int, int]] = None
    alpha_low: float = 0.05
    alpha_high: float = 0.05
    patch_grid: Tuple[int, int] = (2, 2)
    patch_alpha: float = 0.05
    crop: Optional[Tuple[int, int, int, int]] = None
    label_rule: str = "center"
    seed: int = 0

    def __post_init__(self):
        if self.shifts is None:
            self.shifts = []
        self.validate()

    def validate(self) -> None:
        if self.estimator not in ESTIMATORS:
            raise BadInputError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.extension not in ("banded", "markov"):
            raise BadInputError("extension must be 'banded' or 'markov'")
        if self.label_rule not in LABEL_RULES:
            raise BadInputError(f"label_rule must be one of {LABEL_RULES}")
        if self.model_frames < 1 or self.clip_frames < self.model_frames:
            raise BadInputError("need 1 <= model_frames <= clip_frames")
        if self.buffer_frames < 0:
            raise BadInputError("buffer_frames must be >= 0")
        if self.calibration_folds < 0:
            raise BadInputError("calibration_folds must be >= 0")
        if self.inscale_rank is not None and self.inscale_rank < 1:
            raise BadInputError("inscale_rank must be >= 1 or none")
        if self.window_stride < 1 or self.test_stride < 1:
            raise BadInputError("strides must be >= 1")
        if min(self.block_grid) < 1:
            raise BadInputError("block_grid entries must be >= 1")
        if self.tie is not None and (self.block_grid[0] % self.tie[0] or self.block_grid[1] % self.tie[1]):
            raise BadInputError("tie tiles must divide the block grid")
        if self.rank < 1:
            raise BadInputError("rank must be >= 1")
        if not 0 <= self.shrinkage <= 1:
            raise BadInputError("shrinkage must lie in [0, 1]")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BadInputError(f"config line {no}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            key = {"lambda": "lam", "tie_groups": "tie"}.get(key, key)
            if key not in known:
                raise BadInputError(f"config line {no}: unknown key {key!r}")
            try:
                values[key] = _parse(key, val)
            except ValueError as exc:
                raise BadInputError(f"config line {no}: bad value for {key}: {val!r}") from exc
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise BadInputError(f"cannot read config {path}: {exc}") from exc

    def replace(self, **kw) -> "ExperimentConfig":
        d = asdict(self)
        d.update(kw)
        return ExperimentConfig(**d)


def _pair(val: str) -> Tuple[int, int]:
    a, b = val.lower().split("x")
    return int(a), int(b)


def _parse(key: str, val: str):
    low = val.lower()
    if key in ("block_grid", "patch_grid"):
        return _pair(val)
    if key == "tie":
        return None if low in ("none", "") else _pair(val)
    if key == "crop":
        if low in ("none", ""):
            return None
        parts = tuple(int(v) for v in val.split(","))
        if len(parts) != 4:
            raise ValueError("crop needs row0,row1,col0,col1")
        return parts
    if key == "shifts":
        if low in ("none", ""):
            return []
        return [tuple(int(v) for v in item.split(":")) for item in val.split(",")]
    if key == "halo":
        if low == "none":
            return None
        return "block" if low == "block" else int(val)
    if key in ("cut_level", "inscale_rank"):
        return None if low == "none" else int(val)
    if key == "leave_out":
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(val)
        return low in ("true", "1", "yes")
    if key in ("estimator", "label_rule", "extension"):
        return low
    if key in ("shrinkage", "ridge", "lam", "alpha_low", "alpha_high", "patch_alpha"):
        return float(val)
    return int(val)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(f"{a}:{b}" for a, b in v) or "none"
    if isinstance(v, tuple):
        return f"{v[0]}x{v[1]}" if len(v) == 2 else ",".join(str(x) for x in v)
    return str(v)
