"""Configuration dataclasses and the YAML config file loader.

The config file mirrors the dataclass field names exactly, nested as
``model:``, ``loss:``, ``augment:``, ``phantom:`` plus top-level training
fields. Precedence everywhere is CLI flags > config file > defaults.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError, InvalidSpec

MODALITIES = ("flair", "t1ce", "t1", "t2")
REGIONS = ("ncr_net", "ed", "et")  # internal classes 1, 2, 3
NUM_CLASSES = 4
NUM_LEVELS = 5


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    token_width / fusion_width default to the bottleneck width
    (16 * base_channels) when left as None, which keeps the shared decoder's
    branch inputs width-compatible.
    """

    base_channels: int = 4
    heads: int = 8
    token_width: int | None = None
    fusion_width: int | None = None
    ffn_ratio: int = 4
    ffn_dropout: float = 0.1
    leaky_slope: float = 0.01
    per_channel_gates: bool = True   # C'-channel activation maps; False = single-channel broadcast
    fusion_residual: bool = True
    prototype_masked_norm: bool = False  # divide by sum of P instead of H*W*D
    enable_ctp: bool = True
    enable_pfrf: bool = True
    enable_kiimi: bool = True

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.token_width is None:
            self.token_width = self.bottleneck_width
        if self.fusion_width is None:
            self.fusion_width = self.bottleneck_width
        if self.token_width % self.heads != 0:
            raise ConfigError(
                f"token_width {self.token_width} not divisible by head count {self.heads}")
        if self.enable_pfrf and not self.enable_ctp:
            raise ConfigError("prototype-driven fusion requires the prototype branch (enable_ctp)")

    @property
    def bottleneck_width(self):
        return self.base_channels * 2 ** (NUM_LEVELS - 1)


@dataclass
class LossConfig:
    """Weights and variant flags for the loss stack."""

    class_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    epsilon: float = 1e-5
    dice_normalize_by_classes: bool = True   # divide by |classes|; False = literal sum form
    dice_squared_denominator: bool = True    # sum of squares in the denominator, as printed
    wce_mean: bool = True                    # per-voxel mean; False = literal raw sum
    wce_inverse_frequency: bool = False      # per-batch inverse-frequency weights, clipped
    log_floor: float = 1e-12

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if len(self.class_weights) != NUM_CLASSES:
            raise ConfigError("class_weights must have 4 entries")
        if any(w < 0 for w in self.class_weights) or not any(w > 0 for w in self.class_weights):
            raise ConfigError("class_weights must be nonnegative with at least one positive")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")


@dataclass
class AugmentPolicy:
    crop_size: tuple = (32, 32, 32)
    flip_prob: float = 0.5
    intensity_shift_range: tuple = (-0.1, 0.1)
    scale_range: tuple = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        self.crop_size = tuple(int(c) for c in self.crop_size)
        if len(self.crop_size) != 3 or any(c % 16 != 0 or c <= 0 for c in self.crop_size):
            raise ConfigError(f"crop_size {self.crop_size} must be three positive multiples of 16")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must be in [0, 1]")
        for name in ("intensity_shift_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is not a well-ordered interval")
            setattr(self, name, (float(lo), float(hi)))


# Per-modality mean intensity by region. Regions get distinct contrast
# signatures across modalities so phantom segmentation is learnable.
DEFAULT_PHANTOM_PROFILE = {
    "flair": {"bg": 1.0, "ncr_net": 1.3, "ed": 2.2, "et": 1.5},
    "t1ce": {"bg": 1.0, "ncr_net": 0.5, "ed": 1.2, "et": 2.4},
    "t1": {"bg": 1.0, "ncr_net": 0.5, "ed": 0.8, "et": 1.3},
    "t2": {"bg": 1.0, "ncr_net": 1.4, "ed": 2.0, "et": 1.1},
}


@dataclass
class PhantomSpec:
    """Nested-sphere synthetic case: ET inside TC inside WT inside the brain."""

    grid_size: tuple = (32, 32, 32)
    center_jitter: float = 2.0
    radii: tuple = (4.0, 7.0, 10.0)  # r_et < r_tc < r_wt, voxels
    intensity_profile: dict = field(default_factory=lambda: DEFAULT_PHANTOM_PROFILE)
    noise_sigma: float = 0.05
    brain_margin: float = 3.0
    seed: int = 0

    def __post_init__(self):
        self.grid_size = tuple(int(g) for g in self.grid_size)
        self.radii = tuple(float(r) for r in self.radii)
        if len(self.grid_size) != 3 or any(g <= 0 for g in self.grid_size):
            raise InvalidSpec(f"grid_size {self.grid_size} must be three positive integers")
        r_et, r_tc, r_wt = self.radii
        if not (0 < r_et < r_tc < r_wt):
            raise InvalidSpec(f"radii must satisfy 0 < r_et < r_tc < r_wt, got {self.radii}")
        if self.noise_sigma < 0:
            raise InvalidSpec("noise_sigma must be >= 0")
        if self.brain_margin <= 0:
            raise InvalidSpec("brain_margin must be positive")
        reach = r_wt + self.brain_margin + self.center_jitter
        if any(reach > g / 2 for g in self.grid_size):
            raise InvalidSpec(
                f"brain sphere (radius {r_wt}+{self.brain_margin} with jitter "
                f"{self.center_jitter}) does not fit in grid {self.grid_size}")
        for m in MODALITIES:
            if m not in self.intensity_profile:
                raise InvalidSpec(f"intensity_profile missing modality '{m}'")
            for region in ("bg",) + REGIONS:
                if region not in self.intensity_profile[m]:
                    raise InvalidSpec(f"intensity_profile[{m}] missing region '{region}'")


@dataclass
class TrainConfig:
    """Optimizer, schedule, and run-shape parameters (desk-scale defaults)."""

    base_lr: float = 2e-4
    total_epochs: int = 50       # paper-scale runs use 2000
    poly_power: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1e-5
    decoupled_weight_decay: bool = True  # False = coupled L2 inside Adam
    grad_clip_norm: float | None = None  # stability escape hatch, e.g. 5.0
    crop: tuple = (32, 32, 32)           # paper-scale: (128, 128, 128)
    batch_size: int = 1
    seed: int = 0
    checkpoint_every: int = 10           # epochs
    val_every: int = 10                  # epochs
    tta_enabled: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.poly_power < 0:
            raise ConfigError("poly_power must be >= 0")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise ConfigError("adam betas must lie in (0, 1)")
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        self.crop = tuple(int(c) for c in self.crop)
        if any(c % 16 != 0 or c <= 0 for c in self.crop):
            raise ConfigError(f"crop {self.crop} must be positive multiples of 16")

    def fingerprint(self):
        """Hash of the architecture-relevant fields, stored in checkpoints."""
        arch = dataclasses.asdict(self.model)
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def asdict(cfg):
    return dataclasses.asdict(cfg)


def load_config_file(path):
    """Parse a YAML config file into a plain dict (may be empty)."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config file must be a mapping")
    return data


def build_train_config(file_cfg=None, overrides=None):
    """Merge defaults <- config file <- CLI overrides into a TrainConfig.

    Nested sections merge key-by-key; unknown keys raise ConfigError.
    """
    merged = {}
    for layer in (file_cfg or {}, overrides or {}):
        for key, value in layer.items():
            if value is None:
                continue
            if key in ("model", "loss") and isinstance(value, dict):
                merged.setdefault(key, {}).update(value)
            else:
                merged[key] = value
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for section, cls in (("model", ModelConfig), ("loss", LossConfig)):
        if section in merged:
            names = {f.name for f in dataclasses.fields(cls)}
            bad = set(merged[section]) - names
            if bad:
                raise ConfigError(f"unknown {section} config keys: {sorted(bad)}")
    try:
        return TrainConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
