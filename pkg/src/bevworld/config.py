"""Run configuration: a flat ``key = value`` text format and typed accessors.

Every tunable in the package lives in one flat namespace (``scene.extent``,
``bev.w``, ``link.n_blocks``, ...).  Config files are plain text, one
``key = value`` pair per line, ``#`` comments allowed.  Unknown keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    """Raised for unknown keys, malformed lines, or invalid values."""


def _parse_scalar(text: str):
    """Parse a config value: bool, int, float, tuple of floats, or string."""
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in t:
        return tuple(_parse_scalar(p) for p in t.split(",") if p.strip())
    if len(t) >= 2 and t[0] == t[-1] and t[0] in ("'", '"'):
        return t[1:-1]
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


@dataclass
class RunConfig:
    """All knobs for data synthesis, the model, and training.

    Field names map 1:1 to flat config keys: ``bev_w`` <-> ``bev.w`` (the
    first underscore becomes a dot).
    """

    # --- scene synthesis ---
    scene_extent: float = 32.0          # world half-width, metres
    scene_ground_z: float = 0.0
    scene_n_static: int = 3             # static boxes per scene (upper bound)
    scene_n_dynamic: int = 3            # moving boxes per scene (upper bound)
    scene_n_frames: int = 4             # frames per sequence (>= horizon + 1)
    scene_dt: float = 1.0               # seconds between frames
    scene_ego_speed_min: float = 2.0
    scene_ego_speed_max: float = 8.0
    scene_turn_rate_max: float = 0.12   # |rad/s| bound for the ego
    scene_clearance: float = 4.5        # min ego <-> box-centre distance, metres

    # --- LiDAR pattern ---
    lidar_rows: int = 32                # elevation channels
    lidar_cols: int = 256               # azimuth steps
    lidar_elev_min_deg: float = -25.0
    lidar_elev_max_deg: float = 5.0
    lidar_max_range: float = 60.0
    lidar_height: float = 1.8           # sensor height above ground, metres

    # --- camera rig ---
    cam_count: int = 4
    cam_width: int = 40
    cam_height: int = 24
    cam_hfov_deg: float = 100.0
    cam_vfov_deg: float = 70.0
    cam_height_m: float = 1.6
    cam_max_range: float = 60.0

    # --- BEV tokenizer ---
    bev_w: int = 40                     # grid cells per side (square grid)
    bev_c: int = 32                     # channels after the camera-to-BEV lift
    bev_height_anchors: tuple = (-1.0, 0.0, 1.0, 2.0)  # metres above ground

    # --- language core ---
    llm_dim: int = 128
    llm_layers: int = 4
    llm_heads: int = 4
    llm_max_seq: int = 512
    llm_instr_len: int = 8              # instruction slot, tokens (padded)
    llm_answer_len: int = 6             # answer slot incl. start/end markers
    llm_pooled_text: int = 4            # pooled text tokens fed to the link

    # --- world queries ---
    query_n: int = 4                    # queries per future step
    query_horizon: int = 3              # future steps (1 s apart)
    query_init: str = "max"             # max | avg | attn | random

    # --- current-to-future link ---
    link_enabled: bool = True
    link_n_blocks: int = 6
    link_heads: int = 4
    link_textual_injection: bool = True
    link_ego_modulation: bool = True
    link_ff_mult: int = 2               # feed-forward width multiplier
    link_mod_hidden: int = 64           # modulation MLP hidden width

    # --- volume / renderer ---
    vol_z: int = 8                      # vertical levels
    vol_cprime: int = 8                 # feature channels per voxel
    vol_z_min: float = -1.0             # metres relative to ground
    vol_z_max: float = 3.0
    render_samples: int = 48            # depth samples per ray
    render_depth_min: float = 0.5
    render_tau_init: float = 10.0       # initial opacity sharpness
    render_weight_threshold: float = 0.5  # min weight mass to emit a point
    render_levels_per_cell: int = 8     # channels per height level pre-3D-conv

    # --- geometry extractor ---
    extractor_width: int = 16

    # --- losses ---
    loss_cos: bool = True
    loss_gram: bool = True
    loss_render_weight: float = 10.0

    # --- training ---
    train_seed: int = 0
    train_val_fraction: float = 0.1
    train_dtype: str = "float32"
    train_rays_per_frame: int = 256
    train_batch: int = 8
    train_lang_batch: int = 16
    train_stage1a_steps: int = 150
    train_stage1a_lr: float = 3e-3
    train_stage1b_steps: int = 150
    train_stage1b_lr: float = 3e-3
    train_stage2a_epochs: int = 2
    train_stage2a_lr: float = 3e-3
    train_stage2b_epochs: int = 40
    train_stage2b_lr: float = 2e-3
    train_stage2c_epochs: int = 3
    train_stage2c_lr: float = 1e-3
    train_stage3_epochs: int = 2
    train_stage3_lr: float = 1.5e-3
    train_grad_clip: float = 1.0        # max gradient norm, <= 0 disables
    train_log_every: int = 1

    # --- evaluation ---
    eval_roi: str = "default"           # default | full
    eval_max_frames: int = 12           # val sequences used for point metrics

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.bev_w % 4 != 0:
            raise ConfigError("bev.w must be divisible by 4")
        if self.scene_n_frames < self.query_horizon + 1:
            raise ConfigError("scene.n_frames must cover the query horizon")
        if self.query_init not in ("max", "avg", "attn", "random"):
            raise ConfigError(f"unknown query.init {self.query_init!r}")
        if self.train_dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        if self.render_levels_per_cell * self.vol_z <= 0:
            raise ConfigError("volume dims must be positive")
        if self.eval_roi not in ("default", "full"):
            raise ConfigError("eval.roi must be 'default' or 'full'")

    # ---- flat key <-> field mapping ----

    @staticmethod
    def _field_to_key(name: str) -> str:
        head, _, tail = name.partition("_")
        return f"{head}.{tail}" if tail else head

    @classmethod
    def key_map(cls) -> dict:
        return {cls._field_to_key(f.name): f.name for f in fields(cls)}

    def set_key(self, key: str, value) -> None:
        km = self.key_map()
        if key not in km:
            raise ConfigError(f"unknown config key {key!r}")
        name = km[key]
        current = getattr(self, name)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key} expects a boolean, got {value!r}")
        elif isinstance(current, int) and not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        elif isinstance(current, float) and isinstance(value, (int, float)):
            value = float(value)
        elif isinstance(current, tuple):
            if not isinstance(value, tuple):
                value = (value,)
            value = tuple(float(v) for v in value)
        setattr(self, name, value)

    def to_text(self) -> str:
        lines = []
        for key, name in sorted(self.key_map().items()):
            val = getattr(self, name)
            if isinstance(val, tuple):
                rendered = ", ".join(repr(v) for v in val)
            elif isinstance(val, str):
                rendered = val
            else:
                rendered = repr(val)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            cfg.set_key(key.strip(), _parse_scalar(value))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def apply_overrides(self, pairs) -> None:
        """Apply ``key=value`` override strings (e.g. from the CLI)."""
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, _, value = pair.partition("=")
            self.set_key(key.strip(), _parse_scalar(value))
        self.validate()

    # ---- convenience views ----

    @property
    def bev_cell(self) -> float:
        return 2.0 * self.scene_extent / self.bev_w

    @property
    def bev_tokens(self) -> int:
        return (self.bev_w // 4) ** 2

    @property
    def render_depth_max(self) -> float:
        return self.scene_extent
