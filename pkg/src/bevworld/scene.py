"""Procedural driving scenes: boxes on a ground plane, an ego trajectory,
analytic LiDAR/camera ray casting, and templated question-answer text.

Everything here is plain numpy and deterministic given (config, seed).
World frame: x/y on the ground plane, z up.  Ego frame: x forward, y left,
z up, origin at the ego's ground position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig


class SceneError(ValueError):
    """Raised for invalid scene configurations."""


# Fixed footprint per class (length, width, height in metres).  Sizes are
# constant per class so occupied BEV area is a clean proxy for object count.
CLASS_TABLE = {
    "car": ((3.2, 1.6, 1.5), True),
    "truck": ((4.8, 2.4, 2.6), False),
    "pedestrian": ((0.6, 0.6, 1.8), True),
    "barrier": ((1.6, 1.6, 1.2), False),
}
CLASS_NAMES = tuple(CLASS_TABLE)
TEMPLATE_IDS = ("counting", "nearest-object", "relative-position", "ego-maneuver")

_SIDE_WORDS = ("ahead", "left", "behind", "right")


@dataclass
class Box:
    """An upright box with a yaw about z and planar velocity."""

    center: np.ndarray        # (3,) world metres
    size: np.ndarray          # (3,) full extents
    yaw: float                # radians
    velocity: np.ndarray      # (2,) m/s, world frame
    class_id: int

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]


@dataclass
class SceneFrame:
    index: int
    ego_xy: np.ndarray        # (2,) world metres
    ego_yaw: float
    ego_speed: float          # m/s, part of the scene state used by QA
    ego_yaw_rate: float       # rad/s
    boxes: list = field(default_factory=list)
    ground_z: float = 0.0


@dataclass
class SceneSequence:
    frames: list
    dt: float
    seed: int


@dataclass
class EgoMotion:
    """Relative pose change from frame t to frame t+h, in the ego(t) frame."""

    delta_xy: np.ndarray      # (2,)
    delta_yaw: float
    horizon: int              # whole frames ahead (h >= 1)


@dataclass
class RayBundle:
    """Rays in the frame's ego coordinates plus ground-truth depths.

    ``depths`` is +inf where nothing was hit within ``max_range``.
    """

    origin: np.ndarray        # (3,)
    directions: np.ndarray    # (R, 3) unit vectors
    depths: np.ndarray        # (R,)
    max_range: float


@dataclass
class QAPair:
    instruction: str
    answer: str
    template_id: str
    frame_index: int


# --------------------------------------------------------------------------
# geometry primitives
# --------------------------------------------------------------------------

def _rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def _slab(o, d, h):
    """Entry/exit parameters of |coord| <= h along o + t*d (vectorised).

    The zero-direction lanes are handled by an explicit branch so no NaNs are
    produced; the same branch structure is used by the scalar test oracle.
    """
    zero = d == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - o) / d
        t2 = (h - o) / d
    inside = np.abs(o) <= h
    lo = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return lo, hi


def ray_box_intersect(origins: np.ndarray, dirs: np.ndarray, box: Box) -> np.ndarray:
    """Entry distance of each ray into ``box`` (+inf = miss).

    Grazing hits resolve to the nearer root (the slab entry parameter).
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rx = origins[:, 0] - box.center[0]
    ry = origins[:, 1] - box.center[1]
    ox = c * rx + s * ry
    oy = -s * rx + c * ry
    oz = origins[:, 2] - box.center[2]
    dx = c * dirs[:, 0] + s * dirs[:, 1]
    dy = -s * dirs[:, 0] + c * dirs[:, 1]
    dz = dirs[:, 2]
    hx, hy, hz = box.size[0] / 2.0, box.size[1] / 2.0, box.size[2] / 2.0
    lox, hix = _slab(ox, dx, hx)
    loy, hiy = _slab(oy, dy, hy)
    loz, hiz = _slab(oz, dz, hz)
    tmin = np.maximum(np.maximum(lox, loy), loz)
    tmax = np.minimum(np.minimum(hix, hiy), hiz)
    hit = (tmax >= tmin) & (tmin > 0.0)
    return np.where(hit, tmin, np.inf)


def ray_ground_intersect(origins: np.ndarray, dirs: np.ndarray, ground_z: float) -> np.ndarray:
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ground_z - origins[:, 2]) / dz
    return np.where((dz < 0.0) & (t > 0.0), t, np.inf)


def cast_rays(origins: np.ndarray, dirs: np.ndarray, frame: SceneFrame,
              max_range: float):
    """Nearest hit for world-frame rays against boxes + ground.

    Returns (depths, hit_class) where hit_class is the box class id, -1 for
    ground hits, and -2 for misses.  Ties keep the first primitive in box
    order, matching the scalar oracle.
    """
    n = origins.shape[0]
    best = ray_ground_intersect(origins, dirs, frame.ground_z)
    cls = np.where(np.isfinite(best), -1, -2)
    for box in frame.boxes:
        t = ray_box_intersect(origins, dirs, box)
        closer = t < best
        best = np.where(closer, t, best)
        cls = np.where(closer, box.class_id, cls)
    in_range = best <= max_range
    depths = np.where(in_range, best, np.inf)
    cls = np.where(in_range, cls, -2)
    return depths, cls


# --------------------------------------------------------------------------
# sensors
# --------------------------------------------------------------------------

def lidar_directions(cfg: RunConfig) -> np.ndarray:
    """Canonical ego-frame unit directions, shape (rows*cols, 3)."""
    elev = np.deg2rad(np.linspace(cfg.lidar_elev_min_deg, cfg.lidar_elev_max_deg,
                                  cfg.lidar_rows))
    azim = np.linspace(0.0, 2.0 * np.pi, cfg.lidar_cols, endpoint=False)
    ce, se = np.cos(elev), np.sin(elev)
    ca, sa = np.cos(azim), np.sin(azim)
    dirs = np.stack([
        np.outer(ce, ca),
        np.outer(ce, sa),
        np.broadcast_to(se[:, None], (cfg.lidar_rows, cfg.lidar_cols)),
    ], axis=-1)
    return dirs.reshape(-1, 3)


def _ego_to_world(frame: SceneFrame, vecs: np.ndarray) -> np.ndarray:
    rot = _rot2(frame.ego_yaw)
    out = vecs.copy()
    out[:, :2] = vecs[:, :2] @ rot.T
    return out


def cast_lidar(frame: SceneFrame, cfg: RunConfig) -> RayBundle:
    """Spin the canonical LiDAR pattern at the frame's ego pose."""
    dirs_ego = lidar_directions(cfg)
    origin_ego = np.array([0.0, 0.0, cfg.lidar_height])
    dirs_world = _ego_to_world(frame, dirs_ego)
    origin_world = np.array([frame.ego_xy[0], frame.ego_xy[1],
                             frame.ground_z + cfg.lidar_height])
    origins = np.broadcast_to(origin_world, dirs_world.shape).copy()
    depths, _ = cast_rays(origins, dirs_world, frame, cfg.lidar_max_range)
    return RayBundle(origin=origin_ego, directions=dirs_ego, depths=depths,
                     max_range=cfg.lidar_max_range)


def bundle_points(bundle: RayBundle) -> np.ndarray:
    """Hit points of a bundle in its own ego frame, shape (H, 3)."""
    mask = np.isfinite(bundle.depths)
    return bundle.origin + bundle.depths[mask, None] * bundle.directions[mask]


def camera_poses(cfg: RunConfig):
    """Ego-frame orientation (right/down/forward) and origin per camera."""
    poses = []
    for i in range(cfg.cam_count):
        yaw = 2.0 * np.pi * i / cfg.cam_count
        fwd = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        origin = np.array([0.0, 0.0, cfg.cam_height_m])
        poses.append((right, down, fwd, origin))
    return poses


def camera_intrinsics(cfg: RunConfig):
    fx = (cfg.cam_width / 2.0) / math.tan(math.radians(cfg.cam_hfov_deg) / 2.0)
    fy = (cfg.cam_height / 2.0) / math.tan(math.radians(cfg.cam_vfov_deg) / 2.0)
    cx = cfg.cam_width / 2.0 - 0.5
    cy = cfg.cam_height / 2.0 - 0.5
    return fx, fy, cx, cy


def camera_pixel_rays(cfg: RunConfig) -> np.ndarray:
    """Ego-frame unit ray per pixel, shape (n_cam, H, W, 3)."""
    fx, fy, cx, cy = camera_intrinsics(cfg)
    jj, ii = np.meshgrid(np.arange(cfg.cam_width), np.arange(cfg.cam_height))
    x = (jj - cx) / fx
    y = (ii - cy) / fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
    out = np.empty((cfg.cam_count, cfg.cam_height, cfg.cam_width, 3))
    for k, (right, down, fwd, _origin) in enumerate(camera_poses(cfg)):
        out[k] = (dirs_cam[..., 0:1] * right + dirs_cam[..., 1:2] * down
                  + dirs_cam[..., 2:3] * fwd)
    return out


def project_to_cameras(points_ego: np.ndarray, cfg: RunConfig):
    """Project ego-frame points into every camera.

    Returns (uv, depth, valid): pixel coords (n_cam, M, 2), forward depth
    (n_cam, M) and an in-frustum mask valid for bilinear lookup.
    """
    fx, fy, cx, cy = camera_intrinsics(cfg)
    n_cam = cfg.cam_count
    m = points_ego.shape[0]
    uv = np.zeros((n_cam, m, 2))
    depth = np.zeros((n_cam, m))
    valid = np.zeros((n_cam, m), dtype=bool)
    for k, (right, down, fwd, origin) in enumerate(camera_poses(cfg)):
        rel = points_ego - origin
        xc = rel @ right
        yc = rel @ down
        zc = rel @ fwd
        ok = zc > 1e-3
        with np.errstate(divide="ignore", invalid="ignore"):
            u = xc / zc * fx + cx
            v = yc / zc * fy + cy
        ok &= (u >= 0.0) & (u <= cfg.cam_width - 1.0)
        ok &= (v >= 0.0) & (v <= cfg.cam_height - 1.0)
        uv[k, :, 0] = np.where(ok, u, 0.0)
        uv[k, :, 1] = np.where(ok, v, 0.0)
        depth[k] = np.where(ok, zc, 0.0)
        valid[k] = ok
    return uv, depth, valid


def render_camera_views(frame: SceneFrame, cfg: RunConfig) -> np.ndarray:
    """Rasterise depth + class one-hot images, shape (n_cam, 1+K, H, W).

    Depth is range / max_range, 1.0 for sky.  Ground and sky leave the class
    channels at zero.
    """
    rays = camera_pixel_rays(cfg)
    n_cam, h, w, _ = rays.shape
    dirs_world = _ego_to_world(frame, rays.reshape(-1, 3))
    origin_world = np.array([frame.ego_xy[0], frame.ego_xy[1],
                             frame.ground_z + cfg.cam_height_m])
    origins = np.broadcast_to(origin_world, dirs_world.shape).copy()
    depths, cls = cast_rays(origins, dirs_world, frame, cfg.cam_max_range)
    n_classes = len(CLASS_NAMES)
    out = np.zeros((n_cam * h * w, 1 + n_classes), dtype=np.float32)
    out[:, 0] = np.where(np.isfinite(depths), depths / cfg.cam_max_range, 1.0)
    box_hit = cls >= 0
    out[box_hit, 1 + cls[box_hit]] = 1.0
    return out.reshape(n_cam, h, w, 1 + n_classes).transpose(0, 3, 1, 2)


# --------------------------------------------------------------------------
# scene generation
# --------------------------------------------------------------------------

def _largest_box_dim() -> float:
    return max(max(size[:2]) for size, _dyn in CLASS_TABLE.values())


def generate_scene(cfg: RunConfig, seed: int) -> SceneSequence:
    """Build one deterministic sequence of frames."""
    if cfg.scene_extent < 2.0 * _largest_box_dim():
        raise SceneError("world extent must be at least twice the largest box")
    rng = np.random.default_rng(np.random.SeedSequence([0xD1, seed]))

    speed = float(rng.uniform(cfg.scene_ego_speed_min, cfg.scene_ego_speed_max))
    if rng.random() < 0.45:
        yaw_rate = 0.0
    else:
        yaw_rate = float(rng.uniform(-cfg.scene_turn_rate_max, cfg.scene_turn_rate_max))

    ego_xy = [np.zeros(2)]
    ego_yaw = [0.0]
    for _ in range(cfg.scene_n_frames - 1):
        x, y = ego_xy[-1]
        psi = ego_yaw[-1]
        ego_xy.append(np.array([x + speed * cfg.scene_dt * math.cos(psi),
                                y + speed * cfg.scene_dt * math.sin(psi)]))
        ego_yaw.append(psi + yaw_rate * cfg.scene_dt)

    static_classes = [i for i, n in enumerate(CLASS_NAMES) if not CLASS_TABLE[n][1]]
    dynamic_classes = [i for i, n in enumerate(CLASS_NAMES) if CLASS_TABLE[n][1]]
    n_static = int(rng.integers(0, cfg.scene_n_static + 1))
    n_dynamic = int(rng.integers(1, cfg.scene_n_dynamic + 1))

    spawn = 0.8 * cfg.scene_extent
    times = np.arange(cfg.scene_n_frames) * cfg.scene_dt
    boxes0 = []

    def _clear_of_ego(centers_t: np.ndarray) -> bool:
        for t in range(cfg.scene_n_frames):
            if np.linalg.norm(centers_t[t] - ego_xy[t]) < cfg.scene_clearance:
                return False
        return True

    def _clear_of_boxes(centers_t: np.ndarray, existing: list) -> bool:
        for other in existing:
            o_t = other.center[None, :2] + times[:, None] * other.velocity[None, :]
            if np.min(np.linalg.norm(centers_t - o_t, axis=1)) < 4.0:
                return False
        return True

    def _try_place(class_id: int, vel: np.ndarray) -> None:
        size = np.asarray(CLASS_TABLE[CLASS_NAMES[class_id]][0])
        for _attempt in range(60):
            cxy = rng.uniform(-spawn, spawn, size=2)
            centers_t = cxy[None, :] + times[:, None] * vel[None, :]
            if np.max(np.abs(centers_t)) > 0.95 * cfg.scene_extent:
                continue
            if not _clear_of_ego(centers_t) or not _clear_of_boxes(centers_t, boxes0):
                continue
            if np.linalg.norm(vel) > 1e-9:
                yaw = math.atan2(vel[1], vel[0])
            else:
                yaw = float(rng.uniform(0.0, 2.0 * np.pi))
            center = np.array([cxy[0], cxy[1], cfg.scene_ground_z + size[2] / 2.0])
            boxes0.append(Box(center=center, size=size, yaw=yaw,
                              velocity=vel.copy(), class_id=class_id))
            return

    for _ in range(n_static):
        _try_place(int(rng.choice(static_classes)), np.zeros(2))
    for _ in range(n_dynamic):
        cid = int(rng.choice(dynamic_classes))
        s = rng.uniform(0.5, 1.5) if CLASS_NAMES[cid] == "pedestrian" else rng.uniform(1.5, 5.0)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        _try_place(cid, np.array([s * math.cos(heading), s * math.sin(heading)]))

    frames = []
    for t in range(cfg.scene_n_frames):
        boxes_t = []
        for b in boxes0:
            center = b.center.copy()
            center[:2] = b.center[:2] + times[t] * b.velocity
            boxes_t.append(Box(center=center, size=b.size.copy(), yaw=b.yaw,
                               velocity=b.velocity.copy(), class_id=b.class_id))
        frames.append(SceneFrame(index=t, ego_xy=ego_xy[t].copy(),
                                 ego_yaw=ego_yaw[t], ego_speed=speed,
                                 ego_yaw_rate=yaw_rate, boxes=boxes_t,
                                 ground_z=cfg.scene_ground_z))
    return SceneSequence(frames=frames, dt=cfg.scene_dt, seed=seed)


def ego_motion(seq: SceneSequence, t: int, horizon: int) -> EgoMotion:
    """Relative transform from frame t to frame t+horizon in the ego(t) frame."""
    if t + horizon >= len(seq.frames):
        raise SceneError("horizon exceeds sequence length")
    a, b = seq.frames[t], seq.frames[t + horizon]
    rot = _rot2(-a.ego_yaw)
    delta = rot @ (b.ego_xy - a.ego_xy)
    return EgoMotion(delta_xy=delta, delta_yaw=b.ego_yaw - a.ego_yaw,
                     horizon=horizon)


# --------------------------------------------------------------------------
# templated question answering
# --------------------------------------------------------------------------

def _ego_frame_offset(frame: SceneFrame, box: Box) -> np.ndarray:
    rot = _rot2(-frame.ego_yaw)
    return rot @ (box.center[:2] - frame.ego_xy)


def _side_word(offset: np.ndarray) -> str:
    theta = math.atan2(offset[1], offset[0])
    if abs(theta) <= math.pi / 4:
        return "ahead"
    if math.pi / 4 < theta < 3 * math.pi / 4:
        return "left"
    if abs(theta) >= 3 * math.pi / 4:
        return "behind"
    return "right"


def quantize_speed(v: float) -> str:
    return f"{round(v * 2.0) / 2.0:.1f}"


def quantize_rate(w: float) -> str:
    return f"{round(w / 0.02) * 0.02:+.2f}"


def maneuver_from_rate(rate_token: str) -> str:
    q = float(rate_token)
    if q >= 0.04:
        return "turning left"
    if q <= -0.04:
        return "turning right"
    return "going straight"


def caption_scene(frame: SceneFrame, template_id: str,
                  class_name: str = "car") -> QAPair:
    """Fill one QA template from the frame's state."""
    if template_id not in TEMPLATE_IDS:
        raise SceneError(f"unknown template {template_id!r}")
    if class_name not in CLASS_NAMES:
        raise SceneError(f"unknown class {class_name!r}")

    if template_id == "counting":
        count = sum(1 for b in frame.boxes if b.class_name == class_name)
        return QAPair(instruction=f"count the {class_name} objects",
                      answer=str(count), template_id=template_id,
                      frame_index=frame.index)

    if template_id == "nearest-object":
        if not frame.boxes:
            return QAPair(instruction="name the nearest object",
                          answer="nothing", template_id=template_id,
                          frame_index=frame.index)
        offsets = [_ego_frame_offset(frame, b) for b in frame.boxes]
        idx = int(np.argmin([np.linalg.norm(o) for o in offsets]))
        answer = f"{frame.boxes[idx].class_name} {_side_word(offsets[idx])}"
        return QAPair(instruction="name the nearest object", answer=answer,
                      template_id=template_id, frame_index=frame.index)

    if template_id == "relative-position":
        candidates = [(b, _ego_frame_offset(frame, b)) for b in frame.boxes
                      if b.class_name == class_name]
        if not candidates:
            answer = "none"
        else:
            idx = int(np.argmin([np.linalg.norm(o) for _b, o in candidates]))
            answer = _side_word(candidates[idx][1])
        return QAPair(instruction=f"locate the nearest {class_name}",
                      answer=answer, template_id=template_id,
                      frame_index=frame.index)

    sp = quantize_speed(frame.ego_speed)
    yr = quantize_rate(frame.ego_yaw_rate)
    return QAPair(instruction=f"ego speed {sp} turn {yr} name the maneuver",
                  answer=maneuver_from_rate(yr), template_id=template_id,
                  frame_index=frame.index)


def scene_qa(seq: SceneSequence, seq_seed: int) -> list:
    """The four templates instantiated on frame 0 of a sequence."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5A, seq_seed]))
    frame = seq.frames[0]
    count_cls = CLASS_NAMES[int(rng.integers(0, len(CLASS_NAMES)))]
    locate_cls = CLASS_NAMES[int(rng.integers(0, len(CLASS_NAMES)))]
    return [
        caption_scene(frame, "counting", count_cls),
        caption_scene(frame, "nearest-object"),
        caption_scene(frame, "relative-position", locate_cls),
        caption_scene(frame, "ego-maneuver"),
    ]
