"""Synthetic piecewise-planar scenes with exact ground truth.

A scene is a set of textured planar rectangles (boxes are expanded into
faces) seen by a pinhole camera that may move along a per-frame
trajectory. Rendering is an exact analytic ray cast: every pixel gets
depth, a unit surface normal (camera frame), an occlusion-edge flag from
a depth-ratio rule, and a per-column layout boundary row from the
projected wall/floor intersection line.

The cue oracle perturbs ground-truth maps with spatially varying
Gaussian noise and reports the *exact* log-variance of that noise, so
downstream reliability gating can be tested against known truth.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EDGE_RATIO_THRESHOLD = 1.05
VARIANCE_FLOOR = 1e-6
_NEAR = 0.05


class RenderError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass
class Camera:
    focal: float
    cx: float
    cy: float
    height: int
    width: int

    def scaled(self, factor: int) -> "Camera":
        return Camera(self.focal * factor, self.cx * factor, self.cy * factor,
                      self.height * factor, self.width * factor)


@dataclass
class Rect:
    """Textured planar rectangle: origin corner plus two edge vectors (world frame)."""
    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    color_a: np.ndarray
    color_b: np.ndarray
    pattern: str = "checker"
    tex_u: float = 4.0
    tex_v: float = 4.0


@dataclass
class Pose:
    """Camera-to-world: rotation columns are the camera axes, position is the centre."""
    rotation: np.ndarray
    position: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass
class Scene:
    camera: Camera
    rects: list[Rect]
    d_min: float
    d_max: float
    trajectory: list[Pose] | None = None
    # wall/floor intersection line (point, direction) in world frame,
    # used for the 1-D layout ground truth; None falls back to mid-height
    layout_line: tuple[np.ndarray, np.ndarray] | None = None
    light: np.ndarray = field(default_factory=lambda: np.array([0.35, -0.8, 0.3]))


@dataclass
class RenderedFrame:
    rgb: np.ndarray       # H x W x 3 in [0, 1]
    depth: np.ndarray     # H x W metres
    edges: np.ndarray     # H x W {0, 1}
    normals: np.ndarray   # H x W x 3 unit, camera frame
    layout: np.ndarray    # W boundary row indices


@dataclass
class CueObservation:
    cue: np.ndarray
    log_variance: np.ndarray  # H x W


def depth_discontinuities(depth: np.ndarray,
                          threshold: float = EDGE_RATIO_THRESHOLD) -> np.ndarray:
    """Pixels whose depth ratio to any 4-neighbour exceeds ``threshold``."""
    d = np.asarray(depth, dtype=np.float64)
    edges = np.zeros(d.shape, dtype=bool)
    rx = np.maximum(d[:, 1:] / d[:, :-1], d[:, :-1] / d[:, 1:]) > threshold
    ry = np.maximum(d[1:, :] / d[:-1, :], d[:-1, :] / d[1:, :]) > threshold
    edges[:, 1:] |= rx
    edges[:, :-1] |= rx
    edges[1:, :] |= ry
    edges[:-1, :] |= ry
    return edges


def _pixel_dirs(cam: Camera) -> np.ndarray:
    us = (np.arange(cam.width) + 0.5 - cam.cx) / cam.focal
    vs = (np.arange(cam.height) + 0.5 - cam.cy) / cam.focal
    d = np.empty((cam.height, cam.width, 3))
    d[..., 0] = us[None, :]
    d[..., 1] = vs[:, None]
    d[..., 2] = 1.0
    return d


def _to_camera(p: np.ndarray, pose: Pose) -> np.ndarray:
    return (p - pose.position) @ pose.rotation


def _texture(rect: Rect, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    a = np.floor(alpha * rect.tex_u)
    b = np.floor(beta * rect.tex_v)
    if rect.pattern == "stripes":
        pick = (a % 2) == 0
    else:
        pick = ((a + b) % 2) == 0
    return np.where(pick[..., None], rect.color_a, rect.color_b)


def render_frame(scene: Scene, pose: Pose, scale: int = 1) -> RenderedFrame:
    cam = scene.camera if scale == 1 else scene.camera.scaled(scale)
    dirs = _pixel_dirs(cam)
    h, w = cam.height, cam.width
    best_t = np.full((h, w), np.inf)
    rgb = np.zeros((h, w, 3))
    normals = np.zeros((h, w, 3))
    for rect in scene.rects:
        o = _to_camera(rect.origin, pose)
        u = rect.edge_u @ pose.rotation
        v = rect.edge_v @ pose.rotation
        corners_z = [o[2], (o + u)[2], (o + v)[2], (o + u + v)[2]]
        if max(corners_z) <= _NEAR:
            raise RenderError("degenerate camera: primitive lies behind the camera")
        n = np.cross(u, v)
        n = n / np.linalg.norm(n)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (o @ n) / denom
        hit = t[..., None] * dirs
        q = hit - o
        uu = float(u @ u)
        vv = float(v @ v)
        alpha = (q @ u) / uu
        beta = (q @ v) / vv
        ok = (np.abs(denom) > 1e-12) & (t > _NEAR) & \
             (alpha >= 0) & (alpha <= 1) & (beta >= 0) & (beta <= 1) & (t < best_t)
        if not ok.any():
            continue
        n_vis = np.where((denom < 0)[..., None], n, -n)
        shade = 0.35 + 0.65 * np.clip(-(n_vis @ scene.light) /
                                      np.linalg.norm(scene.light), 0.0, 1.0)
        color = _texture(rect, alpha, beta) * shade[..., None]
        best_t = np.where(ok, t, best_t)
        rgb = np.where(ok[..., None], color, rgb)
        normals = np.where(ok[..., None], n_vis, normals)
    if not np.isfinite(best_t).all():
        raise RenderError("scene does not cover the full field of view")
    if best_t.min() < scene.d_min or best_t.max() > scene.d_max:
        raise RenderError(
            f"rendered depth [{best_t.min():.3f}, {best_t.max():.3f}] outside "
            f"[{scene.d_min}, {scene.d_max}]")
    layout = _layout_rows(scene, pose, cam)
    return RenderedFrame(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=best_t.astype(np.float32),
        edges=depth_discontinuities(best_t).astype(np.float32),
        normals=normals.astype(np.float32),
        layout=layout.astype(np.float32),
    )


def _layout_rows(scene: Scene, pose: Pose, cam: Camera) -> np.ndarray:
    if scene.layout_line is None:
        return np.full(cam.width, cam.height / 2.0)
    p0, dvec = scene.layout_line
    p0c = _to_camera(p0, pose)
    dc = dvec @ pose.rotation
    a = (np.arange(cam.width) + 0.5 - cam.cx) / cam.focal
    denom = dc[0] - a * dc[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (a * p0c[2] - p0c[0]) / denom
        z = p0c[2] + s * dc[2]
        y = p0c[1] + s * dc[1]
        rows = cam.focal * y / z + cam.cy - 0.5
    bad = ~np.isfinite(rows) | (z <= _NEAR)
    rows = np.where(bad, cam.height / 2.0, rows)
    return np.clip(rows, 0.0, cam.height - 1.0)


def render_sequence(scene: Scene, length: int, seed: int = 0) -> list[RenderedFrame]:
    """Render ``length`` frames along the scene trajectory.

    Rendering is exact, so the seed has no effect on the output; it is
    accepted for interface symmetry with the noisy cue oracle.
    """
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    if length > 1 and (scene.trajectory is None or len(scene.trajectory) < length):
        raise RenderError("trajectory must be defined for multi-frame sequences")
    poses = scene.trajectory[:length] if scene.trajectory else [Pose.identity()]
    if scene.trajectory is None and length == 1:
        poses = [Pose.identity()]
    _ = seed
    return [render_frame(scene, pose) for pose in poses]


# ---------------------------------------------------------------------------
# cue oracle
# ---------------------------------------------------------------------------

@dataclass
class CueNoise:
    kind: str = "constant"   # constant | half_x | half_y
    scale: float = 0.0
    scale2: float = 0.0

    def field_map(self, h: int, w: int) -> np.ndarray:
        if self.scale < 0 or self.scale2 < 0:
            raise ValueError("noise scale must be >= 0")
        s = np.full((h, w), self.scale, dtype=np.float64)
        if self.kind == "half_x":
            s[:, w // 2:] = self.scale2
        elif self.kind == "half_y":
            s[h // 2:, :] = self.scale2
        elif self.kind != "constant":
            raise ValueError(f"unknown noise kind {self.kind!r}")
        return s


@dataclass
class NoiseConfig:
    edges: CueNoise = field(default_factory=CueNoise)
    normals: CueNoise = field(default_factory=CueNoise)
    layout: CueNoise = field(default_factory=CueNoise)


def layout_distance_map(frame: RenderedFrame) -> np.ndarray:
    """Dense layout cue: signed row distance to the boundary, scaled by height."""
    h = frame.depth.shape[0]
    rows = np.arange(h, dtype=np.float64)[:, None]
    return (rows - frame.layout[None, :]) / h


def defocus_magnitude(depth: np.ndarray, d_min: float, d_max: float) -> np.ndarray:
    """Thin-lens blur-magnitude stand-in: |1/d - 1/d_focus| with the focus
    plane at the geometric mid-range. Used by the specialist-swap ablation."""
    focus = float(np.sqrt(d_min * d_max))
    return np.abs(1.0 / np.asarray(depth, dtype=np.float64) - 1.0 / focus)


def synthesize_cues(frame: RenderedFrame, noise: NoiseConfig, seed: int,
                    layout_kind: str = "layout") -> dict[str, CueObservation]:
    """Noisy cue maps plus their exact log-variance maps.

    cue = truth + N(0, s(x)^2) elementwise; sigma = log(s(x)^2 + floor).
    Normals get independent noise per channel but share one sigma map.
    """
    rng = np.random.default_rng(seed)
    h, w = frame.depth.shape
    out: dict[str, CueObservation] = {}

    def make(gt: np.ndarray, cue_noise: CueNoise) -> CueObservation:
        s = cue_noise.field_map(h, w)
        log_var = np.log(s * s + VARIANCE_FLOOR)
        if gt.ndim == 3:
            noise_arr = rng.normal(size=gt.shape) * s[..., None]
        else:
            noise_arr = rng.normal(size=gt.shape) * s
        return CueObservation(
            cue=(gt.astype(np.float64) + noise_arr).astype(np.float32),
            log_variance=log_var.astype(np.float32),
        )

    out["edges"] = make(frame.edges, noise.edges)
    out["normals"] = make(frame.normals, noise.normals)
    if layout_kind == "blur":
        p_gt = defocus_magnitude(frame.depth, 0.5, 20.0)
    else:
        p_gt = layout_distance_map(frame)
    out["layout"] = make(p_gt.astype(np.float32), noise.layout)
    return out


# ---------------------------------------------------------------------------
# scene generator
# ---------------------------------------------------------------------------

@dataclass
class SceneGenConfig:
    height: int = 64
    width: int = 64
    focal: float = 64.0
    d_min: float = 0.5
    d_max: float = 20.0
    camera_height: float = 1.5
    wall_depth_range: tuple = (9.0, 13.0)
    box_count_range: tuple = (1, 3)
    box_depth_range: tuple = (2.5, 8.0)
    box_size_range: tuple = (0.5, 1.6)
    step_translation: float = 0.07
    step_rotation_deg: float = 1.0


def _rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _face(origin, eu, ev, rng) -> Rect:
    c0 = rng.uniform(0.15, 0.95, size=3)
    c1 = rng.uniform(0.05, 0.85, size=3)
    period = rng.uniform(0.6, 1.8)
    return Rect(
        origin=np.asarray(origin, dtype=float),
        edge_u=np.asarray(eu, dtype=float),
        edge_v=np.asarray(ev, dtype=float),
        color_a=c0, color_b=c1,
        pattern="checker" if rng.random() < 0.6 else "stripes",
        tex_u=max(np.linalg.norm(eu) / period, 1.0),
        tex_v=max(np.linalg.norm(ev) / period, 1.0),
    )


def _box_faces(center: np.ndarray, half: np.ndarray, yaw: float, rng) -> list[Rect]:
    r = _rot_y(yaw)
    ax = r @ np.array([1.0, 0.0, 0.0]) * half[0]
    ay = np.array([0.0, 1.0, 0.0]) * half[1]
    az = r @ np.array([0.0, 0.0, 1.0]) * half[2]
    c = center
    faces = [
        _face(c - ax - ay - az, 2 * ax, 2 * ay, rng),   # front (-z side)
        _face(c - ax - ay + az, 2 * ax, 2 * ay, rng),   # back
        _face(c - ax - ay - az, 2 * az, 2 * ay, rng),   # left
        _face(c + ax - ay - az, 2 * az, 2 * ay, rng),   # right
        _face(c - ax - ay - az, 2 * ax, 2 * az, rng),   # top (-y side, seen from above camera? y is down)
    ]
    return faces


def make_scene(seed: int, cfg: SceneGenConfig | None = None,
               sequence_length: int = 4) -> Scene:
    """Room-like scene: floor plane, back wall, and boxes resting on the floor."""
    cfg = cfg or SceneGenConfig()
    rng = np.random.default_rng(seed)
    cam = Camera(cfg.focal, cfg.width / 2.0, cfg.height / 2.0, cfg.height, cfg.width)
    h_cam = cfg.camera_height
    z_wall = rng.uniform(*cfg.wall_depth_range)
    extent = 25.0
    rects = [
        # floor: y = +h (y points down), from just in front of the camera to the wall
        _face([-extent, h_cam, 0.3], [2 * extent, 0, 0], [0, 0, z_wall - 0.3], rng),
        # back wall at z = z_wall, generously oversized
        _face([-extent, -extent, z_wall], [2 * extent, 0, 0], [0, extent + h_cam, 0], rng),
    ]
    n_boxes = int(rng.integers(cfg.box_count_range[0], cfg.box_count_range[1] + 1))
    for _ in range(n_boxes):
        size = rng.uniform(cfg.box_size_range[0], cfg.box_size_range[1], size=3)
        zc = rng.uniform(*cfg.box_depth_range)
        xc = rng.uniform(-0.45, 0.45) * zc
        center = np.array([xc, h_cam - size[1] / 2.0, zc])
        rects.extend(_box_faces(center, size / 2.0, rng.uniform(0, np.pi / 2), rng))
    traj = [Pose.identity()]
    pos = np.zeros(3)
    yaw = pitch = 0.0
    for _ in range(sequence_length - 1):
        pos = pos + rng.uniform(-1, 1, size=3) * cfg.step_translation * np.array([1.0, 0.3, 1.0])
        yaw += rng.uniform(-1, 1) * np.deg2rad(cfg.step_rotation_deg)
        pitch += rng.uniform(-1, 1) * np.deg2rad(cfg.step_rotation_deg) * 0.5
        traj.append(Pose(_rot_y(yaw) @ _rot_x(pitch), pos.copy()))
    line_p0 = np.array([0.0, h_cam, z_wall])
    line_d = np.array([1.0, 0.0, 0.0])
    return Scene(camera=cam, rects=rects, d_min=cfg.d_min, d_max=cfg.d_max,
                 trajectory=traj, layout_line=(line_p0, line_d))


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

_MAP_NAMES = ("rgb", "depth", "edges", "normals", "layout",
              "cue_e", "sig_e", "cue_n", "sig_n", "cue_p", "sig_p")

STATIC_BIN_COUNT = 64


def static_log_bin_edges(d_min: float, d_max: float, k: int = STATIC_BIN_COUNT) -> np.ndarray:
    return np.exp(np.linspace(np.log(d_min), np.log(d_max), k + 1))


def depth_histogram(depths: list[np.ndarray], d_min: float, d_max: float,
                    k: int = STATIC_BIN_COUNT) -> np.ndarray:
    edges = static_log_bin_edges(d_min, d_max, k)
    counts = np.zeros(k, dtype=np.float64)
    for d in depths:
        c, _ = np.histogram(np.clip(d, d_min, d_max), bins=edges)
        counts += c
    total = counts.sum()
    if total == 0:
        raise DatasetError("depth histogram is empty")
    return counts / total


def _write_map(path: Path, arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f4")
    path.write_bytes(a.tobytes())
    return {"file": path.name, "shape": list(a.shape)}


def _read_map(root: Path, entry: dict) -> np.ndarray:
    path = root / entry["file"]
    raw = path.read_bytes()
    shape = tuple(entry["shape"])
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DatasetError(
            f"array length mismatch in {path.name}: {len(raw)} bytes on disk, "
            f"manifest says {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def frame_arrays(frame: RenderedFrame, cues: dict[str, CueObservation]) -> dict[str, np.ndarray]:
    return {
        "rgb": frame.rgb, "depth": frame.depth, "edges": frame.edges,
        "normals": frame.normals, "layout": frame.layout,
        "cue_e": cues["edges"].cue, "sig_e": cues["edges"].log_variance,
        "cue_n": cues["normals"].cue, "sig_n": cues["normals"].log_variance,
        "cue_p": cues["layout"].cue, "sig_p": cues["layout"].log_variance,
    }


def write_dataset(path, seed: int, n_scenes: int = 64, n_val_scenes: int = 8,
                  sequence_length: int = 4, gen: SceneGenConfig | None = None,
                  noise: NoiseConfig | None = None, layout_kind: str = "layout",
                  force: bool = False) -> dict:
    """Render scenes, synthesize cues and store everything as f32le planar
    arrays plus a manifest (shapes, units, seeds, depth prior)."""
    gen = gen or SceneGenConfig()
    noise = noise or NoiseConfig()
    root = Path(path)
    if root.exists() and any(root.iterdir()) and not force:
        raise DatasetError(f"refusing to overwrite non-empty {root} (use force)")
    root.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    scene_seeds = ss.spawn(n_scenes + n_val_scenes)
    scenes_meta = []
    train_depths = []
    for idx in range(n_scenes + n_val_scenes):
        split = "train" if idx < n_scenes else "val"
        sseed = int(scene_seeds[idx].generate_state(1)[0])
        scene = make_scene(sseed, gen, sequence_length)
        frames = render_sequence(scene, sequence_length, seed=sseed)
        frames_meta = []
        for f_idx, frame in enumerate(frames):
            cues = synthesize_cues(frame, noise, seed=sseed + 7919 * (f_idx + 1),
                                   layout_kind=layout_kind)
            maps = {}
            for name, arr in frame_arrays(frame, cues).items():
                maps[name] = _write_map(root / f"s{idx:03d}_f{f_idx}_{name}.bin", arr)
            frames_meta.append({"maps": maps})
            if split == "train":
                train_depths.append(frame.depth)
        scenes_meta.append({"id": idx, "split": split, "seed": sseed,
                            "frames": frames_meta})
    prior = depth_histogram(train_depths, gen.d_min, gen.d_max)
    manifest = {
        "format": "cuedepth-dataset-v1",
        "dtype": "f32le",
        "units": {"depth": "m", "rgb": "[0,1]", "normals": "unit camera-frame",
                  "layout": "row index", "cue_p": "rows/height (signed)"},
        "seed": seed,
        "height": gen.height,
        "width": gen.width,
        "d_min": gen.d_min,
        "d_max": gen.d_max,
        "sequence_length": sequence_length,
        "layout_kind": layout_kind,
        "noise": {
            "edges": vars(noise.edges),
            "normals": vars(noise.normals),
            "layout": vars(noise.layout),
        },
        "depth_prior": prior.tolist(),
        "scenes": scenes_meta,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


@dataclass
class SequenceData:
    scene_id: int
    split: str
    frames: list[dict[str, np.ndarray]]


@dataclass
class Dataset:
    manifest: dict
    sequences: list[SequenceData]

    @property
    def d_min(self) -> float:
        return self.manifest["d_min"]

    @property
    def d_max(self) -> float:
        return self.manifest["d_max"]

    @property
    def depth_prior(self) -> np.ndarray:
        return np.asarray(self.manifest["depth_prior"])

    def split(self, name: str) -> list[SequenceData]:
        return [s for s in self.sequences if s.split == name]


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no manifest.json in {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "cuedepth-dataset-v1":
        raise DatasetError(f"unknown dataset format in {mpath}")
    sequences = []
    for scene_meta in manifest["scenes"]:
        frames = []
        for frame_meta in scene_meta["frames"]:
            frames.append({name: _read_map(root, entry)
                           for name, entry in frame_meta["maps"].items()})
        sequences.append(SequenceData(scene_id=scene_meta["id"],
                                      split=scene_meta["split"], frames=frames))
    return Dataset(manifest=manifest, sequences=sequences)


def dataset_hash(path) -> str:
    """Content hash of the manifest; identifies the dataset in run manifests."""
    data = (Path(path) / "manifest.json").read_bytes()
    return hashlib.sha256(data).hexdigest()[:16]
