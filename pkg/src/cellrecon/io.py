"""On-disk formats: sequence bundles, run configuration, checkpoints, volumes,
metrics and loss traces.

Every binary payload is little-endian.  Every write goes to a temporary file in
the destination directory and is then renamed into place, so readers never see
a half-written file.

Bundle layout (a directory)::

    manifest.json     version, N, W, H, d_pixel, slice_thickness, conventions, checksum
    frames.bin        float32 <f4, shape (N, H, W), C order, values in [0, 1]
    poses.csv         index,qw,qx,qy,qz,tx,ty,tz   (tracked poses)
    truth_poses.csv   same schema, optional

Quaternions are Hamilton, scalar first, and rotate image-local coordinates into
world coordinates; translations are in mm.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io as _io
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .field import HashEncodingConfig, ImplicitField, MlpConfig
from .geometry import RigidPose
from .recon import GridSpec, VolumeGrid
from .sequence import FrameSequence
from .simulator import Box, NoiseSpec, Scene, Speckle, SweepSpec, Wire, phantom_scene
from .training import EpochRecord, TrainConfig

BUNDLE_VERSION = 1
CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = b"CRCKPT\x00\x01"

POSE_HEADER = ["index", "qw", "qx", "qy", "qz", "tx", "ty", "tz"]
CONVENTIONS = {
    "quaternion": "Hamilton, scalar-first (qw, qx, qy, qz), rotates image-local to world",
    "image_axes": "u = +w (columns), v = +h (rows), n = u x v; pixel (w, h) at (w*d_pixel, h*d_pixel, 0)",
    "frames": "float32 little-endian, shape (N, H, W), C order, values in [0, 1]",
    "units": "mm",
}


class FormatError(ValueError):
    """A file does not match the expected format or fails verification."""


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# poses


def pose_to_quaternion(pose: RigidPose) -> np.ndarray:
    """``(qw, qx, qy, qz)`` with ``qw >= 0``."""
    q = Rotation.from_matrix(pose.rotation).as_quat(scalar_first=True)
    return -q if q[0] < 0 else q


def quaternion_to_rotation(q, atol: float = 1e-6) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if abs(np.linalg.norm(q) - 1.0) > atol:
        raise FormatError(f"quaternion {q.tolist()} is not unit norm (|q| = {np.linalg.norm(q):.9f})")
    return Rotation.from_quat(q, scalar_first=True).as_matrix()


def poses_to_csv(poses: list[RigidPose]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(POSE_HEADER)
    for i, p in enumerate(poses):
        w.writerow([i] + [repr(float(x)) for x in pose_to_quaternion(p)] + [repr(float(x)) for x in p.translation])
    return buf.getvalue()


def write_poses(path, poses: list[RigidPose]) -> Path:
    return atomic_write(path, poses_to_csv(poses))


def read_poses(path) -> list[RigidPose]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != POSE_HEADER:
        raise FormatError(f"{path}: expected header {','.join(POSE_HEADER)}")
    poses = []
    for n, row in enumerate(rows[1:]):
        if not row:
            continue
        if len(row) != len(POSE_HEADER):
            raise FormatError(f"{path}: row {n + 1} has {len(row)} fields, expected {len(POSE_HEADER)}")
        vals = [float(x) for x in row]
        if int(vals[0]) != n:
            raise FormatError(f"{path}: row {n + 1} has index {int(vals[0])}, expected {n}")
        poses.append(RigidPose(quaternion_to_rotation(vals[1:5]), np.array(vals[5:8])))
    return poses


# ---------------------------------------------------------------------------
# sequence bundles


def write_bundle(directory, sequence: FrameSequence, include_truth: bool = True) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    imgs = sequence.images
    if imgs.min() < 0 or imgs.max() > 1:
        raise ValueError("frames must lie in [0, 1]")
    frames = np.ascontiguousarray(imgs, dtype="<f4").tobytes()
    N, H, W = imgs.shape
    manifest = {
        "version": BUNDLE_VERSION,
        "N": N, "W": W, "H": H,
        "d_pixel": float(sequence.d_pixel),
        "slice_thickness": float(sequence.slice_thickness),
        "conventions": CONVENTIONS,
        "checksum": {"algorithm": "sha256", "frames": _sha256(frames)},
        "has_truth": bool(include_truth and sequence.true_poses is not None),
        "metadata": {k: v for k, v in sequence.metadata.items() if isinstance(v, (int, float, str, bool))},
    }
    atomic_write(d / "frames.bin", frames)
    write_poses(d / "poses.csv", sequence.poses)
    if manifest["has_truth"]:
        write_poses(d / "truth_poses.csv", sequence.true_poses)
    # manifest last: a bundle with a manifest is complete
    atomic_write(d / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FormatError(f"{directory}: no manifest.json (not a bundle?)")
    m = json.loads(path.read_text())
    if m.get("version") != BUNDLE_VERSION:
        raise FormatError(f"{path}: unsupported bundle version {m.get('version')!r}")
    for key in ("N", "W", "H", "d_pixel", "slice_thickness", "checksum"):
        if key not in m:
            raise FormatError(f"{path}: missing key {key!r}")
    return m


def read_bundle(directory, poses_path=None, verify: bool = True) -> FrameSequence:
    """Load a bundle.  ``poses_path`` substitutes another pose CSV (for example
    refined poses) for the tracked ones."""
    d = Path(directory)
    m = read_manifest(d)
    raw = (d / "frames.bin").read_bytes()
    N, H, W = m["N"], m["H"], m["W"]
    if len(raw) != 4 * N * H * W:
        raise FormatError(f"{d / 'frames.bin'}: {len(raw)} bytes, expected {4 * N * H * W} for N*H*W = {N}*{H}*{W}")
    if verify and _sha256(raw) != m["checksum"]["frames"]:
        raise FormatError(f"{d / 'frames.bin'}: checksum mismatch")
    images = np.frombuffer(raw, dtype="<f4").reshape(N, H, W).astype(np.float64)
    poses = read_poses(poses_path if poses_path is not None else d / "poses.csv")
    if len(poses) != N:
        raise FormatError(f"pose file has {len(poses)} rows for {N} frames")
    truth = read_poses(d / "truth_poses.csv") if (d / "truth_poses.csv").exists() else None
    return FrameSequence(images, poses, m["d_pixel"], m["slice_thickness"], true_poses=truth,
                         metadata=dict(m.get("metadata", {})))


def images_from_uint8(images) -> np.ndarray:
    """Normalise 8-bit frames to [0, 1]."""
    a = np.asarray(images)
    if a.dtype != np.uint8:
        raise TypeError("expected uint8 frames")
    return a.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# run configuration (INI, one section per component)


@dataclasses.dataclass
class ReconConfig:
    spacing: float = 0.2
    margin: float = 0.0


@dataclasses.dataclass
class RunConfig:
    """Every tunable default in one place; serialised next to each output."""

    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    sweep: SweepSpec = dataclasses.field(default_factory=SweepSpec)
    noise: NoiseSpec = dataclasses.field(default_factory=NoiseSpec)
    recon: ReconConfig = dataclasses.field(default_factory=ReconConfig)
    scene: Scene = dataclasses.field(default_factory=phantom_scene)


# section name -> (attribute path inside RunConfig, excluded fields)
_SECTIONS = {
    "train": (("train",), {"cell", "encoding", "mlp", "weights", "flags"}),
    "cell": (("train", "cell"), set()),
    "encoding": (("train", "encoding"), {"domain_min", "domain_max", "active_levels"}),
    "mlp": (("train", "mlp"), set()),
    "weights": (("train", "weights"), set()),
    "flags": (("train", "flags"), set()),
    "sweep": (("sweep",), set()),
    "noise": (("noise",), set()),
    "recon": (("recon",), set()),
}


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def _parse_value(text: str, annotation: str, where: str):
    t = text.strip()
    ann = str(annotation)
    if t.lower() == "none":
        if "None" in ann:
            return None
        raise FormatError(f"{where}: 'none' not allowed")
    try:
        if ann.startswith("bool"):
            low = t.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(t)
        if ann == "tuple" or ann.startswith("tuple[tuple"):
            rows = [r for r in t.split(";") if r.strip()]
            return tuple(tuple(float(x) for x in r.split(",")) for r in rows)
        if ann.startswith("tuple"):
            return tuple(float(x) for x in t.split(","))
        if ann.startswith("int"):
            return int(t)
        if ann.startswith("float"):
            return float(t)
        return t
    except ValueError:
        raise FormatError(f"{where}: cannot parse {text!r} as {ann}") from None


def _get(obj, path):
    for p in path:
        obj = getattr(obj, p)
    return obj


def run_config_to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, (path, skip) in _SECTIONS.items():
        obj = _get(cfg, path)
        cp[name] = {}
        for f in dataclasses.fields(obj):
            if f.name in skip:
                continue
            v = getattr(obj, f.name)
            if f.name == "orientation":
                cp[name][f.name] = "; ".join(_format_value(r) for r in v)
            else:
                cp[name][f.name] = _format_value(v)
    _scene_to_ini(cfg.scene, cp)
    buf = _io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _scene_to_ini(scene: Scene, cp: configparser.ConfigParser) -> None:
    sp = scene.speckle
    cp["scene"] = {
        "background": _format_value(scene.background),
        "speckle_amplitude": _format_value(sp.amplitude if sp else 0.0),
        "speckle_correlation_length": _format_value(sp.correlation_length if sp else 0.5),
        "speckle_seed": str(sp.seed if sp else 0),
    }
    for i, prim in enumerate(scene.primitives):
        kind = "wire" if isinstance(prim, Wire) else "box"
        cp[f"{kind}:{i}"] = {f.name: _format_value(getattr(prim, f.name)) for f in dataclasses.fields(prim)}


def _update(obj, section: configparser.SectionProxy, skip: set, where: str):
    fields = {f.name: f for f in dataclasses.fields(obj) if f.name not in skip}
    changes = {}
    for key, text in section.items():
        if key not in fields:
            raise FormatError(f"{where}: unknown key {key!r} (valid: {', '.join(sorted(fields))})")
        changes[key] = _parse_value(text, fields[key].type, f"{where}.{key}")
    if "active_levels" in skip:
        changes["active_levels"] = None  # follows num_levels
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as e:
        raise FormatError(f"{where}: {e}") from None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse INI text over the defaults.  Unknown sections and keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise FormatError(f"{source}: {e}".splitlines()[0]) from None
    cfg = RunConfig()
    scene_sections = [s for s in cp.sections() if s == "scene" or s.startswith(("wire:", "box:"))]
    for s in cp.sections():
        if s not in _SECTIONS and s not in scene_sections:
            raise FormatError(f"{source}: unknown section [{s}] (valid: {', '.join(list(_SECTIONS) + ['scene', 'wire:*', 'box:*'])})")
    for name, (path, skip) in _SECTIONS.items():
        if name not in cp:
            continue
        new = _update(_get(cfg, path), cp[name], skip, f"{source} [{name}]")
        if len(path) == 1:
            setattr(cfg, path[0], new)
        else:
            setattr(cfg.train, path[1], new)
    try:
        cfg.train = dataclasses.replace(cfg.train)  # re-validate
    except ValueError as e:
        raise FormatError(f"{source}: {e}") from None
    if scene_sections:
        cfg.scene = _scene_from_ini(cp, scene_sections, source)
    return cfg


def _scene_from_ini(cp, sections, source) -> Scene:
    base = {"background": "0.1", "speckle_amplitude": "0", "speckle_correlation_length": "0.5", "speckle_seed": "0"}
    if "scene" in cp:
        for k in cp["scene"]:
            if k not in base:
                raise FormatError(f"{source} [scene]: unknown key {k!r} (valid: {', '.join(sorted(base))})")
        base.update(cp["scene"])
    prims = []
    for s in sections:
        if s == "scene":
            continue
        proto = Wire((0, 0, 0), (0, 0, 1), 1.0) if s.startswith("wire:") else Box((0, 0, 0), (1, 1, 1))
        prims.append(_update(proto, cp[s], set(), f"{source} [{s}]"))
    try:
        amp = float(base["speckle_amplitude"])
        speckle = Speckle(amp, float(base["speckle_correlation_length"]), int(base["speckle_seed"])) if amp > 0 else None
        return Scene(tuple(prims), float(base["background"]), speckle)
    except ValueError as e:
        raise FormatError(f"{source} [scene]: {e}") from None


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_run_config(p.read_text(), str(p))


def save_run_config(path, cfg: RunConfig) -> Path:
    return atomic_write(path, run_config_to_ini(cfg))


# ---------------------------------------------------------------------------
# checkpoints


def _dtype_code(t: torch.Tensor) -> str:
    return {torch.float32: "<f4", torch.float64: "<f8"}[t.dtype]


def save_checkpoint(path, field: ImplicitField, pose_params=None, config: TrainConfig | None = None,
                    extra: dict | None = None) -> Path:
    """Binary checkpoint: magic, u32 version, u64 header length, JSON header,
    then raw little-endian tensors in header order."""
    tensors = {f"field.{k}": v.detach().cpu() for k, v in field.state_dict().items()}
    if pose_params is not None:
        tensors["pose_params"] = torch.as_tensor(np.asarray(pose_params, dtype=np.float64))
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        code = _dtype_code(t)
        blob = np.ascontiguousarray(t.numpy(), dtype=code).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    enc = field.encoding_config
    header = {
        "version": CHECKPOINT_VERSION,
        "encoding": {**dataclasses.asdict(enc), "active_levels": enc.num_levels},
        "mlp": dataclasses.asdict(field.mlp_config),
        "dtype": str(field.dtype).replace("torch.", ""),
        "tensors": entries,
        "train": _config_dict(config) if config is not None else None,
        "extra": extra or {},
    }
    hbytes = json.dumps(header).encode()
    data = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    return atomic_write(path, data)


def _config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["encoding"].pop("domain_min", None)
    d["encoding"].pop("domain_max", None)
    return d


def load_checkpoint(path) -> tuple[ImplicitField, np.ndarray | None, dict]:
    """Returns the field (all levels active), the ``(N, 6)`` pose refinement
    vectors if stored, and the JSON header."""
    data = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if data[:n] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[n:n + 12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[n + 12:n + 12 + hlen])
    body = data[n + 12 + hlen:]
    enc = header["encoding"]
    enc_cfg = HashEncodingConfig(**{**enc, "domain_min": tuple(enc["domain_min"]), "domain_max": tuple(enc["domain_max"])})
    dtype = {"float32": torch.float32, "float64": torch.float64}[header["dtype"]]
    field = ImplicitField(enc_cfg, MlpConfig(**header["mlp"]), dtype=dtype)
    state, poses = {}, None
    for e in header["tensors"]:
        if e["offset"] + e["nbytes"] > len(body):
            raise FormatError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(body, dtype=e["dtype"], count=math.prod(e["shape"]), offset=e["offset"]).reshape(e["shape"])
        if e["name"] == "pose_params":
            poses = arr.astype(np.float64)
        else:
            state[e["name"][len("field."):]] = torch.from_numpy(arr.copy())
    field.load_state_dict(state)
    return field, poses, header


# ---------------------------------------------------------------------------
# volumes, metrics, traces


def write_volume(path, volume: VolumeGrid, dtype: str = "<f4") -> tuple[Path, Path]:
    """Raw C-order array at ``path`` plus ``path + '.json'`` describing it."""
    path = Path(path)
    g = volume.grid
    meta = {"dims": list(g.dims), "spacing": list(g.spacing), "origin": list(g.origin),
            "axis_order": "data[i, j, k] <-> (x, y, z), C order (z fastest)",
            "origin_meaning": "centre of voxel (0, 0, 0), mm", "dtype": dtype}
    raw = atomic_write(path, np.ascontiguousarray(volume.data, dtype=dtype).tobytes())
    side = atomic_write(path.with_name(path.name + ".json"), json.dumps(meta, indent=2) + "\n")
    return raw, side


def read_volume(path) -> VolumeGrid:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    grid = GridSpec(tuple(meta["origin"]), tuple(meta["spacing"]), tuple(meta["dims"]))
    raw = path.read_bytes()
    itemsize = np.dtype(meta["dtype"]).itemsize
    if len(raw) != grid.n_voxels * itemsize:
        raise FormatError(f"{path}: {len(raw)} bytes, expected {grid.n_voxels * itemsize}")
    return VolumeGrid(grid, np.frombuffer(raw, dtype=meta["dtype"]).reshape(grid.dims))


def write_metrics(path, metrics: dict) -> tuple[Path, Path]:
    """``metric,value`` CSV plus an aligned plain-text copy next to it."""
    path = Path(path)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in metrics.items():
        w.writerow([k, repr(float(v)) if isinstance(v, (int, float, np.floating)) else v])
    width = max((len(k) for k in metrics), default=0)
    text = "".join(f"{k:<{width}}  {v:.6g}\n" if isinstance(v, (int, float, np.floating)) else f"{k:<{width}}  {v}\n"
                   for k, v in metrics.items())
    return atomic_write(path, buf.getvalue()), atomic_write(path.with_suffix(".txt"), text)


def read_metrics(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["metric", "value"]:
        raise FormatError(f"{path}: not a metrics file")
    out = {}
    for k, v in rows[1:]:
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


TRACE_HEADER = ["epoch", "l_i", "l_D", "l_theta", "R_V", "chi", "translation_delta_mm", "rotation_delta_deg",
                "K", "active_levels", "seconds"]


def write_trace(path, trace: list[EpochRecord]) -> Path:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in trace:
        w.writerow([r.epoch] + [repr(float(x)) for x in (
            r.intensity, r.distance, r.angle, r.volume, r.total, r.mean_translation_delta, r.mean_rotation_delta)]
            + [r.K, r.active_levels, repr(float(r.seconds))])
    return atomic_write(path, buf.getvalue())


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "K", "active_levels") else float(v)) for k, v in r.items()} for r in rows]

