"""Dataset build + lossless binary persistence.

File layout (all integers little-endian):

    bytes 0..3    magic ``DWM1``
    bytes 4..7    u32 format version (currently 1)
    bytes 8..15   u64 header length in bytes
    ...           header JSON (utf-8, sorted keys)
    ...           raw array payload at the offsets recorded in the header

The header's ``arrays`` table maps array names to ``{dtype, shape, offset,
nbytes}``; ``meta`` holds the config text, QA strings, and per-sequence
scalars.  Writing the same dataset twice produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .scene import (Box, QAPair, SceneFrame, SceneSequence, cast_lidar,
                    generate_scene, scene_qa)

MAGIC = b"DWM1"
FORMAT_VERSION = 1


class CorruptDatasetError(IOError):
    """The file is truncated or structurally invalid."""


class VersionError(CorruptDatasetError):
    """The file was written by an unsupported format version."""


@dataclass
class DrivingDataset:
    config: RunConfig
    sequences: list          # SceneSequence per entry
    depths: list             # (n_frames, n_rays) float64 per sequence
    qa: list                 # list[QAPair] per sequence

    def __len__(self) -> int:
        return len(self.sequences)


def sequence_seed(dataset_seed: int, index: int) -> int:
    return dataset_seed * 1_000_003 + index


def build_dataset(cfg: RunConfig, seed: int, n_sequences: int) -> DrivingDataset:
    """Generate scenes, cast ground-truth LiDAR, and attach QA text."""
    sequences, depths, qa = [], [], []
    for i in range(n_sequences):
        s = sequence_seed(seed, i)
        seq = generate_scene(cfg, s)
        sequences.append(seq)
        depths.append(np.stack([cast_lidar(f, cfg).depths for f in seq.frames]))
        qa.append(scene_qa(seq, s))
    return DrivingDataset(config=cfg, sequences=sequences, depths=depths, qa=qa)


def _pack_boxes(frame: SceneFrame) -> np.ndarray:
    rows = []
    for b in frame.boxes:
        rows.append(np.concatenate([b.center, b.size, [b.yaw], b.velocity,
                                    [float(b.class_id)]]))
    if not rows:
        return np.zeros((0, 10))
    return np.stack(rows)


def save_dataset(dataset: DrivingDataset, path) -> None:
    arrays = {}
    meta = {
        "config": dataset.config.to_text(),
        "n_sequences": len(dataset.sequences),
        "sequences": [],
        "qa": [],
    }
    for i, seq in enumerate(dataset.sequences):
        ego = np.array([[f.ego_xy[0], f.ego_xy[1], f.ego_yaw, f.ego_speed,
                         f.ego_yaw_rate] for f in seq.frames])
        boxes = np.stack([_pack_boxes(f) for f in seq.frames]) \
            if seq.frames[0].boxes else np.zeros((len(seq.frames), 0, 10))
        arrays[f"seq{i}/ego"] = ego
        arrays[f"seq{i}/boxes"] = boxes
        arrays[f"seq{i}/depths"] = dataset.depths[i]
        meta["sequences"].append({"seed": seq.seed, "dt": seq.dt,
                                  "ground_z": seq.frames[0].ground_z})
        for pair in dataset.qa[i]:
            meta["qa"].append({"seq": i, "frame": pair.frame_index,
                               "template": pair.template_id,
                               "instruction": pair.instruction,
                               "answer": pair.answer})

    table = {}
    offset = 0
    order = sorted(arrays)
    for name in order:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        arrays[name] = arr
        table[name] = {"dtype": "<f8", "shape": list(arr.shape),
                       "offset": offset, "nbytes": arr.nbytes}
        offset += arr.nbytes

    header = json.dumps({"arrays": table, "meta": meta},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in order:
            fh.write(arrays[name].tobytes())


def load_dataset(path) -> DrivingDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptDatasetError("not a DWM1 dataset file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if 16 + hlen > len(blob):
        raise CorruptDatasetError("truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        table = header["arrays"]
        meta = header["meta"]
    except (ValueError, KeyError) as exc:
        raise CorruptDatasetError(f"bad header: {exc}") from exc

    payload = 16 + hlen
    arrays = {}
    for name, spec in table.items():
        start = payload + spec["offset"]
        end = start + spec["nbytes"]
        if end > len(blob):
            raise CorruptDatasetError(f"truncated payload for {name!r}")
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(spec["dtype"]))
        arrays[name] = arr.reshape(spec["shape"]).copy()

    cfg = RunConfig.from_text(meta["config"])
    sequences, depths = [], []
    for i, seq_meta in enumerate(meta["sequences"]):
        ego = arrays[f"seq{i}/ego"]
        boxes = arrays[f"seq{i}/boxes"]
        frames = []
        for t in range(ego.shape[0]):
            frame_boxes = [
                Box(center=row[0:3].copy(), size=row[3:6].copy(),
                    yaw=float(row[6]), velocity=row[7:9].copy(),
                    class_id=int(row[9]))
                for row in boxes[t]
            ]
            frames.append(SceneFrame(index=t, ego_xy=ego[t, 0:2].copy(),
                                     ego_yaw=float(ego[t, 2]),
                                     ego_speed=float(ego[t, 3]),
                                     ego_yaw_rate=float(ego[t, 4]),
                                     boxes=frame_boxes,
                                     ground_z=seq_meta["ground_z"]))
        sequences.append(SceneSequence(frames=frames, dt=seq_meta["dt"],
                                       seed=seq_meta["seed"]))
        depths.append(arrays[f"seq{i}/depths"])

    qa = [[] for _ in sequences]
    for row in meta["qa"]:
        qa[row["seq"]].append(QAPair(instruction=row["instruction"],
                                     answer=row["answer"],
                                     template_id=row["template"],
                                     frame_index=row["frame"]))
    return DrivingDataset(config=cfg, sequences=sequences, depths=depths, qa=qa)
