"""File formats: navigation CSV, binary match sets, reconstruction output.

The navigation frame is a local East-North-Up metric frame anchored at the
survey centroid (mean latitude/longitude/depth of the records), using an
equirectangular small-area approximation with a spherical Earth radius.
Vehicle attitude follows yaw-pitch-roll applied in that order about the
down axis / rotated intermediate axes; zero angles mean a level vehicle
whose body axes coincide with ENU.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose

__all__ = [
    "EARTH_RADIUS_M",
    "MatchFileError",
    "MatchSet",
    "NavigationError",
    "NavigationRecord",
    "PairMatches",
    "LandmarkRecord",
    "parse_navigation",
    "read_matches",
    "write_matches",
    "records_from_vehicle_poses",
    "write_navigation",
    "read_reconstruction",
    "write_reconstruction",
]

EARTH_RADIUS_M = 6371000.0

NAV_HEADER = ["image_id", "t", "lat", "lon", "depth", "yaw", "pitch", "roll"]

MATCH_MAGIC = b"NVSM"
MATCH_VERSION = 1
_PAIR_HEADER = struct.Struct("<III")
_FILE_HEADER = struct.Struct("<4sII")

LANDMARK_MAGIC = b"NVSL"
LANDMARK_VERSION = 1

# NED <-> ENU change of basis (a proper rotation: 180 deg about (1,1,0)/sqrt2)
_M_NED_ENU = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])


class NavigationError(ValueError):
    pass


class MatchFileError(ValueError):
    pass


@dataclass
class NavigationRecord:
    image_id: int
    t: float
    lat: float
    lon: float
    depth: float
    yaw: float
    pitch: float
    roll: float

    def __post_init__(self) -> None:
        if not abs(self.lat) <= 90.0:
            raise NavigationError(f"latitude out of range: {self.lat}")
        if not abs(self.lon) <= 180.0:
            raise NavigationError(f"longitude out of range: {self.lon}")
        if not self.depth >= 0.0:
            raise NavigationError(f"depth must be non-negative: {self.depth}")
        for name in ("t", "yaw", "pitch", "roll"):
            if not np.isfinite(getattr(self, name)):
                raise NavigationError(f"non-finite {name}")


def _rot_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def attitude_matrix(yaw_deg: float, pitch_deg: float, roll_deg: float) -> np.ndarray:
    """Vehicle-to-world rotation for yaw-pitch-roll about the Z-down frame.

    Zero angles give the identity (body axes aligned with ENU); yaw alone is
    a rotation about the world down axis.
    """
    ypr = np.radians([yaw_deg, pitch_deg, roll_deg])
    R_ned = _rot_z(ypr[0]) @ _rot_y(ypr[1]) @ _rot_x(ypr[2])
    return _M_NED_ENU @ R_ned @ _M_NED_ENU


def attitude_angles(R_wb: np.ndarray) -> tuple[float, float, float]:
    """Inverse of attitude_matrix, degrees. Assumes |pitch| < 90 deg."""
    R = _M_NED_ENU @ R_wb @ _M_NED_ENU
    yaw = np.degrees(np.arctan2(R[1, 0], R[0, 0]))
    pitch = np.degrees(-np.arcsin(np.clip(R[2, 0], -1.0, 1.0)))
    roll = np.degrees(np.arctan2(R[2, 1], R[2, 2]))
    return float(yaw), float(pitch), float(roll)


def _enu_from_records(records: list[NavigationRecord]) -> tuple[np.ndarray, np.ndarray]:
    lats = np.array([r.lat for r in records])
    lons = np.array([r.lon for r in records])
    depths = np.array([r.depth for r in records])
    anchor = np.array([lats.mean(), lons.mean(), depths.mean()])
    east = EARTH_RADIUS_M * np.radians(lons - anchor[1]) * np.cos(np.radians(anchor[0]))
    north = EARTH_RADIUS_M * np.radians(lats - anchor[0])
    up = -(depths - anchor[2])
    return np.column_stack([east, north, up]), anchor


def parse_navigation(path) -> tuple[list[NavigationRecord], list[Pose], np.ndarray]:
    """Read a navigation CSV.

    Returns:
        (records, vehicle poses ^pT_w in the centroid-anchored ENU frame,
        anchor as [lat, lon, depth]).

    Raises:
        NavigationError: wrong header, malformed row (with line number),
            or duplicate image ids.
    """
    path = Path(path)
    records: list[NavigationRecord] = []
    seen: set[int] = set()
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise NavigationError(f"{path}: empty file") from None
        if [h.strip() for h in header] != NAV_HEADER:
            raise NavigationError(
                f"{path}: header must be exactly {','.join(NAV_HEADER)}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(NAV_HEADER):
                raise NavigationError(f"{path}:{line_no}: expected {len(NAV_HEADER)} fields")
            try:
                rec = NavigationRecord(
                    image_id=int(row[0]),
                    t=float(row[1]),
                    lat=float(row[2]),
                    lon=float(row[3]),
                    depth=float(row[4]),
                    yaw=float(row[5]),
                    pitch=float(row[6]),
                    roll=float(row[7]),
                )
            except (ValueError, NavigationError) as exc:
                raise NavigationError(f"{path}:{line_no}: {exc}") from None
            if rec.image_id in seen:
                raise NavigationError(f"{path}:{line_no}: duplicate image id {rec.image_id}")
            seen.add(rec.image_id)
            records.append(rec)
    if not records:
        raise NavigationError(f"{path}: no records")
    enu, anchor = _enu_from_records(records)
    poses = []
    for rec, center in zip(records, enu):
        R_wb = attitude_matrix(rec.yaw, rec.pitch, rec.roll)
        R = R_wb.T
        poses.append(Pose.from_rt(R, -R @ center))
    return records, poses, anchor


def records_from_vehicle_poses(
    poses: list[Pose],
    timestamps,
    anchor: tuple[float, float, float],
    image_ids=None,
) -> list[NavigationRecord]:
    """Convert vehicle poses to navigation records around a given anchor.

    parse_navigation anchors at the record centroid, so an exact round trip
    requires the pose centers to average to zero (the simulator centers its
    surveys for this reason).
    """
    lat0, lon0, depth0 = anchor
    records = []
    ids = image_ids if image_ids is not None else range(len(poses))
    for image_id, pose, t in zip(ids, poses, timestamps):
        center = pose.center()
        east, north, up = center
        lat = lat0 + np.degrees(north / EARTH_RADIUS_M)
        lon = lon0 + np.degrees(east / (EARTH_RADIUS_M * np.cos(np.radians(lat0))))
        depth = depth0 - up
        yaw, pitch, roll = attitude_angles(pose.rotation().T)
        records.append(
            NavigationRecord(
                image_id=int(image_id),
                t=float(t),
                lat=float(lat),
                lon=float(lon),
                depth=float(depth),
                yaw=yaw,
                pitch=pitch,
                roll=roll,
            )
        )
    return records


def write_navigation(records: list[NavigationRecord], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(NAV_HEADER)
        for r in records:
            writer.writerow(
                [
                    r.image_id,
                    f"{r.t:.6f}",
                    f"{r.lat:.14f}",
                    f"{r.lon:.14f}",
                    f"{r.depth:.9f}",
                    f"{r.yaw:.12f}",
                    f"{r.pitch:.12f}",
                    f"{r.roll:.12f}",
                ]
            )


# ---------------------------------------------------------------------------
# match sets


@dataclass
class PairMatches:
    """Correspondences for one image pair (i < j).

    Pixels are float64 in memory; the on-disk format stores float32, so a
    file round trip quantizes to float32 precision.
    """

    feat_i: np.ndarray
    feat_j: np.ndarray
    pix_i: np.ndarray
    pix_j: np.ndarray

    def __post_init__(self) -> None:
        self.feat_i = np.asarray(self.feat_i, dtype=np.int32).reshape(-1)
        self.feat_j = np.asarray(self.feat_j, dtype=np.int32).reshape(-1)
        n = len(self.feat_i)
        self.pix_i = np.asarray(self.pix_i, dtype=np.float64).reshape(n, 2)
        self.pix_j = np.asarray(self.pix_j, dtype=np.float64).reshape(n, 2)
        if len(self.feat_j) != n:
            raise ValueError("feature index arrays must have equal length")

    def __len__(self) -> int:
        return len(self.feat_i)


@dataclass
class MatchSet:
    """All pairwise correspondences of a survey."""

    image_count: int
    pairs: dict[tuple[int, int], PairMatches]

    def __post_init__(self) -> None:
        for (i, j) in self.pairs:
            if not (0 <= i < j < self.image_count):
                raise ValueError(f"invalid pair key ({i}, {j})")

    def feature_pixels(self) -> dict[int, np.ndarray]:
        """Per-image dense feature table: feature index -> pixel.

        Feature pixel coordinates must agree wherever a feature appears in
        several pairs; disagreement means a corrupt match set.
        """
        tables: dict[int, dict[int, np.ndarray]] = {}
        for (i, j), pm in self.pairs.items():
            for img, feats, pix in ((i, pm.feat_i, pm.pix_i), (j, pm.feat_j, pm.pix_j)):
                table = tables.setdefault(img, {})
                for f, p in zip(feats, pix):
                    prev = table.get(int(f))
                    if prev is None:
                        table[int(f)] = p
                    elif not np.array_equal(prev, p):
                        raise MatchFileError(
                            f"image {img} feature {f} has inconsistent pixels"
                        )
        dense: dict[int, np.ndarray] = {}
        for img, table in tables.items():
            n = max(table) + 1 if table else 0
            arr = np.full((n, 2), np.nan, dtype=np.float32)
            for f, p in table.items():
                arr[f] = p
            dense[img] = arr
        return dense


def write_matches(match_set: MatchSet, path) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_FILE_HEADER.pack(MATCH_MAGIC, MATCH_VERSION, match_set.image_count))
        for (i, j) in sorted(match_set.pairs):
            pm = match_set.pairs[(i, j)]
            fh.write(_PAIR_HEADER.pack(i, j, len(pm)))
            # interleaved records: two int32 feature indices, four float32 pixels
            raw = np.empty(len(pm), dtype=[("fi", "<i4"), ("fj", "<i4"), ("p", "<f4", 4)])
            raw["fi"] = pm.feat_i
            raw["fj"] = pm.feat_j
            raw["p"][:, 0:2] = pm.pix_i
            raw["p"][:, 2:4] = pm.pix_j
            fh.write(raw.tobytes())


def read_matches(path) -> MatchSet:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _FILE_HEADER.size:
        raise MatchFileError(f"{path}: truncated header")
    magic, version, image_count = _FILE_HEADER.unpack_from(data, 0)
    if magic != MATCH_MAGIC:
        raise MatchFileError(f"{path}: bad magic {magic!r}")
    if version != MATCH_VERSION:
        raise MatchFileError(f"{path}: unsupported version {version}")
    offset = _FILE_HEADER.size
    pairs: dict[tuple[int, int], PairMatches] = {}
    record_dtype = np.dtype([("fi", "<i4"), ("fj", "<i4"), ("p", "<f4", 4)])
    while offset < len(data):
        if offset + _PAIR_HEADER.size > len(data):
            raise MatchFileError(f"{path}: truncated pair header at byte {offset}")
        i, j, count = _PAIR_HEADER.unpack_from(data, offset)
        offset += _PAIR_HEADER.size
        nbytes = count * record_dtype.itemsize
        if offset + nbytes > len(data):
            raise MatchFileError(f"{path}: truncated block for pair ({i}, {j})")
        raw = np.frombuffer(data, dtype=record_dtype, count=count, offset=offset)
        offset += nbytes
        pairs[(i, j)] = PairMatches(
            feat_i=raw["fi"].copy(),
            feat_j=raw["fj"].copy(),
            pix_i=raw["p"][:, 0:2].copy(),
            pix_j=raw["p"][:, 2:4].copy(),
        )
    return MatchSet(image_count=image_count, pairs=pairs)


# ---------------------------------------------------------------------------
# reconstruction output


@dataclass
class LandmarkRecord:
    """One landmark with its track: observations are (image, feature, x, y)."""

    landmark_id: int
    position: np.ndarray
    observations: np.ndarray  # (n, 4) float64: image id, feature id, px, py

    def __post_init__(self) -> None:
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.observations = np.asarray(self.observations, dtype=float).reshape(-1, 4)


def write_reconstruction(poses_path, landmarks_path, poses: dict[int, Pose], landmarks) -> None:
    """Write the plain-text poses file and binary landmarks file."""
    poses_path = Path(poses_path)
    with poses_path.open("w") as fh:
        fh.write("# image_id qw qx qy qz tx ty tz\n")
        for image_id in sorted(poses):
            p = poses[image_id]
            vals = " ".join(f"{v:.17g}" for v in np.concatenate([p.q, p.t]))
            fh.write(f"{image_id} {vals}\n")

    landmarks_path = Path(landmarks_path)
    with landmarks_path.open("wb") as fh:
        fh.write(struct.pack("<4sIQ", LANDMARK_MAGIC, LANDMARK_VERSION, len(landmarks)))
        for lm in landmarks:
            fh.write(struct.pack("<q3dI", int(lm.landmark_id), *lm.position, len(lm.observations)))
            obs = np.empty(
                len(lm.observations), dtype=[("img", "<i4"), ("feat", "<i4"), ("p", "<f4", 2)]
            )
            obs["img"] = lm.observations[:, 0].astype(np.int32)
            obs["feat"] = lm.observations[:, 1].astype(np.int32)
            obs["p"] = lm.observations[:, 2:4].astype(np.float32)
            fh.write(obs.tobytes())


def read_reconstruction(poses_path, landmarks_path) -> tuple[dict[int, Pose], list[LandmarkRecord]]:
    poses: dict[int, Pose] = {}
    for line in Path(poses_path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{poses_path}: malformed pose line: {line!r}")
        image_id = int(parts[0])
        vals = np.array([float(x) for x in parts[1:]])
        poses[image_id] = Pose(vals[:4], vals[4:])

    data = Path(landmarks_path).read_bytes()
    head = struct.Struct("<4sIQ")
    if len(data) < head.size:
        raise ValueError(f"{landmarks_path}: truncated header")
    magic, version, count = head.unpack_from(data, 0)
    if magic != LANDMARK_MAGIC or version != LANDMARK_VERSION:
        raise ValueError(f"{landmarks_path}: bad magic/version")
    offset = head.size
    lm_head = struct.Struct("<q3dI")
    obs_dtype = np.dtype([("img", "<i4"), ("feat", "<i4"), ("p", "<f4", 2)])
    landmarks = []
    for _ in range(count):
        if offset + lm_head.size > len(data):
            raise ValueError(f"{landmarks_path}: truncated landmark header")
        lm_id, x, y, z, n_obs = lm_head.unpack_from(data, offset)
        offset += lm_head.size
        nbytes = n_obs * obs_dtype.itemsize
        if offset + nbytes > len(data):
            raise ValueError(f"{landmarks_path}: truncated landmark {lm_id}")
        raw = np.frombuffer(data, dtype=obs_dtype, count=n_obs, offset=offset)
        offset += nbytes
        obs = np.column_stack(
            [raw["img"], raw["feat"], raw["p"][:, 0].astype(float), raw["p"][:, 1].astype(float)]
        )
        landmarks.append(LandmarkRecord(lm_id, np.array([x, y, z]), obs))
    return poses, landmarks
