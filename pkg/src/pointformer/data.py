"""Dataset handling: OFF meshes, the PCLD container, synthetic shapes, batching.

Directory layout for on-disk datasets is ``root/<class_name>/<split>/*.pcld``
(or ``*.off`` before preprocessing). The PCLD container is a little-endian
binary: magic ``PCLD``, u32 format version (1), u32 label, u32 point count,
then count x 3 float64 coordinates. Round trips are bit exact.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TriMesh, normalize_cloud

log = logging.getLogger(__name__)

PCLD_MAGIC = b"PCLD"
PCLD_VERSION = 1


class OffParseError(ValueError):
    """Malformed OFF text; message carries the 1-based line number."""


class PcldFormatError(ValueError):
    """Malformed PCLD payload."""


@dataclass
class PointCloud:
    """An (N, 3) position array with a class label and optional features."""

    positions: np.ndarray
    label: int
    features: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.positions.shape[0] < 1:
            raise ValueError("point cloud is empty")
        if not np.isfinite(self.positions).all():
            raise ValueError("point cloud contains non-finite coordinates")

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]


@dataclass
class Dataset:
    items: list[PointCloud]
    class_names: list[str]
    split: str = "train"

    def __post_init__(self):
        for it in self.items:
            if not 0 <= it.label < len(self.class_names):
                raise ValueError(
                    f"label {it.label} out of range for {len(self.class_names)} classes"
                )

    def __len__(self) -> int:
        return len(self.items)

    def label_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.class_names}
        for it in self.items:
            counts[self.class_names[it.label]] += 1
        return counts


@dataclass
class BatchSpec:
    batch_size: int
    shuffle_seed: int
    points_per_cloud: int

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.points_per_cloud < 1:
            raise ValueError("points_per_cloud must be >= 1")


# ---------------------------------------------------------------------------
# OFF mesh format
# ---------------------------------------------------------------------------


def _off_tokens(text: str):
    """Yield (token, line_number) pairs, dropping '#' comments."""
    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0]
        for tok in body.split():
            yield tok, ln


def _to_num(tok: str, ln: int, kind=float):
    try:
        return kind(tok)
    except ValueError:
        raise OffParseError(f"line {ln}: expected a number, got {tok!r}") from None


def parse_off(text: str) -> TriMesh:
    """Parse OFF mesh text, including the glued-header ModelNet variant.

    Some ModelNet files run the counts straight into the magic token
    ("OFF492 1000 0"); both spellings are accepted. Polygonal faces with
    more than three vertices are fan-triangulated around their first vertex.
    """
    toks = _off_tokens(text)
    try:
        first, ln0 = next(toks)
    except StopIteration:
        raise OffParseError("line 1: empty OFF file") from None
    if not first.startswith("OFF"):
        raise OffParseError(f"line {ln0}: missing OFF header, got {first!r}")
    pending = []
    if first != "OFF":  # glued header: counts start inside the magic token
        pending.append((first[3:], ln0))

    def next_tok():
        if pending:
            return pending.pop(0)
        try:
            return next(toks)
        except StopIteration:
            raise OffParseError("unexpected end of file (count mismatch)") from None

    counts = [_to_num(*next_tok(), kind=int) for _ in range(3)]
    nv, nf, _ne = counts
    if nv < 0 or nf < 0:
        raise OffParseError("negative vertex or face count")

    verts = np.empty((nv, 3), dtype=np.float64)
    for i in range(nv):
        for j in range(3):
            verts[i, j] = _to_num(*next_tok())

    tris: list[tuple[int, int, int]] = []
    for _ in range(nf):
        tok, ln = next_tok()
        arity = _to_num(tok, ln, kind=int)
        if arity < 3:
            raise OffParseError(f"line {ln}: face needs at least 3 vertices, got {arity}")
        idx = []
        for _ in range(arity):
            tok, ln = next_tok()
            v = _to_num(tok, ln, kind=int)
            if not 0 <= v < nv:
                raise OffParseError(f"line {ln}: face index {v} out of range [0, {nv})")
            idx.append(v)
        for j in range(1, arity - 1):  # fan triangulation
            tris.append((idx[0], idx[j], idx[j + 1]))

    faces = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    return TriMesh(vertices=verts, faces=faces)


def write_off(mesh: TriMesh) -> str:
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.faces)} 0"]
    for v in mesh.vertices:
        lines.append(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# PCLD binary container
# ---------------------------------------------------------------------------


def write_pcld(path, cloud: PointCloud) -> None:
    payload = cloud.positions.astype("<f8").tobytes()
    header = PCLD_MAGIC + struct.pack("<III", PCLD_VERSION, cloud.label, cloud.num_points)
    Path(path).write_bytes(header + payload)


def read_pcld(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != PCLD_MAGIC:
        raise PcldFormatError(f"{path}: bad magic (not a PCLD file)")
    if len(raw) < 16:
        raise PcldFormatError(f"{path}: truncated header")
    version, label, count = struct.unpack("<III", raw[4:16])
    if version != PCLD_VERSION:
        raise PcldFormatError(f"{path}: unsupported PCLD version {version}")
    expected = 16 + count * 3 * 8
    if len(raw) < expected:
        raise PcldFormatError(
            f"{path}: truncated payload ({len(raw)} bytes, expected {expected} "
            f"for {count} points)"
        )
    if len(raw) > expected:
        raise PcldFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    pts = np.frombuffer(raw, dtype="<f8", offset=16, count=count * 3).reshape(count, 3)
    return PointCloud(positions=pts.copy(), label=label, name=Path(path).stem)


# ---------------------------------------------------------------------------
# Synthetic shape families
# ---------------------------------------------------------------------------

SYNTH_CLASS_NAMES = (
    "sphere", "cube", "cylinder", "torus", "cone",
    "plane", "helix", "cross", "two_spheres", "line",
)
DEFAULT_JITTER = 0.02


def _unit_sphere(rng, n, radius=1.0, center=(0.0, 0.0, 0.0)):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius + np.asarray(center)


def _synth_surface(class_id: int, rng: np.random.Generator, n: int) -> np.ndarray:
    if class_id == 0:  # sphere
        return _unit_sphere(rng, n)
    if class_id == 1:  # cube surface
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        for a in range(3):
            m = axis == a
            others = [o for o in range(3) if o != a]
            pts[m, a] = sign[m]
            pts[np.nonzero(m)[0][:, None], others] = uv[m]
        return pts
    if class_id == 2:  # cylinder (lateral surface)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        z = rng.uniform(-1.0, 1.0, size=n)
        return np.stack([0.5 * np.cos(theta), 0.5 * np.sin(theta), z], axis=1)
    if class_id == 3:  # torus
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        ring = 1.0 + 0.35 * np.cos(phi)
        return np.stack([ring * np.cos(theta), ring * np.sin(theta), 0.35 * np.sin(phi)], axis=1)
    if class_id == 4:  # cone (slant surface, apex up)
        t = rng.uniform(0.0, 1.0, size=n)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        r = 0.8 * (1.0 - t)
        return np.stack([r * np.cos(theta), r * np.sin(theta), 1.6 * t - 0.8], axis=1)
    if class_id == 5:  # plane patch
        xy = rng.uniform(-1.0, 1.0, size=(n, 2))
        return np.concatenate([xy, np.zeros((n, 1))], axis=1)
    if class_id == 6:  # helix
        t = rng.uniform(0.0, 1.0, size=n)
        ang = 4.0 * np.pi * t
        return np.stack([0.7 * np.cos(ang), 0.7 * np.sin(ang), 1.6 * t - 0.8], axis=1)
    if class_id == 7:  # cross: two orthogonal bars
        along = rng.uniform(-1.0, 1.0, size=n)
        sect = rng.uniform(-0.125, 0.125, size=(n, 2))
        arm = rng.integers(0, 2, size=n)
        pts = np.empty((n, 3))
        x_arm = arm == 0
        pts[x_arm, 0] = along[x_arm]
        pts[x_arm, 1] = sect[x_arm, 0]
        pts[~x_arm, 0] = sect[~x_arm, 0]
        pts[~x_arm, 1] = along[~x_arm]
        pts[:, 2] = sect[:, 1]
        return pts
    if class_id == 8:  # two spheres
        side = np.where(rng.integers(0, 2, size=n) == 0, -0.8, 0.8)
        pts = _unit_sphere(rng, n, radius=0.45)
        pts[:, 0] += side
        return pts
    if class_id == 9:  # line segment along a diagonal
        t = rng.uniform(-1.0, 1.0, size=n)
        d = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
        return t[:, None] * d
    raise ValueError(f"unknown synthetic class id {class_id} (expected 0..9)")


def synth_generate(class_id: int, seed: int, n_points: int,
                   jitter: float = DEFAULT_JITTER) -> PointCloud:
    """Generate one normalized cloud from a parametric shape family.

    Deterministic in (class_id, seed). ``jitter`` is the Gaussian noise
    standard deviation added to every coordinate before normalization.
    """
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    if not 0 <= class_id < len(SYNTH_CLASS_NAMES):
        raise ValueError(f"unknown synthetic class id {class_id} (expected 0..9)")
    rng = np.random.default_rng([class_id, seed])
    pts = _synth_surface(class_id, rng, n_points)
    if jitter > 0.0:
        pts = pts + rng.normal(scale=jitter, size=pts.shape)
    return PointCloud(
        positions=normalize_cloud(pts),
        label=class_id,
        name=f"{SYNTH_CLASS_NAMES[class_id]}_{seed}",
    )


def synth_dataset(classes: list[str] | tuple[str, ...], per_class: int, n_points: int,
                  seed: int, split: str = "train",
                  jitter: float = DEFAULT_JITTER) -> Dataset:
    """Build a labeled dataset of synthetic clouds, ``per_class`` each.

    Labels index into ``classes`` (the requested subset), not the global
    family list. The seed stream is derived from (seed, split, class, item),
    so train and test splits never share a cloud.
    """
    split_code = {"train": 0, "test": 1}.get(split)
    if split_code is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    items = []
    for label, name in enumerate(classes):
        if name not in SYNTH_CLASS_NAMES:
            raise ValueError(f"unknown synthetic class {name!r}")
        cid = SYNTH_CLASS_NAMES.index(name)
        for i in range(per_class):
            item_seed = int(np.random.SeedSequence([seed, split_code, cid, i]).entropy % (2**31))
            cloud = synth_generate(cid, item_seed, n_points, jitter=jitter)
            items.append(PointCloud(positions=cloud.positions, label=label,
                                    name=f"{name}_{split}_{i}"))
    return Dataset(items=items, class_names=list(classes), split=split)


# ---------------------------------------------------------------------------
# Directory loading and batching
# ---------------------------------------------------------------------------


def load_dataset(root, split: str) -> Dataset:
    """Load ``root/<class_name>/<split>/*.pcld`` into a Dataset.

    Classes are ordered by sorted directory name; the directory determines
    the label. Per-class counts are logged at load time.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"dataset root {root} has no class directories")
    class_names = [d.name for d in class_dirs]
    items = []
    for label, d in enumerate(class_dirs):
        split_dir = d / split
        if not split_dir.is_dir():
            continue
        for f in sorted(split_dir.glob("*.pcld")):
            cloud = read_pcld(f)
            items.append(PointCloud(positions=cloud.positions, label=label, name=f.stem))
    if not items:
        raise ValueError(f"no .pcld files found under {root} for split {split!r}")
    ds = Dataset(items=items, class_names=class_names, split=split)
    log.info("loaded %s split %r: %s", root, split, ds.label_counts())
    return ds


def _resample(positions: np.ndarray, p: int, rng: np.random.Generator) -> np.ndarray:
    n = positions.shape[0]
    if n == p:
        return positions
    if n > p:
        pick = rng.choice(n, size=p, replace=False)
    else:
        pick = rng.choice(n, size=p, replace=True)
    return positions[pick]


def make_batches(dataset: Dataset, spec: BatchSpec, epoch: int = 0):
    """Yield (positions (B, P, 3), labels (B,)) batches for one epoch.

    The shuffle is reseeded per epoch from (shuffle_seed, epoch), and each
    cloud is resampled to exactly ``points_per_cloud`` points: a random
    subsample when larger, sampling with replacement when smaller. The last
    short batch is kept.
    """
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    rng = np.random.default_rng([spec.shuffle_seed, epoch])
    order = rng.permutation(len(dataset))
    p = spec.points_per_cloud
    for lo in range(0, len(order), spec.batch_size):
        chunk = order[lo:lo + spec.batch_size]
        positions = np.stack([_resample(dataset.items[i].positions, p, rng) for i in chunk])
        labels = np.asarray([dataset.items[i].label for i in chunk], dtype=np.int64)
        yield positions, labels
