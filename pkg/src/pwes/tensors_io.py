"""Data model, feature container I/O and synthetic planted-interval datasets."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, FormatError, ShapeError, SynthesisError

logger = logging.getLogger(__name__)

MAGIC = b"PWES1\0"
CLASS_NAMES = ("ME", "MaE")


@dataclass
class PointAnnotation:
    psi: int
    label: np.ndarray  # one-hot over C+1 classes, background (index C) never set

    def __post_init__(self):
        self.psi = int(self.psi)
        self.label = np.asarray(self.label, dtype=np.int64)
        if self.label.ndim != 1 or self.label.size < 2:
            raise DataError(f"annotation label must be a vector of length C+1, got shape {self.label.shape}")
        if self.label.sum() != 1 or not np.isin(self.label, (0, 1)).all():
            raise DataError(f"annotation label must be one-hot, got {self.label.tolist()}")
        if self.label[-1] != 0:
            raise DataError("annotation label cannot be the background class")

    @property
    def class_index(self) -> int:
        return int(np.argmax(self.label))

    @classmethod
    def of_class(cls, psi: int, c: int, num_classes: int) -> "PointAnnotation":
        y = np.zeros(num_classes + 1, dtype=np.int64)
        y[c] = 1
        return cls(psi, y)


@dataclass
class VideoRecord:
    video_id: str
    features_raw: np.ndarray
    features_flow: np.ndarray
    frame_count: int
    fps: float
    snippet_len: int
    annotations: list[PointAnnotation] = field(default_factory=list)
    gt_intervals: list[tuple[int, int]] | None = None
    num_classes: int = 2

    def __post_init__(self):
        self.features_raw = np.ascontiguousarray(self.features_raw, dtype=np.float32)
        self.features_flow = np.ascontiguousarray(self.features_flow, dtype=np.float32)
        self.validate()

    @property
    def T(self) -> int:
        return self.frame_count // self.snippet_len

    @property
    def D(self) -> int:
        return self.features_raw.shape[1]

    def validate(self):
        if self.snippet_len < 1:
            raise FormatError(f"snippet_len must be >= 1, got {self.snippet_len}")
        T = self.T
        for name in ("features_raw", "features_flow"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != T:
                raise ShapeError(f"{name} has shape {arr.shape}, expected ({T}, D) for L={self.frame_count}, g={self.snippet_len}")
            if not np.isfinite(arr).all():
                raise DataError(f"{name} contains NaN or Inf")
        if self.features_raw.shape != self.features_flow.shape:
            raise ShapeError(f"raw {self.features_raw.shape} and flow {self.features_flow.shape} features disagree")
        for ann in self.annotations:
            if ann.label.size != self.num_classes + 1:
                raise DataError(f"annotation at {ann.psi} has {ann.label.size} classes, expected {self.num_classes + 1}")
            if not 0 <= ann.psi < self.frame_count or ann.psi // self.snippet_len >= T:
                raise DataError(f"annotation frame {ann.psi} outside the snippetized video (L={self.frame_count})")
        if self.gt_intervals is not None:
            spans = sorted((int(a), int(b)) for a, b in self.gt_intervals)
            for (a0, b0), (a1, _) in zip(spans, spans[1:]):
                if a1 <= b0:
                    raise DataError(f"ground-truth intervals [{a0},{b0}] and [{a1},...] overlap")
            for a, b in spans:
                if a > b:
                    raise DataError(f"malformed ground-truth interval [{a},{b}]")


@dataclass
class ManifestEntry:
    video_id: str
    subject_id: str
    path: str


@dataclass
class DatasetManifest:
    name: str
    videos: list[ManifestEntry]
    fps: float
    snippet_len: int
    class_names: list[str] = field(default_factory=lambda: list(CLASS_NAMES))

    def __post_init__(self):
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest video_ids must be unique")
        if any(not v.subject_id for v in self.videos):
            raise FormatError("every manifest entry needs a non-empty subject_id")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "fps": self.fps,
            "g": self.snippet_len,
            "class_names": list(self.class_names),
            "videos": [{"video_id": v.video_id, "subject_id": v.subject_id, "path": v.path} for v in self.videos],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        try:
            videos = [ManifestEntry(str(v["video_id"]), str(v["subject_id"]), str(v["path"])) for v in doc["videos"]]
            return cls(doc["name"], videos, float(doc["fps"]), int(doc["g"]), list(doc.get("class_names", CLASS_NAMES)))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest: missing or invalid field {exc}") from exc


def save_manifest(manifest: DatasetManifest, path):
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2))


def load_manifest(path) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    return DatasetManifest.from_json(doc)


def load_dataset(manifest_path) -> tuple[DatasetManifest, list[VideoRecord]]:
    manifest = load_manifest(manifest_path)
    root = Path(manifest_path).parent
    records = [load_video(root / v.path) for v in manifest.videos]
    return manifest, records


# -- container format ---------------------------------------------------------

def _header(record: VideoRecord) -> dict:
    header = {
        "video_id": record.video_id,
        "L": int(record.frame_count),
        "fps": float(record.fps),
        "g": int(record.snippet_len),
        "T": int(record.T),
        "D": int(record.D),
        "C": int(record.num_classes),
        "annotations": [{"psi": a.psi, "label": a.label.tolist()} for a in record.annotations],
    }
    if record.gt_intervals is not None:
        header["gt_intervals"] = [[int(a), int(b)] for a, b in record.gt_intervals]
    return header


def encode_video(record: VideoRecord) -> bytes:
    head = json.dumps(_header(record), separators=(",", ":")).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<I", len(head)),
        head,
        record.features_raw.astype("<f4").tobytes(order="C"),
        record.features_flow.astype("<f4").tobytes(order="C"),
    ])


def write_video(record: VideoRecord, path):
    Path(path).write_bytes(encode_video(record))


def decode_video(blob: bytes, source: str = "<bytes>") -> VideoRecord:
    if not blob.startswith(MAGIC):
        raise FormatError(f"{source}: bad magic bytes")
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise FormatError(f"{source}: truncated header length")
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    try:
        header = json.loads(blob[pos:pos + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: header is not valid UTF-8 JSON ({exc})") from exc
    pos += n
    for key in ("video_id", "L", "fps", "g", "T", "D", "annotations"):
        if key not in header:
            raise FormatError(f"{source}: header missing field '{key}'")
    L, g, T, D = header["L"], header["g"], header["T"], header["D"]
    for key in ("L", "g", "T", "D"):
        if not isinstance(header[key], int) or header[key] < 0:
            raise FormatError(f"{source}: header field '{key}' must be a non-negative integer")
    if g < 1:
        raise FormatError(f"{source}: header field 'g' must be >= 1")
    if T != L // g:
        raise ShapeError(f"{source}: T={T} but floor(L/g)={L // g}")
    size = T * D * 4
    payload = blob[pos:]
    if len(payload) != 2 * size:
        raise ShapeError(f"{source}: feature payload is {len(payload)} bytes, expected 2 x {T}x{D} float32 ({2 * size})")
    raw = np.frombuffer(payload[:size], dtype="<f4").reshape(T, D)
    flow = np.frombuffer(payload[size:], dtype="<f4").reshape(T, D)
    try:
        anns = [PointAnnotation(a["psi"], a["label"]) for a in header["annotations"]]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{source}: malformed annotation entry ({exc})") from exc
    C = header.get("C", anns[0].label.size - 1 if anns else len(CLASS_NAMES))
    gts = header.get("gt_intervals")
    return VideoRecord(
        video_id=str(header["video_id"]),
        features_raw=raw.astype(np.float32),
        features_flow=flow.astype(np.float32),
        frame_count=L,
        fps=float(header["fps"]),
        snippet_len=g,
        annotations=anns,
        gt_intervals=[(int(a), int(b)) for a, b in gts] if gts is not None else None,
        num_classes=int(C),
    )


def load_video(path) -> VideoRecord:
    return decode_video(Path(path).read_bytes(), str(path))


# -- labels -------------------------------------------------------------------

def derive_video_labels(annotations, num_classes: int) -> np.ndarray:
    """Video-level labels; the background entry is always 1."""
    y = np.zeros(num_classes + 1, dtype=np.int64)
    for ann in annotations:
        y[:num_classes] |= ann.label[:num_classes]
    y[num_classes] = 1
    return y


def annotation_snippet_indices(record: VideoRecord) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique snippet indices of the point labels and their (merged, multi-hot) label rows."""
    merged: dict[int, np.ndarray] = {}
    for ann in record.annotations:
        t = ann.psi // record.snippet_len
        merged[t] = merged.get(t, 0) | ann.label
    idx = np.array(sorted(merged), dtype=np.int64)
    rows = np.array([merged[t] for t in idx], dtype=np.int64).reshape(len(idx), record.num_classes + 1)
    return idx, rows


def point_label_matrix(record: VideoRecord) -> np.ndarray:
    """T x (C+1) point-label matrix Y (background column always zero)."""
    Y = np.zeros((record.T, record.num_classes + 1), dtype=np.int64)
    idx, rows = annotation_snippet_indices(record)
    Y[idx] = rows
    return Y


def gt_classes(record: VideoRecord, me_seconds: float = 0.5) -> list[int]:
    """Class of every ground-truth interval, read off the annotation it contains.

    Intervals without an annotation fall back to the duration rule (ME iff shorter than ``me_seconds``).
    """
    out = []
    for on, off in record.gt_intervals or []:
        inside = [a.class_index for a in record.annotations if on <= a.psi <= off]
        if inside:
            out.append(inside[0])
        else:
            out.append(0 if (off - on + 1) / record.fps < me_seconds else 1)
    return out


def sample_point_labels(gt_intervals, classes, mode: str = "random", seed: int = 0, num_classes: int = 2):
    """One point annotation per interval: a uniform random frame, or the apex (midpoint)."""
    if mode not in ("random", "apex"):
        raise ConfigurationError(f"unknown supervision mode {mode!r}")
    rng = np.random.default_rng(seed)
    anns = []
    for (on, off), c in zip(gt_intervals, classes):
        if off < on:
            raise DataError(f"empty interval [{on},{off}]")
        psi = int(rng.integers(on, off + 1)) if mode == "random" else (on + off) // 2
        anns.append(PointAnnotation.of_class(psi, c, num_classes))
    return anns


# -- synthesis ----------------------------------------------------------------

@dataclass
class SynthConfig:
    n_videos: int = 40
    t_range: tuple[int, int] = (90, 110)
    dim: int = 32
    num_classes: int = 2
    # interval durations in snippets, per class (ME shorter than MaE)
    durations: tuple[tuple[int, int], ...] = ((1, 3), (4, 10))
    intervals_per_video: tuple[int, int] = (2, 4)
    class_probs: tuple[float, ...] = (0.35, 0.65)
    sigma: float = 0.5
    bg_density: float = 0.8
    # per-class mean vectors (C+1 rows, last = background); drawn from the seed when None
    class_means: list[list[float]] | None = None
    mean_scale: float = 1.0
    # scale of the background mean; a small value models a near-static neutral face
    bg_mean_scale: float = 0.3
    # expression intensity at the interval edges relative to the apex (1.0 = flat);
    # snippets blend background and class means along a half-sine profile
    intensity_floor: float = 1.0
    min_gap: int = 1
    snippet_len: int = 4
    fps: float = 30.0
    n_subjects: int = 5
    supervision: str = "random"
    name: str = "synthetic"

    def means(self, rng) -> np.ndarray:
        if self.class_means is not None:
            m = np.asarray(self.class_means, dtype=np.float64)
            if m.shape != (self.num_classes + 1, self.dim):
                raise SynthesisError(f"class_means must be {(self.num_classes + 1, self.dim)}, got {m.shape}")
            return m
        m = rng.normal(0.0, self.mean_scale, size=(self.num_classes + 1, self.dim))
        m[-1] *= self.bg_mean_scale / self.mean_scale if self.mean_scale else 0.0
        return m


def _place_intervals(rng, T, cfg: SynthConfig):
    budget = int(np.floor((1.0 - cfg.bg_density) * T + 1e-9))
    lo, hi = cfg.intervals_per_video
    n = int(rng.integers(lo, hi + 1))
    classes = [int(rng.choice(cfg.num_classes, p=cfg.class_probs)) for _ in range(n)]
    durs = [int(rng.integers(cfg.durations[c][0], cfg.durations[c][1] + 1)) for c in classes]
    # drop trailing intervals until the foreground budget is met
    while n > 1 and sum(durs) > budget:
        n -= 1
        classes, durs = classes[:n], durs[:n]
    if sum(durs) > budget:
        raise SynthesisError(f"a {durs[0]}-snippet interval exceeds the foreground budget {budget} (T={T}, bg_density={cfg.bg_density})")
    free = T - sum(durs) - (n - 1) * cfg.min_gap
    if free < 0:
        raise SynthesisError(f"{n} intervals of total length {sum(durs)} cannot fit disjointly in T={T}")
    cuts = np.sort(rng.integers(0, free + 1, size=n))
    gaps = np.diff(np.concatenate([[0], cuts]))
    spans, t = [], 0
    for i in range(n):
        t += int(gaps[i]) + (cfg.min_gap if i > 0 else 0)
        spans.append((t, t + durs[i] - 1))
        t += durs[i]
    return spans, classes


def synth_dataset(cfg: SynthConfig, seed: int) -> tuple[list[VideoRecord], DatasetManifest]:
    """Planted-interval dataset: class mean + Gaussian noise on foreground, background mean elsewhere."""
    if not 0.0 <= cfg.bg_density < 1.0:
        raise SynthesisError(f"bg_density must lie in [0, 1), got {cfg.bg_density}")
    if not 0.0 <= cfg.intensity_floor <= 1.0:
        raise SynthesisError(f"intensity_floor must lie in [0, 1], got {cfg.intensity_floor}")
    if len(cfg.durations) != cfg.num_classes or len(cfg.class_probs) != cfg.num_classes:
        raise SynthesisError("durations and class_probs need one entry per class")
    rng = np.random.default_rng(seed)
    means = cfg.means(rng)
    g = cfg.snippet_len
    per_subject = -(-cfg.n_videos // cfg.n_subjects)
    records, entries = [], []
    for i in range(cfg.n_videos):
        T = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
        spans, classes = _place_intervals(rng, T, cfg)
        snippet_class = np.full(T, cfg.num_classes)
        intensity = np.zeros(T)
        for (a, b), c in zip(spans, classes):
            snippet_class[a:b + 1] = c
            d = b - a + 1
            intensity[a:b + 1] = cfg.intensity_floor + (1 - cfg.intensity_floor) * np.sin(np.pi * (np.arange(d) + 0.5) / d)
        clean = means[-1] + intensity[:, None] * (means[snippet_class] - means[-1])
        feats = []
        for _ in range(2):
            noise = rng.normal(0.0, 1.0, size=(T, cfg.dim))
            feats.append((clean + cfg.sigma * noise).astype(np.float32))
        L = T * g + int(rng.integers(0, g))
        gts = [(a * g, (b + 1) * g - 1) for a, b in spans]
        anns = sample_point_labels(gts, classes, cfg.supervision, seed=int(rng.integers(2**31)), num_classes=cfg.num_classes)
        vid = f"{cfg.name}_{i:03d}"
        records.append(VideoRecord(vid, feats[0], feats[1], L, cfg.fps, g, anns, gts, cfg.num_classes))
        entries.append(ManifestEntry(vid, f"s{i // per_subject:02d}", f"{vid}.pwes"))
    manifest = DatasetManifest(cfg.name, entries, cfg.fps, g, list(CLASS_NAMES[:cfg.num_classes]) if cfg.num_classes <= 2
                               else [f"class{c}" for c in range(cfg.num_classes)])
    return records, manifest


def write_dataset(records, manifest: DatasetManifest, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {v.video_id: v for v in manifest.videos}
    for r in records:
        write_video(r, out / by_id[r.video_id].path)
    save_manifest(manifest, out / "manifest.json")
    return out / "manifest.json"
