"""Distribution-guided feature sampling and the cross-video memory bank."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, FormatError

# region-level vectors per class: ME, MaE, background
DEFAULT_REGIONS = (2, 3, 10)


def mask_features(X, Y_hat):
    """Rows of X selected by each column of the pseudo-label matrix, in temporal order."""
    Y_hat = np.asarray(Y_hat)
    if Y_hat.shape[0] != X.shape[0]:
        raise ConfigurationError(f"X has {X.shape[0]} rows, labels have {Y_hat.shape[0]}")
    out = []
    for c in range(Y_hat.shape[1]):
        idx = np.flatnonzero(Y_hat[:, c] > 0)
        out.append(X[torch.as_tensor(idx)] if isinstance(X, torch.Tensor) else X[idx])
    return out


def dfs_region_vectors(rows, K: int):
    """Main vector (mean of all rows) followed by the means of K contiguous chunks.

    Chunk sizes differ by at most one, earlier chunks larger. With fewer than K
    rows each row is its own chunk and the result is partial. Returns
    (vectors, partial) or (None, False) when ``rows`` is empty.
    Works for numpy arrays and torch tensors alike.
    """
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    n = rows.shape[0]
    if n == 0:
        return None, False
    parts = min(K, n)
    base, extra = divmod(n, parts)
    vecs = [rows.mean(0)]
    start = 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        vecs.append(rows[start:start + size].mean(0))
        start += size
    stack = torch.stack(vecs) if isinstance(rows, torch.Tensor) else np.stack(vecs)
    return stack, parts < K


@dataclass
class RegionVectorSet:
    """Region-level vectors of one video; ``vectors[c]`` is None when class c is absent."""

    vectors: list
    regions: tuple[int, ...]
    partial: list[bool] = field(default_factory=list)

    @property
    def present(self) -> list[bool]:
        return [v is not None for v in self.vectors]

    def detached(self) -> "RegionVectorSet":
        vecs = [None if v is None else (v.detach().cpu().numpy().astype(np.float64) if isinstance(v, torch.Tensor)
                                        else np.asarray(v, dtype=np.float64)) for v in self.vectors]
        return RegionVectorSet(vecs, tuple(self.regions), list(self.partial))


def region_vectors(X, Y_hat, regions=DEFAULT_REGIONS) -> RegionVectorSet:
    sets = mask_features(X, Y_hat)
    if len(sets) != len(regions):
        raise ConfigurationError(f"{len(sets)} label columns but {len(regions)} region counts configured")
    vecs, partial = [], []
    for rows, K in zip(sets, regions):
        v, p = dfs_region_vectors(rows, K)
        vecs.append(v)
        partial.append(p)
    return RegionVectorSet(vecs, tuple(regions), partial)


class MemoryBank:
    """Per-video region vectors; an update replaces the video's entry wholesale."""

    def __init__(self, regions=DEFAULT_REGIONS):
        self.regions = tuple(int(k) for k in regions)
        self.entries: dict[str, RegionVectorSet] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, video_id):
        return video_id in self.entries

    def __getitem__(self, video_id) -> RegionVectorSet:
        return self.entries[video_id]

    def update(self, video_id: str, q: RegionVectorSet):
        if tuple(q.regions) != self.regions:
            raise ConfigurationError(f"region config {tuple(q.regions)} does not match bank {self.regions}")
        for v, K in zip(q.vectors, self.regions):
            if v is not None and not 2 <= v.shape[0] <= K + 1:
                raise ConfigurationError(f"region set has {v.shape[0]} vectors for K={K}")
        self.entries[video_id] = q.detached()

    def contrastive_sets(self, anchor_class: int, exclude: str | None = None):
        """Positives: same-class vectors of other videos. Negatives: other foreground classes and background."""
        bg = len(self.regions) - 1
        if not 0 <= anchor_class < bg:
            raise ValueError(f"anchor class must be a foreground class in [0, {bg}), got {anchor_class}")
        pos, neg = [], []
        for vid in sorted(self.entries):
            if vid == exclude:
                continue
            for c, v in enumerate(self.entries[vid].vectors):
                if v is None:
                    continue
                (pos if c == anchor_class else neg).append(v)
        dim = next((v.shape[1] for e in self.entries.values() for v in e.vectors if v is not None), 0)
        P = np.concatenate(pos) if pos else np.zeros((0, dim))
        N = np.concatenate(neg) if neg else np.zeros((0, dim))
        return P, N

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        index, blobs, offset = [], [], 0
        for vid in sorted(self.entries):
            e = self.entries[vid]
            item = {"video_id": vid, "classes": [], "partial": e.partial}
            for v in e.vectors:
                if v is None:
                    item["classes"].append(None)
                    continue
                item["classes"].append({"offset": offset, "shape": list(v.shape)})
                blobs.append(v.astype("<f4").tobytes())
                offset += v.size
            index.append(item)
        head = json.dumps({"regions": list(self.regions), "entries": index}, separators=(",", ":")).encode()
        Path(path).write_bytes(struct.pack("<I", len(head)) + head + b"".join(blobs))

    @classmethod
    def load(cls, path) -> "MemoryBank":
        blob = Path(path).read_bytes()
        (n,) = struct.unpack_from("<I", blob, 0)
        try:
            head = json.loads(blob[4:4 + n])
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: bad bank index ({exc})") from exc
        data = np.frombuffer(blob[4 + n:], dtype="<f4")
        bank = cls(head["regions"])
        for item in head["entries"]:
            vecs = []
            for meta in item["classes"]:
                if meta is None:
                    vecs.append(None)
                    continue
                size = int(np.prod(meta["shape"]))
                vecs.append(data[meta["offset"]:meta["offset"] + size].reshape(meta["shape"]).astype(np.float64))
            bank.entries[item["video_id"]] = RegionVectorSet(vecs, bank.regions, item["partial"])
        return bank


def update_memory(bank: MemoryBank, video_id: str, q: RegionVectorSet):
    bank.update(video_id, q)


def contrastive_sets(bank: MemoryBank, anchor_class: int, exclude: str | None = None):
    return bank.contrastive_sets(anchor_class, exclude)
