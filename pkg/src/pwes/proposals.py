"""Inference-time proposal construction, outer-inner scoring and NMS."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

ME, MAE = 0, 1


@dataclass
class Proposal:
    onset: int  # inclusive frame
    offset: int  # inclusive frame
    label: int | None = None
    phi: np.ndarray | None = None
    k_src: int = 0

    @property
    def score(self) -> float:
        return float(np.max(self.phi)) if self.phi is not None and len(self.phi) else 0.0

    @property
    def length(self) -> int:
        return self.offset - self.onset + 1

    def snippets(self, g: int) -> tuple[int, int]:
        return self.onset // g, self.offset // g

    def to_json(self, video_id: str) -> dict:
        return {"video_id": video_id, "on": int(self.onset), "off": int(self.offset), "label": self.label,
                "phi": [float(x) for x in self.phi] if self.phi is not None else None, "k_src": int(self.k_src)}

    @classmethod
    def from_json(cls, doc: dict) -> "Proposal":
        phi = np.asarray(doc["phi"], dtype=np.float64) if doc.get("phi") is not None else None
        return cls(int(doc["on"]), int(doc["off"]), doc.get("label"), phi, int(doc.get("k_src", 0)))


DEFAULT_RATIOS = tuple(round(0.05 * i, 2) for i in range(1, 11))


def default_top_set(T: int, ratios=DEFAULT_RATIOS) -> list[int]:
    """Top values on a ratio ladder, one per rung.

    Short videos can map two rungs to the same value; the repeat is kept so that
    rung positions stay aligned across videos (multi_top_proposals deduplicates).
    """
    return [min(T, max(1, int(math.floor(r * T + 0.5)))) for r in ratios]


def runs(indices) -> list[tuple[int, int]]:
    """Maximal runs of consecutive integers in a sorted index list."""
    out = []
    for t in indices:
        if out and t == out[-1][1] + 1:
            out[-1] = (out[-1][0], t)
        else:
            out.append((t, t))
    return out


def top_proposals(A, g: int, k: int) -> list[Proposal]:
    A = np.asarray(A, dtype=np.float64)
    chosen = np.sort(np.argsort(-A, kind="stable")[:k])
    return [Proposal(a * g, (b + 1) * g - 1, k_src=k) for a, b in runs(chosen.tolist())]


def multi_top_proposals(A, g: int, top_set) -> list[Proposal]:
    """Union of the consecutive runs of the top-k attention snippets over every k in ``top_set``.

    Identical spans are kept once, tagged with the smallest k that produced them.
    """
    T = len(A)
    spans: dict[tuple[int, int], Proposal] = {}
    for k in sorted(set(int(k) for k in top_set)):
        if not 1 <= k <= T:
            raise ValueError(f"top value {k} outside [1, {T}]")
        for p in top_proposals(A, g, k):
            spans.setdefault((p.onset, p.offset), p)
    return sorted(spans.values(), key=lambda p: (p.onset, p.offset))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def oic_score(p: Proposal, S_hat, g: int, inflation: float = 0.25) -> np.ndarray:
    """Inner mean minus mean over the inflated outer band, per class."""
    S_hat = np.asarray(S_hat, dtype=np.float64)
    T = S_hat.shape[0]
    a, b = p.snippets(g)
    if a < 0 or b >= T or a > b:
        raise ValueError(f"proposal [{p.onset}, {p.offset}] outside the {T}-snippet video")
    m = max(1, _round_half_up(inflation * (b - a + 1)))
    inner = S_hat[a:b + 1]
    outer = np.concatenate([S_hat[max(0, a - m):a], S_hat[b + 1:min(T, b + 1 + m)]])
    if outer.shape[0] == 0:
        return inner.mean(axis=0)
    return inner.mean(axis=0) - outer.mean(axis=0)


def temporal_iou(a: Proposal, b: Proposal) -> float:
    inter = min(a.offset, b.offset) - max(a.onset, b.onset) + 1
    if inter <= 0:
        return 0.0
    return inter / (a.length + b.length - inter)


def nms(props: list[Proposal], iou_threshold: float = 0.01) -> list[Proposal]:
    """Greedy class-agnostic NMS on max(phi); ties go to the earlier onset, then the longer span."""
    order = sorted(props, key=lambda p: (-p.score, p.onset, -p.length))
    keep: list[Proposal] = []
    for p in order:
        if all(temporal_iou(p, q) <= iou_threshold for q in keep):
            keep.append(p)
    return keep


def classify_by_duration(p: Proposal, fps: float, me_seconds: float = 0.5) -> int:
    return ME if (p.offset - p.onset + 1) / fps < me_seconds else MAE


def score_and_classify(props, S_hat, g, fps, inflation=0.25) -> list[Proposal]:
    return [replace(p, phi=oic_score(p, S_hat, g, inflation), label=classify_by_duration(p, fps)) for p in props]


def video_proposal_sets(A, S_hat, g, fps, top_set, inflation=0.25, iou_threshold=0.01) -> dict[int, list[Proposal]]:
    """Proposals from each top value alone, scored, NMS-filtered and classified.

    Keys are positions in ``top_set`` (the ladder rung), so sets from videos of
    different lengths line up even though their absolute top values differ.
    """
    out = {}
    for rung, k in enumerate(top_set):
        scored = score_and_classify(top_proposals(A, g, k), S_hat, g, fps, inflation)
        out[rung] = sorted(nms(scored, iou_threshold), key=lambda p: (p.onset, p.offset))
    return out


def union_set(per_top: dict[int, list[Proposal]], iou_threshold=0.01) -> list[Proposal]:
    """Merge the per-top sets of one video: drop duplicate spans (keeping the smallest k), then NMS."""
    spans: dict[tuple[int, int], Proposal] = {}
    for p in sorted((p for ps in per_top.values() for p in ps), key=lambda p: p.k_src):
        spans.setdefault((p.onset, p.offset), p)
    return sorted(nms(list(spans.values()), iou_threshold), key=lambda p: (p.onset, p.offset))


def write_proposals(path, per_video: dict[str, dict[int, list[Proposal]]]):
    lines = []
    for vid in sorted(per_video):
        for key in sorted(per_video[vid]):
            for p in per_video[vid][key]:
                doc = p.to_json(vid)
                doc["set"] = key
                lines.append(json.dumps(doc, separators=(",", ":")))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_proposals(path) -> dict[str, dict[int, list[Proposal]]]:
    out: dict[str, dict[int, list[Proposal]]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        p = Proposal.from_json(doc)
        out.setdefault(doc["video_id"], {}).setdefault(int(doc.get("set", p.k_src)), []).append(p)
    return out
