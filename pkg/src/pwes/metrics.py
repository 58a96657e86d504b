"""MEGC-style spotting evaluation: IoU matching and the F1 variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .proposals import ME, Proposal, union_set


def iou(a, b) -> float:
    """IoU of two inclusive frame intervals, counted in frames."""
    (a0, a1), (b0, b1) = a, b
    if a0 > a1 or b0 > b1:
        raise ValueError(f"malformed interval: {a} / {b}")
    inter = min(a1, b1) - max(a0, b0) + 1
    if inter <= 0:
        return 0.0
    return inter / ((a1 - a0 + 1) + (b1 - b0 + 1) - inter)


def _span(p):
    return (p.onset, p.offset) if isinstance(p, Proposal) else (p[0], p[1])


def _score(p):
    return p.score if isinstance(p, Proposal) else float(p[2])


def match(proposals, gts, k_eval: float = 0.5):
    """Greedy one-to-one matching in descending confidence.

    Each proposal takes the unmatched ground truth with the highest IoU (lowest
    index on ties) when that IoU reaches ``k_eval``. Returns (TP, FP, FN, pairs)
    with pairs as (proposal index, gt index).
    """
    if not 0 < k_eval <= 1:
        raise ValueError(f"k_eval must lie in (0, 1], got {k_eval}")
    order = sorted(range(len(proposals)), key=lambda i: (-_score(proposals[i]), _span(proposals[i])[0],
                                                          -(_span(proposals[i])[1] - _span(proposals[i])[0])))
    taken = [False] * len(gts)
    pairs = []
    for i in order:
        best, best_j = -1.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            v = iou(_span(proposals[i]), (gt[0], gt[1]))
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= k_eval:
            taken[best_j] = True
            pairs.append((i, best_j))
    tp = len(pairs)
    return tp, len(proposals) - tp, len(gts) - tp, pairs


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, other: "Counts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    def summary(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "recall": self.recall,
                "precision": self.precision, "f1": self.f1}


def f1_score(precision: float, recall: float) -> float:
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def count(proposals, gts, k_eval=0.5) -> Counts:
    tp, fp, fn, _ = match(proposals, gts, k_eval)
    return Counts(tp, fp, fn)


@dataclass
class EvalReport:
    recall: float
    precision: float
    f1: float
    f1_05: float
    f1_10: float
    f1_p: float
    tp: int
    fp: int
    fn: int
    best_set: int | None
    set_f1: dict = field(default_factory=dict)
    per_video: dict = field(default_factory=dict)
    recall_defined: bool = True

    def to_json(self) -> dict:
        d = asdict(self)
        d["set_f1"] = {str(k): v for k, v in self.set_f1.items()}
        return d

    def table(self) -> str:
        head = f"{'F1(0.5)':>8} {'F1(1.0)':>8} {'F1(p)':>8} {'REC':>8} {'PRE':>8} {'F1':>8}"
        row = " ".join(f"{v:8.3f}" for v in (self.f1_05, self.f1_10, self.f1_p, self.recall, self.precision, self.f1))
        return head + "\n" + row


def _duration(p: Proposal, fps: float) -> float:
    return (p.offset - p.onset + 1) / fps


def f1_variants(per_top: dict, gts: dict, fps: float, k_eval: float = 0.5, nms_threshold: float = 0.01) -> EvalReport:
    """Overall and ME-specific scores.

    per_top: {video_id: {set key: [Proposal]}}; gts: {video_id: [(on, off, class)]}.
    The optimal set is the key whose proposals (over all videos) give the best
    overall F1; REC/PRE/F1 and F1(p) come from it. F1(0.5) and F1(1.0) use the
    NMS-merged union of every set.
    """
    videos = sorted(set(per_top) | set(gts))
    keys = sorted({k for v in per_top.values() for k in v})
    set_counts = {}
    for key in keys:
        total = Counts()
        for vid in videos:
            total.add(count(per_top.get(vid, {}).get(key, []), gts.get(vid, []), k_eval))
        set_counts[key] = total
    best = max(keys, key=lambda k: (set_counts[k].f1, -k)) if keys else None
    overall = set_counts[best] if best is not None else Counts(fn=sum(len(g) for g in gts.values()))

    def me_f1(select, limit) -> float:
        total = Counts()
        for vid in videos:
            props = [p for p in select(vid) if _duration(p, fps) < limit]
            me_gts = [g for g in gts.get(vid, []) if g[2] == ME]
            total.add(count(props, me_gts, k_eval))
        return total.f1

    unions = {vid: union_set(per_top.get(vid, {}), nms_threshold) for vid in videos}
    best_of = (lambda vid: per_top.get(vid, {}).get(best, [])) if best is not None else (lambda vid: [])
    per_video = {vid: count(best_of(vid), gts.get(vid, []), k_eval).summary() for vid in videos}
    return EvalReport(
        recall=overall.recall, precision=overall.precision, f1=overall.f1,
        f1_05=me_f1(lambda vid: unions[vid], 0.5),
        f1_10=me_f1(lambda vid: unions[vid], 1.0),
        f1_p=me_f1(best_of, 0.5),
        tp=overall.tp, fp=overall.fp, fn=overall.fn, best_set=best,
        set_f1={k: set_counts[k].f1 for k in keys},
        per_video=per_video,
        recall_defined=any(gts.get(v) for v in videos),
    )
