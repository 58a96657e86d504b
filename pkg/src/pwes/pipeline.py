"""Training loop, LOSO splitting, inference and reporting."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import objectives as obj
from .config import RunConfig
from .dfcl import MemoryBank, region_vectors
from .errors import ConfigurationError, DivergenceError
from .metrics import EvalReport, f1_variants
from .mplg import PseudoLabelMatrix, mplg
from .network import PwesNet, build_model, default_k_mil, save_checkpoint, topk_pool
from .proposals import Proposal, video_proposal_sets
from .tensors_io import DatasetManifest, VideoRecord, derive_video_labels, gt_classes, point_label_matrix

logger = logging.getLogger(__name__)


def configure_torch():
    threads = int(os.environ.get("PWES_THREADS", "1"))
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


def loso_splits(manifest: DatasetManifest) -> list[tuple[list[str], str, list[str]]]:
    """One fold per subject: (training video ids, held-out subject, test video ids)."""
    subjects = sorted({v.subject_id for v in manifest.videos})
    folds = []
    for s in subjects:
        test = [v.video_id for v in manifest.videos if v.subject_id == s]
        train = [v.video_id for v in manifest.videos if v.subject_id != s]
        folds.append((train, s, test))
    return folds


def split_records(records, manifest: DatasetManifest, test_subject: str | None):
    if test_subject is None:
        return list(records), []
    subject = {v.video_id: v.subject_id for v in manifest.videos}
    if test_subject not in subject.values():
        raise ConfigurationError(f"subject {test_subject!r} not in manifest")
    train = [r for r in records if subject[r.video_id] != test_subject]
    test = [r for r in records if subject[r.video_id] == test_subject]
    return train, test


@dataclass
class VideoStep:
    """Losses and by-products of one video in one training step."""

    components: dict
    pseudo: PseudoLabelMatrix | None = None
    regions: object = None
    outputs: object = None  # the ScoreTensors the losses were computed from


def video_losses(model: PwesNet, record: VideoRecord, cfg: RunConfig, bank: MemoryBank | None,
                 mine: bool, frozen: dict | None = None) -> VideoStep:
    """All loss components for one video.

    ``frozen`` lets a caller pin the non-differentiable inputs (pseudo labels
    and mutual-learning targets) to values computed elsewhere, which is what a
    finite-difference check needs.
    """
    out = model.run(record)
    C = record.num_classes
    k_mil = min(out.S.shape[0], default_k_mil(out.S.shape[0], cfg.k_mil_ratio))
    y_v = derive_video_labels(record.annotations, C)
    comps = {
        "mil1": obj.mil_loss_full(topk_pool(out.S, k_mil), y_v),
        "mil2": obj.mil_loss_fg(topk_pool(out.S_hat, k_mil), y_v[:C]),
    }
    Y = point_label_matrix(record)
    pseudo = None
    if frozen is not None and "Y_hat" in frozen:
        Y_hat = frozen["Y_hat"]
    elif mine and record.annotations:
        pseudo = mplg(out.X.detach().numpy(), Y[:, :C], out.S[:, :C].detach().numpy(),
                      out.A.detach().numpy(), cfg.mplg_config)
        Y_hat = pseudo.Y_hat
    else:
        Y_hat = np.zeros_like(Y)
    Y_tilde, valid = obj.combined_labels(Y, Y_hat)
    S_cat = torch.cat([out.S_hat, out.S[:, C:]], dim=1)
    comps["scl"] = obj.snippet_cls_loss(S_cat, Y_tilde, valid)
    comps["gui"] = obj.guide_loss(out.A, out.S)
    comps["sps"] = obj.sparsity_loss(out.A_r, out.A_f)
    targets = frozen.get("aml_targets") if frozen else None
    comps["aml"] = obj.mutual_loss(out.A_r, out.A_f, targets)

    q = None
    if cfg.use_dfcl and bank is not None and Y_hat.any():
        q = region_vectors(out.X, Y_hat, cfg.regions)
        loss, skipped = obj.contrastive_loss(q, bank, record.video_id, cfg.tau)
        comps["fcl"] = None if skipped else loss
    return VideoStep(comps, pseudo, q, out)


def _batches(n_videos: int, batch_size: int, rng):
    while True:
        order = rng.permutation(n_videos)
        for i in range(0, n_videos, batch_size):
            chunk = order[i:i + batch_size]
            if len(chunk) < batch_size and n_videos >= batch_size:
                # top up from the next permutation so every batch has the configured size
                chunk = np.concatenate([chunk, rng.permutation(n_videos)[:batch_size - len(chunk)]])
            yield chunk


@dataclass
class TrainResult:
    model: PwesNet
    bank: MemoryBank
    log: list = field(default_factory=list)
    pseudo_labels: dict = field(default_factory=dict)


def train(cfg: RunConfig, records: list[VideoRecord], log_path=None, on_step=None) -> TrainResult:
    """Pretraining on point labels, then per-step mining and contrastive learning."""
    configure_torch()
    if not records:
        raise ConfigurationError("no training videos")
    records = sorted(records, key=lambda r: r.video_id)
    D, C = records[0].D, records[0].num_classes
    model = build_model(D, cfg.emb_dim, C, cfg.seed, cfg.tcam_activation)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    bank = MemoryBank(cfg.regions)
    rng = np.random.default_rng(cfg.seed)
    batches = _batches(len(records), cfg.batch_size, rng)
    log, last_pseudo = [], {}
    fh = open(log_path, "w") if log_path else None
    try:
        for it in range(1, cfg.total_iters + 1):
            full = it > cfg.pretrain_iters
            mine = full and cfg.use_mplg and (it - cfg.pretrain_iters - 1) % cfg.mplg_every == 0
            batch = sorted((records[i] for i in next(batches)), key=lambda r: r.video_id)
            steps = []
            for r in batch:
                steps.append(video_losses(model, r, cfg, bank if full else None, mine))
            joint = sum(obj.joint_loss(s.components, cfg.weights) for s in steps) / len(steps)
            entry = {"iteration": it}
            for name in obj.COMPONENTS:
                vals = [s.components.get(name) for s in steps]
                vals = [float(v.detach()) for v in vals if v is not None]
                entry[name] = sum(vals) / len(steps) if vals else None
            entry["joint"] = float(joint.detach())
            if not math.isfinite(entry["joint"]):
                raise DivergenceError(f"non-finite loss at iteration {it}",
                                      {"iteration": it, "videos": [r.video_id for r in batch], "losses": entry})
            opt.zero_grad()
            joint.backward()
            opt.step()
            # bank and labels change only between optimization steps
            for r, s in zip(batch, steps):
                if s.regions is not None:
                    bank.update(r.video_id, s.regions)
                if s.pseudo is not None:
                    last_pseudo[r.video_id] = s.pseudo
            entry["bank_size"] = len(bank)
            entry["mined"] = sum(1 for s in steps if s.pseudo is not None)
            log.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
            if on_step:
                on_step(entry)
    finally:
        if fh:
            fh.close()
    return TrainResult(model, bank, log, last_pseudo)


def save_run(result: TrainResult, cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "checkpoint.bin"
    save_checkpoint(result.model, path, cfg.training_dict(), cfg.seed)
    result.bank.save(out / "bank.bin")
    return path


# -- inference and reporting --------------------------------------------------

@torch.no_grad()
def infer(model: PwesNet, records, cfg: RunConfig) -> dict[str, dict[int, list[Proposal]]]:
    """Per video and ladder rung: scored, NMS-filtered, duration-classified proposals."""
    configure_torch()
    out = {}
    for r in sorted(records, key=lambda r: r.video_id):
        s = model.run(r)
        A = s.A.double().numpy()
        out[r.video_id] = video_proposal_sets(A, s.S_hat.double().numpy(), r.snippet_len, r.fps,
                                              cfg.top_set(r.T), cfg.oic_inflation, cfg.nms_threshold)
    return out


def ground_truth(records) -> dict[str, list[tuple[int, int, int]]]:
    return {r.video_id: [(on, off, c) for (on, off), c in zip(r.gt_intervals or [], gt_classes(r))] for r in records}


def evaluate(per_video, records, cfg: RunConfig) -> EvalReport:
    fps = records[0].fps if records else 30.0
    return f1_variants(per_video, ground_truth(records), fps, cfg.k_eval, cfg.nms_threshold)


def plot_timeline(record: VideoRecord, attention, proposals, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    g = record.snippet_len
    t = (np.arange(record.T) + 0.5) * g
    fig, ax = plt.subplots(figsize=(10, 2.6))
    for on, off in record.gt_intervals or []:
        ax.axvspan(on, off + 1, color="tab:green", alpha=0.25, lw=0)
    for p in proposals:
        ax.hlines(1.05, p.onset, p.offset + 1, colors="tab:red", lw=4)
    for a in record.annotations:
        ax.axvline(a.psi, color="k", ls=":", lw=1)
    if attention is not None:
        ax.plot(t, attention, color="tab:blue", lw=1.2)
    ax.set_ylim(0, 1.12)
    ax.set_xlim(0, record.T * g)
    ax.set_xlabel("frame")
    ax.set_ylabel("attention")
    ax.set_title(record.video_id)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def write_report(report: EvalReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True))
    (out / "results.txt").write_text(report.table() + "\n")
    return path
