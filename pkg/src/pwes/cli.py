"""Command-line entry point: ``pwes synth|train|mine|infer|eval|report``.

Exit codes: 0 on success, 2 on invalid input or configuration, 3 when
training diverges.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pydantic
import torch

from .config import RunConfig
from .errors import DivergenceError, PwesError
from .mplg import mplg
from .network import load_checkpoint
from .pipeline import evaluate, infer, plot_timeline, save_run, split_records, train, write_report
from .proposals import read_proposals, union_set, write_proposals
from .tensors_io import SynthConfig, load_dataset, point_label_matrix, synth_dataset, write_dataset

logger = logging.getLogger("pwes")

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


def _config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "manifest", None):
        updates["manifest"] = args.manifest
    if getattr(args, "test_subject", None):
        updates["test_subject"] = args.test_subject
    return RunConfig(**{**cfg.model_dump(), **updates}) if updates else cfg


def _dataset(cfg: RunConfig):
    if not cfg.manifest:
        raise PwesError("no manifest given (use --manifest or the config's 'manifest' field)")
    return load_dataset(cfg.manifest)


def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    cfg = _config(args)
    synth = dict(cfg.synth or {})
    for key in ("t_range", "durations", "intervals_per_video", "class_probs"):
        if key in synth:
            synth[key] = tuple(tuple(v) if isinstance(v, list) else v for v in synth[key])
    try:
        scfg = SynthConfig(**synth)
    except TypeError as e:
        raise PwesError(f"bad synth settings: {e}") from e
    records, manifest = synth_dataset(scfg, cfg.seed)
    path = write_dataset(records, manifest, _out(args))
    print(path)


def cmd_train(args):
    cfg = _config(args)
    manifest, records = _dataset(cfg)
    train_recs, _ = split_records(records, manifest, cfg.test_subject)
    out = _out(args)
    result = train(cfg, train_recs, log_path=out / "train_log.ndjson")
    print(save_run(result, cfg, out))


def _model(args):
    model, header = load_checkpoint(args.checkpoint)
    model.eval()
    return model, header


def _eval_records(cfg, manifest, records):
    if cfg.test_subject is None:
        return records
    return split_records(records, manifest, cfg.test_subject)[1]


def cmd_mine(args):
    cfg = _config(args)
    manifest, records = _dataset(cfg)
    model, _ = _model(args)
    out_dir = _out(args) / "pseudo_labels"
    out_dir.mkdir(exist_ok=True)
    with torch.no_grad():
        for r in sorted(records, key=lambda r: r.video_id):
            rows = []
            if r.annotations:  # unannotated videos are never mined
                out = model.run(r)
                C = r.num_classes
                pl = mplg(out.X.numpy(), point_label_matrix(r)[:, :C], out.S[:, :C].numpy(), out.A.numpy(),
                          cfg.mplg_config)
                rows = pl.rows()
            (out_dir / f"{r.video_id}.json").write_text(json.dumps({"video_id": r.video_id, "rows": rows}))
    print(out_dir)


def cmd_infer(args):
    cfg = _config(args)
    manifest, records = _dataset(cfg)
    model, _ = _model(args)
    path = _out(args) / "proposals.jsonl"
    write_proposals(path, infer(model, _eval_records(cfg, manifest, records), cfg))
    print(path)


def _report(args, plots: bool):
    cfg = _config(args)
    manifest, records = _dataset(cfg)
    if not Path(args.proposals).exists():
        raise FileNotFoundError(f"proposal file {args.proposals} not found")
    per_video = read_proposals(args.proposals)
    evaluated = _eval_records(cfg, manifest, records)
    out = _out(args)
    report = evaluate(per_video, evaluated, cfg)
    write_report(report, out)
    print(report.table())
    if plots:
        model = _model(args)[0] if args.checkpoint else None
        plot_dir = out / "plots"
        plot_dir.mkdir(exist_ok=True)
        for r in evaluated:
            attention = None
            if model is not None:
                with torch.no_grad():
                    attention = model.run(r).A.numpy()
            sets = per_video.get(r.video_id, {})
            # draw the rung the report selected; fall back to the merged union
            props = sets.get(report.best_set) if report.best_set in sets else union_set(sets, cfg.nms_threshold)
            plot_timeline(r, attention, props, plot_dir / f"{r.video_id}.png")


def cmd_eval(args):
    _report(args, plots=False)


def cmd_report(args):
    _report(args, plots=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pwes", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, *, data=True, checkpoint=None, proposals=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", default=".")
        if data:
            p.add_argument("--manifest", help="dataset manifest.json (overrides the config)")
            p.add_argument("--test-subject", help="held-out subject for a LOSO fold")
        if checkpoint is not None:
            p.add_argument("--checkpoint", required=checkpoint)
        if proposals:
            p.add_argument("--proposals", required=True)
        p.set_defaults(func=func)

    add("synth", cmd_synth, "write a planted-interval synthetic dataset", data=False)
    add("train", cmd_train, "train a model (excludes --test-subject from training)")
    add("mine", cmd_mine, "dump pseudo labels mined by a trained model", checkpoint=True)
    add("infer", cmd_infer, "write proposals for the evaluation videos", checkpoint=True)
    add("eval", cmd_eval, "score a proposal file", proposals=True)
    add("report", cmd_report, "score a proposal file and draw per-video timelines", checkpoint=False, proposals=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        print(json.dumps(e.snapshot, default=str), file=sys.stderr)
        return EXIT_DIVERGED
    except (PwesError, pydantic.ValidationError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
