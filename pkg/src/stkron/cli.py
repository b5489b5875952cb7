"""Command line entry point: ``stkron synth|fit|score|eval|localize``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import ExperimentConfig
from .errors import BadInputError, StkronError
from .io import read_tensor, write_tensor
from .synth import ESCAPE_MODES, synth_escape, synth_flow_video

logger = logging.getLogger("stkron")


def _labels_path(out: str) -> Path:
    return Path(str(out) + ".labels")


def read_labels(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise BadInputError(f"cannot read labels {path}: {exc}") from exc
    try:
        return np.array([int(tok) for tok in text.split()], dtype=int)
    except ValueError as exc:
        raise BadInputError(f"labels file {path} must hold one integer per frame") from exc


def cmd_synth(args) -> int:
    if args.generator == "escape":
        tensor, labels = synth_escape(args.height, args.width, args.frames, args.switch,
                                      seed=args.seed, mode=args.mode)
        write_tensor(tensor, args.out)
        _labels_path(args.out).write_text("\n".join(str(v) for v in labels) + "\n")
    else:
        tensor = synth_flow_video(args.height, args.width, args.frames, delta_n=args.delta_n,
                                  seed=args.seed)
        write_tensor(tensor, args.out)
    logger.info("wrote %s (%d frames of %dx%d)", args.out, tensor.frames, tensor.height, tensor.width)
    return 0


def cmd_fit(args) -> int:
    from .pipeline import fit, save_bundle

    config = ExperimentConfig.load(args.config)
    bundle = fit(config, read_tensor(args.tensor))
    save_bundle(bundle, args.out_model)
    return 0


def _write(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def cmd_score(args) -> int:
    from .pipeline import format_reports, load_bundle, score

    bundle = load_bundle(args.model)
    leave_out = None
    if args.leave_out is not None:
        leave_out = args.leave_out == "on"
    rows = score(bundle, read_tensor(args.tensor), leave_out=leave_out)
    _write(format_reports(rows), args.out_reports)
    if args.plot:
        from .plotting import plot_score_trace

        labels = read_labels(args.labels) if args.labels else None
        plot_score_trace(rows, args.plot, bundle.policy, labels)
    return 0


def cmd_eval(args) -> int:
    from .pipeline import evaluate, parse_reports

    try:
        text = Path(args.reports).read_text()
    except OSError as exc:
        raise BadInputError(f"cannot read reports {args.reports}: {exc}") from exc
    curve = evaluate(parse_reports(text), read_labels(args.labels), args.label_rule)
    lines = ["fpr,tpr"] + [f"{f!r},{t!r}" for f, t in zip(curve.fpr, curve.tpr)]
    _write("\n".join(lines) + "\n", args.out_roc)
    print(f"auc={curve.auc!r}", file=sys.stderr if args.out_roc in (None, "-") else sys.stdout)
    if args.plot:
        from .plotting import plot_roc

        plot_roc(curve, args.plot)
    return 0


def cmd_localize(args) -> int:
    from .pipeline import clip_starts, crop_frames, load_bundle, localize_clip

    bundle = load_bundle(args.model)
    tensor = read_tensor(args.tensor)
    flags = localize_clip(bundle, tensor, args.clip_index)
    rows, cols = flags.shape
    lines = ["block_row,block_col,block,flag"]
    for r in range(rows):
        for c in range(cols):
            lines.append(f"{r},{c},{r * cols + c},{int(flags[r, c])}")
    _write("\n".join(lines) + "\n", args.out)
    if args.plot:
        from .plotting import plot_block_flags

        data = crop_frames(tensor.data, bundle.config.crop)
        start = clip_starts(bundle.config, data.shape[0])[args.clip_index]
        plot_block_flags(flags, args.plot, bundle.block_scores(data, [start])[0])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stkron", description="Space-time covariance anomaly detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic frame tensor")
    s.add_argument("generator", choices=["escape", "flow"])
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=16)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--frames", type=int, default=240)
    s.add_argument("--switch", type=int, default=200, help="escape: first anomalous frame")
    s.add_argument("--mode", choices=sorted(ESCAPE_MODES), default="escape")
    s.add_argument("--delta-n", type=int, default=1, help="flow: columns moved per frame")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="fit per-block models and calibrate thresholds")
    f.add_argument("--config", required=True)
    f.add_argument("--tensor", required=True)
    f.add_argument("--out-model", required=True)
    f.set_defaults(func=cmd_fit)

    sc = sub.add_parser("score", help="score sliding test clips")
    sc.add_argument("--model", required=True)
    sc.add_argument("--tensor", required=True)
    sc.add_argument("--out-reports", default="-")
    sc.add_argument("--leave-out", choices=["on", "off"], default=None,
                    help="refit without each clip and its buffer (default: from config)")
    sc.add_argument("--plot", help="also save a score trace figure to this path")
    sc.add_argument("--labels", help="per-frame labels to shade on the plot")
    sc.set_defaults(func=cmd_score)

    e = sub.add_parser("eval", help="ROC of reports against per-frame labels")
    e.add_argument("--reports", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--out-roc", default="-")
    e.add_argument("--label-rule", choices=["center", "any", "majority"], default="center")
    e.add_argument("--plot", help="also save the ROC figure to this path")
    e.set_defaults(func=cmd_eval)

    lo = sub.add_parser("localize", help="per-block flags of one test clip")
    lo.add_argument("--model", required=True)
    lo.add_argument("--tensor", required=True)
    lo.add_argument("--clip-index", type=int, required=True)
    lo.add_argument("--out", default="-")
    lo.add_argument("--plot", help="also save the block map to this path")
    lo.set_defaults(func=cmd_localize)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StkronError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
