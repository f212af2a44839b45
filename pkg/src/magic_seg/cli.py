"""``magic-seg`` command line: synth, train, eval, gradcheck, report.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from . import data, evaluation, gradcheck, plotting, trainer
from .config import ConfigError
from .data import FormatError
from .losses import NonFiniteError
from .model import MagicNet

log = logging.getLogger("magic_seg")


def _threads() -> None:
    raw = os.environ.get("MAGIC_THREADS")
    if raw:
        try:
            torch.set_num_threads(max(1, int(raw)))
        except ValueError:
            log.warning("ignoring MAGIC_THREADS=%r", raw)


def cmd_synth(args) -> int:
    config = data.SceneConfig.from_file(args.config)
    samples = data.synthesize(args.seed, args.count, config)
    manifest = data.save_samples(samples, args.out, config.classes, config=config)
    corrupted = sum(s.corruption is not None for s in samples)
    print(f"samples={len(samples)} corrupted={corrupted} config_hash={config.digest()}")
    print(f"manifest={manifest}")
    return 0


def cmd_train(args) -> int:
    config = trainer.TrainConfig.from_file(args.config)
    samples = data.load_samples(args.data)
    if not samples:
        raise FormatError(f"{args.data}: no samples")
    classes = data.dataset_classes(args.data)
    out = Path(args.out)
    state = None
    if args.resume:
        state = trainer.load_checkpoint(args.resume, config)
        trainer.restore_logs(state, Path(args.resume).parent)
        print(f"resumed step={state.step} epoch={state.epoch} from={args.resume}")
    print(trainer.log_header(config).strip())
    state = trainer.train(samples, config, classes, state=state, out_dir=out)
    last = state.log[-1] if state.log else None
    if last is not None:
        print(f"steps={state.step} l_m={last['l_m']:.6g} l_s={last['l_s']:.6g} "
              f"l_c={last['l_c']:.6g} total={last['total']:.6g}")
    print(f"checkpoint={out / 'final.magp'}")
    print(f"log={out / 'train_log.csv'}")
    return 0


def _parse_subsets(text: str | None, model: MagicNet):
    if not text:
        return None
    out = []
    for part in text.split(","):
        try:
            out.append(model.registry.parse_subset(part))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"subset {part!r} is not within the checkpoint modalities "
                             f"{model.registry.subset_string(model.registry.names)}: {exc}") from exc
    return out


def cmd_eval(args) -> int:
    model, _ = MagicNet.load(args.ckpt)
    samples = data.load_samples(args.data)
    subsets = _parse_subsets(args.subsets, model)
    report = evaluation.evaluate_subsets(model, samples, subsets)
    csv_path, txt_path = evaluation.emit_report(report, args.out)
    for row in report.rows:
        m = row.metrics
        print(f"subset={row.label} mIoU={m.miou:.6f} mF1={m.mf1:.6f} mAcc={m.macc:.6f}")
    print(f"mean mIoU={report.mean_over_subsets('iou'):.6f} mF1={report.mean_over_subsets('f1'):.6f} "
          f"mAcc={report.mean_over_subsets('acc'):.6f}")
    print(f"report={csv_path}")
    print(f"summary={txt_path}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.seed)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"term={r.term} group={r.group} params={r.count} max_rel_err={r.max_rel_err:.3e} "
              f"worst={r.worst_tensor} {status}")
    ok = gradcheck.passed(results)
    print(f"gradcheck {'passed' if ok else 'failed'} tolerance={gradcheck.TOLERANCE:g} step={gradcheck.STEP:g}")
    return 0 if ok else 1


def cmd_report(args) -> int:
    series = {}
    subsets = None
    for path in args.report:
        rows = evaluation.parse_report_csv(path)
        if not rows:
            raise evaluation.EmptyReportError(f"{path}: no rows")
        labels = [r.subset for r in rows]
        if subsets is None:
            subsets = labels
        elif labels != subsets:
            raise ValueError(f"{path}: subsets differ from {args.report[0]}")
        name = Path(path).stem
        if name in series:
            name = str(path)
        series[name] = [r.values["mIoU"] for r in rows]
        print(f"== {path}")
        for r in rows:
            print(f"{r.subset:<10} mIoU={100 * r.values['mIoU']:6.2f} mF1={100 * r.values['mF1']:6.2f} "
                  f"mAcc={100 * r.values['mAcc']:6.2f}")
        mean = sum(series[name]) / len(series[name])
        print(f"{'Mean':<10} mIoU={100 * mean:6.2f}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dat = out / "subset_miou.dat"
    plotting.write_plot_data(dat, subsets, series)
    print(f"plot_data={dat}")
    if not args.no_figure:
        png = out / "subset_miou.png"
        plotting.subset_bars(png, subsets, series)
        print(f"figure={png}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="magic-seg", description="Modality-agnostic multi-modal segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic multi-modal samples")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--count", type=int, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a sample directory")
    s.add_argument("--data", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on every modality subset")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--subsets", help="comma-separated subsets, e.g. R+D,R+D+E")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("report", help="render subset report CSVs as a table, plot data and a figure")
    s.add_argument("--report", action="append", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-figure", action="store_true")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _threads()
    try:
        return args.func(args)
    except (ConfigError, FormatError, NonFiniteError, evaluation.EmptyReportError,
            ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
