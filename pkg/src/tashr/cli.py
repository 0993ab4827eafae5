"""``tashr`` command line: generate | train | remove | evaluate | report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as C
from .errors import ConfigError, DataError, NonFiniteLossError, TashrError
from .evaluator import EvalReport, evaluate_dataset, render_table
from .imaging import load_image, save_image
from .ocr import CommandOcr, CachedOnlyOcr
from .synthgen import DatasetManifest, generate_dataset, load_corpus
from .trainer import (TrainState, TripletSource, checkpoint_dirs, infer, load_checkpoint,
                      resolve_checkpoint, train)

log = logging.getLogger("tashr")

PAD_MULTIPLE = 64


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = yaml.safe_load(value)
    return out


def _config(args, extra=None):
    ov = _overrides(getattr(args, "set", None))
    for section, values in (extra or {}).items():
        ov.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    return C.load_config(getattr(args, "config", None), ov)


def cmd_generate(args):
    cfg = _config(args, {"generator": {"seed": args.seed, "samples_per_clean_image": args.samples,
                                       "size": args.size}})
    corpus, names = load_corpus(args.corpus)
    out = Path(args.out)
    manifest = generate_dataset(cfg.generator, corpus, out, split=args.split, names=names)
    cfg.snapshot(out)
    path = out / f"{args.split}.json"
    print(path)
    log.info("%d entries", len(manifest))
    return 0


def _load_training_data(manifest_path, image_size):
    manifest = DatasetManifest.load(manifest_path)
    if len(manifest) == 0:
        raise DataError(f"manifest {manifest_path} has no entries")
    first = manifest.load_triplet(manifest.entries[0])
    if first.highlight.shape[:2] != (image_size, image_size):
        raise ConfigError(f"dataset images are {first.highlight.shape[1]}x{first.highlight.shape[0]}, "
                          f"training.image_size is {image_size}")
    return TripletSource(manifest)


def cmd_train(args):
    extra = {"training": {"max_steps": args.max_steps, "seed": args.seed,
                          "batch_size": args.batch_size}}
    if args.base_channels is not None:
        extra["training"].update(detection_channels=args.base_channels,
                                 removal_channels=args.base_channels,
                                 discriminator_channels=args.base_channels)
    if args.ablate_text_loss:
        extra["training"]["text_loss_enabled"] = False
    cfg = _config(args, extra)
    tc = cfg.training
    out = Path(args.out)
    if args.resume and checkpoint_dirs(out):
        state = load_checkpoint(checkpoint_dirs(out)[-1], expected_config=tc)
        log.info("resuming from step %d", state.step)
    else:
        if checkpoint_dirs(out) and not args.resume:
            raise ConfigError(f"{out} already holds checkpoints; pass --resume or pick a new directory")
        state = TrainState.create(tc)
    data = _load_training_data(args.manifest, tc.image_size)
    providers = cfg.losses.build_providers()
    cfg.snapshot(out)
    try:
        train(state, data, providers, tc.max_steps, run_dir=out)
    except NonFiniteLossError as e:
        last = checkpoint_dirs(out)
        print(f"error: {e}; last good checkpoint: {last[-1] if last else 'none'}", file=sys.stderr)
        return e.exit_code
    print(checkpoint_dirs(out)[-1])
    return 0


def pad_to_multiple(img, k=PAD_MULTIPLE):
    h, w = img.shape[:2]
    ph, pw = (-h) % k, (-w) % k
    if not ph and not pw:
        return img, (h, w)
    mode = "reflect" if ph < h and pw < w else "symmetric"
    widths = ((0, ph), (0, pw)) + ((0, 0),) * (img.ndim - 2)
    return np.pad(img, widths, mode=mode), (h, w)


def _collect_inputs(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".jpg", ".jpeg"))
        elif p.is_file():
            files.append(p)
        else:
            raise DataError(f"no such input {p}")
    if not files:
        raise DataError("no input images")
    return files


def run_removal(checkpoint, inputs, out_dir, dump_mask=False):
    state = load_checkpoint(resolve_checkpoint(checkpoint))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in _collect_inputs(inputs):
        img = load_image(path)
        padded, (h, w) = pad_to_multiple(img)
        if padded.shape[:2] != (h, w):
            log.warning("%s: %dx%d padded to %dx%d", path.name, w, h, padded.shape[1], padded.shape[0])
        outs, masks = infer(state, [padded])
        target = out_dir / f"{path.stem}.png"
        save_image(outs[0][:h, :w], target)
        written.append(target)
        if dump_mask:
            save_image(masks[0][:h, :w], out_dir / f"{path.stem}_mask.png")
    return written


def cmd_remove(args):
    for p in run_removal(args.checkpoint, args.inputs, args.out, args.dump_mask):
        print(p)
    return 0


def _ocr(cfg, args):
    ev = cfg.evaluation
    command = args.ocr_command or ev.ocr_command
    cache = args.ocr_cache or ev.ocr_cache
    if args.replay_cache:
        if not cache or not args.engine_id and not command:
            raise ConfigError("--replay-cache needs an OCR cache directory and an engine id or command")
        return CachedOnlyOcr(cache, args.engine_id or command)
    if not command:
        raise ConfigError("no OCR command configured (evaluation.ocr_command or --ocr-command)")
    return CommandOcr(command, cache, ev.ocr_timeout, args.engine_id)


def cmd_evaluate(args):
    extra = {"evaluation": {"iou_thresh": args.iou_thresh, "workers": args.workers}}
    cfg = _config(args, extra)
    manifest = DatasetManifest.load(args.manifest)
    ocr = _ocr(cfg, args)
    ev = cfg.evaluation
    method = args.method
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    if args.highlight_baseline:
        source = "highlight"
        method = method or "Light Image (unprocessed highlight input)"
    elif args.outputs:
        source = args.outputs
    elif args.checkpoint:
        source = report_path.parent / f"{report_path.stem}_outputs"
        run_removal(args.checkpoint, [manifest.resolve(e.highlight_path) for e in manifest.entries],
                    source)
        # removal writes <stem>.png where stem is the highlight filename, i.e. the id
    else:
        raise ConfigError("one of --outputs, --checkpoint or --highlight-baseline is required")
    report = evaluate_dataset(manifest, source, ocr, ev.iou_thresh, ev.case_sensitive,
                              method=method or "ours", dataset=args.dataset, workers=ev.workers)
    report.save(report_path)
    table = render_table([report])
    report_path.with_suffix(".txt").write_text(table)
    cfg.snapshot(report_path.parent)
    print(table, end="")
    if report.failures:
        print(f"{len(report.failures)} image(s) failed OCR and were excluded", file=sys.stderr)
    return 0


def cmd_report(args):
    reports = [EvalReport.load(p) for p in args.reports]
    labels = args.labels
    if labels and len(labels) != len(reports):
        raise ConfigError("--labels must match the number of reports")
    table = render_table(reports, labels)
    if args.out:
        Path(args.out).write_text(table)
    if args.json:
        Path(args.json).write_text(json.dumps([r.to_dict() for r in reports], indent=2,
                                              sort_keys=True) + "\n")
    print(table, end="")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tashr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML pipeline config")
        sp.add_argument("-s", "--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")

    g = sub.add_parser("generate", help="synthesize highlight/clean/mask triplets")
    common(g)
    g.add_argument("--corpus", required=True, help="directory of clean images + JSON sidecars")
    g.add_argument("--out", required=True)
    g.add_argument("--split", default="train", choices=("train", "test"))
    g.add_argument("--seed", type=int)
    g.add_argument("--samples", type=int, help="samples per clean image")
    g.add_argument("--size", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train detection + removal nets")
    common(t)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--base-channels", type=int, help="width of all three networks")
    t.add_argument("--ablate-text-loss", action="store_true", help="train without the text-related loss")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("remove", help="run a checkpoint on images")
    r.add_argument("--checkpoint", required=True, help="checkpoint or run directory")
    r.add_argument("--out", required=True)
    r.add_argument("--dump-mask", action="store_true", help="also write the detected mask")
    r.add_argument("inputs", nargs="+")
    r.set_defaults(func=cmd_remove)

    e = sub.add_parser("evaluate", help="score outputs with OCR, PSNR and SSIM")
    common(e)
    e.add_argument("--manifest", required=True)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--outputs", help="directory of <id>.png outputs")
    src.add_argument("--checkpoint", help="run removal with this checkpoint first")
    src.add_argument("--highlight-baseline", action="store_true",
                     help="score the unprocessed highlight inputs")
    e.add_argument("--report", required=True, help="JSON report path (table written next to it)")
    e.add_argument("--method")
    e.add_argument("--dataset")
    e.add_argument("--ocr-command")
    e.add_argument("--ocr-cache")
    e.add_argument("--engine-id")
    e.add_argument("--replay-cache", action="store_true", help="use only recorded OCR responses")
    e.add_argument("--iou-thresh", type=float)
    e.add_argument("--workers", type=int)
    e.set_defaults(func=cmd_evaluate)

    rp = sub.add_parser("report", help="merge reports into one comparison table")
    rp.add_argument("reports", nargs="+")
    rp.add_argument("--labels", nargs="+")
    rp.add_argument("--out")
    rp.add_argument("--json", help="write the merged reports as a JSON list")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TashrError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
