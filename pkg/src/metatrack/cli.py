"""Command-line entry point: gen, metatrain, baselinetrain, track, eval."""

import argparse
import dataclasses
import os
import sys

from . import detector as det
from . import evaluation, meta, synth, tracker

SECTIONS = (
    ("detector", det.DetectorConfig),
    ("meta", meta.MetaConfig),
    ("synth", synth.SynthConfig),
    ("tracker", tracker.TrackerConfig),
)

# run-level keys outside the four component configs: (type, default, help)
RUN_KEYS = {
    "seed": ("int", 0, "seed for data, initialisation and task sampling"),
    "sequences": ("int", 20, "number of sequences written by gen"),
    "first-instance": ("int", 0, "instance id of the first generated sequence"),
    "task-shift": ("float", 0.25, "target-crop jitter as a fraction of the crop side"),
    "baseline-iterations": ("int", 300, "Adam iterations of baseline training"),
    "baseline-lr": ("float", 3e-3, "Adam learning rate of baseline training"),
}


def _key(name):
    return name.replace("_", "-")


def _all_keys():
    keys = {}
    for section, cls in SECTIONS:
        for f in dataclasses.fields(cls):
            if f.name == "seed":
                continue  # the synth seed is the run seed
            keys[_key(f.name)] = (section, f)
    return keys


def _defaults():
    out = {k: _fmt(v[1]) for k, v in RUN_KEYS.items()}
    for section, cls in SECTIONS:
        inst = cls()
        for f in dataclasses.fields(cls):
            if f.name != "seed":
                out[_key(f.name)] = _fmt(getattr(inst, f.name))
    return out


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def read_config_file(path):
    items = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            items[key.strip()] = value.strip()
    return items


@dataclasses.dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def build(cls, file_items=None, flag_items=None):
        """Merge defaults, config-file items and flag items (later wins)."""
        values = _defaults()
        for items in (file_items or {}, flag_items or {}):
            for key, text in items.items():
                key = _key(key)
                if key not in values:
                    raise KeyError(f"unknown config key {key!r}")
                values[key] = str(text)
        run = cls(values)
        # validate everything up front
        run.detector(), run.meta(), run.synth(), run.tracker(), run.seed
        return run

    def _section(self, name):
        cls = dict(SECTIONS)[name]
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name == "seed":
                kwargs["seed"] = self.seed
                continue
            text = self.values[_key(f.name)]
            if f.name == "shapes":
                kwargs[f.name] = tuple(s.strip() for s in text.split(",") if s.strip())
            elif f.name == "gamma_final":
                kwargs[f.name] = tuple(float(s) for s in text.split(",") if s.strip())
            else:
                kwargs[f.name] = det.parse_value(f.type, text)
        return cls(**kwargs)

    def detector(self):
        return self._section("detector")

    def meta(self):
        return self._section("meta")

    def synth(self):
        return self._section("synth")

    def tracker(self):
        return self._section("tracker")

    def get(self, key):
        kind, _, _ = RUN_KEYS[key]
        return det.parse_value(kind, self.values[key])

    @property
    def seed(self):
        return self.get("seed")

    def text(self):
        return "".join(f"{k}={v}\n" for k, v in sorted(self.values.items()))


# -- commands ---------------------------------------------------------------------------

def _prepare_out(path):
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise PermissionError(f"output directory {path} is not writable")
    return path


def _write_config(run, out):
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(run.text())


def cmd_gen(run, out):
    """Write ``sequences`` synthetic sequences in the export format."""
    _prepare_out(out)
    config = run.synth()
    first = run.get("first-instance")
    paths = []
    for i in range(run.get("sequences")):
        seq = synth.generate_sequence(config, first + i)
        path = os.path.join(out, f"seq_{first + i:04d}")
        synth.save_sequence(seq, path)
        paths.append(path)
    _write_config(run, out)
    return paths


def _load_pool(dataset):
    pool = [synth.load_sequence(p) for p in synth.list_sequences(dataset)]
    if len(pool) < 2:
        raise ValueError(f"dataset {dataset} needs at least 2 sequences for task sampling")
    return pool


def _task_source(run, pool):
    size = run.detector().input_size
    shift = run.get("task-shift")
    return lambda rng: synth.sample_task(pool, rng, out_size=size, shift=shift)


def cmd_metatrain(run, dataset, out, resume=None):
    """Meta-train; writes per-epoch checkpoints, final.ckpt and train_log.txt."""
    _prepare_out(out)
    pool = _load_pool(dataset)
    dcfg, mcfg = run.detector(), run.meta()
    params = adam = None
    start = 0
    log = meta.TrainLog()
    log_path = os.path.join(out, "train_log.txt")
    if resume:
        params, extra = det.load_checkpoint(resume)
        if params.config != dcfg:
            raise ValueError(f"checkpoint {resume} was trained with a different detector config")
        adam = meta.load_adam(_adam_path(resume))
        start = int(extra["iteration"])
        if os.path.exists(log_path):
            log.records = [r for r in _read_log(log_path) if r[0] < start]

    def on_epoch_end(epoch, p, a, iteration):
        path = os.path.join(out, f"epoch_{epoch:03d}.ckpt")
        det.save_checkpoint(path, p, {"iteration": iteration, "epoch": epoch, "seed": run.seed})
        meta.save_adam(_adam_path(path), a)
        log.write(log_path)

    params, log = meta.meta_train(dcfg, mcfg, _task_source(run, pool), run.seed, params=params, adam=adam,
                                  start_iteration=start, on_epoch_end=on_epoch_end, log=log)
    total = mcfg.epochs * mcfg.iterations_per_epoch
    det.save_checkpoint(os.path.join(out, "final.ckpt"), params,
                        {"iteration": total, "final": "true", "seed": run.seed})
    log.write(log_path)
    _write_config(run, out)
    return params, log


def _adam_path(ckpt):
    return os.path.splitext(ckpt)[0] + ".adam"


def _read_log(path):
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                it, ep, loss, ms = (p.strip() for p in line.split(","))
                records.append((int(it), int(ep), float(loss), float(ms)))
    return records


def cmd_baselinetrain(run, dataset, out):
    """Single-level Adam training on individual patches; writes baseline.ckpt."""
    _prepare_out(out)
    pool = _load_pool(dataset)
    dcfg, mcfg = run.detector(), run.meta()
    params = det.init_params(dcfg, seed=run.seed, alpha_init=mcfg.alpha_init)
    params, log = meta.train_baseline(dcfg, _task_source(run, pool), run.seed, run.get("baseline-iterations"),
                                      lr=run.get("baseline-lr"), tasks_per_iteration=mcfg.tasks_per_iteration,
                                      params=params)
    det.save_checkpoint(os.path.join(out, "baseline.ckpt"), params, {"seed": run.seed, "final": "true"})
    log.write(os.path.join(out, "train_log.txt"))
    _write_config(run, out)
    return params, log


def cmd_track(run, checkpoint, data, out):
    """Track every sequence under ``data``; writes results/<name>.txt."""
    _prepare_out(out)
    params, _ = det.load_checkpoint(checkpoint)
    cfg = run.tracker()
    results = os.path.join(out, "results")
    os.makedirs(results, exist_ok=True)
    written = []
    for path in synth.list_sequences(data):
        seq = synth.load_sequence(path)
        boxes, scores, _ = tracker.track_sequence(seq.frames, seq.gt[0], params, cfg)
        target = os.path.join(results, os.path.basename(os.path.normpath(path)) + ".txt")
        tracker.write_results(target, boxes, scores)
        written.append(target)
    _write_config(run, out)
    return written


def cmd_eval(results, dataset, out):
    """OPE report over all result files matched to dataset sequences."""
    _prepare_out(out)
    result_dir = os.path.join(results, "results") if os.path.isdir(os.path.join(results, "results")) else results
    names, preds, gts = [], [], []
    for path in synth.list_sequences(dataset):
        name = os.path.basename(os.path.normpath(path))
        result = os.path.join(result_dir, name + ".txt")
        if not os.path.exists(result):
            raise FileNotFoundError(f"no result file for sequence {name} in {result_dir}")
        boxes, _ = tracker.read_results(result)
        _, gt = synth.read_meta(path)
        names.append(name)
        preds.append(boxes)
        gts.append(gt)
    report = evaluation.evaluate(preds, gts, sequence_names=names)
    report.write(out)
    return report


# -- argument parsing ---------------------------------------------------------------------

def _add_config_flags(parser):
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", help="run seed")
    parser.add_argument("--out", required=True, help="output directory")
    group = parser.add_argument_group("config overrides")
    for key, (kind, default, text) in RUN_KEYS.items():
        if key != "seed":
            group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="V", help=f"{text} (default {default})")
    for key, (section, f) in _all_keys().items():
        group.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="V", help=f"{section} setting")


def build_parser():
    parser = argparse.ArgumentParser(prog="metatrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_config_flags(p)
    p = sub.add_parser("metatrain", help="meta-train a detector")
    p.add_argument("--dataset", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_config_flags(p)
    p = sub.add_parser("baselinetrain", help="train the standard-GD baseline")
    p.add_argument("--dataset", required=True)
    _add_config_flags(p)
    p = sub.add_parser("track", help="run the online tracker")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="sequence or dataset directory")
    p.add_argument("--no-online-update", action="store_true", help="disable online updates (online-steps=0)")
    _add_config_flags(p)
    p = sub.add_parser("eval", help="evaluate tracking results")
    p.add_argument("--results", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    return parser


def _run_config(args):
    file_items = read_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if getattr(args, "seed", None) is not None:
        flags["seed"] = args.seed
    if getattr(args, "no_online_update", False):
        flags["online-steps"] = "0"
    return RunConfig.build(file_items, flags)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "eval":
            report = cmd_eval(args.results, args.dataset, args.out)
            print(f"auc={report.auc!r} precision_20px={report.precision!r} frames={len(report.ious)}")
            return 0
        run = _run_config(args)
        if args.command == "gen":
            paths = cmd_gen(run, args.out)
            print(f"wrote {len(paths)} sequences to {args.out}")
        elif args.command == "metatrain":
            _, log = cmd_metatrain(run, args.dataset, args.out, resume=args.resume)
            last = log.records[-1][2] if log.records else float("nan")
            print(f"meta-trained {len(log.records)} iterations, last outer loss {last:.6f}")
        elif args.command == "baselinetrain":
            _, log = cmd_baselinetrain(run, args.dataset, args.out)
            print(f"baseline trained {len(log.records)} iterations")
        elif args.command == "track":
            written = cmd_track(run, args.checkpoint, args.data, args.out)
            print(f"tracked {len(written)} sequences")
    except Exception as exc:  # single-line error contract
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
