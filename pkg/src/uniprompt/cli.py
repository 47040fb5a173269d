"""Command-line entry point: ``uniprompt {gen,train,eval,report}``.

Every command writes the resolved configuration as ``config.json`` next to
its outputs.  Exit status is 0 on success, 2 on configuration errors and 1
on any other failure.
"""
import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluator as E
from . import prompts as P
from . import synthdata as sd
from . import trainer as T
from .config import ConfigError, load_config

log = logging.getLogger("uniprompt")

DATA_FILES = {"train": "train.jsonl", "test": "test.jsonl", "distractors": "distractors.jsonl"}
CHECKPOINT = "checkpoint.uprm"


def _threads():
    raw = os.environ.get("UNIPROMPT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"UNIPROMPT_THREADS must be an integer, got {raw!r}") from None


def _resolved(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "preset", None):
        cfg.apply_preset(args.preset)
    if getattr(args, "trials", None) is not None:
        cfg.eval.n_trials = args.trials
    if getattr(args, "distractor_fraction", None) is not None:
        cfg.eval.distractor_fraction = args.distractor_fraction
    if getattr(args, "settings", None):
        cfg.eval.settings = [s.strip() for s in args.settings.split(",") if s.strip()]
    if args.out:
        cfg.output_dir = args.out
    return cfg.resolve()


def _out_dir(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return out


def cmd_gen(args):
    cfg = _resolved(args)
    out = _out_dir(cfg)
    train, test, pool = sd.generate(cfg.synth)
    for key, ds in zip(DATA_FILES, (train, test, pool)):
        sd.write_dataset(out / DATA_FILES[key], ds)
    sys.stdout.write(cfg.to_json())
    return 0


def _read_data(path, which):
    return sd.read_dataset(Path(path) / DATA_FILES[which])


def cmd_train(args):
    cfg = _resolved(args)
    train_ds = _read_data(args.data, "train")
    out = _out_dir(cfg)
    if args.checkpoint:
        state = T.TrainState.from_state_dict(P.load_tensors(args.checkpoint), cfg.encoder,
                                             cfg.prompt, cfg.train)
    else:
        state = T.new_state(cfg.encoder, cfg.prompt, cfg.train)
    try:
        T.train(state, cfg.train, train_ds, cfg.loss, max_steps=args.max_steps)
    except T.TrainingAbort as err:
        raise RuntimeError(f"training aborted: {err}") from err
    P.save_tensors(out / CHECKPOINT, state.state_dict())
    T.write_log(out / "train_log.jsonl", state.history)
    log.info("stage 1: %d steps, stage 2: %d steps", state.stage1_step, state.stage2_step)
    return 0


def _settings(cfg):
    if not cfg.eval.settings:
        return list(E.ALL_SETTINGS)
    try:
        return [E.Setting.parse(s) for s in cfg.eval.settings]
    except ValueError as err:
        raise ConfigError(str(err)) from None


def run_evaluation(model, test_ds, pool, settings, n_trials, fraction, seed, threads=1):
    """Evaluate settings (optionally in parallel); order and rng streams are fixed per setting."""
    emb = (model.encode_image(test_ds.features),
           model.encode_image(pool.features) if pool is not None and len(pool) else None)
    index = {s.name: k for k, s in enumerate(E.ALL_SETTINGS)}

    def one(setting):
        rng = np.random.default_rng([seed, 0xE7A1, index[setting.name]])
        try:
            return E.evaluate(model, test_ds, setting, n_trials, fraction, rng, pool, emb)
        except E.EmptySplitError as err:
            raise E.EmptySplitError(f"setting {setting.name}: {err}") from err

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            entries = list(ex.map(one, settings))
    else:
        entries = [one(s) for s in settings]
    return E.build_report(entries)


def write_report(out, report):
    (Path(out) / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (Path(out) / "report.txt").write_text(E.format_table(report))


def cmd_eval(args):
    cfg = _resolved(args)
    settings = _settings(cfg)
    test_ds = _read_data(args.data, "test")
    pool = _read_data(args.data, "distractors") if cfg.eval.distractor_fraction > 0 else None
    ckpt = args.checkpoint or str(Path(args.data) / CHECKPOINT)
    state = T.TrainState.from_state_dict(P.load_tensors(ckpt), cfg.encoder, cfg.prompt)
    report = run_evaluation(state.model, test_ds, pool, settings, cfg.eval.n_trials,
                            cfg.eval.distractor_fraction, cfg.seed, _threads())
    out = _out_dir(cfg)
    write_report(out, report)
    sys.stdout.write(E.format_table(report))
    return 0


def report_from_dict(raw):
    entries = [E.SettingReport(**row) for row in raw["settings"]]
    return E.EvalReport(entries, raw.get("categories"), raw.get("overall"),
                        raw.get("overall_setting_mean"))


def cmd_report(args):
    path = Path(args.report or Path(args.out or ".") / "report.json")
    report = report_from_dict(json.loads(path.read_text()))
    sys.stdout.write(E.format_table(report))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="uniprompt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment config (defaults used when omitted)")
        sp.add_argument("--out", help="output directory (overrides config output_dir)")
        sp.add_argument("--seed", type=int, help="override the experiment seed")

    g = sub.add_parser("gen", help="generate synthetic train/test/distractor files")
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run stage 1 then stage 2")
    common(t)
    t.add_argument("--data", required=True, help="directory written by 'gen'")
    t.add_argument("--preset", choices=sorted(T.PRESETS), help="ablation preset")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--max-steps", type=int, help="stop after this many steps (resume later)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the retrieval settings")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", help="checkpoint file (default: DATA/checkpoint.uprm)")
    e.add_argument("--preset", choices=sorted(T.PRESETS))
    e.add_argument("--settings", help="comma-separated subset, e.g. 'U_R->G_R,G_I->U_T'")
    e.add_argument("--trials", type=int)
    e.add_argument("--distractor-fraction", type=float)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="print the table for an existing report.json")
    r.add_argument("report", nargs="?", help="path to report.json")
    r.add_argument("--out", help="directory holding report.json")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
