"""``crossreid`` command line: synth, ingest-check, train, evaluate, gradcheck, severance, report."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data, gradcheck
from .checkpoint import CheckpointError
from .config import Config, ConfigKeyError, ConfigValueError, keys_help
from .diffcore import NonFiniteError, ShapeError
from .encoders import EncoderConfig
from .evaluation import EvaluationError, average_curves, evaluate, format_table, read_cmc_csv, write_cmc_csv
from .fmr import KD, WP, WPK, FmrStage, StageError, fixed_branch_delta, severance_check
from .trainer import TrainConfig, TrainingError, load_state, train

log = logging.getLogger("crossreid")

EXPECTED_ERRORS = (ConfigKeyError, ConfigValueError, FileNotFoundError, data.IngestionError, data.ConfigError,
                   CheckpointError, TrainingError, EvaluationError, StageError, ShapeError, NonFiniteError,
                   ValueError, OSError)


# ---------------------------------------------------------------- config -> objects


def encoder_config(cfg: Config) -> EncoderConfig:
    return EncoderConfig(
        d=cfg.get("model.d"), resolution=cfg.get("data.resolution"), channels=cfg.get("model.channels"),
        kernels=cfg.get("model.kernels"), strides=cfg.get("model.strides"), pools=cfg.get("model.pools"),
        share_cnn=cfg.get("model.share_cnn"), init=cfg.get("model.init"),
    )


def train_config(cfg: Config) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.get("train.epochs"), lr=cfg.get("train.lr"), precision=cfg.get("precision"),
        seed=cfg.get("seed"), fmr_enabled=cfg.get("fmr.enabled"), wp_end=cfg.get_optional("fmr.wp_end"),
        kd_end=cfg.get_optional("fmr.kd_end"), fixed_seed=cfg.get("fmr.fixed_seed"),
        checkpoint_every=cfg.get("train.checkpoint_every"),
    )


def load_index(cfg: Config) -> data.DatasetIndex:
    root = Path(cfg.get("data.root"))
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    return data.ingest(root, data.Layout(max_identities=cfg.get("data.max_identities")))


def store_for(cfg: Config, index: data.DatasetIndex, split: data.SplitPlan, dtype) -> data.SampleStore:
    return data.SampleStore(index, split, cfg.get("data.resolution"), dtype, cfg.get("data.max_frames"))


def trial_dir(out: Path, trial: int, trials: int) -> Path:
    return out if trials == 1 else out / f"trial_{trial}"


def latest_checkpoint(folder: Path) -> Path | None:
    found = []
    for p in folder.glob("ckpt_*"):
        suffix = p.name[len("ckpt_"):]
        if p.is_file() and suffix.isdigit():
            found.append((int(suffix), p))
    return max(found)[1] if found else None


def resolve_checkpoints(path: Path) -> list[Path]:
    """A checkpoint file, or a training output directory (one checkpoint per trial)."""
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    direct = latest_checkpoint(path)
    if direct is not None:
        return [direct]
    trials = sorted((p for p in path.glob("trial_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))
    ckpts = [latest_checkpoint(t) for t in trials]
    if not ckpts or any(c is None for c in ckpts):
        raise FileNotFoundError(f"no ckpt_<epoch> files found under {path}")
    return ckpts


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: Config, args) -> int:
    for flag, key in (("k", "synth.k"), ("frames", "synth.frames"), ("noise", "synth.noise"),
                      ("resolution", "data.resolution")):
        if getattr(args, flag) is not None:
            cfg.set(key, getattr(args, flag))
    ds = data.synth_generate(cfg.get("synth.k"), cfg.get("synth.frames"), cfg.get("data.resolution"),
                             cfg.get("synth.noise"), cfg.get("seed"))
    root = data.emit(ds, args.out)
    print(f"wrote {len(ds.identities())} identities x {cfg.get('synth.frames')} frames to {root}")
    return 0


def cmd_ingest_check(cfg: Config, args) -> int:
    if args.root is not None:
        cfg.set("data.root", args.root)
    index = load_index(cfg)
    lengths_a = [len(e.cam_a) for e in index.entries]
    lengths_b = [len(e.cam_b) for e in index.entries]
    print(f"root: {index.root}")
    print(f"identities: {index.k_total}")
    print(f"cam_a frames per identity: min {min(lengths_a)} max {max(lengths_a)}")
    print(f"cam_b frames per identity: min {min(lengths_b)} max {max(lengths_b)}")
    probe = data.decode(index.entries[0].probe)
    print(f"first probe: {index.entries[0].probe} shape {probe.shape}")
    return 0


def _report_lines(cfg: Config, tc: TrainConfig, states, dirs: list[Path]) -> list[str]:
    lines = [f"seed: {tc.seed}", f"precision: {tc.precision}", f"epochs: {tc.epochs}", f"lr: {tc.lr!r}"]
    if tc.fmr_enabled:
        sched = tc.schedule()
        lines.append(f"stages: {WP} epochs 1-{sched.wp_end}, {KD} epochs {sched.wp_end + 1}-{sched.kd_end}, "
                     f"{WPK} epochs {sched.kd_end + 1}-{sched.total_epochs}")
    else:
        lines.append("stages: fixed-model reuse disabled (learned branch only)")
    for state, d in zip(states, dirs):
        first, last = state.history[0][1], state.history[-1][1]
        lines.append(f"trial {state.split.trial} (output {d.as_posix()}/):")
        lines.append(f"  train identities: {len(state.split.train)}, test identities: {len(state.split.test)}")
        lines.append(f"  epoch 1 loss: L={first.L!r}")
        lines.append(f"  final loss (epoch {state.epoch}): L={last.L!r} L_v={last.L_v!r} "
                     f"L_ii={last.L_ii!r} L_iv={last.L_iv!r}")
        lines.append(f"  final stage: {state.network.stage.kind}")
    lines.append("")
    lines.append("resolved config:")
    lines.extend("  " + line for line in cfg.as_text().splitlines())
    return lines


def cmd_train(cfg: Config, args) -> int:
    tc = train_config(cfg)
    enc = encoder_config(cfg)
    index = load_index(cfg)
    trials = cfg.get("data.trials")
    splits = data.make_splits(index, trials, cfg.get("data.seed"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.as_text())
    states, dirs = [], []
    for split in splits:
        folder = trial_dir(out, split.trial, trials)
        store = store_for(cfg, index, split, tc.dtype)
        log.info("trial %d: %d train / %d test identities", split.trial, len(split.train), len(split.test))
        states.append(train(tc, store, split, enc, folder))
        dirs.append(folder.relative_to(out))
    report = "\n".join(_report_lines(cfg, tc, states, dirs)) + "\n"
    (out / "train_report.txt").write_text(report)
    print(report, end="")
    return 0


def cmd_evaluate(cfg: Config, args) -> int:
    # without --checkpoint, look for the trained run in the output directory itself
    ckpts = resolve_checkpoints(Path(args.checkpoint if args.checkpoint is not None else args.out))
    index = load_index(cfg)
    mode = cfg.get("eval.score")
    curves = []
    for path in ckpts:
        state = load_state(path)
        store = store_for(cfg, index, state.split, state.config.dtype)
        result = evaluate(state.network, store, mode)
        curves.append(result.curve)
        log.info("%s: rank-1 %.3f", path, result.curve.rank(1))
    curve = average_curves(curves)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cmc_csv(out / "cmc.csv", curve)
    table = format_table(curve, label="q_same" if mode == "verification" else "distance")
    (out / "cmc_table.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_gradcheck(cfg: Config, args) -> int:
    seed = cfg.get("seed")
    ok = True
    width = max(len(n) for n in gradcheck.op_cases(seed))
    for name, report in gradcheck.run_op_suite(seed).items():
        ok &= report.passed
        print(f"{name.ljust(width)}  max rel err {report.max_error:.3e}  {'ok' if report.passed else 'FAIL'}")
    e2e = gradcheck.end_to_end(seed)
    ok &= e2e.passed
    print(f"{'end_to_end'.ljust(width)}  max rel err {e2e.max_error:.3e}  {'ok' if e2e.passed else 'FAIL'}"
          f"  (tolerance {gradcheck.END_TO_END_TOLERANCE:g}; ops {gradcheck.OP_TOLERANCE:g})")
    return 0 if ok else 1


def cmd_severance(cfg: Config, args) -> int:
    seed = cfg.get("seed")
    if args.checkpoint is None:
        image, tracklet = gradcheck.tiny_pair(seed)
        deltas = {}
        for stage in (FmrStage(WP), FmrStage(KD, 0.5), FmrStage(WPK)):
            net = gradcheck.tiny_network(seed, stage)
            deltas[stage.kind] = fixed_branch_delta(net, image, tracklet, seed=seed)
            print(f"{stage.kind:<3} beta={stage.beta:<4} output delta under fixed-branch perturbation: "
                  f"{deltas[stage.kind]!r}")
        severed = deltas[WPK] == 0.0 and deltas[WP] > 0.0
        print("severed after knockdown" if severed else "NOT severed")
        return 0 if severed else 1
    state = load_state(resolve_checkpoints(Path(args.checkpoint))[-1])
    net = state.network
    if not net.fmr_enabled:
        print("checkpoint was trained without fixed-model reuse; nothing to sever")
        return 0
    store = store_for(cfg, load_index(cfg), state.split, state.config.dtype)
    name = state.split.test[0]
    image, tracklet = store.probe(name), store.tracklet(name)
    delta = fixed_branch_delta(net, image, tracklet, seed=seed)
    print(f"stage {net.stage.kind} (epoch {state.epoch}): output delta under fixed-branch perturbation {delta!r}")
    if net.stage.kind != WPK:
        print("NOT severed: knockdown has not completed")
        return 1
    severed = severance_check(net, image, tracklet, seed=seed)
    print("severed" if severed else "NOT severed")
    return 0 if severed else 1


def cmd_report(cfg: Config, args) -> int:
    run = Path(args.run)
    report = run / "train_report.txt"
    if not report.is_file():
        raise FileNotFoundError(f"train report not found: {report}")
    print(report.read_text(), end="")
    cmc_path = Path(args.cmc) if args.cmc else run / "cmc.csv"
    if cmc_path.is_file():
        print(format_table(read_cmc_csv(cmc_path)))
    else:
        print(f"(no CMC curve at {cmc_path})")
    return 0


COMMANDS = {
    "synth": (cmd_synth, "render a synthetic two-camera dataset"),
    "ingest-check": (cmd_ingest_check, "index a dataset root and summarise what was found"),
    "train": (cmd_train, "train one network per split trial"),
    "evaluate": (cmd_evaluate, "rank test galleries and write cmc.csv"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every op and the full loss"),
    "severance": (cmd_severance, "check the fixed branch no longer influences outputs after knockdown"),
    "report": (cmd_report, "print a training report and CMC table"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossreid", description="Image-to-video person re-identification toolkit.",
                                     epilog=keys_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=keys_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int, help="master seed (overrides config and $CROSSREID_SEED)")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
                       help="log progress to stderr")
        if name == "synth":
            p.add_argument("--k", type=int, help="number of identities")
            p.add_argument("--frames", type=int, help="frames per tracklet")
            p.add_argument("--noise", type=float, help="pixel noise standard deviation")
            p.add_argument("--resolution", type=int, help="image side length")
        if name == "ingest-check":
            p.add_argument("--root", help="dataset root (overrides data.root)")
        if name in ("evaluate", "severance"):
            p.add_argument("--checkpoint", help="ckpt_<epoch> file or a train output directory"
                           + (" (default: --out)" if name == "evaluate" else ""))
        if name == "report":
            p.add_argument("--run", required=True, help="train output directory")
            p.add_argument("--cmc", help="cmc.csv to tabulate (default <run>/cmc.csv)")
        if name in ("synth", "train", "evaluate"):
            p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        overrides = list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])
        cfg = Config.load(args.config, overrides)
        return handler(cfg, args)
    except EXPECTED_ERRORS as exc:
        print(f"crossreid {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
