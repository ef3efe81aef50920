"""Command-line front end: ``trajdiff <command> [flags]``.

Every command accepts ``--config FILE`` holding ``key = value`` lines named
after the long flags; flags given on the command line win. The resolved
settings are echoed to stderr and into the header of text outputs.

Exit status is 0 on success, 1 for bad input or usage and 2 for I/O or
file-format problems.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .embedding import EmbedTrainConfig, read_embedding, train_line, write_embedding
from .errors import FormatError, InputError, TrainingDiverged
from .evaluation import (
    BASELINES,
    RecoveryOutput,
    Report,
    cases_from_dataset,
    distance_metric,
    map_metric,
    recall,
)
from .graph import build_group_graph, read_graph, write_graph
from .ingest import (
    SynthConfig,
    TrajectoryDiscretizer,
    filter_dataset,
    format_header,
    generate_synthetic,
    mask_dataset,
    parse_points,
    read_dataset,
    split_chronological,
    write_dataset,
)
from .model import TrajectoryRecoverer
from .train import TrainConfig, load_checkpoint, save_checkpoint, state_to_checkpoint, train_model

log = logging.getLogger("trajdiff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _ratios(text: str) -> List[float]:
    try:
        values = [float(x) for x in text.replace("/", ",").split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ratios like 0.2,0.4, got {text!r}")
    if not values or any(not 0 < v < 1 for v in values):
        raise argparse.ArgumentTypeError("ratios must lie strictly between 0 and 1")
    return values


def _flag(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# -- parser -------------------------------------------------------------------

def _grid_flags(p):
    p.add_argument("--grid-rows", type=int)
    p.add_argument("--grid-cols", type=int)
    p.add_argument("--cell-side-m", type=float, default=515.0)
    p.add_argument("--slot-minutes", type=int, default=30)


def _model_flags(p):
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--beta-1", type=float, default=1e-4)
    p.add_argument("--beta-T", dest="beta_T", type=float, default=0.02)
    p.add_argument("--lambda-d", type=float, default=1.2)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--mask-ratio", type=float, default=0.2)
    p.add_argument("--mask-ratio-max", type=float)
    p.add_argument("--history-mode", choices=("prior", "others"), default="others")
    p.add_argument("--normalize-embedding", type=_flag, default=True)
    p.add_argument("--time-budget-s", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajdiff", description="Trajectory recovery with conditional diffusion.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = command("preprocess", "raw GPS points to a slotted, filtered, split and masked dataset")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--format", choices=("csv", "plt"), default="csv")
    p.add_argument("--out", required=True)
    _grid_flags(p)
    p.add_argument("--origin-lat", type=float)
    p.add_argument("--origin-lon", type=float)
    p.add_argument("--tz-offset-s", type=int, default=0)
    p.add_argument("--min-slots", type=int, default=34)
    p.add_argument("--min-days", type=int, default=5)
    p.add_argument("--ratio", type=float, default=0.2)

    p = command("synth", "generate a synthetic home/work dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--days", type=int, default=10)
    p.add_argument("--grid-rows", type=int, default=4)
    p.add_argument("--grid-cols", type=int, default=4)
    p.add_argument("--cell-side-m", type=float, default=515.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--sparsity", type=float, default=0.3)
    p.add_argument("--off-day-prob", type=float, default=0.2)
    p.add_argument("--shift-jitter", type=int, default=2)
    p.add_argument("--ratio", type=float, default=0.2)

    p = command("build-graph", "group tendency graph from the training split")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = command("embed", "train location embeddings on a graph or dataset")
    p.add_argument("--input", required=True, help="dataset file, or a graph TSV with --graph")
    p.add_argument("--graph", action="store_true", help="treat --input as a graph TSV")
    p.add_argument("--n-locations", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--neg", type=int, default=5)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.025)
    p.add_argument("--samples-per-epoch", type=int)

    p = command("train", "fit the encoder and denoiser")
    p.add_argument("--input", required=True)
    p.add_argument("--embedding", required=True)
    p.add_argument("--out", required=True)
    _model_flags(p)

    p = command("recover", "rank locations for the TARGET slots of a split")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--missing", "--ratio", dest="missing", type=_ratios,
                   help="re-mask the split at these ratios, e.g. 0.2,0.4,0.6,0.8")
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--top-k", type=int, default=20)

    p = command("baseline", "rank locations with a rule-based baseline")
    p.add_argument("--method", choices=sorted(BASELINES), required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--missing", "--ratio", dest="missing", type=_ratios)
    p.add_argument("--top-k", type=int, default=20)

    p = command("evaluate", "score a predictions file against the dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=1, help="recall cut-off")
    return parser


def _read_config(path: str) -> Dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = _read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known - {"config"})
        if unknown:
            raise UsageError(f"{sub.format_usage()}unknown config key(s): {', '.join(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _resolved(args) -> Dict[str, object]:
    skip = {"command", "config", "verbose"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        out[k] = v
    return out


# -- helpers ----------------------------------------------------------------------

def _load_dataset(path: str):
    with open(path, "rb") as fh:
        ds = read_dataset(fh)
    return split_chronological(ds)


def _write_predictions(path: str, rows, config: Dict[str, object], top_k: int):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_header(config))
        fh.write("# ratio\tuser\tday\tslot\tranking\n")
        for ratio, out in rows:
            tag = "-" if ratio is None else f"{ratio:g}"
            for (user, day, slot) in sorted(out.rankings):
                ranking = out.rankings[(user, day, slot)][: top_k if top_k > 0 else None]
                fh.write(f"{tag}\t{user}\t{day}\t{slot}\t{','.join(str(int(x)) for x in ranking)}\n")


def _read_predictions(path: str) -> Dict[Optional[float], RecoveryOutput]:
    groups: Dict[Optional[float], RecoveryOutput] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                tag, user, day, slot, ranking = parts
                ratio = None if tag == "-" else float(tag)
                ids = [int(x) for x in ranking.split(",") if x]
                key = (user, int(day), int(slot))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: expected ratio, user, day, slot, ranking") from exc
            groups.setdefault(ratio, RecoveryOutput()).add(key, ids)
    if not groups:
        raise FormatError(f"{path}: no predictions")
    return groups


def _case_sets(ds, split: str, missing, seed: int):
    if not missing:
        cases = cases_from_dataset(ds, split)
        if not cases:
            raise InputError(f"split {split!r} has no stored TARGET masks; pass --missing")
        return [(None, cases)]
    return [(r, cases_from_dataset(ds, split, ratio=r, seed=seed)) for r in missing]


# -- commands ------------------------------------------------------------------------

def cmd_preprocess(args, config):
    points = []
    bad = 0
    for path in args.input:
        # GeoLife keeps each user's .plt files under <user>/Trajectory/
        user = Path(path).parent.parent.name or "0"
        with open(path, "rb") as fh:
            pts, n_bad = parse_points(fh, args.format, user=user)
        points.extend(pts)
        bad += n_bad
    disc = TrajectoryDiscretizer(args.grid_rows, args.grid_cols, args.origin_lat, args.origin_lon,
                                 args.cell_side_m, args.slot_minutes, args.tz_offset_s)
    ds = disc.fit(points).transform(points)
    ds = filter_dataset(ds, args.min_slots, args.min_days)
    ds = mask_dataset(split_chronological(ds), args.ratio, args.seed)
    log.info("%d malformed line(s), %d point(s) off-grid, %d user(s) kept", bad, disc.n_outside_, len(ds.users))
    with open(args.out, "w", encoding="utf-8") as fh:
        write_dataset(ds, fh, config)


def cmd_synth(args, config):
    cfg = SynthConfig(n_users=args.users, n_days=args.days, rows=args.grid_rows, cols=args.grid_cols,
                      noise=args.noise, sparsity=args.sparsity, off_day_prob=args.off_day_prob,
                      shift_jitter=args.shift_jitter, seed=args.seed, cell_side_m=args.cell_side_m)
    ds = mask_dataset(split_chronological(generate_synthetic(cfg)), args.ratio, args.seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        write_dataset(ds, fh, config)


def cmd_build_graph(args, config):
    ds = _load_dataset(args.input)
    graph = build_group_graph(ds.trajectories("train"))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(format_header(config))
        write_graph(graph, fh)


def cmd_embed(args, config):
    if args.graph:
        with open(args.input, encoding="utf-8") as fh:
            graph = read_graph(fh)
        n_locations = args.n_locations
    else:
        ds = _load_dataset(args.input)
        graph = build_group_graph(ds.trajectories("train"))
        n_locations = args.n_locations or ds.grid.n_cells
    cfg = EmbedTrainConfig(args.dim, args.epochs, args.lr, args.neg, args.samples_per_epoch, seed=args.seed)
    table = train_line(graph, cfg, n_locations)
    with open(args.out, "wb") as fh:
        write_embedding(table.astype(np.float32), fh)


def cmd_train(args, config):
    ds = _load_dataset(args.input)
    with open(args.embedding, "rb") as fh:
        table = read_embedding(fh)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, lambda_d=args.lambda_d, tau=args.tau,
        seed=args.seed, steps=args.steps, beta_1=args.beta_1, beta_T=args.beta_T, dim=args.dim,
        heads=args.heads, layers=args.layers, hidden=args.hidden, blocks=args.blocks,
        mask_ratio=args.mask_ratio, mask_ratio_max=args.mask_ratio_max, history_mode=args.history_mode,
        normalize_embedding=args.normalize_embedding,
    )
    try:
        state = train_model(ds, table, cfg, time_budget_s=args.time_budget_s)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            with open(args.out, "wb") as fh:
                save_checkpoint(state_to_checkpoint(exc.checkpoint), fh)
            log.warning("saved the last finite state to %s", args.out)
        raise
    with open(args.out, "wb") as fh:
        save_checkpoint(state_to_checkpoint(state), fh)


def cmd_recover(args, config):
    ds = _load_dataset(args.input)
    with open(args.checkpoint, "rb") as fh:
        ckpt = load_checkpoint(fh)
    model = TrajectoryRecoverer.from_checkpoint(ckpt, n_samples=args.samples)
    model.seed = args.seed
    rows = [(r, model.predict(cases)) for r, cases in _case_sets(ds, args.split, args.missing, args.seed)]
    _write_predictions(args.out, rows, config, args.top_k)


def cmd_baseline(args, config):
    ds = _load_dataset(args.input)
    cls = BASELINES[args.method]
    model = cls(ds.grid).fit() if args.method == "linear" else cls().fit(ds)
    rows = [(r, model.predict(cases)) for r, cases in _case_sets(ds, args.split, args.missing, args.seed)]
    _write_predictions(args.out, rows, config, args.top_k)


def cmd_evaluate(args, config):
    ds = _load_dataset(args.input)
    slots = {(t.user, t.day): t.slots for t in ds.trajectories()}
    groups = _read_predictions(args.predictions)

    def score(out: RecoveryOutput) -> Report:
        truth = {}
        for user, day, n in out.rankings:
            day_slots = slots.get((user, day))
            if day_slots is None or not 0 <= n < len(day_slots) or day_slots[n] is None:
                raise InputError(f"prediction for {user}/{day}/{n} has no ground truth")
            truth[(user, day, n)] = day_slots[n]
        return Report(recall(out, truth, args.k), map_metric(out, truth),
                      distance_metric(out, truth, ds.grid), len(truth))

    # the same slot can appear under several ratios, so pool by weighting each group
    parts = {r: score(out) for r, out in groups.items()}
    n = sum(p.n_targets for p in parts.values())
    report = Report(sum(p.recall * p.n_targets for p in parts.values()) / n,
                    sum(p.map * p.n_targets for p in parts.values()) / n,
                    sum(p.distance_m * p.n_targets for p in parts.values()) / n, n)
    report.by_ratio = {r: p for r, p in parts.items() if r is not None}
    with open(args.out, "w", encoding="utf-8") as fh:
        report.write(fh, config)
    for line in report.lines():
        print(line)


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "embed": cmd_embed,
    "train": cmd_train,
    "recover": cmd_recover,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except InputError as exc:
        print(f"trajdiff: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"trajdiff: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config = _resolved(args)
    print(f"trajdiff {args.command} " + " ".join(f"{k}={v}" for k, v in config.items()), file=sys.stderr)
    try:
        COMMANDS[args.command](args, config)
    except (FormatError, UnicodeDecodeError) as exc:
        print(f"trajdiff: format error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"trajdiff: I/O error: {exc}", file=sys.stderr)
        return 2
    except (InputError, TrainingDiverged) as exc:
        print(f"trajdiff: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
