"""Command-line entry point: ``fewmax {pretrain,adapt,eval,report,fixture}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import torch
import yaml

from . import plots
from ._random import make_rng
from .augment import blend_plan
from .config import ExperimentConfig, from_dict, load_config
from .data import load_dataset, magnitude, normalize, stack_tensors
from .errors import ConfigError, FewMaxError, StateError
from .evaluation import (
    MemoryBank,
    input_grad_norm_probe,
    knn_retrieve,
    linear_probe,
    loss_landscape,
    mean_energy_report,
    nrmse_probe,
)
from .train import ANCHORED, METHODS, batch_loss, load_checkpoint, run_training

log = logging.getLogger("fewmax")

REPORT_NAME = "report.json"
EVAL_DIR = "eval"


# ---------------------------------------------------------------------------
# pretrain / adapt
# ---------------------------------------------------------------------------


def cmd_pretrain(config: ExperimentConfig, run_dir=None):
    """Train a baseline contrastive model on the full source split."""
    if not config.data.source_manifest:
        raise ConfigError("data.source_manifest is required for pretraining")
    if not Path(config.data.source_manifest).is_file():
        raise ConfigError(f"source manifest not found: {config.data.source_manifest}")
    cfg = dataclasses.replace(
        config,
        method="baseline",
        anchor=None,
        data=dataclasses.replace(config.data, target_manifest=config.data.source_manifest, class_ids=None),
    )
    run_dir = run_dir or config.run_dir(f"pretrain_seed{config.seed}")
    state, _ = run_training(cfg, run_dir=run_dir)
    return Path(run_dir) / "checkpoints" / "final.npz", state


def cmd_adapt(config: ExperimentConfig, run_dir=None, resume_from=None):
    if config.method != "baseline" and not config.anchor:
        raise ConfigError(f"method {config.method!r} needs an anchor checkpoint")
    run_dir = run_dir or config.run_dir(f"{config.method}_seed{config.seed}")
    state, _ = run_training(config, resume_from=resume_from, run_dir=run_dir)
    return Path(run_dir), state


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _load_run(run_dir):
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoints" / "final.npz"
    if not ckpt.is_file():
        raise StateError(f"no final checkpoint in {run_dir}")
    snapshot = run_dir / "config.yaml"
    if not snapshot.is_file():
        raise StateError(f"no config snapshot in {run_dir}")
    config = from_dict(yaml.safe_load(snapshot.read_text()))
    return config, load_checkpoint(ckpt)


def _eval_records(path, stats):
    if not path:
        return None
    records = load_dataset(path)
    if stats:
        records = [normalize(r, stats["mean"], stats["std"]) for r in records]
    return records


def _require(records, what, key):
    if not records:
        raise ConfigError(f"{what} needs data.{key} in the run config")
    return records


def evaluate_run(run_dir, toggles=None):
    """Run the enabled evaluations for a finished run.

    ``toggles`` overrides the run config's ``eval`` section.  Returns the
    report dict; files land in ``run_dir/eval``.
    """
    run_dir = Path(run_dir)
    config, state = _load_run(run_dir)
    ev = dataclasses.replace(config.eval, **(toggles or {}))
    stats = (state.config or {}).get("norm_stats")
    net = state.task_net
    out_dir = run_dir / EVAL_DIR
    report = {}

    enabled = ev.energy or ev.probe or ev.retrieval or ev.nrmse or ev.landscape or ev.gradnorm
    if not enabled:
        log.info("no evaluations enabled for %s", run_dir)
        return report
    out_dir.mkdir(exist_ok=True)

    test = _eval_records(config.data.test_manifest, stats)
    if ev.energy:
        test = _require(test, "energy", "test_manifest")
        report["energy"] = mean_energy_report(net.embed(stack_tensors(test))).to_dict()
    if ev.probe:
        test = _require(test, "probe", "test_manifest")
        train_recs = _require(_eval_records(config.data.probe_train_manifest, stats), "probe", "probe_train_manifest")
        top1, top5 = linear_probe(
            net.features(stack_tensors(train_recs)), [r.label for r in train_recs],
            net.features(stack_tensors(test)), [r.label for r in test],
            seed=config.seed, steps=ev.probe_steps,
        )
        report["probe"] = {"top1": top1, "top5": top5}
    if ev.nrmse:
        test = _require(test, "nrmse", "test_manifest")
        # decode magnitudes of the stored (unnormalized) patches
        raw = load_dataset(config.data.test_manifest)
        mags = np.stack([magnitude(r) for r in raw])
        report["nrmse"] = {"nrmse": nrmse_probe(net.embed(stack_tensors(test)), mags, seed=config.seed, steps=ev.nrmse_steps)}
    if ev.retrieval:
        report["retrieval"] = _retrieval(config, net, test, stats, ev, out_dir)
    if ev.landscape:
        report["landscape"] = _landscape(config, state, ev.landscape, out_dir)
    if ev.gradnorm:
        test = _require(test, "gradnorm", "test_manifest")
        batch = stack_tensors(test[: config.optim.batch_size])
        policy = dataclasses.replace(config.aug_policy(), M=1)
        report["gradnorm"] = {
            "mean_input_grad_norm": input_grad_norm_probe(net.net, batch, policy, tau=config.tau, negatives=config.negatives())
        }

    (out_dir / REPORT_NAME).write_text(json.dumps({"method": config.method, "seed": config.seed, **report}, indent=2))
    return report


def _retrieval(config, net, test, stats, ev, out_dir):
    test = _require(test, "retrieval", "test_manifest")
    bank_path = config.data.bank_manifest or config.data.probe_train_manifest
    bank_recs = _require(_eval_records(bank_path, stats), "retrieval", "bank_manifest")
    bank = MemoryBank(net.embed(stack_tensors(bank_recs)), [r.id for r in bank_recs])
    by_id = {r.id: r for r in bank_recs}
    queries = test[: ev.retrieval_queries]
    q_emb = net.embed(stack_tensors(queries))
    results, rows = [], []
    for rec, q in zip(queries, q_emb):
        hits = knn_retrieve(bank, q, ev.retrieval)
        results.append({"query_id": rec.id, "neighbors": [h for h, _ in hits], "distances": [d for _, d in hits]})
        rows.append((rec.tensor, [(by_id[h].tensor, d) for h, d in hits]))
    (out_dir / "retrieval.json").write_text(json.dumps(results, indent=2))
    plots.retrieval_montage(rows, out_dir / "retrieval.png")
    return {"k": ev.retrieval, "queries": len(results), "file": "retrieval.json"}


def _landscape(config, state, grid_size, out_dir):
    """Slice of the run's own training loss on one fixed target batch."""
    from .train import prepare_training_data

    records, _ = prepare_training_data(config)
    batch = records[: min(len(records), config.optim.batch_size)]
    policy = dataclasses.replace(config.aug_policy(), M=config.aug_policy().M if config.method == "few_max" else 1)
    arrays = [r.tensor for r in batch]
    partners, lams, keep = blend_plan(arrays, policy, make_rng(config.seed, 0x1A5D))
    x = state.task_net.to_tensor(np.stack(arrays).transpose(0, 3, 1, 2))
    anchor = state.anchor_net.net if (config.method in ANCHORED and state.anchor_net is not None) else None

    def loss_eval(net):
        with torch.no_grad():
            return float(batch_loss(net, anchor, x, partners, lams, keep, config.tau, config.negatives()).total)

    grid = loss_landscape(state.task_net.net, loss_eval, grid_size=grid_size, seed=config.seed)
    grid.to_csv(out_dir / "landscape.csv")
    plots.landscape_plot(grid, out_dir / "landscape.png")
    finite = grid.grid[np.isfinite(grid.grid)]
    return {
        "grid_size": grid_size,
        "center_loss": grid.center_loss,
        "max_loss": float(finite.max()) if finite.size else None,
        "file": "landscape.csv",
    }


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _flatten(report):
    row = {}
    for section, key, col in (
        ("energy", "E0", "E0"), ("energy", "E1", "E1"), ("energy", "E2", "E2"),
        ("probe", "top1", "top1"), ("probe", "top5", "top5"),
        ("nrmse", "nrmse", "nrmse"),
        ("gradnorm", "mean_input_grad_norm", "grad_norm"),
        ("landscape", "center_loss", "landscape_center"),
    ):
        if section in report and report[section].get(key) is not None:
            row[col] = float(report[section][key])
    return row


COLUMN_ORDER = ("E0", "E1", "E2", "top1", "top5", "nrmse", "grad_norm", "landscape_center")


def build_report(run_dirs):
    """One row per method: ``(header, rows)`` with mean and std per metric."""
    per_method, col_sets = {}, []
    for d in run_dirs:
        path = Path(d) / EVAL_DIR / REPORT_NAME
        if not path.is_file():
            raise StateError(f"{d} has no evaluation report; run `fewmax eval` first")
        report = json.loads(path.read_text())
        row = _flatten(report)
        col_sets.append(frozenset(row))
        per_method.setdefault(report["method"], []).append(row)
    columns = [c for c in COLUMN_ORDER if any(c in s for s in col_sets)]
    if len(set(col_sets)) > 1:
        warnings.warn("runs report different evaluations; missing values are left blank", stacklevel=2)

    header = ["method", "n_seeds"] + [f"{c}_{s}" for c in columns for s in ("mean", "std")]
    rows = []
    for method in sorted(per_method, key=lambda m: (METHODS.index(m) if m in METHODS else len(METHODS), m)):
        runs = per_method[method]
        out = [method, len(runs)]
        for c in columns:
            vals = [r[c] for r in runs if c in r]
            if vals:
                out += [float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0]
            else:
                out += ["", ""]
        rows.append(out)
    return header, rows


def format_table(header, rows):
    """Aligned text with ``mean ± std`` cells."""
    metrics = [h[: -len("_mean")] for h in header[2::2]]
    text_rows = [["method", "seeds"] + metrics]
    for r in rows:
        cells = [r[0], str(r[1])]
        for k in range(len(metrics)):
            m, s = r[2 + 2 * k], r[3 + 2 * k]
            cells.append("" if m == "" else f"{m:.4f} ± {s:.4f}")
        text_rows.append(cells)
    widths = [max(len(row[c]) for row in text_rows) for c in range(len(text_rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in text_rows)


def cmd_report(run_dirs, csv_path=None):
    header, rows = build_report(run_dirs)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows([header] + rows)
    if csv_path:
        Path(csv_path).write_text(buf.getvalue())
    return format_table(header, rows), buf.getvalue()


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _config_args(p):
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. optim.lr=0.03 (repeatable)")
    p.add_argument("--out", type=Path, help="run directory (default: $FEWMAX_OUTPUT_ROOT/<name>)")


def build_parser():
    parser = _Parser(prog="fewmax", description="Few-shot contrastive domain adaptation with worst-of-M CutMix.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train an anchor on the source split")
    _config_args(p)

    p = sub.add_parser("adapt", help="adapt to the few-shot target split")
    _config_args(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--anchor", type=Path, help="anchor checkpoint (overrides the config)")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a finished run")
    p.add_argument("--run", type=Path, required=True)
    p.add_argument("--energy", action="store_true")
    p.add_argument("--probe", action="store_true")
    p.add_argument("--retrieval", type=int, metavar="K")
    p.add_argument("--nrmse", action="store_true")
    p.add_argument("--landscape", type=int, metavar="G")
    p.add_argument("--gradnorm", action="store_true")

    p = sub.add_parser("report", help="compare evaluated runs")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--csv", type=Path, help="also write the table as CSV")

    p = sub.add_parser("fixture", help="write the bundled synthetic datasets")
    p.add_argument("kind", choices=("shapes", "phantom"))
    p.add_argument("root", type=Path)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _resolved(args):
    overrides = list(args.overrides)
    if getattr(args, "method", None):
        overrides.append(f"method={args.method}")
    if getattr(args, "anchor", None):
        overrides.append(f"anchor={args.anchor.resolve()}")
    config = load_config(args.config, overrides)
    log.info("resolved config:\n%s", yaml.safe_dump(config.to_dict(), sort_keys=False))
    return config


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "pretrain":
            ckpt, _ = cmd_pretrain(_resolved(args), args.out)
            print(ckpt)
        elif args.command == "adapt":
            run_dir, _ = cmd_adapt(_resolved(args), args.out, args.resume)
            print(run_dir)
        elif args.command == "eval":
            toggles = {
                k: v
                for k, v in {
                    "energy": args.energy or None, "probe": args.probe or None, "retrieval": args.retrieval,
                    "nrmse": args.nrmse or None, "landscape": args.landscape, "gradnorm": args.gradnorm or None,
                }.items()
                if v is not None
            }
            report = evaluate_run(args.run, toggles)
            print(json.dumps(report, indent=2))
        elif args.command == "report":
            text, _ = cmd_report(args.runs, args.csv)
            print(text)
        elif args.command == "fixture":
            from . import fixtures

            writer = fixtures.write_shapes_fixture if args.kind == "shapes" else fixtures.write_phantom_fixture
            for name, path in writer(args.root, seed=args.seed).items():
                print(f"{name}: {path}")
    except FewMaxError as exc:
        print(f"fewmax: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
