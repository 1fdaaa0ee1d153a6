"""Command-line entry point: ``camta <subcommand> ...``.

Every subcommand writes into its ``--out`` directory. Files are staged in a
temporary sibling directory and moved into place only on success, so a
failed run leaves no partial outputs behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from camta import baselines
from camta.budget import budget_sweep, sweep_rows
from camta.config import RunConfig, load_config
from camta.data import (
    VocabMap,
    build_journeys,
    build_vocab,
    encode,
    generate_synthetic,
    ingest_log,
    read_journeys,
    select_channels,
    split,
    write_journeys,
)
from camta.io import AttributionRecord, read_attributions, write_attributions, write_csv, write_json
from camta.metrics import boxplot_rows, metric_report
from camta.model import Hyperparams, attribute, check_gradients, init_params, load_checkpoint, save_checkpoint
from camta.segment import channel_affinity, channel_affinity_stats, segment_users, user_returns
from camta.train import grid_search, train

logger = logging.getLogger("camta")

JOURNEYS = "journeys.jsonl"
VOCAB = "vocab.json"
SPLIT = "split.json"
TRUTH = "ground_truth.json"
CHECKPOINT = "model.ckpt"


class CliError(Exception):
    pass


@contextmanager
def staged(out: Path):
    """Yield a temp dir; on success move its files into ``out``."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    out.mkdir(parents=True, exist_ok=True)
    for f in sorted(tmp.iterdir()):
        os.replace(f, out / f.name)
    tmp.rmdir()


# -- dataset directory helpers ------------------------------------------------

def _write_dataset(tmp: Path, journeys, vocab: VocabMap, parts) -> None:
    write_journeys(tmp / JOURNEYS, journeys)
    write_json(tmp / VOCAB, vocab.to_dict())
    write_json(
        tmp / SPLIT,
        {name: [j.journey_id for j in part] for name, part in zip(("train", "validation", "test"), parts)},
    )


def _finish_dataset(cfg: RunConfig, journeys, channels) -> tuple:
    parts = split(journeys, tuple(cfg.data.split), cfg.data.split_seed)
    vocab = build_vocab(parts[0], cfg.data.top_v, channels)
    enc = encode(journeys, vocab)
    by_id = {j.journey_id: j for j in enc}
    enc_parts = tuple([by_id[j.journey_id] for j in p] for p in parts)
    return enc, vocab, enc_parts


def load_dataset(data_dir) -> tuple[list, VocabMap, dict]:
    d = Path(data_dir)
    if not (d / JOURNEYS).exists():
        raise CliError(f"{d} has no {JOURNEYS}")
    journeys = read_journeys(d / JOURNEYS)
    vocab = VocabMap.from_dict(json.loads((d / VOCAB).read_text()))
    by_id = {j.journey_id: j for j in journeys}
    if (d / SPLIT).exists():
        manifest = json.loads((d / SPLIT).read_text())
        parts = {k: [by_id[i] for i in ids] for k, ids in manifest.items()}
    else:
        tr, va, te = split(journeys, (0.6, 0.2, 0.2), 0)
        parts = {"train": tr, "validation": va, "test": te}
    parts["all"] = journeys
    return journeys, vocab, parts


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> None:
    journeys, truth = generate_synthetic(cfg.synthetic)
    channels = [f"ch{k}" for k in range(cfg.synthetic.n_channels)]
    enc, vocab, parts = _finish_dataset(cfg, journeys, channels)
    with staged(args.out) as tmp:
        _write_dataset(tmp, enc, vocab, parts)
        write_json(tmp / TRUTH, truth.to_dict())
    n_conv = sum(j.y for j in enc)
    print(f"synth: {len(enc)} journeys, {n_conv} converting, split {[len(p) for p in parts]} -> {args.out}")


def cmd_ingest(args, cfg: RunConfig) -> None:
    res = ingest_log(args.log, cfg.data.column_map, cfg.data.delimiter)
    channels = list(cfg.data.channels) or select_channels(
        res.impressions, cfg.data.n_random_channels, cfg.data.channel_seed
    )
    journeys = build_journeys(res.impressions, channels, cfg.data.max_len)
    if not journeys:
        raise CliError("no journeys survived the channel and length filters")
    enc, vocab, parts = _finish_dataset(cfg, journeys, channels)
    with staged(args.out) as tmp:
        _write_dataset(tmp, enc, vocab, parts)
        write_json(
            tmp / "ingest_report.json",
            {
                "n_impressions": len(res.impressions),
                "n_malformed": res.n_malformed,
                "channels": channels,
                "n_journeys": len(enc),
                "n_converting": sum(j.y for j in enc),
                "n_touchpoints": sum(len(j) for j in enc),
                "n_users": len({j.user_id for j in enc}),
            },
        )
    print(f"ingest: {len(res.impressions)} impressions ({res.n_malformed} malformed) -> {len(enc)} journeys")


def _base_hp(cfg: RunConfig, vocab: VocabMap, n_channels: int) -> Hyperparams:
    return Hyperparams(
        n_channels=n_channels,
        cardinalities=tuple(vocab.cardinalities),
        max_len=cfg.data.max_len,
        **cfg.model,
    )


def _n_channels(vocab: VocabMap, journeys) -> int:
    return len(vocab.channels) or max(max(j.channels) for j in journeys) + 1


def cmd_train(args, cfg: RunConfig) -> None:
    journeys, vocab, parts = load_dataset(args.data)
    hp = _base_hp(cfg, vocab, _n_channels(vocab, journeys))
    tcfg = cfg.train
    leaderboard = []
    if tcfg.grid:
        hp, tcfg, params, hist, board = grid_search(parts["train"], parts["validation"], hp, tcfg.grid, tcfg)
        leaderboard = [asdict(p) for p in board]
    else:
        params, hist = train(parts["train"], parts["validation"], hp, tcfg)
    with staged(args.out) as tmp:
        save_checkpoint(tmp / CHECKPOINT, params, hp, vocab.digest())
        write_json(
            tmp / "train_report.json",
            {
                "hyperparams": hp.to_dict(),
                "train_config": asdict(tcfg),
                "history": hist.to_dict(),
                "leaderboard": leaderboard,
            },
        )
    rec = hist.records[hist.best_epoch - 1]
    print(f"train: best epoch {hist.best_epoch}, validation AUC {rec.val_auc:.4f} -> {args.out}")


def _load_model(model_dir, vocab: VocabMap):
    path = Path(model_dir)
    path = path / CHECKPOINT if path.is_dir() else path
    params, hp, vhash = load_checkpoint(path)
    if vhash and vhash != vocab.digest():
        raise CliError("checkpoint vocabulary does not match the dataset vocabulary")
    return params, hp


def cmd_eval(args, cfg: RunConfig) -> None:
    journeys, vocab, parts = load_dataset(args.data)
    params, hp = _load_model(args.model, vocab)
    subset = parts[args.split]
    res = attribute(params, subset, hp)
    report = metric_report(
        [r.conversion for r in res], [j.y for j in subset], [r.click_prob for r in res], [j.clicks for j in subset]
    )
    with staged(args.out) as tmp:
        write_json(tmp / "metrics.json", {"split": args.split, **report.to_dict()})
        write_csv(tmp / "metrics.csv", [{"split": args.split, **report.to_dict()}])
    print(f"eval[{args.split}]: AUC {report.AUC:.4f} LL_conv {report.LL_conv:.4f} LL_click {report.LL_click:.4f}")


def cmd_attribute(args, cfg: RunConfig) -> None:
    journeys, vocab, parts = load_dataset(args.data)
    subset = parts[args.split]
    K = _n_channels(vocab, journeys)
    records = []
    if args.baseline in baselines.RULES:
        for j in subset:
            w = baselines.rule_attribution(j, args.baseline)
            records.append(AttributionRecord(j.journey_id, j.user_id, w.tolist(), args.baseline))
    elif args.baseline == "lr":
        fit = baselines.lr_train(parts["train"], K)
        credit = baselines.lr_attribute(fit.coef)
        counts = baselines.channel_counts(subset, K)
        p = 0.5 * (1.0 + np.tanh(0.5 * (counts @ fit.coef + fit.intercept)))
        for j, pj in zip(subset, p):
            w = baselines.channel_credit_to_touchpoints(j, credit)
            records.append(AttributionRecord(j.journey_id, j.user_id, w.tolist(), "lr", float(pj)))
    else:
        if args.model is None:
            raise CliError("attribute needs --model unless --baseline is given")
        params, hp = _load_model(args.model, vocab)
        for j, r in zip(subset, attribute(params, subset, hp)):
            records.append(
                AttributionRecord(j.journey_id, j.user_id, r.attention.tolist(), "camta", r.conversion, r.click_prob.tolist())
            )
    with staged(args.out) as tmp:
        write_attributions(tmp / "attributions.jsonl", records)
    print(f"attribute[{records[0].method if records else '-'}]: {len(records)} journeys -> {args.out}")


def _attrib_path(p) -> Path:
    p = Path(p)
    return p / "attributions.jsonl" if p.is_dir() else p


def _attributions_for(args):
    journeys, vocab, parts = load_dataset(args.data)
    recs = read_attributions(_attrib_path(args.attrib))
    by_id = {j.journey_id: j for j in journeys}
    missing = [r.journey_id for r in recs if r.journey_id not in by_id]
    if missing:
        raise CliError(f"attribution file references unknown journeys, e.g. {missing[0]}")
    subset = [by_id[r.journey_id] for r in recs]
    return subset, recs, _n_channels(vocab, journeys)


def cmd_budget(args, cfg: RunConfig) -> None:
    subset, recs, K = _attributions_for(args)
    fractions = [float(x) for x in args.fractions.split(",")] if args.fractions else list(cfg.budget.fractions)
    cost_scale = args.cost_scale if args.cost_scale is not None else cfg.budget.cost_scale
    attrs = {r.journey_id: r.weights for r in recs}
    reports = budget_sweep(subset, attrs, K, fractions, cost_scale, cfg.budget.value)
    with staged(args.out) as tmp:
        write_json(
            tmp / "budget.json",
            {"method": recs[0].method, "cost_scale": cost_scale, "reports": [r.to_dict() for r in reports]},
        )
        write_csv(tmp / "budget.csv", sweep_rows(reports))
    for r in reports:
        cpa = "undefined" if r.cpa is None else f"{r.cpa:.4f}"
        print(f"budget {r.fraction:.2f}: CPA {cpa} CVR {r.cvr:.4f} conversions {r.true_conversions}")


def cmd_segment(args, cfg: RunConfig) -> None:
    subset, recs, K = _attributions_for(args)
    if any(r.conversion is None for r in recs):
        raise CliError("segment needs conversion probabilities in the attribution file (model attributions)")
    attention = {r.journey_id: r.weights for r in recs}
    conversion = {r.journey_id: r.conversion for r in recs}
    returns, excluded = user_returns(subset, attention, conversion)
    users, centroids = segment_users(returns, seed=cfg.segment.seed, n_init=cfg.segment.n_init)
    aff = channel_affinity(subset, attention, K)
    stats = channel_affinity_stats(users, aff, K)
    shares = {g: sum(u.group == g for u in users) / len(users) for g in ("low", "medium", "high")}
    with staged(args.out) as tmp:
        write_csv(tmp / "users.csv", [{"user_id": u.user_id, "return": u.value, "group": u.group} for u in users])
        write_csv(tmp / "affinity_boxplots.csv", boxplot_rows(stats, ("group", "channel")))
        write_json(
            tmp / "segment.json",
            {"centroids": centroids.tolist(), "group_shares": shares, "excluded_users": excluded},
        )
    print("segment: " + ", ".join(f"{g} {100 * s:.2f}%" for g, s in shares.items()))


def gradcheck_fixture(seed: int = 0):
    """Two-journey batch and a tiny model (hidden 4, L 3, K 3) with lam=beta=5."""
    from camta.data import Journey, Touchpoint

    j1 = Journey("g1", "u1", (
        Touchpoint((1, 2), 0, 1, 1.0, 0),
        Touchpoint((2, 1), 2, 0, 1.0, 1),
        Touchpoint((0, 3), 1, 1, 1.0, 2),
    ), 1)
    j2 = Journey("g2", "u2", (Touchpoint((3, 0), 1, 0, 1.0, 0), Touchpoint((1, 1), 1, 1, 1.0, 3)), 0)
    hp = Hyperparams(
        n_channels=3, cardinalities=(4, 4), embedding_size=2, hidden_size=4,
        representation_size=3, head_size=3, dropout=0.0, lam=5.0, beta=5.0,
    )
    rng = np.random.default_rng(seed)
    # nonzero biases so their gradients are exercised away from the init point
    params = {k: v + rng.normal(scale=0.3, size=v.shape) for k, v in init_params(hp, seed).items()}
    return params, [j1, j2], hp


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    params, journeys, hp = gradcheck_fixture(args.seed)
    err = check_gradients(params, journeys, hp, step=args.step)
    ok = err < 1e-4
    print(f"gradcheck: max relative error {err:.3e} ({'ok' if ok else 'FAIL'}, tolerance 1e-4)")
    return 0 if ok else 1


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="camta", description="Attention-based multi-touch attribution with budget replay and user segmentation.", formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.add_argument("--config", default=None, help="JSON run config (defaults used when omitted)")
        return sp

    sp = add("synth", "generate a confounded synthetic dataset with ground truth")
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--seed", type=int, default=None, help="override synthetic.seed")

    sp = add("ingest", "build journeys from an impression log")
    sp.add_argument("--log", required=True, help="delimited impression log with a header row")
    sp.add_argument("--out", required=True, help="output dataset directory")

    sp = add("train", "train the model (grid search when train.grid is set)")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output model directory")
    sp.add_argument("--epochs", type=int, default=None, help="override train.epochs")

    sp = add("eval", "prediction metrics on a split")
    sp.add_argument("--model", required=True, help="model directory or checkpoint file")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output report directory")
    sp.add_argument("--split", default="test", choices=["train", "validation", "test", "all"], help="journeys to score")

    sp = add("attribute", "write per-touchpoint attributions")
    sp.add_argument("--model", default=None, help="model directory or checkpoint file")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output attribution directory")
    sp.add_argument("--baseline", default=None, choices=["first", "last", "linear", "lr"], help="use a baseline instead of the model")
    sp.add_argument("--split", default="test", choices=["train", "validation", "test", "all"], help="journeys to attribute")

    sp = add("budget", "ROI-driven budget allocation and replay over budget fractions")
    sp.add_argument("--attrib", required=True, help="attribution directory or file")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--fractions", default=None, help="comma-separated budget fractions; budget.fractions (0.2,0.4,0.6,0.8,1.0) when omitted")
    sp.add_argument("--cost-scale", type=float, default=None, help="multiplier applied to every cost; budget.cost_scale (1000) when omitted")
    sp.add_argument("--out", required=True, help="output report directory")

    sp = add("segment", "user-return segmentation and channel affinity box plots")
    sp.add_argument("--attrib", required=True, help="model attribution directory or file")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output report directory")

    sp = add("gradcheck", "finite-difference check of the full model gradients")
    sp.add_argument("--seed", type=int, default=0, help="fixture seed")
    sp.add_argument("--step", type=float, default=1e-6, help="central-difference step")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "attribute": cmd_attribute,
    "budget": cmd_budget,
    "segment": cmd_segment,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("CAMTA_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None and args.command == "synth":
            cfg.synthetic.seed = args.seed
        if getattr(args, "epochs", None) is not None:
            cfg.train.epochs = args.epochs
        rc = COMMANDS[args.command](args, cfg)
    except (CliError, ValueError, KeyError, OSError, FloatingPointError, RuntimeError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"camta {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
