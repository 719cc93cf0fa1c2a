"""Command line entry point: ``hal <subcommand> [options]``."""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from . import harness as H

log = logging.getLogger("hal")

BASELINES = ("random", "entropy", "dbal", "kcenter")


def build_config(args):
    """Profile defaults, then the --config file, then explicit flags."""
    values = dict(H.PROFILES[args.profile])
    if args.config:
        values.update(H.read_config_file(args.config))
    for name in H.config_fields():
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            values[name] = H.parse_value(name, raw)
    return H.EpisodeConfig(**values)


def load_store(args, cfg):
    """MNIST IDX files when available (or requested), otherwise the bundled
    digits, sized to cover labeled + validation + pool."""
    data_dir = data.resolve_data_dir(args.data_dir)
    if args.dataset in ("auto", "mnist") and data_dir is not None:
        try:
            return data.load_mnist(data_dir, "train")
        except FileNotFoundError:
            if args.dataset == "mnist":
                raise
    elif args.dataset == "mnist":
        raise FileNotFoundError("--dataset mnist needs --data-dir or HAL_DATA_DIR")
    pool = cfg.pool_size if cfg.pool_size is not None else 2000
    need = cfg.n_labeled + cfg.n_val + pool
    log.info("using bundled digits (%d images)", max(need, 1797))
    return data.load_digits_store(need if need > 1797 else None, seed=0)


def out_dir(args):
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def progress_printer(ep, res):
    log.info("episode %d done, mean reward %.4f", ep, float(np.mean(res.rewards)))


def write_amax(path, cfg, ds, seeds):
    H.write_csv(path, ["seed", "a_max"], [(s, H.a_max(cfg, ds, s)) for s in seeds])


# -- subcommands ------------------------------------------------------------------

def cmd_train_policy(args, cfg):
    ds = H.Datasets(load_store(args, cfg))
    policy, tlog, buffer = H.train_policy(cfg, ds, progress=progress_printer)
    out = out_dir(args)
    H.write_rewards(out / "rewards.csv", tlog.reward_rows)
    H.save_policy(out / "policy.npz", policy, {"episodes": cfg.episodes, "seed": cfg.seed})
    if args.save_replay:
        buffer.to_csv(out / "replay.csv")
    print(f"trained {cfg.episodes} episodes; final mean reward {tlog.mean_rewards[-1]:.4f}")


def cmd_eval_policy(args, cfg):
    ds = H.Datasets(load_store(args, cfg))
    policy = H.load_policy(args.policy)
    seeds = H.repeat_seeds(cfg)
    methods = ["hal"] + (["random"] if args.with_random else [])
    curves, _ = H.evaluate_curves(cfg, ds, methods, policy, seeds, mode=args.mode)
    out = out_dir(args)
    H.write_curves(out / "curve.csv", curves, seeds)
    write_amax(out / "amax.csv", cfg, ds, seeds)
    if args.with_random:
        report_alc(H.alc_table(cfg, ds, curves, seeds), out / "alc.csv")


def cmd_baseline(args, cfg):
    ds = H.Datasets(load_store(args, cfg))
    methods = args.methods.split(",")
    for m in methods:
        if m not in BASELINES:
            raise ValueError(f"unknown baseline {m!r} (choose from {', '.join(BASELINES)})")
    seeds = H.repeat_seeds(cfg)
    curves, _ = H.evaluate_curves(cfg, ds, methods, seeds=seeds)
    out = out_dir(args)
    H.write_curves(out / "curve.csv", curves, seeds)
    write_amax(out / "amax.csv", cfg, ds, seeds)


def cmd_ablation_rep(args, cfg):
    ds = H.Datasets(load_store(args, cfg))
    reps = args.representations.split(",")
    table, rows, curves = H.run_ablation_representation(
        cfg, ds, reps, progress=lambda rep, v: log.info("%s: %.4f", rep, v))
    out = out_dir(args)
    H.write_csv(out / "ablation.csv", ["representation", "repeat", "alc_norm"], rows)
    H.write_curves(out / "curve.csv", curves, H.repeat_seeds(cfg))
    for rep in reps:
        print(f"{rep:8s} {table[rep]:.4f}")


def cmd_ablation_ba(args, cfg):
    ds = H.Datasets(load_store(args, cfg))
    rows, curves, seeds = H.run_ablation_ba(cfg, ds)
    out = out_dir(args)
    H.write_csv(out / "ba.csv", ["variant", "repeat", "accuracy"], rows)
    H.write_curves(out / "curve.csv", curves, seeds)
    on = [a for v, _, a in rows if v == "hal-ba"]
    off = [a for v, _, a in rows if v == "hal-no-ba"]
    wins, losses, p = H.sign_test(on, off)
    print(f"accuracy at {cfg.target_labels} labels: with {np.mean(on):.4f}, without {np.mean(off):.4f}; "
          f"sign test {wins}-{losses}, p={p:.4g}")


def cmd_duplicated(args, cfg):
    store = load_store(args, cfg)
    ds = H.duplicated_datasets(cfg, store, cfg.seed)
    policy, tlog, _ = H.train_policy(cfg, ds, progress=progress_printer)
    seeds = H.repeat_seeds(cfg)
    curves, results = H.evaluate_curves(cfg, ds, ["hal", "random"], policy, seeds)
    out = out_dir(args)
    H.write_rewards(out / "rewards.csv", tlog.reward_rows)
    H.save_policy(out / "policy.npz", policy, {"episodes": cfg.episodes, "seed": cfg.seed})
    H.write_curves(out / "curve.csv", curves, seeds)
    write_amax(out / "amax.csv", cfg, ds, seeds)
    fracs = {m: [H.duplicate_fraction(ds, r) for r in results[m]] for m in results}
    H.write_csv(out / "duplicates.csv", ["method", "seed", "duplicate_fraction"],
                [(m, s, f) for m in fracs for s, f in zip(seeds, fracs[m])])
    report_alc(H.alc_table(cfg, ds, curves, seeds), out / "alc.csv")
    wins, losses, p = H.sign_test(fracs["random"], fracs["hal"])
    print(f"duplicate fraction: hal {np.mean(fracs['hal']):.4f}, random {np.mean(fracs['random']):.4f}; "
          f"sign test {wins}-{losses}, p={p:.4g}")


def cmd_transfer(args, cfg):
    source = H.Datasets(load_store(args, cfg))
    target = H.Datasets(data.make_domain_shift(source.store, cfg.blend_strength, seed=cfg.seed))
    policy = H.load_policy(args.policy) if args.policy else None
    if policy is None:
        policy, tlog, _ = H.train_policy(cfg, source, progress=progress_printer)
        H.write_rewards(out_dir(args) / "rewards.csv", tlog.reward_rows)
    curves, seeds, policy, fresh = H.run_transfer(cfg, source, target, policy)
    out = out_dir(args)
    H.write_curves(out / "curve.csv", curves, seeds)
    H.save_policy(out / "policy.npz", policy, {"domain": "source"})
    H.save_policy(out / "target_policy.npz", fresh, {"domain": "target"})
    for name, cs in curves.items():
        print(f"{name:15s} mean ALC {np.mean([H.alc(c) for c in cs]):.4f}")


def cmd_alc(args, cfg):
    curves = H.read_curves(args.curve)
    if args.a_max is not None:
        amax = lambda seed: args.a_max
    else:
        path = Path(args.amax) if args.amax else Path(args.curve).with_name("amax.csv")
        table = {int(r["seed"]): float(r["a_max"]) for r in H.read_csv(path)}
        amax = lambda seed: table[seed]
    ref = {s: c for (m, s), c in curves.items() if m == args.reference}
    if not ref:
        raise ValueError(f"no {args.reference!r} curves in {args.curve}")
    rows = []
    for (m, s), c in sorted(curves.items()):
        if m == args.reference:
            continue
        if s not in ref:
            raise ValueError(f"seed {s} has no {args.reference!r} curve")
        rows.append((m, s, H.alc_norm(c, ref[s], amax(s))))
    report_alc(rows, out_dir(args) / "alc.csv")


def report_alc(rows, path):
    H.write_csv(path, ["method", "seed", "alc_norm"], rows)
    by = {}
    for m, _, v in rows:
        by.setdefault(m, []).append(v)
    for m, vs in by.items():
        print(f"{m:15s} ALC_norm {np.mean(vs):.4f} (n={len(vs)})")


COMMANDS = {
    "train-policy": (cmd_train_policy, "train a query policy over sampled episodes"),
    "eval-policy": (cmd_eval_policy, "learning curves of a saved policy"),
    "baseline": (cmd_baseline, "learning curves of heuristic strategies"),
    "ablation-rep": (cmd_ablation_rep, "class-centre representation ablation"),
    "ablation-ba": (cmd_ablation_ba, "bias-aware feature on/off ablation"),
    "duplicated": (cmd_duplicated, "duplicated-pool experiment"),
    "transfer": (cmd_transfer, "cross-domain transfer experiment"),
    "alc": (cmd_alc, "ALC_norm from a curve CSV"),
}


def add_common(p):
    p.add_argument("--data-dir", help="directory with MNIST IDX files (default: $HAL_DATA_DIR)")
    p.add_argument("--dataset", choices=("auto", "mnist", "digits"), default="auto",
                   help="auto uses MNIST when found, else the bundled digits")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--profile", choices=sorted(H.PROFILES), default="desk")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("-v", "--verbose", action="store_true")
    g = p.add_argument_group("episode config overrides")
    for name, f in H.config_fields().items():
        g.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar=name.upper(),
                       help=f"default {f.default}")


def build_parser():
    parser = argparse.ArgumentParser(prog="hal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        add_common(p)
        if name == "train-policy":
            p.add_argument("--save-replay", action="store_true", help="also write replay.csv")
        elif name == "eval-policy":
            p.add_argument("--policy", required=True, help="policy checkpoint (.npz)")
            p.add_argument("--mode", choices=("greedy", "sample"), default="greedy")
            p.add_argument("--with-random", action="store_true", help="add random curves and alc.csv")
        elif name == "baseline":
            p.add_argument("--methods", default=",".join(BASELINES))
        elif name == "ablation-rep":
            p.add_argument("--representations", default="mean,median,mode,max,min")
        elif name == "transfer":
            p.add_argument("--policy", help="source policy checkpoint (trained when omitted)")
        elif name == "alc":
            p.add_argument("--curve", required=True, help="curve.csv to score")
            p.add_argument("--reference", default="random")
            p.add_argument("--a-max", type=float, help="a single A_max for every seed")
            p.add_argument("--amax", help="amax.csv (seed,a_max); default: next to the curve")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = build_config(args)
        COMMANDS[args.command][0](args, cfg)
    except Exception as e:  # every failure ends in one diagnostic line
        print(f"hal {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
