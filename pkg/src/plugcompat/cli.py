"""Command-line experiment runner.

Exit codes: 0 success, 2 usage or config error, 3 gate or training failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields

from plugcompat import evalkit
from plugcompat.data import DEFAULT_SHIFTS, SyntheticTask, generate_task
from plugcompat.encoder import EncoderConfig, ModelPair, PretrainConfig, contrastive_pretrain
from plugcompat.errors import ConfigError, PlugCompatError, TrainingError, UpgradeError
from plugcompat.tuners import METHODS, TunerModule, default_hyper, train_tuner
from plugcompat.upgrade import UpgradeRecipe, simulate_upgrade

log = logging.getLogger("plugcompat")

EXIT_OK, EXIT_USAGE, EXIT_FAILED, EXIT_IO = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "seed": 0,
    "pretrain": {},
    "upgrade": {},
    "task": {},
    "tasks": [0, 1, 2, 3, 4],
    "methods": list(METHODS),
    "seeds": [0, 1, 2],
    "tuner": {},
    "depths": [0, 1, 2, 3, 4, 5],
    "sweep_seeds": [0, 1, 2, 3, 4],
}


# -- config -------------------------------------------------------------------


def load_config(path):
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    unknown = set(user) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg.update(user)
    return cfg


def _build(cls, overrides, what):
    known = {f.name for f in fields(cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**overrides)


def pretrain_config(cfg):
    overrides = dict(cfg["pretrain"])
    encoder = overrides.pop("encoder", {})
    if "img_hidden" in encoder:
        encoder["img_hidden"] = tuple(encoder["img_hidden"])
    return _build(PretrainConfig, {**overrides, "encoder": _build(EncoderConfig, encoder, "encoder")}, "pretrain")


def upgrade_recipe(cfg, kind=None):
    overrides = dict(cfg["upgrade"])
    if kind is not None:
        overrides["kind"] = kind
    return _build(UpgradeRecipe, overrides, "upgrade")


def tuner_overrides(cfg, method):
    """Per-method hyperparameter overrides from the ``tuner`` config section."""
    value = cfg["tuner"].get(method, {})
    if not isinstance(value, dict):
        raise ConfigError(f"tuner.{method} must be an object of hyperparameters")
    return dict(value)


def load_task(spec, cfg):
    """A saved task file, or an integer seed for the configured generator."""
    if os.path.exists(str(spec)) and not str(spec).isdigit():
        return SyntheticTask.load(spec)
    try:
        seed = int(spec)
    except ValueError as exc:
        raise ConfigError(f"--task must be a task file or an integer seed, got {spec!r}") from exc
    return generate_task(seed, **cfg["task"])


def load_pairs(spec):
    parts = spec.split(",")
    if len(parts) != 2:
        raise ConfigError("--pairs expects BASE,UPGRADED")
    return ModelPair.load(parts[0]), ModelPair.load(parts[1]).with_tag("upgraded")


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    evalkit.write_text(path, text)


def _say(args, msg):
    if not args.quiet:
        print(msg)


# -- subcommands ------------------------------------------------------------------


def cmd_pretrain(args, cfg):
    config = pretrain_config(cfg)
    pair, metrics = contrastive_pretrain(config, seed=args.seed)
    pair.meta["fingerprint"] = evalkit.fingerprint(config.to_dict())
    pair.save(args.out)
    _say(args, f"retrieval accuracy {metrics['retrieval_accuracy']:.4f}")
    return EXIT_OK


def cmd_upgrade(args, cfg):
    base = ModelPair.load(args.base)
    recipe = upgrade_recipe(cfg, args.recipe)
    upgraded = simulate_upgrade(base, recipe, seed=args.seed)
    upgraded.meta["fingerprint"] = evalkit.fingerprint(recipe.to_dict())
    upgraded.save(args.out)
    gate = upgraded.meta.get("gate")
    if gate is not None:
        _write(args.out + ".gate.json", evalkit.dumps_json(gate))
        _say(args, f"zero-shot {gate['base_zero_shot']} -> {gate['upgraded_zero_shot']}")
    return EXIT_OK


def _hyper_from_args(args, cfg, method, ctx_len=None):
    overrides = tuner_overrides(cfg, method)
    flags = {
        "ctx_len": ctx_len,
        "lam": args.lam,
        "heads": args.heads,
        "depth": args.depth,
        "condition": args.condition,
        "epochs": args.epochs,
        "lr": args.lr,
    }
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return default_hyper(method, **overrides)


def cmd_tune(args, cfg):
    base = ModelPair.load(args.base)
    task = load_task(args.task, cfg)
    ctx_lens = args.ctx_len or [None]
    for n in ctx_lens:
        hyper = _hyper_from_args(args, cfg, args.method, n)
        module = train_tuner(args.method, base, task, hyper, seed=args.seed)
        module.provenance["fingerprint"] = evalkit.fingerprint({"method": args.method, **hyper.to_dict()})
        out = args.out if len(ctx_lens) == 1 else f"{args.out}.n{hyper.ctx_len}"
        module.save(out)
        _say(args, f"{args.method} N={hyper.ctx_len} train accuracy {module.metrics['train_accuracy']:.2f} -> {out}")
    return EXIT_OK


def _eval_module(path, base, upgraded, task):
    module = TunerModule.load(path)
    cell = evalkit.CompatCell(int(task.seed), module.method, int(module.provenance.get("seed", 0)))
    cell.base = evalkit.accuracy(base, module, task.test)
    cell.new = evalkit.accuracy(upgraded, module, task.test)
    return cell


def cmd_eval(args, cfg):
    base, upgraded = load_pairs(args.pairs)
    task = load_task(args.task, cfg)
    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        cells = list(pool.map(lambda p: _eval_module(p, base, upgraded, task), args.modules))
    seeds = sorted({c.seed for c in cells})
    config = {
        "methods": [c.method for c in cells],
        "seeds": seeds,
        "tasks": [int(task.seed)],
        "modules": [os.path.basename(p) for p in args.modules],
        "base_checksum": base.text_checksum(),
        "upgraded_checksum": upgraded.text_checksum(),
    }
    report = evalkit.CompatReport(cells, seeds, config)
    _write(os.path.join(args.report_dir, "compat.csv"), report.to_csv())
    _write(os.path.join(args.report_dir, "compat.json"), evalkit.dumps_json(report.to_dict()))
    for m in report.methods():
        r = report.mean(m)
        _say(args, f"{m:13s} base {r['base']:6.2f} new {r['new']:6.2f} h {r['h']:6.2f}")
    return EXIT_OK


def cmd_analyze(args, cfg):
    base, upgraded = load_pairs(args.pairs)
    probes = None
    if args.probes != "auto":
        probes = [[int(t) for t in seq.split(":")] for seq in args.probes.split(",")]
    profile = evalkit.drift_profile(base, upgraded, probes)
    config = {"probes": args.probes, "base_checksum": base.text_checksum(), "upgraded_checksum": upgraded.text_checksum()}
    payload = {
        "fingerprint": evalkit.fingerprint(config),
        "config": config,
        "drift": profile.to_dict(),
        "spearman": {n: profile.spearman(n) for n in ("param_abs", "param_rel", "feat_abs", "feat_rel")},
    }
    _write(os.path.join(args.report_dir, "drift.tsv"), profile.to_tsv(config))
    _write(os.path.join(args.report_dir, "drift.json"), evalkit.dumps_json(payload))
    _say(args, profile.to_tsv(config))
    return EXIT_OK


def parse_depths(text, layers):
    if text is None:
        return list(range(layers))
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), (layers - 1 if hi in ("L-1", "") else int(hi)) + 1))
    return [int(d) for d in text.split(",")]


def cmd_sweep_depth(args, cfg):
    base, upgraded = load_pairs(args.pairs)
    task = load_task(args.task, cfg)
    depths = parse_depths(args.depths, base.text.config.layers)
    seeds = list(range(args.seeds)) if args.seeds is not None else cfg["sweep_seeds"]
    curve = evalkit.depth_sweep(base, upgraded, task, depths, seeds, tuner_overrides(cfg, "coop"))
    _write(os.path.join(args.report_dir, "depth_sweep.tsv"), curve.to_tsv())
    _write(os.path.join(args.report_dir, "depth_sweep.json"), evalkit.dumps_json(curve.to_dict()))
    _say(args, curve.to_tsv())
    return EXIT_OK


def run_reproduction(cfg, workdir, quiet=True):
    """pretrain -> upgrade -> compat (all methods) -> drift -> depth sweep -> OOD."""
    os.makedirs(workdir, exist_ok=True)
    seed = int(cfg["seed"])
    base, _ = contrastive_pretrain(pretrain_config(cfg), seed=seed)
    base.save(os.path.join(workdir, "base.pcmp"))
    upgraded = simulate_upgrade(base, upgrade_recipe(cfg), seed=seed)
    upgraded.save(os.path.join(workdir, "upgraded.pcmp"))
    reports = os.path.join(workdir, "reports")
    tasks = [generate_task(int(t), **cfg["task"]) for t in cfg["tasks"]]
    hyper = {m: tuner_overrides(cfg, m) for m in cfg["methods"]}
    report = evalkit.compat_experiment(base, upgraded, tasks, cfg["methods"], cfg["seeds"], hyper)
    _write(os.path.join(reports, "compat.csv"), report.to_csv())
    _write(os.path.join(reports, "compat.json"), evalkit.dumps_json(report.to_dict()))
    profile = evalkit.drift_profile(base, upgraded)
    drift_cfg = {"seed": seed, "base_checksum": base.text_checksum(), "upgraded_checksum": upgraded.text_checksum()}
    _write(os.path.join(reports, "drift.tsv"), profile.to_tsv(drift_cfg))
    curve = evalkit.depth_sweep(base, upgraded, tasks[0], cfg["depths"], cfg["sweep_seeds"], tuner_overrides(cfg, "coop"))
    _write(os.path.join(reports, "depth_sweep.tsv"), curve.to_tsv())
    ood_task = tasks[0].with_shifts(DEFAULT_SHIFTS)
    ood_methods = [m for m in ("zs", "coop", "cocoop", "kgcoop", "contcoop") if m in cfg["methods"]]
    modules = [train_tuner(m, base, ood_task, default_hyper(m, **hyper.get(m, {})), seed=seed) for m in ood_methods]
    table = evalkit.ood_table(base, modules, ood_task)
    ood_cfg = {"seed": seed, "methods": ood_methods, "task": int(ood_task.seed)}
    _write(os.path.join(reports, "ood.tsv"), evalkit.ood_table_tsv(table, ood_cfg))
    summary = {
        "fingerprint": evalkit.fingerprint(cfg),
        "config": cfg,
        "gate": upgraded.meta.get("gate"),
        "compat": report.to_dict()["summary"],
        "drift": profile.to_dict(),
        "drift_spearman": {n: profile.spearman(n) for n in ("param_abs", "param_rel", "feat_abs", "feat_rel")},
        "depth_sweep": curve.to_dict(),
        "ood": table,
    }
    _write(os.path.join(reports, "summary.json"), evalkit.dumps_json(summary))
    if not quiet:
        print(report.to_csv())
    return summary


def cmd_reproduce(args, cfg):
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.quick:
        cfg.update({"tasks": cfg["tasks"][:1], "seeds": cfg["seeds"][:1], "sweep_seeds": cfg["sweep_seeds"][:1]})
    run_reproduction(cfg, args.workdir, quiet=args.quiet)
    _say(args, f"reports written to {os.path.join(args.workdir, 'reports')}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="plugcompat", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("--threads", type=int, default=1, help="evaluation parallelism (never changes results)")
    parser.add_argument("--quiet", action="store_true")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="contrastively pretrain a base pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("upgrade", help="simulate a backbone upgrade")
    p.add_argument("--base", required=True)
    p.add_argument("--recipe", choices=["continued_training", "synthetic_drift"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_upgrade)

    p = sub.add_parser("tune", help="train one fine-tuning module on the base pair")
    p.add_argument("--base", required=True)
    p.add_argument("--task", required=True, help="task file or integer task seed")
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--ctx-len", type=int, nargs="+", help="one or more context lengths (one module each)")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--heads", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--condition", choices=["class", "template"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", help="score trained modules on the base and upgraded pairs")
    p.add_argument("--pairs", required=True, help="BASE,UPGRADED checkpoint paths")
    p.add_argument("--modules", nargs="+", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--report-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="per-layer drift between two pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--probes", default="auto", help="'auto' or comma-separated colon-joined token sequences")
    p.add_argument("--report-dir", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep-depth", help="CoOp prompt-depth sweep")
    p.add_argument("--pairs", required=True)
    p.add_argument("--task", default="0")
    p.add_argument("--depths", help="e.g. 0..5 or 0,2,4 (default all)")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--report-dir", required=True)
    p.set_defaults(func=cmd_sweep_depth)

    p = sub.add_parser("reproduce", help="full pipeline with the default desk-scale config")
    p.add_argument("--workdir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--quick", action="store_true", help="one task, one seed")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (UpgradeError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PlugCompatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
