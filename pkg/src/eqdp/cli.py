"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 audit failure.
"""
from __future__ import annotations

import argparse
import contextlib
import os
import sys

from .config import SCHEMA, ConfigError, group_overrides, load_config
from .harness import check_equivariance, evaluate, format_record, load_datasets, train

EXIT_OK, EXIT_CONFIG, EXIT_AUDIT = 0, 2, 3


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI config file; flags override its keys")
    p.add_argument("--group", help="group shorthand such as D4, C8, SO2[1] or e")
    for sec, keys in SCHEMA.items():
        g = p.add_argument_group(f"[{sec}]")
        for key in keys:
            g.add_argument("--" + key.replace("_", "-"), dest=f"cfg_{key}", default=None, metavar="VALUE")


def _config(args):
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    if getattr(args, "group", None):
        overrides.update(group_overrides(args.group))
    return load_config(args.config, overrides)


@contextlib.contextmanager
def _threads(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def cmd_train(args) -> int:
    cfg = _config(args)
    with _threads(args.deterministic):
        out, log = train(cfg, args.out)
    for rec in log:
        print(format_record(rec))
    print(f"checkpoint={out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dataset = None
    if args.config or any(k.startswith("cfg_") and v is not None for k, v in vars(args).items()) or args.group:
        _, dataset = load_datasets(_config(args))
    with _threads(args.deterministic):
        res = evaluate(args.checkpoint, dataset)
    print(format_record(res))
    return EXIT_OK


def cmd_check(args) -> int:
    cfg = _config(args)
    report = check_equivariance(cfg, batch=args.batch, seed=cfg["seed"])
    for name, kind, err in report.layers:
        flag = "FAIL" if err >= args.tol else "ok"
        print(f"layer={name} kind={kind} max_rel_err={err:.3e} status={flag}")
    print(f"end_to_end features_rel_err={report.features:.3e} logits_rel_err={report.logits:.3e} "
          f"elements={len(report.elements)}")
    ok = report.passed(args.tol)
    print("status=" + ("pass" if ok else "fail"))
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_accountant(args) -> int:
    from .privacy.accountant import AccountantState, account_steps, calibrate_sigma, order_table, to_epsilon

    if args.q is None:
        if args.batch is None or args.n is None:
            raise ConfigError("give --q or both --batch and --n")
        q = args.batch / args.n
    else:
        q = args.q
    if (args.sigma is None) == (args.target_epsilon is None):
        raise ConfigError("give exactly one of --sigma and --target-epsilon")
    try:
        sigma = args.sigma if args.sigma is not None else calibrate_sigma(
            args.target_epsilon, args.delta, q, args.steps, conversion=args.conversion)
        state = account_steps(AccountantState(q, sigma), args.steps)
        eps, alpha = to_epsilon(state, args.delta, args.conversion)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    print(f"q={q:.6g} sigma={sigma:.6g} steps={args.steps} delta={args.delta:g} conversion={args.conversion} "
          f"epsilon={eps:.6f} best_alpha={alpha:g}")
    if args.table:
        for a, rho, e in order_table(state, args.delta, args.conversion):
            print(f"alpha={a:g} rho={rho:.6g} epsilon={e:.6g}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    from .model import build_eq_resnet9, count_parameters

    cfg = _config(args)
    groups = args.groups.split(",") if args.groups else [cfg.group.name]
    for g in groups:
        m = build_eq_resnet9(g.strip(), cfg["reference_widths"], cfg["num_classes"],
                             restrict_last_block=cfg["restrict_last_block"])
        print(f"group={m.group.name} widths={','.join(map(str, cfg['reference_widths']))} "
              f"parameters={count_parameters(m)}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    from .data import synthetic_oriented_dataset

    if args.n < 1 or args.size % 8:
        raise ConfigError("need n >= 1 and an image size divisible by 8")
    ds = synthetic_oriented_dataset(args.n, args.num_classes, args.size, seed=args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    ds.save(args.out)
    print(f"wrote={args.out} n={args.n} classes={args.num_classes} size={args.size} seed={args.seed}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _ArgumentParser(prog="eqdp", description="Equivariant networks trained with DP-SGD")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    t = sub.add_parser("train", help="train and write a checkpoint")
    _add_config_flags(t)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on its test split")
    _add_config_flags(e)
    e.add_argument("checkpoint")
    e.add_argument("--deterministic", action="store_true")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("check-equivariance", help="per-layer equivariance audit")
    _add_config_flags(c)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--batch", type=int, default=2)
    c.set_defaults(func=cmd_check)

    a = sub.add_parser("accountant", help="RDP accounting for the subsampled Gaussian")
    a.add_argument("--q", type=float)
    a.add_argument("--batch", type=int)
    a.add_argument("--n", type=int)
    a.add_argument("--sigma", type=float)
    a.add_argument("--target-epsilon", type=float)
    a.add_argument("--steps", type=int, required=True)
    a.add_argument("--delta", type=float, default=1e-5)
    a.add_argument("--conversion", choices=("improved", "classic"), default="improved")
    a.add_argument("--table", action="store_true", help="print the per-order table")
    a.set_defaults(func=cmd_accountant)

    pc = sub.add_parser("param-count", help="parameter count of the configured model")
    _add_config_flags(pc)
    pc.add_argument("--groups", help="comma-separated group list, e.g. C4,C8,D4")
    pc.set_defaults(func=cmd_param_count)

    g = sub.add_parser("gen-synthetic", help="write a synthetic oriented-shape dataset (.npz)")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=5000)
    g.add_argument("--num-classes", type=int, default=8)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_synthetic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
