"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, gradcheck, report.
Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 verification
failure. ANET_THREADS caps ablate worker processes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_args(p):
    p.add_argument("--config", help="config file (section.key = value lines)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override one config key")


def build_parser() -> _Parser:
    parser = _Parser(prog="anet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ids", type=int, help="total identity count")
    p.add_argument("--per-id", type=int, help="images per identity")
    p.add_argument("--image-size", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset dir from gen-data (default: in-memory synthesis)")
    p.add_argument("--variant", choices=("baseline", "van", "anet", "anet_no_ac", "anet_att"))
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--selector", choices=("f", "j", "fa"))
    p.add_argument("--protocol", choices=("fixed", "vehicleid"))
    p.add_argument("--repeats", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="report JSON path (default stdout)")
    p.add_argument("--export-maps", metavar="DIR",
                   help="also export fused/distilled activation maps here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the variant matrix")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset dir (default: in-memory synthesis)")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--variants", nargs="+",
                   default=["baseline", "van", "anet_no_ac", "anet"])
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--scope", choices=("primitive", "composed", "all"), default="all")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="render figures and CSVs for a run dir")
    p.add_argument("--run", required=True)
    p.add_argument("--out", help="output dir (default: <run>/report)")
    p.set_defaults(fn=cmd_report)
    return parser


def _load_cfg(args):
    from .config import load_config
    cfg = load_config(getattr(args, "config", None), getattr(args, "overrides", ()))
    if getattr(args, "variant", None):
        cfg.model.variant = args.variant
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.eval.seed = args.seed
    if getattr(args, "protocol", None):
        cfg.eval.protocol = args.protocol
    if getattr(args, "repeats", None) is not None:
        cfg.eval.repeats = args.repeats
    return cfg


def cmd_gen_data(args) -> int:
    from .runner import write_dataset
    cfg = _load_cfg(args)
    if args.seed is not None:
        cfg.data.seed = args.seed
    if args.ids is not None:
        cfg.data.id_count = args.ids
        cfg.data.train_id_count = max(1, args.ids - max(1, args.ids // 5))
    if args.per_id is not None:
        cfg.data.images_per_id = args.per_id
    if args.image_size is not None:
        cfg.data.image_size = args.image_size
    try:
        counts = write_dataset(cfg, args.out, force=args.force)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {counts} to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .runner import load_datasets, make_datasets, run_training
    cfg = _load_cfg(args)
    if args.data:
        train_ds, _, _ = load_datasets(args.data)
    else:
        train_ds, _, _ = make_datasets(cfg)
    result = run_training(cfg, train_ds, out_dir=args.out, log_every=args.log_every)
    sys.stdout.write(cfg.to_text())
    last = result.history[-1]
    print(f"finished: {len(result.history)} steps, final total {last['total']:.4f}")
    print(f"checkpoints: {json.dumps(result.checkpoints)}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .config import load_config
    from .evaluate import export_activation_maps, save_report
    from .model import build_model
    from .runner import load_datasets, run_eval

    config_path = args.config or os.path.join(os.path.dirname(args.checkpoint),
                                              "config.resolved.txt")
    if not os.path.exists(config_path):
        raise UsageError(f"no config found at {config_path}; pass --config")
    cfg = load_config(config_path, args.overrides)
    if args.protocol:
        cfg.eval.protocol = args.protocol
    if args.repeats is not None:
        cfg.eval.repeats = args.repeats
    if args.seed is not None:
        cfg.eval.seed = args.seed
    selector = args.selector or cfg.resolved_selector()

    model = build_model(cfg.model, seed=cfg.train.seed)
    from .evaluate import check_selector
    try:
        check_selector(selector, model)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    load_checkpoint(args.checkpoint, model, expected_digest=cfg.digest())
    _, query_ds, gallery_ds = load_datasets(args.data)
    report = run_eval(cfg, model, query_ds, gallery_ds, selector=selector)
    if args.out:
        save_report(report, args.out)
        print(f"wrote {args.out}")
    else:
        json.dump(report.to_dict(), sys.stdout, indent=2)
        print()
    if args.export_maps:
        images = [s.image for s in query_ds.samples[:8]]
        import numpy as np
        paths = export_activation_maps(model, np.stack(images), args.export_maps)
        print(f"exported {len(paths)} activation maps to {args.export_maps}")
    return 0


def cmd_ablate(args) -> int:
    from .runner import format_ablation, run_ablation
    cfg = _load_cfg(args)
    workers = int(os.environ.get("ANET_THREADS", "1"))
    table = run_ablation(cfg, args.data, args.out, seeds=args.seeds,
                         variants=args.variants, workers=workers)
    sys.stdout.write(format_ablation(table))
    return 0 if not table["failures"] else 2


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_suite
    results = run_suite(args.scope)
    print(format_results(results))
    return 0 if all(r.ok for r in results) else 3


def cmd_report(args) -> int:
    from .report import render_run
    out = args.out or os.path.join(args.run, "report")
    produced = render_run(args.run, out)
    if not produced:
        raise UsageError(f"nothing renderable found in {args.run}")
    for path in produced:
        print(path)
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
