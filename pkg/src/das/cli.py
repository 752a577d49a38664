"""Command line entry point: ``das <regime> [--preset NAME] [--config PATH] ...``.

Exit codes: 0 on success, 2 on a validation error, 1 on any other failure.
"""

import argparse
import json
import logging
import sys

import numpy as np

from .harness import PRESETS, ConfigError, compare_policies, parse_config, run_experiment

log = logging.getLogger("das")


def build_parser():
    p = argparse.ArgumentParser(prog="das", description="Data-aided sensing experiments.")
    p.add_argument("regime", choices=["gaussian", "sparse", "distributed"])
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", metavar="PATH", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--out", metavar="PATH", help="CSV output path")
    p.add_argument("--workers", type=int)
    p.add_argument("--emit-plot-data", action="store_true",
                   help="also write per-round median/IQR series next to --out")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args):
    data = {}
    if args.preset:
        data.update(PRESETS[args.preset])
    if args.config:
        with open(args.config) as fh:
            try:
                data.update(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigError("--config", f"not valid JSON ({exc.msg})") from None
    data.setdefault("regime", args.regime)
    if data["regime"] != args.regime:
        raise ConfigError("regime", f"config is for {data['regime']!r}, not {args.regime!r}")
    for name in ("seed", "trials", "out", "workers"):
        v = getattr(args, name)
        if v is not None:
            data[name] = v
    if args.emit_plot_data:
        data["emit_plot_data"] = True
    return parse_config(data)


def summarize(report):
    cfg = report.config
    lines = [f"{cfg.regime}: {cfg.trials} trial(s) in {report.duration_s:.2f}s"]
    for s in report.series.values():
        if s.values.shape[1]:
            lines.append(f"  {s.label:>10}: final median {np.median(s.final):.4g}")
    labels = list(report.series)
    if len(labels) >= 2 and report.series[labels[0]].values.shape[1]:
        a, b = report.series[labels[0]], report.series[labels[-1]]
        c = compare_policies(a, b)
        lines.append(f"  {a.label} <= {b.label} in {100 * c.frac_a_le_b:.0f}% of trials")
    return "\n".join(lines)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        report = run_experiment(cfg)
    except ConfigError as exc:
        print(f"das: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"das: {exc}", file=sys.stderr)
        return 1
    print(summarize(report))
    if cfg.out:
        log.info("wrote %s", cfg.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
