"""Command-line entry point.

Exit codes: 0 success (chains converged), 2 finished but PSRF threshold
exceeded or unavailable, 1 error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .config import RunConfig
from .errors import GSAError
from .pipeline import EXIT_ERROR, EXIT_OK, cmd_analyze, cmd_calibrate, cmd_probe_c, cmd_run, cmd_sample

logger = logging.getLogger("lossgsa")


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, metavar="PATH", help="JSON run configuration")
    p.add_argument("--out", metavar="DIR", help="output directory (fallback: $GSA_OUT, then ./gsa_out)")
    p.add_argument("--seed", type=int, help="base RNG seed")
    p.add_argument("--chains", type=int, help="number of MCMC chains")
    p.add_argument("--samples", type=int, help="chain length N")
    p.add_argument("--nu", type=float, help="regularization share in [0, 1)")
    p.add_argument("--alpha", type=float, help="target probability of a good fit")
    p.add_argument("--c", type=float, help="relative width of the uniform box around theta*")
    p.add_argument("--delta", type=float, help="fix the temperature instead of solving for it")
    p.add_argument("--threads", type=int, help="worker cap for chain sampling (default: all cores)")
    p.add_argument("--psrf-threshold", type=float, dest="psrf_threshold", help="PSRF pass threshold")
    p.add_argument("--no-plots", dest="plots", action="store_false", default=None, help="skip figure rendering")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lossgsa", description="Loss-based global sensitivity analysis")
    sub = parser.add_subparsers(dest="command", required=True)
    probe = sub.add_parser("probe-c", help="emit model outputs for candidate values of c")
    _add_common(probe)
    probe.add_argument("--candidates", type=_float_list, help="comma-separated c values (else config probe.candidates)")
    probe.add_argument("--draws", type=int, help="uniform draws per candidate")
    cal = sub.add_parser("calibrate", help="reference point, threshold M, lambda and temperature")
    _add_common(cal)
    smp = sub.add_parser("sample", help="run the MCMC chains")
    _add_common(smp)
    smp.add_argument("--calibration", metavar="PATH", help="calibration.json (default: <out>/calibration.json)")
    ana = sub.add_parser("analyze", help="sensitivities, robustness, correlations, PSRF")
    _add_common(ana)
    ana.add_argument("--calibration", metavar="PATH")
    ana.add_argument("--chains-dir", metavar="DIR", help="directory with chain files (default: <out>/chains)")
    run = sub.add_parser("run", help="calibrate, sample and analyze")
    _add_common(run)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = RunConfig.load(args.config).apply_overrides(
            out=args.out, seed=args.seed, chains=args.chains, samples=args.samples, nu=args.nu,
            alpha=args.alpha, c=args.c, delta=args.delta, threads=args.threads,
            psrf_threshold=args.psrf_threshold, plots=args.plots,
        )
        if args.command == "probe-c":
            candidates = args.candidates if args.candidates is not None else config.probe.get("candidates", [])
            if args.draws is not None:
                config.probe["draws"] = args.draws
            files = cmd_probe_c(config, candidates)
            print(f"wrote {len(files)} files under {config.out_dir() / 'probe_c'}")
            return EXIT_OK
        if args.command == "calibrate":
            result, path = cmd_calibrate(config)
            print(f"delta={result.delta:.6g} lambda={result.lam:.6g} M={result.M:.6g} -> {path}")
            return EXIT_OK
        if args.command == "sample":
            chains, files = cmd_sample(config, args.calibration)
            print(f"{chains.n_chains} chains x {chains.chain_length} steps; acceptance "
                  f"{', '.join(f'{a:.3f}' for a in chains.acceptance_rate)}")
            return EXIT_OK
        if args.command == "analyze":
            result, code, _ = cmd_analyze(config, args.chains_dir, args.calibration)
        else:
            code, _ = cmd_run(config)
            return code
    except GSAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    rep = result.report
    ranking = sorted(zip(rep.param_names, rep.S_normalized), key=lambda kv: -kv[1])
    print("normalized sensitivities: " + ", ".join(f"{n}={v:.4f}" for n, v in ranking))
    return code


if __name__ == "__main__":
    sys.exit(main())
