"""Command line: finite-calderon {forward,synthesize,reconstruct,validate,sweep}."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import CalderonError
from . import experiments as ex

log = logging.getLogger("finite_calderon")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="finite-calderon",
                                description="Reconstruct a potential from finitely many boundary measurements.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [("forward", "assemble and save the DN maps of q0, q-bar and zero"),
                       ("synthesize", "add seeded noise and build the Neumann-series data"),
                       ("reconstruct", "run the fixed-point iteration and write the run report"),
                       ("validate", "run the module diagnostics on a small grid"),
                       ("sweep", "error versus eta and versus eps, with the linear fit")]:
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", type=Path, default=None, help="flat key = value config file")
        sp.add_argument("--seed", type=int, default=None, help="noise seed (overrides the config)")
        sp.add_argument("--out", type=Path, default=None, help="output directory (overrides the config)")
        sp.add_argument("--audit", action="store_true", help="recompute report numbers from stored artifacts")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _print(rep) -> None:
    for line in rep.lines():
        print(line)


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=str(args.out) if args.out else None)
        out = Path(cfg.out)
        if args.command == "validate":
            rep = ex.validate(cfg, out)
            _print(rep)
            return EXIT_OK if rep.passed else EXIT_FAIL
        if args.command == "sweep":
            rep = ex.sweep(cfg, out)
            _print(rep)
            return EXIT_OK if rep.passed else EXIT_FAIL
        sc = ex.build_scenario(cfg)
        if args.command == "forward":
            rep = ex.stage_forward(sc, out)
            rep.write(out, "forward_report.json")
        elif args.command == "synthesize":
            rep = ex.stage_synthesize(sc, out)
            rep.write(out, "synthesize_report.json")
        else:
            floor = ex.discretization_floor(cfg, out)["floor"]
            rep, _ = ex.stage_reconstruct(sc, out, floor=floor)
            if args.audit:
                arep = ex.audit(sc, out)
                _print(arep)
                rep.checks["audit"] = arep.passed
                rep.write(out)
        _print(rep)
        return EXIT_OK if rep.passed else EXIT_FAIL
    except CalderonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
