"""Run the microactuator experiment and print a short summary.

    python3 scripts/run_experiment.py [config.json] [--out DIR] [--until STAGE]
"""

import argparse
import logging
from pathlib import Path

from gpc_phs.experiment import STAGES, ExperimentConfig, run_pipeline

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config", nargs="?", type=Path, default=ROOT / "configs" / "microactuator.json")
    p.add_argument("--out", type=Path, default=ROOT / "runs" / "microactuator")
    p.add_argument("--until", choices=STAGES, default="pipeline")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    report = run_pipeline(ExperimentConfig.load(args.config), args.out, until=args.until)
    if "b_hat" in report:
        print(f"b_hat = {report['b_hat']:.4f}")
    if "open_loop" in report:
        print("open-loop RMSE per state:", ", ".join(f"{r:.4f}" for r in report["open_loop"]["rmse"]))
    if "design" in report:
        print(f"x_d = {report['design']['x_d']}, c = {report['design']['c']:.4f}")
    if "certificate" in report:
        c = report["certificate"]
        print(f"certificate passed={c['passed']} residual={c['max_matching_residual']:.2e} margin={c['min_robustness_margin']:.3g}")
    if "closed_loop" in report:
        cl = report["closed_loop"]
        print(f"x(13) = {cl['terminal_state']}, |grad Hd| = {cl['terminal_grad_Hd_norm']:.4f}")
    if "sweep" in report:
        for N, mse in report["sweep"]["time_averaged_mse"].items():
            print(f"N={N:>4}: time-averaged MSE {mse:.4g}")
    print(f"artifacts in {args.out}")


if __name__ == "__main__":
    main()
