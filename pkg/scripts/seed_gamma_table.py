"""Write the analytic-model Gamma table so empirical mode runs without a hyperbolic estimate."""

import argparse
import os
import sys

# Add the parent directory to the path so we can import from app
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from app.lab.coeffs import DEFAULT_TAU_GRID, CoefficientModel, tabulate_gamma, write_gamma_table


def seed_gamma_table(path: str, A: float = 1.0, points: int = DEFAULT_TAU_GRID[2]):
    """Tabulate ``A / (1 + tau**3)`` on the default log grid."""
    model = CoefficientModel.analytic(A)
    taus, gammas = tabulate_gamma(model, DEFAULT_TAU_GRID[0], DEFAULT_TAU_GRID[1], points)
    write_gamma_table(path, taus, gammas, header=[f"analytic model A={A:g}"])
    print(f"Wrote {len(taus)} rows to {path}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("path", nargs="?", default="configs/gamma_model.csv")
    parser.add_argument("--A", type=float, default=1.0)
    parser.add_argument("--points", type=int, default=DEFAULT_TAU_GRID[2])
    args = parser.parse_args()
    seed_gamma_table(args.path, args.A, args.points)
