#!/usr/bin/env python3

r"""Solve the day-ahead schedule of a prosumer pool.

Read a pool CSV bundle and a price model directory, solve the
mean-variance DA problem, and write the per-prosumer hourly schedule.

Final output is:
    <out_dir>/da_schedule.csv
    <out_dir>/da_summary.json

Examples
--------
schedule-da \
    -p sim/inputs/pool \
    -m sim/inputs/price_model \
    -o sim/da

schedule-da \
    -p sim/inputs/pool \
    -m sim/inputs/price_model \
    -o sim/da_risky \
    --lambda-da 0.1 \
    --tol 1e-7
"""

# %%
import sys
import json
import logging
import textwrap
from argparse import ArgumentParser, RawTextHelpFormatter
from ..resources.optimize.qp import QpSettings
from ..workflow import control_da


# %%
def get_args():
    """Get and parse arguments."""
    parser = ArgumentParser(description=__doc__, formatter_class=RawTextHelpFormatter)
    parser.add_argument(
        "--lambda-da",
        type=float,
        default=1.0,
        help=textwrap.dedent(
            """\
            DA risk aversion, >= 0
            (default : %(default)s)
            """
        ),
    )
    parser.add_argument(
        "--tol",
        type=float,
        default=1e-8,
        help=textwrap.dedent(
            """\
            absolute solver tolerance
            (default : %(default)s)
            """
        ),
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="Log solver progress",
    )

    required_args = parser.add_argument_group("Required Arguments")
    required_args.add_argument(
        "-p",
        "--pool-dir",
        required=True,
        help="Path to pool CSV bundle (prosumers.csv, profiles_da.csv, ...)",
    )
    required_args.add_argument(
        "-m",
        "--price-model",
        required=True,
        help="Path to price model directory (forecasts, covariances)",
    )
    required_args.add_argument(
        "-o",
        "--out-dir",
        required=True,
        help="Output directory",
    )

    if len(sys.argv) == 1:
        parser.print_help(sys.stderr)
        sys.exit(1)

    return parser


# %%
def main():
    """Run the DA workflow."""
    args = get_args().parse_args()
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    if args.lambda_da < 0:
        raise ValueError(f"ERROR: --lambda-da must be >= 0, got {args.lambda_da}")

    da_data = control_da.schedule_from_files(
        args.pool_dir,
        args.price_model,
        args.out_dir,
        args.lambda_da,
        QpSettings(eps_abs=args.tol),
    )
    print(json.dumps(da_data["solution"].summary(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
