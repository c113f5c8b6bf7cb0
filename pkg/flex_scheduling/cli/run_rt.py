#!/usr/bin/env python3

r"""Operate a day in real time around a fixed DA schedule.

Every hour the deviation problem is solved over the lookahead window
and only the first hour's four quarter-hours are implemented.

Final output is:
    <out_dir>/rt_trace.csv
    <out_dir>/rt_prosumer_trace.csv
    <out_dir>/ledger.json

Examples
--------
run-rt \
    -s sim/da/da_schedule.csv \
    -p sim/inputs/pool \
    -m sim/inputs/price_model \
    --rt-prices sim/inputs/rt_prices.csv \
    --da-prices sim/inputs/da_prices.csv \
    -o sim/rt

run-rt \
    -s sim/da/da_schedule.csv \
    -p sim/inputs/pool \
    -m sim/inputs/price_model \
    --rt-prices sim/inputs/rt_prices.csv \
    --da-prices sim/inputs/da_prices.csv \
    -o sim/rt_germany \
    --regime germany \
    --delta-plus 5 \
    --delta-minus 20
"""

# %%
import sys
import json
import logging
import textwrap
from argparse import ArgumentParser, RawTextHelpFormatter
from ..resources.optimize.qp import QpSettings
from ..resources.optimize.real_time import REGIMES, ImbalanceRegime
from ..workflow import control_mpc


# %%
def get_args():
    """Get and parse arguments."""
    parser = ArgumentParser(description=__doc__, formatter_class=RawTextHelpFormatter)
    parser.add_argument(
        "--lambda-rt",
        type=float,
        default=1.0,
        help=textwrap.dedent(
            """\
            RT risk aversion, >= 0
            (default : %(default)s)
            """
        ),
    )
    parser.add_argument(
        "--horizon-hours",
        type=int,
        default=None,
        help=textwrap.dedent(
            """\
            MPC lookahead in hours, at most the horizon the price
            model was built for (default : that horizon)
            """
        ),
    )
    parser.add_argument(
        "--regime",
        type=str,
        default="caiso",
        choices=REGIMES,
        help=textwrap.dedent(
            """\
            imbalance settlement regime
            (default : %(default)s)
            """
        ),
    )
    parser.add_argument(
        "--delta-plus",
        type=float,
        default=0.0,
        help=textwrap.dedent(
            """\
            imbalance price when the deviation helps the system, $/MWh
            (default : %(default)s)
            """
        ),
    )
    parser.add_argument(
        "--delta-minus",
        type=float,
        default=0.0,
        help=textwrap.dedent(
            """\
            imbalance price when the deviation hurts the system, $/MWh
            (default : %(default)s)
            """
        ),
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=None,
        help=textwrap.dedent(
            """\
            redraw RT load and PV realizations with this seed,
            requires --rt-noise
            """
        ),
    )
    parser.add_argument(
        "--rt-noise",
        type=float,
        default=None,
        help="relative std of RT load and PV realizations",
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
        help="Log per-hour progress",
    )

    required_args = parser.add_argument_group("Required Arguments")
    required_args.add_argument(
        "-s", "--schedule", required=True, help="Path to da_schedule.csv"
    )
    required_args.add_argument(
        "-p", "--pool-dir", required=True, help="Path to pool CSV bundle"
    )
    required_args.add_argument(
        "-m", "--price-model", required=True, help="Path to price model directory"
    )
    required_args.add_argument(
        "--rt-prices", required=True, help="Realized RT prices CSV, timestamp,price"
    )
    required_args.add_argument(
        "--da-prices", required=True, help="Cleared DA prices CSV, timestamp,price"
    )
    required_args.add_argument("-o", "--out-dir", required=True, help="Output directory")

    if len(sys.argv) == 1:
        parser.print_help(sys.stderr)
        sys.exit(1)

    return parser


# %%
def main():
    """Run the MPC workflow."""
    args = get_args().parse_args()
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    if args.lambda_rt < 0:
        raise ValueError(f"ERROR: --lambda-rt must be >= 0, got {args.lambda_rt}")
    if (args.seed is None) != (args.rt_noise is None):
        raise ValueError("ERROR: --seed and --rt-noise go together")

    regime = ImbalanceRegime(args.delta_plus, args.delta_minus, args.regime)
    rt_data = control_mpc.operate_from_files(
        args.schedule,
        args.pool_dir,
        args.rt_prices,
        args.da_prices,
        args.price_model,
        args.out_dir,
        args.lambda_rt,
        args.horizon_hours,
        regime,
        settings=QpSettings(eps_abs=args.tol),
        seed=args.seed,
        rt_noise=args.rt_noise,
    )
    print(json.dumps(rt_data["ledger"].as_dict(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
