#!/usr/bin/env python3

r"""Settle a simulated day and write plot-ready series.

Combine a DA schedule, an RT trace, the price model and cleared DA
prices into the cost ledger of the day.

Final output is:
    <out_dir>/ledger.json
    <out_dir>/plots/aggregate.csv
    <out_dir>/plots/prices.csv

Examples
--------
report \
    -s sim/da/da_schedule.csv \
    -t sim/rt/rt_trace.csv \
    -p sim/inputs/pool \
    -m sim/inputs/price_model \
    --da-prices sim/inputs/da_prices.csv \
    -o sim/report
"""

# %%
import os
import sys
import json
import logging
import textwrap
from argparse import ArgumentParser, RawTextHelpFormatter
from ..resources.market.prices import read_price_csv, read_price_model
from ..resources.market.timegrid import TimeGrid
from ..resources.optimize.day_ahead import read_da_schedule
from ..resources.optimize.real_time import REGIMES, ImbalanceRegime
from ..resources.prosumer.pool import read_pool_bundle
from ..resources.reports.ledger import (
    build_ledger,
    read_trace,
    write_ledger_json,
    write_plot_series,
)


# %%
def get_args():
    """Get and parse arguments."""
    parser = ArgumentParser(description=__doc__, formatter_class=RawTextHelpFormatter)
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
    parser.add_argument("--delta-plus", type=float, default=0.0, help="$/MWh")
    parser.add_argument("--delta-minus", type=float, default=0.0, help="$/MWh")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress")

    required_args = parser.add_argument_group("Required Arguments")
    required_args.add_argument(
        "-s", "--schedule", required=True, help="Path to da_schedule.csv"
    )
    required_args.add_argument("-t", "--trace", required=True, help="Path to rt_trace.csv")
    required_args.add_argument(
        "-p", "--pool-dir", required=True, help="Path to pool CSV bundle"
    )
    required_args.add_argument(
        "-m", "--price-model", required=True, help="Path to price model directory"
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
    """Build and write the cost ledger."""
    args = get_args().parse_args()
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )

    pool = read_pool_bundle(args.pool_dir)
    price_model = read_price_model(args.price_model)
    grid = TimeGrid(
        hours=len(price_model.p_da_hat),
        horizon_hours=price_model.c_rt_template.shape[0] // 4,
    )
    ev_star, g_star = read_da_schedule(args.schedule, pool)
    da_series = read_price_csv(args.da_prices, "hourly")
    p_da = da_series.day_values(da_series.days()[-1])
    trace = read_trace(args.trace)
    regime = ImbalanceRegime(args.delta_plus, args.delta_minus, args.regime)

    ledger = build_ledger(g_star.sum(axis=0), price_model.p_da_hat, p_da, trace, regime)

    if not os.path.exists(args.out_dir):
        os.makedirs(args.out_dir)
    write_ledger_json(ledger, os.path.join(args.out_dir, "ledger.json"))
    write_plot_series(
        grid,
        g_star.sum(axis=0),
        ev_star.sum(axis=0),
        trace,
        os.path.join(args.out_dir, "plots"),
    )
    print(json.dumps(ledger.as_dict(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
