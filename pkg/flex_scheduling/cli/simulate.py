#!/usr/bin/env python3

r"""Run a full seeded single-day experiment.

Synthesizes the pool and price history, builds the price model,
solves the DA schedule, operates the day with MPC, and settles costs.
Parameters come from an INI file with an [experiment] section, then
from command line overrides.

Final output is:
    <out_dir>/{da_schedule,rt_trace,rt_prosumer_trace}.csv
    <out_dir>/{ledger,meta}.json
    <out_dir>/plots/*.csv
    <out_dir>/inputs/...

Examples
--------
simulate -o sim

simulate \
    -c flex_scheduling/examples/sim_config.ini \
    -o sim_uk \
    --regime uk \
    --delta-plus 10 \
    --delta-minus 10

simulate -o sim_sweep --sweep lambda_da=0,0.5,1,2
"""

# %%
import sys
import json
import logging
import textwrap
from argparse import ArgumentParser, RawTextHelpFormatter
from ..resources.optimize.real_time import REGIMES
from ..workflow import control_sim


# %%
def get_args():
    """Get and parse arguments."""
    parser = ArgumentParser(description=__doc__, formatter_class=RawTextHelpFormatter)
    parser.add_argument(
        "-c",
        "--config",
        type=str,
        default=None,
        help=textwrap.dedent(
            """\
            INI file with an [experiment] section
            (default : built-in reference parameters)
            """
        ),
    )
    parser.add_argument("--n-prosumers", type=int, default=None)
    parser.add_argument("--horizon-hours", type=int, default=None)
    parser.add_argument("--lambda-da", type=float, default=None)
    parser.add_argument("--lambda-rt", type=float, default=None)
    parser.add_argument("--regime", type=str, default=None, choices=REGIMES)
    parser.add_argument("--delta-plus", type=float, default=None, help="$/MWh")
    parser.add_argument("--delta-minus", type=float, default=None, help="$/MWh")
    parser.add_argument("--seed", type=int, default=None, help="RT realization seed")
    parser.add_argument("--pool-seed", type=int, default=None)
    parser.add_argument("--price-seed", type=int, default=None)
    parser.add_argument("--rt-noise", type=float, default=None)
    parser.add_argument(
        "--sweep",
        type=str,
        default=None,
        help=textwrap.dedent(
            """\
            repeat the experiment over values of one field,
            e.g. lambda_da=0,0.5,1
            """
        ),
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log progress")

    required_args = parser.add_argument_group("Required Arguments")
    required_args.add_argument("-o", "--out-dir", required=True, help="Output directory")

    if len(sys.argv) == 1:
        parser.print_help(sys.stderr)
        sys.exit(1)

    return parser


# %%
def main():
    """Run the experiment workflow."""
    args = get_args().parse_args()
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    overrides = {
        "n_prosumers": args.n_prosumers,
        "horizon_hours": args.horizon_hours,
        "lambda_da": args.lambda_da,
        "lambda_rt": args.lambda_rt,
        "regime": args.regime,
        "delta_plus": args.delta_plus,
        "delta_minus": args.delta_minus,
        "seed": args.seed,
        "pool_seed": args.pool_seed,
        "price_seed": args.price_seed,
        "rt_noise": args.rt_noise,
    }
    config = control_sim.load_config(args.config, overrides)

    if args.sweep:
        field_name, _, raw_values = args.sweep.partition("=")
        kind = type(getattr(config, field_name))
        values = [kind(value) for value in raw_values.split(",") if value]
        ledgers = control_sim.sweep(config, field_name, values, args.out_dir)
        report = {str(value): ledger.as_dict() for value, ledger in ledgers.items()}
    else:
        sim_data = control_sim.simulate(config, args.out_dir)
        report = sim_data["ledger"].as_dict()
    print(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
