import argparse
import asyncio
import logging
import sys
import traceback
from typing import List, Optional

from heralded_diqkd.core.commands import (
    EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, CommandError, cmd_certify, cmd_reproduce, cmd_simulate,
)
from heralded_diqkd.utils.config import LEVELS, TARGETS, ConfigError, load_run_config, parse_tol_overrides

LOG_FORMAT = '[%(levelname)s] %(name)s: %(message)s'

logger = logging.getLogger('heralded_diqkd')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run configuration file')
    common.add_argument('--seed', type=int, help='Seed of the optimizer starts')
    common.add_argument('--workers', type=int, help='Number of parallel jobs')
    common.add_argument('--out', dest='out_dir', help='Output directory (nothing is written outside it)')
    common.add_argument('--level', choices=LEVELS, help='Moment-matrix hierarchy level')
    common.add_argument('--tol', action='append', metavar='KEY=VALUE',
                        help='Solver tolerance override, e.g. --tol gap=1e-9 (repeatable)')
    common.add_argument('--verbose', '-v', action='store_true', help='Log at DEBUG level')

    parser = argparse.ArgumentParser(
        prog='heralded_diqkd',
        description='Simulation and certification of heralded DIQKD schemes. '
                    'Environment overrides use the prefix DIQKD_ (DIQKD_WORKERS, DIQKD_SEED, '
                    'DIQKD_LEVEL, DIQKD_OUT, DIQKD_TOL_GAP, DIQKD_TOL_FEAS).')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('simulate', parents=[common], help='Simulate a scheme and write its behavior')
    certify = sub.add_parser('certify', parents=[common], help='Certify a behavior file')
    certify.add_argument('behavior', help='Behavior JSON file')
    certify.add_argument('--x-star', type=int, default=0, help="Alice's key setting")
    reproduce = sub.add_parser('reproduce', parents=[common], help='Recompute published results')
    reproduce.add_argument('targets', nargs='*', metavar='TARGET',
                           help=f"Targets to reproduce, among {', '.join(TARGETS)} "
                                '(default: those of the configuration)')
    return parser


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT,
                        stream=sys.stderr, force=True)


async def _dispatch(args: argparse.Namespace, config) -> int:
    if args.command == 'simulate':
        await cmd_simulate(config)
    elif args.command == 'certify':
        await cmd_certify(config, args.behavior, args.x_star)
    else:
        await cmd_reproduce(config, args.targets or None)
    return EXIT_OK


def run_cli(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for the heralded_diqkd command line.

    Returns:
        The exit code: 0 success, 1 acceptance failure, 2 configuration error,
        3 numerical failure.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    try:
        overrides = {
            'command': args.command,
            'seed': args.seed,
            'workers': args.workers,
            'out_dir': args.out_dir,
            'level': args.level,
        }
        tol = parse_tol_overrides(args.tol)
        if tol:
            overrides['tolerances'] = tol
        config = load_run_config(args.config, overrides=overrides)
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    logger.debug("Run configuration: %s", config.to_dict())

    logger.debug("Initializing asyncio event loop...")
    loop = asyncio.new_event_loop()
    asyncio.set_event_loop(loop)
    try:
        return loop.run_until_complete(_dispatch(args, config))
    except CommandError as e:
        logger.error("%s", e)
        return e.return_code if e.return_code is not None else EXIT_NUMERICAL
    except Exception as e:
        logger.error("An unhandled error occurred: %s", e)
        traceback.print_exc()
        return EXIT_NUMERICAL
    finally:
        logger.debug("Cleaning up asyncio event loop...")
        if not loop.is_closed():
            tasks = asyncio.all_tasks(loop=loop)
            for task in tasks:
                task.cancel()
            if tasks:
                loop.run_until_complete(asyncio.gather(*tasks, return_exceptions=True))
            loop.close()
        asyncio.set_event_loop(None)


if __name__ == '__main__':
    sys.exit(run_cli())
