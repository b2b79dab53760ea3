# heralded_diqkd/core/commands.py
import asyncio
import json
import logging
import os
from typing import Any, Callable, Dict, List, Sequence

from heralded_diqkd.core import certify, keyrate, reproduce, schemes
from heralded_diqkd.core.behavior import Behavior, chsh
from heralded_diqkd.core.conic import SolverError
from heralded_diqkd.core.photonics import PhotonicsError
from heralded_diqkd.utils.checks import CheckError
from heralded_diqkd.utils.config import ConfigError, RunConfig
from heralded_diqkd.utils.executor import get_recent_job_logs
from heralded_diqkd.utils.export import write_csv, write_json, write_plot_script

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ACCEPTANCE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class CommandError(Exception):
    """Custom exception for errors originating from command execution."""
    def __init__(self, message: str, return_code: int = None, details: Dict[str, Any] = None):
        super().__init__(message)
        self.return_code = return_code
        self.details = details or {}


async def _run(fn: Callable, *args, what: str = 'command') -> Any:
    """
    Runs a blocking pipeline step in a worker thread and maps domain failures onto
    CommandError with the exit code of the failure class.
    """
    try:
        return await asyncio.to_thread(fn, *args)
    except (ConfigError, CheckError) as e:
        raise CommandError(f"{what}: invalid input: {e}", EXIT_CONFIG) from e
    except (PhotonicsError, SolverError, keyrate.BracketError, ArithmeticError) as e:
        details = {'recent_jobs': get_recent_job_logs()}
        status = getattr(e, 'status', None)
        if status is not None:
            details['status'] = status
        raise CommandError(f"{what}: numerical failure: {e}", EXIT_NUMERICAL, details) from e


def _load_behavior(path: str) -> Behavior:
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            return Behavior.from_dict(json.load(handle))
    except OSError as e:
        raise CommandError(f"Cannot read behavior file '{path}': {e}", EXIT_CONFIG) from e
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CommandError(f"Malformed behavior file '{path}': {e}", EXIT_CONFIG) from e


async def cmd_simulate(config: RunConfig) -> Dict[str, Any]:
    """
    Simulates the configured scheme and writes the heralded behavior and a summary.

    Writes:
        behavior.json, behavior.csv and simulate_summary.json inside config.out_dir.

    Returns:
        The summary dictionary: heralding probability, leading-order coefficient from
        the simulation and from the closed form, fidelity to the target state and the
        truncation bound epsilon.

    Raises:
        CommandError: With exit code 2 for invalid parameters, 3 for numerical failures.
    """
    scheme = config.scheme
    result = await _run(schemes.simulate, scheme, what='simulate')
    epsilon = await _run(certify.epsilon_upper, scheme, None, config.epsilon_box, what='simulate')
    expected_coeff, _ = schemes.leading_order_state(scheme)
    summary = {
        'scheme': scheme.scheme,
        'p_herald': result.p_herald,
        'leading_coeff': result.leading_coeff,
        'leading_coeff_closed_form': expected_coeff,
        'fidelity': result.fidelity,
        'epsilon_upper': epsilon,
        'no_signaling_violation': result.behavior.no_signaling_violation(),
        'config': scheme.to_dict(),
    }
    if result.behavior.scenario.ma >= 2 and result.behavior.scenario.mb >= 2:
        summary['chsh_binned'] = chsh(result.behavior)
    await _run(write_json, 'behavior.json', result.behavior.to_dict(), config.out_dir, what='simulate')
    await _run(write_csv, 'behavior.csv', ('x', 'y', 'a', 'b', 'p'), result.behavior.csv_rows(),
               config.out_dir, what='simulate')
    await _run(write_json, 'simulate_summary.json', summary, config.out_dir, what='simulate')
    logger.info("%s: p_herald=%.6e, fidelity=%.6f", scheme.scheme, result.p_herald, result.fidelity)
    return summary


def _certify(behavior: Behavior, config: RunConfig, x_star: int) -> Dict[str, Any]:
    membership = certify.local_membership(behavior, config.tolerances)
    guessing = certify.guessing_probability(behavior, x_star, config.level, config.tolerances)
    certificate = {
        'is_local': membership.is_local,
        'w_star': membership.distance,
        'G': guessing.value,
        'G_dual_bound': guessing.dual_bound,
        'level': config.level,
        'x_star': x_star,
        'bell_functional': guessing.bell_functional.to_dict(),
        'solver': {
            'status': guessing.solution.status,
            'gap': guessing.solution.gap,
            'primal_residual': guessing.solution.primal_residual,
            'dual_residual': guessing.solution.dual_residual,
            'iterations': guessing.solution.iterations,
        },
    }
    if behavior.scenario.oa == 2 and behavior.scenario.ob == 2 and behavior.scenario.ma >= 2 \
            and behavior.scenario.mb >= 2:
        certificate['chsh'] = chsh(behavior)
    return certificate


async def cmd_certify(config: RunConfig, behavior_path: str, x_star: int = 0) -> Dict[str, Any]:
    """
    Certifies a behavior file: locality verdict, white-noise robustness, guessing
    probability with its dual Bell functional. Writes certificate.json.

    Raises:
        CommandError: With exit code 2 for unreadable input, 3 on solver failure.
    """
    behavior = _load_behavior(behavior_path)
    certificate = await _run(_certify, behavior, config, x_star, what='certify')
    certificate['behavior_file'] = os.path.basename(behavior_path)
    await _run(write_json, 'certificate.json', certificate, config.out_dir, what='certify')
    logger.info("certify: local=%s, w*=%.6f, G=%.6f", certificate['is_local'], certificate['w_star'],
                certificate['G'])
    return certificate


def _write_target(output: reproduce.TargetOutput, root: str) -> List[str]:
    written = []
    for name, (header, rows) in output.tables.items():
        written.append(write_csv(name, header, rows, root))
    for plot in output.plots:
        written.append(write_plot_script(plot.script, plot.data_file, plot.x_column, plot.y_columns,
                                         plot.titles, root, plot.xlabel, plot.ylabel, plot.log_y,
                                         title=output.target))
    written.append(write_json(f'reproduce_{output.target}.json', {
        'target': output.target,
        'passed': output.passed,
        'rows': [dict(zip(reproduce.AcceptanceRow.HEADER, row.values())) for row in output.rows],
        'details': output.details,
    }, root))
    return written


async def cmd_reproduce(config: RunConfig, targets: Sequence[str] = None) -> List[reproduce.TargetOutput]:
    """
    Recomputes the requested targets and writes their tables, plot scripts and an
    acceptance table side by side with the published values.

    Raises:
        CommandError: With exit code 1 when any acceptance row fails (after all files
        are written), 2 for invalid input, 3 for numerical failures.
    """
    targets = list(targets or config.targets)
    unknown = [t for t in targets if t not in reproduce.TARGETS]
    if unknown:
        raise CommandError(f"Unknown reproduction targets: {', '.join(unknown)}", EXIT_CONFIG)
    outputs = []
    for target in targets:
        logger.info("Reproducing %s", target)
        output = await _run(reproduce.reproduce, config, target, what=f'reproduce {target}')
        await _run(_write_target, output, config.out_dir, what=f'reproduce {target}')
        outputs.append(output)

    rows = [row.values() for output in outputs for row in output.rows]
    await _run(write_csv, 'acceptance.csv', reproduce.AcceptanceRow.HEADER, rows, config.out_dir,
               what='reproduce')
    failed = [f"{row.target}:{row.quantity}" for output in outputs for row in output.rows if not row.passed]
    if failed:
        raise CommandError(f"{len(failed)} acceptance row(s) failed: {', '.join(failed)}",
                           EXIT_ACCEPTANCE, {'failed': failed})
    return outputs
