import functools
import logging
from pathlib import Path

import click
from dotenv import load_dotenv

from .config import Scenario, parse_config
from .errors import FtrlError
from .experiment import compare_scenarios, evaluate_checkpoint, run_experiment, run_pretrain
from .federation import ClockMode, FederationConfig
from .protocol import write_checkpoint
from .service import run_server
from .verify import CHECKS, run_checks

logger = logging.getLogger("ftrl_steering")


def reports_errors(f):
    """Turn library errors into a one-line message and exit status 1."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except FtrlError as e:
            logger.debug("command failed", exc_info=True)
            raise click.ClickException(f"{type(e).__name__}: {e}") from e

    return wrapper


def load(config_path, seed=None, out=None, clock=None, scenario=None):
    return parse_config(config_path).with_overrides(
        seed=seed,
        output_dir=out,
        clock_mode=ClockMode(clock) if clock else None,
        scenario=Scenario(scenario) if scenario else None,
    )


config_argument = click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
seed_option = click.option("--seed", type=int, default=None, help="Override the config seed.")
out_option = click.option(
    "--out", type=click.Path(file_okay=False, path_type=Path), default=None, help="Output directory."
)


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Log debug detail.")
def cli(verbose):
    """Federated transfer reinforcement learning for LIDAR-steered cars."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@config_argument
@seed_option
@out_option
@click.option("--clock", type=click.Choice([m.value for m in ClockMode]), default=None)
@click.option("--scenario", type=click.Choice([s.value for s in Scenario]), default=None)
@click.option("--no-eval", is_flag=True, help="Skip the held-out evaluation.")
@reports_errors
def run(config_path, seed, out, clock, scenario, no_eval):
    """Train the agents of a scenario and write logs, rp curves and evaluation reports."""
    config = load(config_path, seed, out, clock, scenario)
    result = run_experiment(config, evaluate=not no_eval)
    for agent_id, summary in sorted(result.summaries.items()):
        click.echo(
            f"agent {agent_id}: stage II collisions {summary.stage_2_collisions}, "
            f"rp sum {summary.rp_sum:.3f}"
        )
    click.echo(f"results in {result.output_dir}")


@cli.command()
@config_argument
@seed_option
@out_option
@reports_errors
def pretrain(config_path, seed, out):
    """Train the shared starting model and save it as a checkpoint."""
    config = load(config_path, seed, out)
    networks = run_pretrain(config)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    path = config.output_dir / "pretrained.bin"
    write_checkpoint(path, networks)
    click.echo(f"wrote {path}")


@cli.command(name="eval")
@config_argument
@click.option(
    "--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path)
)
@seed_option
@out_option
@reports_errors
def evaluate(config_path, model_path, seed, out):
    """Evaluate a checkpoint on the held-out track in every agent's environment."""
    config = load(config_path, seed, out)
    for agent_id, report in evaluate_checkpoint(config, model_path).items():
        status = " (timed out)" if report.timed_out else ""
        click.echo(
            f"agent {agent_id}: avg_dist {report.avg_dist:.3f} coll_no {report.coll_no} "
            f"laps {report.cycles}{status}"
        )


@cli.command()
@click.option("--check", "checks", multiple=True, type=click.Choice(list(CHECKS)), help="Run only these.")
@click.option("--seed", type=int, default=0)
def verify(checks, seed):
    """Run the built-in oracle and property checks."""
    results = run_checks(list(checks) or None, seed)
    for result in results:
        click.echo(f"{'PASS' if result.passed else 'FAIL'} {result.name}: {result.detail}")
    if not all(result.passed for result in results):
        raise click.ClickException("some checks failed")


@cli.command()
@config_argument
@click.option("--seeds", type=click.IntRange(min=1), default=5, show_default=True)
@out_option
@click.option("--no-eval", is_flag=True, help="Skip the held-out evaluation.")
@reports_errors
def compare(config_path, seeds, out, no_eval):
    """Run solo, ftrl and ftrl_sim over several seeds from a shared pretrained start."""
    config = load(config_path, out=out)
    seed_list = [config.seed + i for i in range(seeds)]
    rows = compare_scenarios(config, seed_list, evaluate=not no_eval)
    for scenario in Scenario:
        counts = [r.stage2_collisions for r in rows if r.scenario is scenario]
        if counts:
            click.echo(f"{scenario}: mean stage II collisions {sum(counts) / len(counts):.2f}")
    click.echo(f"results in {config.output_dir}")


@cli.command()
@click.option("--addr", default=None, help="host:port (default 127.0.0.1:8765); FTRL_SERVER_ADDR takes precedence.")
@click.option("--federation-cycle", type=float, default=120.0, show_default=True, help="Seconds.")
@reports_errors
def serve(addr, federation_cycle):
    """Run a wall-clock federation server until interrupted."""
    run_server(
        FederationConfig(
            federation_cycle=federation_cycle,
            clock_mode=ClockMode.WALL,
            server_addr=addr or "127.0.0.1:8765",
        )
    )


def main():
    load_dotenv()
    cli()
