"""``lkentropy`` command-line entry point.

Exit codes: 0 all checks pass, 1 an assertion failed, 2 configuration
error, 3 divergence abort.
"""

from __future__ import annotations

import sys

import click

from .experiments import KINDS, ExperimentPlan, run
from .system import AssumptionError, ConfigError


def _floats(text, name, count=None):
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"--{name}: expected comma-separated numbers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise ConfigError(f"--{name}: expected {count} numbers, got {len(vals)}")
    return vals


@click.command(context_settings={"help_option_names": ["-h", "--help"]})
@click.argument("kind", type=click.Choice(KINDS))
@click.option("--config", type=click.Path(dir_okay=False), help="System configuration (JSON).")
@click.option("--seed", type=int, default=0, show_default=True, help="Unsigned 64-bit seed.")
@click.option("--out", type=click.Path(file_okay=False), default=".", show_default=True, help="Output directory.")
@click.option("--paths", type=int, default=20000, show_default=True, help="Paths per ensemble.")
@click.option("--masses", default="0.1,0.03,0.01", show_default=True, help="Strictly decreasing mass ladder.")
@click.option("--dt-c1", "c1", type=float, default=20.0, show_default=True, help="Underdamped dt = m / (c1 lambda_max).")
@click.option("--dt-c2", "c2", type=float, default=4096.0, show_default=True, help="Overdamped dt = T / c2.")
@click.option("--window", default=None, help="Integration window s,t (default: whole horizon).")
@click.option("--workers", type=int, default=1, show_default=True, help="Worker processes for path chunks.")
@click.option("--select", default=None, help="Comma-separated identity suites (prefixes allowed); empty selects none.")
@click.option("--corrupt-g", is_flag=True, help="Perturb one entry of G (mutation check of the identity suite).")
@click.option("--fail-fast", is_flag=True, help="Abort on the first diverging path.")
def main(kind, config, seed, out, paths, masses, c1, c2, window, workers, select, corrupt_g, fail_fast):
    """Run one experiment and write its tables into --out."""
    try:
        plan = ExperimentPlan(
            kind=kind,
            config=config,
            seed=seed,
            out=out,
            paths=paths,
            masses=_floats(masses, "masses"),
            window=_floats(window, "window", 2) if window else None,
            c1=c1,
            c2=c2,
            fail_fast=fail_fast,
            workers=workers,
            select=None if select is None else tuple(s.strip() for s in select.split(",") if s.strip()),
            corrupt_g=corrupt_g,
        )
        outcome = run(plan)
    except (ConfigError, AssumptionError, FileNotFoundError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(2)
    for f in outcome.files:
        click.echo(str(f))
    if outcome.status == 3:
        click.echo(f"aborted: {outcome.summary.get('error')}", err=True)
    elif outcome.status:
        click.echo("one or more checks failed", err=True)
    sys.exit(outcome.status)


if __name__ == "__main__":  # pragma: no cover
    main()
