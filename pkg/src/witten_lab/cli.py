"""witten-lab command line: run scenario stages and write report.json plus CSV tables."""
from __future__ import annotations

import logging
import sys
import time
import warnings
from pathlib import Path

import click

from .cache import Cache
from .pipeline import StageError, run_scenario
from .report import write_report, write_tables
from .scenarios import DEFAULT_THRESHOLDS, ScenarioError, load_scenario, scenario_names

EXIT_OK, EXIT_FAIL, EXIT_UNKNOWN = 0, 1, 2


def _parse_threshold(items):
    out = {}
    for it in items:
        if "=" not in it:
            raise click.BadParameter(f"expected KEY=VALUE, got {it!r}", param_hint="--threshold")
        k, v = it.split("=", 1)
        if k not in DEFAULT_THRESHOLDS:
            raise click.BadParameter(f"unknown threshold {k!r}", param_hint="--threshold")
        out[k] = v
    return out


def exit_status(report: dict) -> int:
    """0 iff every non-EXPECTED check passes; a pure function of the report."""
    if report.get("error"):
        return EXIT_FAIL
    return EXIT_OK if report.get("verdict") == "pass" else EXIT_FAIL


def run(stage: str, scenario: str, T=(), h=None, R=None, b=None, a_min=None, thresholds=None, out=None,
        cache=True, seed=0, echo=print) -> tuple[int, dict | None]:
    """Programmatic entry point mirroring the command line."""
    try:
        s = load_scenario(scenario)
    except ScenarioError as exc:
        echo(f"error: {exc}", err=True) if echo is click.echo else echo(f"error: {exc}")
        return EXIT_UNKNOWN, None
    s = s.with_overrides(T=list(T) or None, h=h, R=R, b=b, a_min=a_min, **(thresholds or {}))
    out = Path(out or Path("witten_lab_out") / s.name)
    c = Cache(enabled=cache)
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            result = run_scenario(s, stage=stage, cache=c, seed=seed)
    except StageError as exc:
        report = {"scenario": s.name, "stage": stage, "error": {"stage": exc.stage, "message": str(exc)},
                  "config": {**s.to_dict(), "seed": seed, "cache_enabled": cache}, "verdict": "error",
                  "timings": {"total": time.perf_counter() - t0}, "cache": c.stats}
        write_report(report, out)
        echo(f"stage failure {exc}")
        return EXIT_FAIL, report
    report = result.report
    report["timings"]["total"] = time.perf_counter() - t0
    write_report(report, out)
    write_tables(result.tables, out)
    for chk in report["checks"]:
        echo(f"{chk['status']:>21}  {chk['stage']:<8} {chk['name']}")
    hits = report["cache"]["hits"]
    echo(f"cache hits: assembly={hits['assembly']} eigensolve={hits['eigensolve']}")
    echo(f"verdict: {report['verdict']}  ({out / 'report.json'})")
    return exit_status(report), report


def _stage_command(stage: str, help_: str):
    @click.command(name=stage, help=help_)
    @click.argument("scenario")
    @click.option("--T", "T", multiple=True, type=float, help="T value (repeat for a schedule).")
    @click.option("--h", type=float, default=None, help="Grid spacing override.")
    @click.option("--R", "R", type=float, default=None, help="Box half-width override.")
    @click.option("--b", type=float, default=None, help="Agmon metric factor b in (0, 1).")
    @click.option("--a-min", type=float, default=None, help="Minimum accepted decay rate.")
    @click.option("--threshold", multiple=True, metavar="KEY=VALUE", help="Override any named threshold.")
    @click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
    @click.option("--no-cache", is_flag=True, help="Disable the on-disk cache.")
    @click.option("--seed", type=int, default=0, show_default=True)
    @click.option("-v", "--verbose", is_flag=True)
    def cmd(scenario, T, h, R, b, a_min, threshold, out, no_cache, seed, verbose):
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING)
        code, _ = run(stage, scenario, T=T, h=h, R=R, b=b, a_min=a_min, thresholds=_parse_threshold(threshold),
                      out=out, cache=not no_cache, seed=seed, echo=click.echo)
        sys.exit(code)

    return cmd


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Witten deformation laboratory."""


main.add_command(_stage_command("analyze", "Critical points, tameness audit, compact core, boundary data."))
main.add_command(_stage_command("spectrum", "Instanton windows, eigencounts, Betti numbers, Morse inequalities."))
main.add_command(_stage_command("agmon", "Agmon distance, decay fits, weighted norm growth."))
main.add_command(_stage_command("complex", "Thom-Smale complex by flow-line counting."))
main.add_command(_stage_command("verify", "Full pipeline with the consolidated pass/fail table."))


@main.command(name="list")
def list_scenarios():
    """List the bundled scenarios."""
    for n in scenario_names():
        s = load_scenario(n)
        click.echo(f"{n:<24} {s.tameness_class:<14} T={s.T_schedule}  ref={s.reference_betti}")


if __name__ == "__main__":
    main()
