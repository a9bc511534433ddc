"""Command line interface of mixup_merge.

Exit codes: 0 on success, 2 on usage errors (raised before any output file is
touched) and 1 on data or validation errors.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import click
import rich.logging
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from mixup_merge import __version__
from mixup_merge.checkpoint import digest, read_checkpoint, read_entry, read_manifest
from mixup_merge.components.config import ToolkitConfig
from mixup_merge.errors import MixupMergeError, RecipeError
from mixup_merge.recipe import M3_METHODS, METHODS, MergeRecipe, RecipeTemplate, SparsifyConfig
from mixup_merge.sampler import SamplingRecord, SweepSchedule, sample_lambda, sampling_summary
from mixup_merge.tensors import DeltaSet, TensorMap
from mixup_merge.workflows import lab
from mixup_merge.workflows.evaluators import LabEvaluator, parse_evaluator
from mixup_merge.workflows.toy import TASK_IDS
from mixup_merge.workspace import MergeWorkspace

logger = logging.getLogger(__name__)

SEED_ENVVAR = "MIXUP_MERGE_SEED"

InputPath = click.Path(exists=True, dir_okay=False, path_type=Path)
OutputPath = click.Path(dir_okay=False, path_type=Path)


def _flag(name: str) -> str:
    return name.replace("_", "-")


def _method(name: str) -> str:
    return name.replace("-", "_")


@dataclass
class CliState:
    config: ToolkitConfig
    verbose: bool = False

    def seed(self, seed: int | None) -> int:
        return self.config.seed if seed is None else seed


class MixupMergeGroup(click.Group):
    """Turns toolkit errors into exit code 1 with a logged message."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (MixupMergeError, ValidationError, OSError) as e:
            if ctx.params.get("verbose"):
                logger.exception(e)
            else:
                logger.error(f"{type(e).__name__}: {e}")
            ctx.exit(1)


@click.group(cls=MixupMergeGroup, context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="mixup-merge")
@click.option(
    "--config",
    "config_path",
    type=InputPath,
    help="TOML file overriding the packaged defaults.",
)
@click.option("-v", "--verbose", is_flag=True, help="Log debug messages and tracebacks.")
@click.option("-q", "--quiet", is_flag=True, help="Log warnings and errors only.")
@click.pass_context
def cli(ctx: click.Context, config_path: Path | None, verbose: bool, quiet: bool):
    """Merge fine-tuned checkpoints with randomly interpolated coefficients."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[
            rich.logging.RichHandler(
                console=Console(stderr=True), rich_tracebacks=verbose, show_path=False
            )
        ],
        force=True,
    )
    ctx.obj = CliState(config=ToolkitConfig.from_file(config_path), verbose=verbose)


def seed_option(help: str):
    return click.option("--seed", type=click.IntRange(min=0), envvar=SEED_ENVVAR, help=help)


def _read_models(paths: tuple[Path, ...]) -> list[TensorMap | DeltaSet]:
    return [read_entry(p) for p in paths]


def _manifest_path(out: Path, manifest_out: Path | None) -> Path:
    if manifest_out is not None:
        return manifest_out
    return out.with_name(f"{out.stem}.manifest.json")


def _single_output(state: CliState, out: Path) -> MergeWorkspace:
    return MergeWorkspace(out.parent, mode="w+", config=state.config)


def _recipe(**fields) -> MergeRecipe:
    try:
        return MergeRecipe.create(**fields)
    except RecipeError as e:
        raise click.UsageError(str(e)) from e


def _dare(dare_p: float | None, dare_seed: int | None, seed: int) -> SparsifyConfig | None:
    if dare_p is None:
        return None
    try:
        return SparsifyConfig(drop_rate=dare_p, seed=seed if dare_seed is None else dare_seed)
    except ValidationError as e:
        raise click.BadParameter(f"drop rate must lie in [0, 1), got {dare_p}") from e


@cli.command()
@click.argument("inputs", nargs=-1, required=True, type=InputPath)
@click.option(
    "-m",
    "--method",
    required=True,
    type=click.Choice([_flag(m) for m in METHODS]),
    help="Merging method.",
)
@click.option("--base", type=InputPath, help="Pretrained checkpoint of the offset methods.")
@click.option(
    "--lambda-m",
    type=click.FloatRange(0, 1, min_open=True, max_open=True),
    help="Explicit interpolation coefficient (M3 methods).",
)
@click.option(
    "--alpha",
    type=click.FloatRange(min=0, min_open=True),
    help="Beta shape to sample the coefficient from (M3 methods).",
)
@seed_option("Seed of the coefficient draw.")
@click.option("--scaling", type=float, help="Scaling term of the merged task vector.")
@click.option("--retain-ratio", type=float, help="TIES retain ratio.")
@click.option("--preset", help="TIES preset from the configuration, e.g. lm_code.")
@click.option("--dare-p", type=float, help="DARE drop rate applied to every task vector.")
@click.option("--dare-seed", type=click.IntRange(min=0), help="Seed of the DARE masks.")
@click.option("--grid-search", is_flag=True, help="Require grid values for the hyperparameters.")
@click.option("-o", "--out", required=True, type=OutputPath, help="Merged checkpoint.")
@click.option("--manifest-out", type=OutputPath, help="Manifest path, next to --out by default.")
@click.pass_obj
def merge(
    state: CliState,
    inputs: tuple[Path, ...],
    method: str,
    base: Path | None,
    lambda_m: float | None,
    alpha: float | None,
    seed: int | None,
    scaling: float | None,
    retain_ratio: float | None,
    preset: str | None,
    dare_p: float | None,
    dare_seed: int | None,
    grid_search: bool,
    out: Path,
    manifest_out: Path | None,
):
    """Merge INPUTS into one checkpoint and write its manifest.

    Delta files among INPUTS are added to --base with --scaling as weight.
    """
    method = _method(method)
    if lambda_m is not None and alpha is not None:
        raise click.UsageError("Give either --lambda-m or --alpha, not both")
    if method not in M3_METHODS and (lambda_m is not None or alpha is not None):
        raise click.UsageError(f"--lambda-m and --alpha apply to the M3 methods, not {method}")
    if method in M3_METHODS and lambda_m is None and alpha is None:
        raise click.UsageError(f"{_flag(method)} needs --lambda-m or --alpha")
    if preset is not None:
        presets = state.config.ties_presets
        if preset not in presets:
            raise click.UsageError(f"Unknown preset '{preset}', select from {sorted(presets)}")
        if method not in ("ties", "m3_ties"):
            raise click.UsageError("--preset selects TIES hyperparameters")
        scaling = presets[preset].scaling_term if scaling is None else scaling
        retain_ratio = presets[preset].retain_ratio if retain_ratio is None else retain_ratio
    seed = state.seed(seed)

    entries = _read_models(inputs)
    base_map = read_checkpoint(base) if base is not None else None
    n_deltas = sum(isinstance(e, DeltaSet) for e in entries)
    manifest_path = _manifest_path(out, manifest_out)

    if n_deltas:
        if n_deltas != len(entries) or method != "task_arithmetic":
            raise click.UsageError(
                "Delta files are merged with --method task-arithmetic, without full checkpoints"
            )
        if base_map is None or scaling is None or dare_p is not None:
            raise click.UsageError("Delta files need --base and --scaling and take no --dare-p")
        ws = _single_output(state, out)
        merged = ws.setup_apply(
            base_map,
            [(scaling, d) for d in entries],
            name=out.stem,
            path=out,
            manifest_path=manifest_path,
        )
    else:
        sampling = None
        if alpha is not None:
            sampling = sample_lambda(alpha, seed)
            lambda_m = sampling.lambda_m
        elif lambda_m is not None:
            sampling = SamplingRecord(lambda_m=lambda_m)
        recipe = _recipe(
            method=method,
            lambda_m=lambda_m,
            sampling=sampling,
            scaling_term=scaling,
            retain_ratio=retain_ratio,
            dare=_dare(dare_p, dare_seed, seed),
            grid_search=grid_search,
        )
        if recipe.needs_base and base_map is None:
            raise click.UsageError(f"{_flag(method)} needs --base")
        if (recipe.is_m3 or method == "average") and len(entries) != 2:
            raise click.UsageError(f"{_flag(method)} merges exactly two checkpoints")
        if sampling is not None:
            logger.info(
                f"lambda_m={sampling.lambda_m:.6f} (alpha={sampling.alpha}, seed={sampling.seed})"
            )
        ws = _single_output(state, out)
        merged = ws.setup_merge(
            recipe,
            entries,
            base=base_map if recipe.needs_base else None,
            name=out.stem,
            path=out,
            manifest_path=manifest_path,
        )
    ws.write()
    click.echo(digest(merged))


def _parse_alphas(ctx, param, value: str | None) -> tuple[float, ...] | None:
    if value is None:
        return None
    try:
        alphas = tuple(float(a) for a in value.split(",") if a.strip())
    except ValueError as e:
        raise click.BadParameter(f"expected comma-separated numbers, got '{value}'") from e
    if not alphas or any(a <= 0 for a in alphas):
        raise click.BadParameter(f"expected positive alphas, got '{value}'")
    return alphas


@cli.command()
@click.argument("inputs", nargs=2, type=InputPath)
@click.option(
    "-m",
    "--method",
    default="m3-average",
    show_default=True,
    type=click.Choice([_flag(m) for m in METHODS if m in M3_METHODS]),
)
@click.option("--base", type=InputPath, help="Pretrained checkpoint of the offset methods.")
@click.option(
    "--alphas",
    callback=_parse_alphas,
    help="Comma-separated Beta shapes, the configured alphas by default.",
)
@seed_option("Base seed of the per-alpha draws.")
@click.option(
    "--evaluator",
    "evaluator_spec",
    required=True,
    help="lab:<seed> or cmd:<command>; a command receives a checkpoint path and a task id.",
)
@click.option(
    "--task",
    "tasks",
    multiple=True,
    help="Task ids scored by an external evaluator, task1 and task2 by default.",
)
@click.option("--scaling", type=float, help="Scaling term of the merged task vector.")
@click.option("--retain-ratio", type=float, help="TIES retain ratio.")
@click.option("--dare-p", type=float, help="DARE drop rate applied to every task vector.")
@click.option("--dare-seed", type=click.IntRange(min=0), help="Seed of the DARE masks.")
@click.option(
    "--out-dir",
    required=True,
    type=click.Path(file_okay=False, path_type=Path),
    help="Folder of the merged checkpoints, the table and the result.",
)
@click.pass_obj
def sweep(
    state: CliState,
    inputs: tuple[Path, Path],
    method: str,
    base: Path | None,
    alphas: tuple[float, ...] | None,
    seed: int | None,
    evaluator_spec: str,
    tasks: tuple[str, ...],
    scaling: float | None,
    retain_ratio: float | None,
    dare_p: float | None,
    dare_seed: int | None,
    out_dir: Path,
):
    """Merge the two INPUTS once per alpha and score every merge."""
    seed = state.seed(seed)
    try:
        template = RecipeTemplate(
            method=_method(method),
            scaling_term=scaling,
            retain_ratio=retain_ratio,
            dare=_dare(dare_p, dare_seed, seed),
        )
        # checks the remaining fields against a placeholder coefficient
        midpoint = template.instantiate(SamplingRecord(lambda_m=0.5))
    except (RecipeError, ValidationError) as e:
        raise click.UsageError(str(e)) from e
    if midpoint.needs_base and base is None:
        raise click.UsageError(f"{method} needs --base")
    try:
        evaluator = parse_evaluator(
            evaluator_spec, task_ids=tasks or TASK_IDS, lab=state.config.lab
        )
    except MixupMergeError as e:
        raise click.BadParameter(str(e), param_hint="--evaluator") from e
    if tasks and isinstance(evaluator, LabEvaluator):
        raise click.UsageError("--task applies to external evaluators only")
    schedule = SweepSchedule(alphas=alphas or state.config.alphas, base_seed=seed)

    models = [read_checkpoint(p) for p in inputs]
    base_map = read_checkpoint(base) if base is not None else None
    ws = MergeWorkspace(out_dir, mode="w+", config=state.config)
    result = ws.setup_sweep(models, evaluator, template, schedule, base_map)
    ws.write()
    best = result.best
    if best is None:
        raise MixupMergeError(f"Every evaluation of the sweep failed, see {out_dir}")
    logger.info(
        f"Selected alpha={best.sampling.alpha:g} lambda_m={best.sampling.lambda_m:.4f} "
        f"avg={best.avg:.3f}"
    )


@cli.command()
@click.argument("fine", type=InputPath)
@click.argument("base", type=InputPath)
@click.option("-o", "--out", required=True, type=OutputPath, help="Delta file.")
@click.option("--manifest-out", type=OutputPath, help="Manifest path, next to --out by default.")
@click.pass_obj
def delta(state: CliState, fine: Path, base: Path, out: Path, manifest_out: Path | None):
    """Write the task vector FINE - BASE as a delta file."""
    ws = _single_output(state, out)
    d = ws.setup_delta(
        read_checkpoint(fine),
        read_checkpoint(base),
        name=out.stem,
        path=out,
        manifest_path=_manifest_path(out, manifest_out),
    )
    ws.write()
    click.echo(digest(d))


@cli.command()
@click.argument("delta_file", metavar="DELTA", type=InputPath)
@click.option(
    "-p",
    "--drop-rate",
    type=float,
    help="Probability of zeroing each element, the configured DARE rate by default.",
)
@seed_option("Seed of the drop masks.")
@click.option("-o", "--out", required=True, type=OutputPath, help="Sparsified delta file.")
@click.option("--manifest-out", type=OutputPath, help="Manifest path, next to --out by default.")
@click.pass_obj
def sparsify(
    state: CliState,
    delta_file: Path,
    drop_rate: float | None,
    seed: int | None,
    out: Path,
    manifest_out: Path | None,
):
    """Drop elements of DELTA at random and rescale the rest."""
    cfg = _dare(
        state.config.dare_drop_rate if drop_rate is None else drop_rate, None, state.seed(seed)
    )
    entry = read_entry(delta_file)
    if not isinstance(entry, DeltaSet):
        raise MixupMergeError(f"{delta_file} is not a delta file, create one with 'delta'")
    ws = _single_output(state, out)
    sparse = ws.setup_sparsify(
        entry, cfg, name=out.stem, path=out, manifest_path=_manifest_path(out, manifest_out)
    )
    ws.write()
    click.echo(digest(sparse))


@cli.command()
@click.argument("a", type=InputPath)
@click.argument("b", type=InputPath)
@click.option("--grid", type=click.IntRange(min=2), help="Number of grid points.")
@click.option(
    "--pair",
    required=True,
    type=(click.Choice(["lab-seed"]), click.IntRange(min=0)),
    help="Lab tasks the losses are measured on, e.g. 'lab-seed 3'.",
)
@click.option("-o", "--out", type=OutputPath, help="CSV file, standard output by default.")
@click.pass_obj
def scan(
    state: CliState,
    a: Path,
    b: Path,
    grid: int | None,
    pair: tuple[str, int],
    out: Path | None,
):
    """Task losses along the segment from B (lambda 0) to A (lambda 1)."""
    ev = LabEvaluator(pair[1], state.config.lab)
    a_map, b_map = read_checkpoint(a), read_checkpoint(b)

    def losses(t: TensorMap) -> list[float]:
        return [ev.loss(t, task) for task in TASK_IDS]

    if out is None:
        result = lab.scan_segment(a_map, b_map, losses, grid or state.config.scan_grid)
        click.echo(result.table.round(state.config.decimals).to_csv(index=False), nl=False)
    else:
        ws = _single_output(state, out)
        result = ws.setup_scan(a_map, b_map, losses, grid, name=out.stem, path=out)
        ws.write(["tables"])
    logger.info(f"Barrier {result.barrier():.4f}")


@cli.command()
@click.argument("path", type=InputPath)
def inspect(path: Path):
    """Print the tensors, identity and digest of a checkpoint or a manifest."""
    console = Console()
    if path.name.endswith(".json"):
        console.print_json(read_manifest(path).model_dump_json())
        return
    entry = read_entry(path)
    tensors = entry.tensors if isinstance(entry, DeltaSet) else entry
    table = Table(title=path.name)
    table.add_column("tensor")
    table.add_column("shape")
    table.add_column("elements", justify="right")
    for name, shape in tensors.shapes.items():
        table.add_row(name, "x".join(map(str, shape)) or "scalar", str(tensors[name].size))
    console.print(table)
    console.print(f"identity: {entry.identity}")
    if isinstance(entry, DeltaSet):
        console.print(f"base_id: {entry.base_id}")
    console.print(f"parameters: {entry.n_parameters}")
    console.print(f"digest: {digest(path.read_bytes())}")


@cli.command()
@click.argument("values", nargs=-1, required=True)
@click.pass_obj
def pdr(state: CliState, values: tuple[str, ...]):
    """Performance drop rate of NO_ATTACK ATTACK, or of every row of a CSV.

    The CSV needs the columns metric_no_attack and metric_attack.
    """
    if len(values) == 2:
        try:
            no_attack, attack = (float(v) for v in values)
        except ValueError as e:
            raise click.BadParameter("expected two numbers", param_hint="VALUES") from e
        click.echo(f"{lab.compute_pdr(no_attack, attack).pdr:.2f}")
    elif len(values) == 1:
        path = Path(values[0])
        if not path.is_file():
            raise click.BadParameter(f"'{path}' is not a file", param_hint="VALUES")
        df = lab.load_pdr_table(path)
        click.echo(df.round(2).to_csv(index=False), nl=False)
    else:
        raise click.UsageError("pdr takes NO_ATTACK ATTACK or one CSV file")


@cli.command(name="lab")
@seed_option("Seed of the lab pair, the first seed of a study.")
@click.option("--study", type=click.IntRange(min=1), help="Run the basin study over N seeds.")
@click.option(
    "--compare", is_flag=True, help="Compare the baselines with and without M3 and DARE."
)
@click.option("--beta-table", is_flag=True, help="Print sampler diagnostics per alpha.")
@click.option(
    "-o",
    "--out-dir",
    type=click.Path(file_okay=False, path_type=Path),
    help="Folder of the lab checkpoints or the study table.",
)
@click.pass_obj
def lab_cmd(
    state: CliState,
    seed: int | None,
    study: int | None,
    compare: bool,
    beta_table: bool,
    out_dir: Path | None,
):
    """Train a lab pair, run a study or print the sampler diagnostics."""
    if beta_table:
        if study is not None or compare or out_dir is not None:
            raise click.UsageError("--beta-table prints to the terminal and takes no outputs")
        _print_beta_table(state)
        return
    if out_dir is None:
        raise click.UsageError("Missing option '-o' / '--out-dir'")
    if compare and study is not None:
        raise click.UsageError("Give either --study or --compare, not both")
    seed = state.seed(seed)
    ws = MergeWorkspace(out_dir, mode="w+", config=state.config)
    if compare:
        ws.setup_compare(seed)
    elif study is None:
        ws.setup_lab(seed)
    else:
        ws.setup_study(list(range(seed, seed + study)))
    ws.write()


def _print_beta_table(state: CliState) -> None:
    table = Table(title="Beta(alpha, alpha) draws")
    for col in ("alpha", "mean", "variance", "expected", "iqr", "P(0.4<lam<0.6)"):
        table.add_column(col, justify="right")
    for alpha in state.config.alphas:
        s = sampling_summary(alpha, seed=state.config.seed)
        table.add_row(
            f"{alpha:g}",
            f"{s['mean']:.4f}",
            f"{s['variance']:.4f}",
            f"{s['variance_expected']:.4f}",
            f"{s['iqr']:.4f}",
            f"{s['mass_mid']:.4f}",
        )
    Console().print(table)


if __name__ == "__main__":
    cli()
