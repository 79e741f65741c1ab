"""Main CLI entry point for sketchstack."""

import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path
from typing import Annotated, Any, NoReturn

import numpy as np
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import BarColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from sketchstack import __version__, config, utils
from sketchstack.core import BlockLibrary, ValidationError, load_scene, save_scene
from sketchstack.datagen import (
    GenConfig,
    RenderConfig,
    extract_training_set,
    generate_structures,
    geom_dim_for,
    is_pattern_name,
    load_dataset,
    save_dataset,
    to_denoiser_data,
    write_manifest,
)
from sketchstack.diffusion import (
    ArchConfig,
    DenoiserModel,
    OptimConfig,
    cosine_schedule,
    load_models,
    save_checkpoint,
    schedule_for,
    train_denoiser,
)
from sketchstack.evaluation import (
    EvalConfig,
    build_corpus,
    evaluate_corpus,
    export_goal_poses,
    save_summary,
)
from sketchstack.grounding import GroundingConfig, ablation_iterate, ground_iterate, trace_to_dict
from sketchstack.patterns import PatternType
from sketchstack.relations import ClassifierConfig, RelationType, extract_frontview_graph
from sketchstack.sampler import SamplerConfig
from sketchstack.sketchio import Sketch, SketchConfig, parse_raster, parse_structured
from sketchstack.stability import StabilityConfig, check_equilibrium, report_to_dict

app = typer.Typer(
    name="sketchstack",
    help="Turn front-view block sketches into stable 3D stacking structures",
    no_args_is_help=True,
)
console = Console()

ALL_NAMES = [r.value for r in RelationType] + [p.value for p in PatternType]
DATASET_SUFFIX = ".skds"
CHECKPOINT_SUFFIX = ".ckpt"
DEPENDENCIES = ("typer", "rich", "pyyaml", "packaging", "numpy", "scipy", "pillow", "networkx")

ConfigOption = Annotated[
    Path | None, typer.Option("--config", help="Config file (default ~/.sketchstack/config.yaml)")
]
SeedOption = Annotated[int | None, typer.Option("--seed", help="Base random seed")]
RelationsOption = Annotated[
    str | None,
    typer.Option("--relations", help="Comma-separated relation/pattern names (default: all)"),
]


def _fail(e: BaseException) -> NoReturn:
    """Print an error and exit: 2 for bad input, 1 for anything else."""
    console.print(f"✗ Error: {e}", style="red")
    sys.exit(2 if isinstance(e, (ValidationError, FileNotFoundError)) else 1)


def _load(config_path: Path | None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    return config.load_config(config_path, overrides)


def _overrides(**values: Any) -> dict[str, Any]:
    """Nest flag values into config sections; dotted keys name section.key."""
    result: dict[str, Any] = {}
    for key, value in values.items():
        if value is None:
            continue
        if "." in key:
            sec, name = key.split(".", 1)
            result.setdefault(sec, {})[name] = value
        else:
            result[key] = value
    return result


def _parse_names(relations: str | None) -> list[str]:
    if not relations:
        return list(ALL_NAMES)
    names = [n.strip() for n in relations.split(",") if n.strip()]
    unknown = [n for n in names if n not in ALL_NAMES]
    if unknown:
        raise ValidationError(f"Unknown relation or pattern: {', '.join(unknown)}")
    return names


def _sampler(cfg: dict[str, Any], models: dict[str, DenoiserModel]) -> SamplerConfig:
    """Sampler settings on the schedule shared by all loaded models."""
    if not models:
        raise ValidationError("No trained models found; run 'sketchstack train' first")
    schedules = {(m.arch.steps_T, m.arch.offset) for m in models.values()}
    if len(schedules) > 1:
        raise ValidationError(f"Models use different noise schedules: {sorted(schedules)}")
    sched = schedule_for(next(iter(models.values())))
    return SamplerConfig.from_config(config.section(cfg, "sampler"), sched, int(cfg["seed"]))


def _load_sketch(path: Path, labels: Path | None, lib: BlockLibrary, cfg: dict[str, Any]) -> Sketch:
    sketch_cfg = SketchConfig.from_mapping(config.section(cfg, "sketch"))
    if path.suffix.lower() == ".png":
        sidecar = labels or path.with_suffix(".labels.json")
        return parse_raster(path, sidecar, lib, sketch_cfg)
    return parse_structured(path, lib, sketch_cfg.target_width)


def version_callback(value: bool):
    """Print version and exit."""
    if value:
        console.print(f"sketchstack version {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: Annotated[
        bool,
        typer.Option(
            "--version",
            "-v",
            help="Show version and exit",
            callback=version_callback,
            is_eager=True,
        ),
    ] = False,
    verbose: Annotated[bool, typer.Option("--verbose", help="Log progress at debug level")] = False,
):
    """sketchstack: front-view block sketches to stable 3D structures."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@app.command()
def init(
    config_path: ConfigOption = None,
    force: Annotated[bool, typer.Option("--force", help="Overwrite existing config")] = False,
):
    """Write the default configuration file."""
    try:
        path = config_path or config.get_config_path()
        if path.exists() and not force:
            console.print(f"✗ Error: Config already exists at {path}", style="red")
            console.print("ℹ Use --force to overwrite existing config", style="yellow")
            sys.exit(1)

        config.save_config(config.default_config(), path)
        console.print(f"✓ Wrote default config to {path}", style="green")
    except Exception as e:
        _fail(e)


@app.command(name="gen-data")
def gen_data(
    out: Annotated[Path, typer.Option("--out", help="Dataset directory")] = Path("data"),
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    relations: RelationsOption = None,
    scenes: Annotated[int | None, typer.Option("--scenes", help="Structures to generate")] = None,
    workers: Annotated[int | None, typer.Option("--workers", help="Worker processes")] = None,
):
    """Generate stable structures and write one training set per relation."""
    try:
        cfg = _load(
            config_path,
            _overrides(seed=seed, workers=workers, **{"datagen.scenes": scenes}),
        )
        names = _parse_names(relations)
        datagen = config.section(cfg, "datagen")
        diffusion = config.section(cfg, "diffusion")
        lib = config.library_from_config(cfg)
        gen_cfg = GenConfig.from_config(cfg)
        base_seed = int(cfg["seed"])
        digest = config.config_hash(cfg)
        cap = int(datagen["samples_per_relation"])
        max_slots = int(diffusion["max_slots"])

        with console.status(f"Generating {datagen['scenes']} structure(s)..."):
            structures = generate_structures(
                int(datagen["scenes"]),
                base_seed,
                datagen["levels"],
                lib,
                gen_cfg,
                int(cfg["workers"]),
            )
        scene_list = [s.scene for s in structures]
        console.print(f"✓ Generated {len(scene_list)} structure(s)", style="green")

        out.mkdir(parents=True, exist_ok=True)
        counts: dict[str, int] = {}
        rng = utils.rng_stream(base_seed, len(scene_list))
        with Progress(
            TextColumn("{task.description}"), BarColumn(), TimeElapsedColumn(), console=console
        ) as progress:
            task = progress.add_task("Extracting training sets", total=len(names))
            for name in names:
                progress.update(task, description=f"Extracting {name}")
                arity = None if is_pattern_name(name) else RelationType(name).arity
                slots = arity or max_slots
                samples = [
                    s
                    for s in extract_training_set(scene_list, name, gen_cfg.classifier)
                    if len(s.operands) <= slots
                ]
                if len(samples) > cap:
                    keep = np.sort(rng.choice(len(samples), size=cap, replace=False))
                    samples = [samples[i] for i in keep]
                counts[name] = len(samples)
                if samples:
                    data = to_denoiser_data(samples, slots, geom_dim_for(name))
                    save_dataset(
                        data,
                        utils.artifact_path(out, name, DATASET_SUFFIX),
                        name,
                        base_seed,
                        digest,
                    )
                progress.advance(task)

        write_manifest(out / "manifest.json", counts, base_seed, digest, config=cfg)
        empty = sorted(n for n, c in counts.items() if c == 0)
        if empty:
            console.print(f"⚠ No samples for: {', '.join(empty)}", style="yellow")
        console.print(
            f"✓ Wrote {len(counts) - len(empty)} dataset(s) to {out} (config {digest})",
            style="green",
        )
    except Exception as e:
        _fail(e)


@app.command()
def train(
    data_dir: Annotated[Path, typer.Option("--data", help="Dataset directory")] = Path("data"),
    out: Annotated[Path, typer.Option("--out", help="Checkpoint directory")] = Path("models"),
    config_path: ConfigOption = None,
    seed: SeedOption = None,
    relations: RelationsOption = None,
    steps: Annotated[int | None, typer.Option("--steps", help="Training steps per model")] = None,
):
    """Train one denoiser per relation dataset."""
    try:
        cfg = _load(config_path, _overrides(seed=seed, **{"diffusion.steps": steps}))
        names = _parse_names(relations)
        diffusion = config.section(cfg, "diffusion")
        opt = OptimConfig.from_config(diffusion)
        base_seed = int(cfg["seed"])
        digest = config.config_hash(cfg)

        if not data_dir.is_dir():
            raise FileNotFoundError(f"Dataset directory not found: {data_dir}")
        available = [n for n in names if utils.artifact_path(data_dir, n, DATASET_SUFFIX).exists()]
        missing = sorted(set(names) - set(available))
        if missing and relations:
            raise FileNotFoundError(f"No dataset for: {', '.join(missing)}")
        if not available:
            raise FileNotFoundError(f"No datasets in {data_dir}; run 'sketchstack gen-data' first")

        out.mkdir(parents=True, exist_ok=True)
        for index, name in enumerate(available):
            data, header = load_dataset(utils.artifact_path(data_dir, name, DATASET_SUFFIX))
            arity = header.get("arity")
            arch = ArchConfig.from_config(
                diffusion,
                mode="fixed" if arity else "variadic",
                slots=int(header["slots"]),
                geom_dim=int(header.get("geom_dim", geom_dim_for(name))),
            )
            run_opt = opt
            if len(data) < opt.batch_size:
                console.print(
                    f"⚠ {name}: {len(data)} sample(s), batch size reduced from {opt.batch_size}",
                    style="yellow",
                )
                run_opt = replace(opt, batch_size=len(data))

            with console.status(f"Training {name} ({len(data)} samples)..."):
                model = train_denoiser(
                    data,
                    arch,
                    run_opt,
                    cosine_schedule(arch.steps_T, arch.offset),
                    utils.rng_stream(base_seed, index),
                    name=name,
                )
            model.seed = base_seed
            model.config_hash = digest
            save_checkpoint(model, utils.artifact_path(out, name, CHECKPOINT_SUFFIX))
            console.print(f"✓ {name}: final loss {model.losses[-1]:.5f}", style="green")

        console.print(f"✓ Wrote {len(available)} checkpoint(s) to {out}", style="green")
    except Exception as e:
        _fail(e)


@app.command()
def ground(
    sketch: Annotated[Path, typer.Argument(help="Structured sketch (.json) or raster (.png)")],
    models_dir: Annotated[Path, typer.Option("--models", help="Checkpoint directory")] = Path(
        "models"
    ),
    labels: Annotated[
        Path | None, typer.Option("--labels", help="Label sidecar for raster sketches")
    ] = None,
    out: Annotated[Path, typer.Option("--out", help="Output scene JSON")] = Path("scene.json"),
    trace: Annotated[Path | None, typer.Option("--trace", help="Write the iteration trace")] = None,
    ablation: Annotated[
        bool, typer.Option("--ablation", help="Re-sample only, never add hidden supports")
    ] = False,
    max_iters: Annotated[
        int | None, typer.Option("--max-iters", help="Maximum repair iterations")
    ] = None,
    config_path: ConfigOption = None,
    seed: SeedOption = None,
):
    """Ground a sketch into a 3D structure."""
    try:
        cfg = _load(config_path, _overrides(seed=seed, **{"grounding.max_iters": max_iters}))
        lib = config.library_from_config(cfg)
        grounding = GroundingConfig.from_config(cfg)
        parsed = _load_sketch(sketch, labels, lib, cfg)
        graph = extract_frontview_graph(parsed, grounding.classifier, grounding.bounds)
        models = load_models(models_dir)
        sampler = _sampler(cfg, models)

        run = ablation_iterate if ablation else ground_iterate
        result = run(graph, models, grounding, sampler, lib)

        digest = config.config_hash(cfg)
        save_scene(
            result.scene,
            out,
            extra={
                "success": result.success,
                "surviving_fraction": result.surviving_fraction,
                "resemblance": result.resemblance,
                "hidden_ids": result.hidden_ids,
                "seed": sampler.seed,
                "config_hash": digest,
                "config": cfg,
            },
        )
        if trace is not None:
            data = trace_to_dict(result)
            data["config_hash"] = digest
            utils.atomic_write_text(trace, json.dumps(data, indent=2) + "\n")

        style = "green" if result.success else "yellow"
        glyph = "✓" if result.success else "⚠"
        console.print(
            f"{glyph} {len(result.scene.blocks)} block(s), {len(result.hidden_ids)} hidden, "
            f"stable={result.success} after {result.iterations} iteration(s)",
            style=style,
        )
        console.print(
            f"ℹ surviving {result.surviving_fraction:.3f}, resemblance {result.resemblance:.3f}"
        )
        console.print(f"✓ Wrote {out}", style="green")
    except Exception as e:
        _fail(e)


@app.command()
def check(
    scene_path: Annotated[Path, typer.Argument(help="Scene JSON")],
    out: Annotated[Path | None, typer.Option("--out", help="Write the report JSON")] = None,
    config_path: ConfigOption = None,
):
    """Check a scene for static equilibrium."""
    try:
        cfg = _load(config_path)
        scene = load_scene(scene_path)
        stability = StabilityConfig.from_mapping(config.section(cfg, "stability"))
        report = check_equilibrium(scene, stability)
        data = report_to_dict(report, scene)
        data["config_hash"] = config.config_hash(cfg)
        if out is not None:
            utils.atomic_write_text(out, json.dumps(data, indent=2) + "\n")

        if report.feasible:
            console.print(f"✓ Stable: all {len(scene.blocks)} block(s) supported", style="green")
        else:
            console.print(
                f"⚠ Unstable: {len(report.survivors)}/{len(scene.blocks)} block(s) survive",
                style="yellow",
            )
            if report.unsupported:
                console.print(f"ℹ Unsupported blocks: {report.unsupported}")
    except Exception as e:
        _fail(e)


@app.command(name="eval")
def evaluate(
    models_dir: Annotated[Path, typer.Option("--models", help="Checkpoint directory")] = Path(
        "models"
    ),
    out: Annotated[Path, typer.Option("--out", help="Summary JSON")] = Path("eval.json"),
    cases: Annotated[int | None, typer.Option("--cases", help="Number of corpus cases")] = None,
    max_iters: Annotated[
        int | None, typer.Option("--max-iters", help="Maximum repair iterations")
    ] = None,
    workers: Annotated[int | None, typer.Option("--workers", help="Worker processes")] = None,
    config_path: ConfigOption = None,
    seed: SeedOption = None,
):
    """Evaluate grounding with and without hidden supports on a generated corpus."""
    try:
        cfg = _load(
            config_path,
            _overrides(
                seed=seed,
                workers=workers,
                **{"eval.cases": cases, "grounding.max_iters": max_iters},
            ),
        )
        lib = config.library_from_config(cfg)
        n_workers = int(cfg["workers"])
        models = load_models(models_dir)
        sampler = _sampler(cfg, models)

        with console.status("Building evaluation corpus..."):
            corpus = build_corpus(
                EvalConfig.from_config(cfg),
                lib,
                GenConfig.from_config(cfg),
                RenderConfig.from_mapping(config.section(cfg, "render")),
                n_workers,
            )
        with console.status(f"Grounding {len(corpus)} case(s)..."):
            summary = evaluate_corpus(
                corpus,
                models,
                GroundingConfig.from_config(cfg),
                sampler,
                lib,
                n_workers,
                config.config_hash(cfg),
            )
        save_summary(summary, out)

        table = Table(show_header=True, header_style="bold magenta")
        table.add_column("Split")
        table.add_column("Method")
        table.add_column("Resemblance")
        table.add_column("Surviving")
        table.add_column("Cases")
        for split, methods in summary.aggregate.items():
            for method, cells in methods.items():
                res, surv = cells["resemblance"], cells["surviving_fraction"]
                table.add_row(
                    split,
                    method,
                    f"{res['mean']:.3f} ± {res['std']:.3f}",
                    f"{surv['mean']:.3f} ± {surv['std']:.3f}",
                    str(res["n"]),
                )
        console.print(table)
        console.print(f"✓ Wrote {out}", style="green")
    except Exception as e:
        _fail(e)


@app.command()
def export(
    scene_path: Annotated[Path, typer.Argument(help="Scene JSON")],
    out: Annotated[Path, typer.Option("--out", help="Goal pose file")] = Path("goals.ndjson"),
):
    """Export goal poses in placement order, lowest blocks first."""
    try:
        scene = load_scene(scene_path)
        export_goal_poses(scene, out)
        console.print(f"✓ Wrote {len(scene.blocks)} goal pose(s) to {out}", style="green")
    except Exception as e:
        _fail(e)


def _coverage(names: list[str], models_dir: Path) -> tuple[list[str], list[str]]:
    present = [n for n in names if utils.artifact_path(models_dir, n, CHECKPOINT_SUFFIX).exists()]
    return present, [n for n in names if n not in present]


@app.command()
def doctor(
    models_dir: Annotated[Path, typer.Option("--models", help="Checkpoint directory")] = Path(
        "models"
    ),
    config_path: ConfigOption = None,
):
    """Run diagnostic checks on your sketchstack installation."""
    console.print("[bold cyan]sketchstack Doctor[/bold cyan]")
    console.print()

    all_checks_passed = True

    console.print("[bold]1. Checking configuration...[/bold]")
    try:
        cfg = _load(config_path)
        path = config_path or config.get_config_path()
        if path.exists():
            console.print(f"   ✓ Config found at {path}", style="green")
        else:
            console.print("   ℹ No config file, using built-in defaults", style="yellow")
        config.workspace_bounds(cfg)
        ClassifierConfig.from_mapping(config.section(cfg, "classifier"))
        console.print(f"   ✓ Config valid (hash {config.config_hash(cfg)})", style="green")
    except Exception as e:
        console.print(f"   ✗ Config error: {e}", style="red")
        all_checks_passed = False

    console.print("[bold]2. Checking Python environment...[/bold]")
    console.print(f"   • Python: {sys.version.split()[0]}", style="cyan")
    console.print(f"   • Platform: {platform.system()} {platform.release()}", style="cyan")
    console.print(f"   • sketchstack: {__version__}", style="cyan")

    console.print("[bold]3. Checking dependencies...[/bold]")
    try:
        from importlib.metadata import version as get_version

        for package in DEPENDENCIES:
            console.print(f"   ✓ {package}: {get_version(package)}", style="green")
    except Exception as e:
        console.print(f"   ✗ Error checking dependencies: {e}", style="red")
        all_checks_passed = False

    console.print("[bold]4. Checking trained models...[/bold]")
    if not models_dir.is_dir():
        console.print(f"   ⚠ Model directory not found: {models_dir}", style="yellow")
        all_checks_passed = False
    else:
        present, missing = _coverage(ALL_NAMES, models_dir)
        console.print(
            f"   ✓ {len(present)}/{len(ALL_NAMES)} relation model(s) found", style="green"
        )
        if missing:
            console.print(f"   ⚠ Missing: {', '.join(missing)}", style="yellow")
            all_checks_passed = False

    console.print()
    if all_checks_passed:
        console.print("✓ All checks passed", style="green")
    else:
        console.print("⚠ Some checks reported problems", style="yellow")
        sys.exit(1)


if __name__ == "__main__":
    app()
