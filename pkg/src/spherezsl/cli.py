"""Command-line interface: one subcommand per pipeline stage plus the full
run, the prediction service, and the synthetic benchmark generator.

Every stage subcommand drives the same file-to-file stage functions the full
pipeline uses, so running stages individually reproduces a pipeline run
exactly. Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .benchmark import BenchmarkGeometryError, SyntheticBenchmarkSpec, make_benchmark
from .pipeline import (ConfigError, PipelineConfig, PipelineStageError, RunContext,
                       check_stage_prerequisites, run_pipeline, stage_flpt,
                       stage_generate, stage_recover, stage_train_eval)
from .service import serve as serve_service
from .store import EmbeddingFormatError

EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_VALIDATION_ERRORS = (ConfigError, EmbeddingFormatError, BenchmarkGeometryError,
                      ValueError, KeyError, FileNotFoundError)


def _apply_overrides(raw: dict, sets: tuple[str, ...]) -> dict:
    """Apply --set key=value pairs (dotted paths, JSON-parsed values)."""
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = parsed
    return raw


def _load_config(config_path, sets, **flag_overrides) -> PipelineConfig:
    if config_path:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
    else:
        raw = {}
    raw = _apply_overrides(raw, sets or ())
    for key, value in flag_overrides.items():
        if value is None:
            continue
        if key in ("weights", "text_features", "token_table", "splits", "test_features"):
            raw.setdefault("paths", {})[key] = value
        elif key == "lam":
            raw.setdefault("recovery", {})["lam"] = value
        elif key == "alpha":
            raw.setdefault("flpt", {})["alpha"] = value
        elif key == "samples_per_class":
            raw.setdefault("recovery", {})["samples_per_class"] = value
        elif key == "per_class":
            raw["per_class_synthesis"] = value
        elif key == "backend":
            raw.setdefault("generator", {})["backend"] = value
        else:
            raw[key] = value
    return PipelineConfig.from_dict(raw)


def _run_stages(cfg: PipelineConfig, wanted: list[str]) -> None:
    cfg.validate(stages=wanted)
    check_stage_prerequisites(cfg, wanted)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    ctx = RunContext(cfg)
    table = {"recovery": stage_recover, "flpt": stage_flpt,
             "generate": stage_generate, "train-eval": stage_train_eval}
    for name in wanted:
        ctx.start(name)
        try:
            out = table[name](ctx)
        except Exception as exc:
            ctx.finish(status="failed")
            ctx.write_manifest()
            raise PipelineStageError(name, exc) from exc
        ctx.finish()
        if name == "train-eval":
            click.echo(out.to_json(), nl=False)
    ctx.write_manifest()


_CONFIG_OPTS = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="Pipeline config JSON; flags override it."),
    click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                 help="Override any config key by dotted path."),
    click.option("--out-dir", default=None, help="Run directory for artifacts."),
    click.option("--seed", type=int, default=None),
]


def _with(opts):
    def wrap(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn
    return wrap


@click.group()
def cli():
    """Data-free zero-shot learning over embedding files."""


@cli.command("make-benchmark")
@click.option("--out-dir", required=True)
@click.option("--dim", type=int, default=32, show_default=True)
@click.option("--base-classes", type=int, default=10, show_default=True)
@click.option("--new-classes", type=int, default=5, show_default=True)
@click.option("--kappa", type=float, default=50.0, show_default=True)
@click.option("--samples-per-class", type=int, default=200, show_default=True)
@click.option("--test-samples-per-class", type=int, default=100, show_default=True)
@click.option("--noise-deg", type=float, default=10.0, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
def make_benchmark_cmd(out_dir, dim, base_classes, new_classes, kappa,
                       samples_per_class, test_samples_per_class, noise_deg, seed):
    """Generate the synthetic ground-truth benchmark dataset."""
    spec = SyntheticBenchmarkSpec(
        dim=dim, base_classes=base_classes, new_classes=new_classes, kappa=kappa,
        samples_per_class=samples_per_class, test_samples_per_class=test_samples_per_class,
        noise_angle_deg=noise_deg, seed=seed)
    paths = make_benchmark(spec, out_dir)
    click.echo(json.dumps({
        "out_dir": str(paths.out_dir),
        "features_train": str(paths.features_train),
        "features_test": str(paths.features_test),
        "text_features": str(paths.text_features),
        "token_table": str(paths.token_table),
        "server_weights": str(paths.server_weights),
        "splits": str(paths.splits),
    }, indent=2))


@cli.command("serve")
@click.option("--weights", required=True, type=click.Path(exists=True))
@click.option("--port", type=int, default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--score-mode", type=click.Choice(["cosine", "softmax"]), default="cosine",
              show_default=True)
@click.option("--batch-limit", type=int, default=128, show_default=True)
def serve_cmd(weights, port, host, score_mode, batch_limit):
    """Serve the protected classifier's prediction API (runs until interrupted)."""
    click.echo(f"serving {weights} on {host}:{port} (score mode: {score_mode})", err=True)
    serve_service(weights, port=port, host=host, score_mode=score_mode,
                  batch_limit=batch_limit)


@cli.command("recover")
@_with(_CONFIG_OPTS)
@click.option("--mode", type=click.Choice(["white", "black"]), default=None)
@click.option("--weights", type=click.Path(), default=None)
@click.option("--server-url", default=None)
@click.option("--text-features", type=click.Path(), default=None)
@click.option("--splits", type=click.Path(), default=None)
@click.option("--lambda", "lam", type=float, default=None)
@click.option("--samples-per-class", type=int, default=None)
def recover_cmd(config_path, sets, out_dir, seed, mode, weights, server_url,
                text_features, splits, lam, samples_per_class):
    """Stage 1: recover virtual base-class features."""
    cfg = _load_config(config_path, sets, out_dir=out_dir, seed=seed,
                       mode={"white": "white-box", "black": "black-box"}.get(mode),
                       weights=weights, server_url=server_url,
                       text_features=text_features, splits=splits, lam=lam,
                       samples_per_class=samples_per_class)
    _run_stages(cfg, ["recovery"])
    click.echo(str(cfg.artifact("virtual_base.emb1")))


@cli.command("flpt")
@_with(_CONFIG_OPTS)
@click.option("--token-table", type=click.Path(), default=None)
@click.option("--text-features", type=click.Path(), default=None)
@click.option("--splits", type=click.Path(), default=None)
@click.option("--alpha", type=float, default=None)
def flpt_cmd(config_path, sets, out_dir, seed, token_table, text_features, splits, alpha):
    """Stage 2: feature-language prompt tuning over the recovered features."""
    cfg = _load_config(config_path, sets, out_dir=out_dir, seed=seed,
                       token_table=token_table, text_features=text_features,
                       splits=splits, alpha=alpha)
    _run_stages(cfg, ["flpt"])
    click.echo(str(cfg.artifact("enhanced_base.emb1")))


@cli.command("generate")
@_with(_CONFIG_OPTS)
@click.option("--splits", type=click.Path(), default=None)
@click.option("--backend", type=click.Choice(["cvae", "cgan"]), default=None)
@click.option("--per-class", type=int, default=None)
def generate_cmd(config_path, sets, out_dir, seed, splits, backend, per_class):
    """Stage 3: train the conditional generator and synthesize new-class features."""
    cfg = _load_config(config_path, sets, out_dir=out_dir, seed=seed, splits=splits,
                       backend=backend, per_class=per_class)
    _run_stages(cfg, ["generate"])
    click.echo(str(cfg.artifact("synthesized_new.emb1")))


@cli.command("train-eval")
@_with(_CONFIG_OPTS)
@click.option("--splits", type=click.Path(), default=None)
@click.option("--test-features", type=click.Path(), default=None)
@click.option("--protocol", type=click.Choice(["gzsl", "base-new"]), default=None)
def train_eval_cmd(config_path, sets, out_dir, seed, splits, test_features, protocol):
    """Stage 4: train the final classifier and print the evaluation report."""
    cfg = _load_config(config_path, sets, out_dir=out_dir, seed=seed, splits=splits,
                       test_features=test_features, protocol=protocol)
    _run_stages(cfg, ["train-eval"])


@cli.command("run")
@_with(_CONFIG_OPTS)
@click.option("--mode", type=click.Choice(["white", "black"]), default=None)
@click.option("--server-url", default=None)
@click.option("--protocol", type=click.Choice(["gzsl", "base-new"]), default=None)
@click.option("--lambda", "lam", type=float, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--samples-per-class", type=int, default=None)
@click.option("--per-class", type=int, default=None)
@click.option("--backend", type=click.Choice(["cvae", "cgan"]), default=None)
def run_cmd(config_path, sets, out_dir, seed, mode, server_url, protocol, lam, alpha,
            samples_per_class, per_class, backend):
    """Run the full pipeline: recover, tune, generate, train, evaluate."""
    cfg = _load_config(config_path, sets, out_dir=out_dir, seed=seed,
                       mode={"white": "white-box", "black": "black-box"}.get(mode),
                       server_url=server_url, protocol=protocol, lam=lam, alpha=alpha,
                       samples_per_class=samples_per_class, per_class=per_class,
                       backend=backend)
    result = run_pipeline(cfg)
    click.echo(result.report.to_json(), nl=False)


def main(argv=None) -> int:
    """Entry point mapping failures to the documented exit codes."""
    click.UsageError.exit_code = EXIT_VALIDATION
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except _VALIDATION_ERRORS as exc:
        click.echo(f"validation error: {exc}", err=True)
        return EXIT_VALIDATION
    except PipelineStageError as exc:
        click.echo(f"runtime error: {exc}", err=True)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        click.echo(f"runtime error: {exc}", err=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
