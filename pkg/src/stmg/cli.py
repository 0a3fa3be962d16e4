"""Command-line interface: a thin client over the service layer.

Commands run the service handlers in-process by default so runs are
deterministic and self-contained; `--server URL` sends the same request to a
running service instead. Exit codes: 0 success, 2 config/validation error,
3 runtime/numeric failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
from pydantic import ValidationError

from .config import (
    AggregationSettings,
    ConfigError,
    DatasetConfig,
    ExperimentConfig,
    PolicySettings,
    load_config,
)
from .service import handlers, schemas

POLICY_ALIASES = {"da": "distortion_aware", "fixed": "fixed", "full": "always_full", "pfp": "per_frame_pruning"}


def _dispatch(server: str | None, route: str, request, response_model):
    """Call a handler in-process, or POST to a remote service."""
    if server is None:
        fn = {
            "gendata": handlers.gendata,
            "train": handlers.train,
            "eval": handlers.evaluate,
            "simulate": handlers.simulate,
            "plot": handlers.plot,
        }[route]
        return fn(request)
    import httpx

    resp = httpx.post(f"{server.rstrip('/')}/{route}", json=request.model_dump(mode="json"), timeout=None)
    if resp.status_code >= 500:
        raise RuntimeError(f"server error {resp.status_code}: {resp.text}")
    if resp.status_code >= 400:
        raise ConfigError(f"request rejected ({resp.status_code}): {resp.text}")
    return response_model.model_validate(resp.json())


def _load_experiment_config(config_path: str | None) -> ExperimentConfig:
    return load_config(config_path) if config_path else ExperimentConfig()


def _update_config(config: ExperimentConfig, **nested) -> ExperimentConfig:
    data = config.model_dump()
    for dotted, value in nested.items():
        if value is None:
            continue
        parts = dotted.split(".")
        node = data
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return ExperimentConfig.model_validate(data)


def _parse_agg(agg: str | None) -> AggregationSettings | None:
    if agg is None:
        return None
    if agg.startswith("fixed:"):
        return AggregationSettings(mode="fixed", fixed_value=float(agg.split(":", 1)[1]))
    if agg == "fixed":
        return AggregationSettings(mode="fixed")
    if agg in ("stmg", "uniform", "random"):
        return AggregationSettings(mode=agg)
    raise ConfigError(f"unknown aggregation mode {agg!r} (expected stmg, fixed:V, uniform or random)")


def _on_off(_ctx, _param, value):
    if value is None:
        return None
    return value == "on"


@click.group()
def cli():
    """Spatial-temporal mask generation lab."""


server_option = click.option("--server", default=None, help="Run against a remote service URL instead of in-process.")
config_option = click.option("--config", "config_path", type=click.Path(), default=None, help="Experiment config JSON.")
out_option = click.option("--out", "out_dir", default=None, help="Output directory (relative paths resolve against $STMG_OUTPUT_ROOT).")


@cli.command()
@config_option
@out_option
@click.option("--seed", type=int, default=None, help="Override the dataset seed.")
@click.option("--frames", type=int, default=None, help="Override the number of frames.")
@click.option("--objects", type=int, default=None, help="Override the number of objects.")
@click.option("--speed", type=float, default=None, help="Override the object speed (pixels/frame).")
@server_option
def gendata(config_path, out_dir, seed, frames, objects, speed, server):
    """Generate a synthetic dataset directory (frames + labels + manifest)."""
    config = _load_experiment_config(config_path)
    ds = config.dataset.model_dump()
    for key, value in (("seed", seed), ("num_frames", frames), ("num_objects", objects), ("speed", speed)):
        if value is not None:
            ds[key] = value
    req = schemas.GendataRequest(config=DatasetConfig.model_validate(ds), out_dir=out_dir or "dataset")
    resp = _dispatch(server, "gendata", req, schemas.GendataResponse)
    click.echo(resp.model_dump_json(indent=2))


@cli.command()
@config_option
@out_option
@click.option("--seed", type=int, default=None, help="Override experiment and dataset seeds.")
@click.option("--dbb-bias", type=click.Choice(["on", "off"]), default=None, callback=_on_off,
              help="Enable/disable the distortion-bias gate during training.")
@server_option
def train(config_path, out_dir, seed, dbb_bias, server):
    """Train backbone + mask generator; writes checkpoint and metrics log."""
    config = _load_experiment_config(config_path)
    config = _update_config(
        config,
        **{"seed": seed, "dataset.seed": seed, "maskgen.dbb_bias": dbb_bias},
    )
    req = schemas.TrainRequest(config=config, out_dir=out_dir)
    resp = _dispatch(server, "train", req, schemas.TrainResponse)
    click.echo(resp.model_dump_json(indent=2))


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(), help="Checkpoint produced by train.")
@config_option
@out_option
@click.option("--seed", type=int, default=None, help="Held-out evaluation sequence seed.")
@click.option("--frames", type=int, default=None, help="Evaluation sequence length.")
@click.option("--policy", type=click.Choice(sorted(POLICY_ALIASES)), default=None,
              help="da=distortion-aware, fixed=every-R key, full=always full, pfp=per-frame pruning.")
@click.option("--fixed-r", type=int, default=None, help="Key-frame period R for --policy fixed.")
@click.option("--gamma1", type=float, default=None, help="Post-key threshold scale.")
@click.option("--gamma2", type=float, default=None, help="Post-non-key threshold scale.")
@click.option("--dbb-bias", type=click.Choice(["on", "off"]), default=None, callback=_on_off)
@click.option("--agg", default=None, help="Aggregation: stmg, fixed:V, uniform, random.")
@click.option("--dump-masks/--no-dump-masks", default=None, help="Write mask/prediction images.")
@server_option
def eval_cmd(checkpoint, config_path, out_dir, seed, frames, policy, fixed_r, gamma1, gamma2,
             dbb_bias, agg, dump_masks, server):
    """Evaluate a checkpoint on a held-out sequence; writes per-frame log + summary."""
    policy_settings = None
    if policy is not None or fixed_r is not None or gamma1 is not None or gamma2 is not None:
        base = PolicySettings()
        policy_settings = PolicySettings(
            kind=POLICY_ALIASES[policy] if policy else base.kind,
            gamma1=gamma1 if gamma1 is not None else base.gamma1,
            gamma2=gamma2 if gamma2 is not None else base.gamma2,
            refresh_period=fixed_r if fixed_r is not None else base.refresh_period,
        )
    check_hash = load_config(config_path).config_hash() if config_path else None
    req = schemas.EvalRequest(
        checkpoint=checkpoint,
        out_dir=out_dir,
        policy=policy_settings,
        aggregation=_parse_agg(agg),
        dbb_bias=dbb_bias,
        eval_seed=seed,
        num_frames=frames,
        dump_masks=dump_masks,
        config_check_hash=check_hash,
    )
    resp = _dispatch(server, "eval", req, schemas.EvalResponse)
    click.echo(json.dumps(resp.summary, indent=2))
    click.echo(f"run dir: {resp.run_dir}", err=True)


@cli.command()
@click.option("--trace", "trace_path", required=True, type=click.Path(),
              help="Plain-text file with one non-negative magnitude per line ('-' for stdin).")
@click.option("--gamma1", type=float, default=2.0, show_default=True)
@click.option("--gamma2", type=float, default=0.95, show_default=True)
@click.option("--out", "out_path", default=None, help="Also write the trace as JSON.")
@server_option
def simulate(trace_path, gamma1, gamma2, out_path, server):
    """Run the distortion-aware schedule on a magnitude trace.

    Prints one line per step: "<index> <role> <threshold>".
    """
    text = sys.stdin.read() if trace_path == "-" else Path(trace_path).read_text()
    try:
        magnitudes = [float(line) for line in text.split()]
    except ValueError as e:
        raise ConfigError(f"trace file must contain numbers only: {e}") from e
    if not magnitudes:
        raise ConfigError("trace file is empty")
    req = schemas.SimulateRequest(magnitudes=magnitudes, gamma1=gamma1, gamma2=gamma2)
    resp = _dispatch(server, "simulate", req, schemas.SimulateResponse)
    for step in resp.trace:
        click.echo(f"{step.index} {step.role} {step.threshold!r}")
    if out_path:
        out = handlers.resolve_out(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps([s.model_dump() for s in resp.trace], indent=2))


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True)
@click.option("--out", "out_dir", required=True, help="Directory for emitted figures.")
@click.option("--mask-panels-from", default=None, help="Eval run dir to source mask panels from.")
@server_option
def plot(run_dirs, out_dir, mask_panels_from, server):
    """Emit the FLOPs-vs-mIoU scatter (and mask panels when dumps exist)."""
    req = schemas.PlotRequest(run_dirs=list(run_dirs), out_dir=out_dir, mask_panels_from=mask_panels_from)
    resp = _dispatch(server, "plot", req, schemas.PlotResponse)
    click.echo(resp.model_dump_json(indent=2))


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


def main():
    try:
        cli(standalone_mode=False)
    except click.exceptions.Exit as e:
        sys.exit(e.exit_code)
    except click.ClickException as e:
        e.show()
        sys.exit(2)
    except click.Abort:
        sys.exit(130)
    except (ConfigError, ValidationError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    except FileNotFoundError as e:
        click.echo(f"missing input: {e}", err=True)
        sys.exit(2)
    except Exception as e:  # runtime/numeric failures
        click.echo(f"runtime error: {e}", err=True)
        sys.exit(3)


if __name__ == "__main__":
    main()
