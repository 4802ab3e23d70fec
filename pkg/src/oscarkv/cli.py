"""``oscarkv`` command line: data generation, profiling, error studies, cost tables, simulation.

Every command writes CSV with a fixed header (or JSON with ``--json``) to
stdout or ``--out``. When ``--out`` is given a sidecar ``<out>.manifest.json``
records the command, the full configuration, the seed, the package version
and timestamps; the data file itself carries no timestamps, so identical
flags give byte-identical outputs. Exit status is 0 on success, 2 on invalid
input and 1 on internal errors.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import sys
import time
from pathlib import Path

import click

from . import __version__
from .analysis import ERROR_COLUMNS, TNI_COLUMNS, artifact_demo, error_study, tni_profile
from .cache import METHODS as PIPELINE_METHODS, SCALINGS, PipelineConfig
from .costmodel import COST_COLUMNS, METHODS as COST_METHODS, CostConfig, cost_table
from .datagen import FormatError, TniSpec, generate, generate_states, read_file, write_file
from .pipeline import simulate

SIMULATE_COLUMNS = ("method", "bits", "group", "residual", "scaling", "seed", "prefill",
                    "decode_steps", "output_mse", "logit_mse", "packed_tokens",
                    "residual_tokens", "flushes", "total_bits", "fp64_bits")


class _Abort(click.ClickException):
    exit_code = 1


def _guard(fn):
    """Map library validation errors to exit 2 and anything unexpected to exit 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (ValueError, FormatError, OSError) as exc:
            raise click.UsageError(str(exc)) from exc
        except Exception as exc:  # noqa: BLE001
            raise _Abort(f"internal error: {type(exc).__name__}: {exc}") from exc
    return wrapper


def _int_list(text: str | None) -> tuple[int, ...]:
    if text is None or not text.strip():
        return ()
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from exc


def _blocks(values) -> tuple[tuple[int, int, float], ...]:
    out = []
    for v in values:
        parts = v.split(":")
        if len(parts) not in (2, 3):
            raise click.BadParameter(f"modality block must be START:END[:SCALE], got {v!r}")
        try:
            out.append((int(parts[0]), int(parts[1]), float(parts[2]) if len(parts) == 3 else 1.0))
        except ValueError as exc:
            raise click.BadParameter(f"bad modality block {v!r}") from exc
    return tuple(out)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _json_text(header, rows, extra: dict | None = None) -> str:
    doc = {"columns": list(header), "rows": [dict(zip(header, r)) for r in rows]}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _write_manifest(out: Path, command: str, config: dict, seed, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "outputs": [str(out)],
    }
    Path(f"{out}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _emit(text: str, out: str | None, command: str, config: dict, seed, started: float) -> None:
    if out is None:
        click.echo(text, nl=False)
        return
    path = Path(out)
    path.write_text(text)
    _write_manifest(path, command, config, seed, started)


def _table(header, rows, as_json, out, command, config, seed, started):
    text = _json_text(header, rows, {"manifest": f"{out}.manifest.json"} if out else None) \
        if as_json else _csv_text(header, rows)
    _emit(text, out, command, config, seed, started)


seed_option = click.option("--seed", type=int, default=0, show_default=True, envvar="OSCAR_SEED",
                           help="RNG seed (defaults to $OSCAR_SEED, then 0).")
out_option = click.option("--out", type=click.Path(dir_okay=False), default=None,
                          help="Output file (stdout if omitted); writes <out>.manifest.json too.")
json_option = click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of CSV.")


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="oscarkv")
def cli():
    """Rotated, norm-scaled low-bit KV-cache quantization toolkit."""


def _spec_options(fn):
    opts = [
        click.option("--seq", type=int, default=256, show_default=True, help="Tokens S."),
        click.option("--heads", type=int, default=4, show_default=True, help="Heads H."),
        click.option("--head-dim", type=int, default=128, show_default=True, help="Head dimension d_h."),
        click.option("--outlier-channels", default="5,37,70,101", show_default=True,
                     help="Comma-separated outlier channel indices."),
        click.option("--outlier-factor", type=float, default=20.0, show_default=True,
                     help="Offset magnitude on outlier channels."),
        click.option("--sink-tokens", default="0,45,99,160,222", show_default=True,
                     help="Comma-separated low-norm token indices."),
        click.option("--sink-factor", type=float, default=0.01, show_default=True,
                     help="Sink norm relative to the median regular token."),
        click.option("--heavy-tokens", default="", help="Comma-separated large-norm token indices."),
        click.option("--heavy-factor", type=float, default=4.0, show_default=True,
                     help="Row multiplier for heavy tokens."),
        click.option("--modality-block", "modality_block", multiple=True,
                     help="START:END[:SCALE] token range rescaled by SCALE; repeatable."),
        click.option("--norm-spread", type=float, default=0.0, show_default=True,
                     help="Log-normal spread of per-token norms."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _make_spec(seq, heads, head_dim, outlier_channels, outlier_factor, sink_tokens, sink_factor,
               heavy_tokens, heavy_factor, modality_block, norm_spread, seed) -> TniSpec:
    return TniSpec(seq_len=seq, num_heads=heads, head_dim=head_dim,
                   outlier_channels=_int_list(outlier_channels), outlier_factor=outlier_factor,
                   sink_tokens=tuple(t for t in _int_list(sink_tokens)),
                   sink_factor=sink_factor, heavy_tokens=_int_list(heavy_tokens),
                   heavy_factor=heavy_factor, modality_blocks=_blocks(modality_block),
                   norm_spread=norm_spread, seed=seed)


@cli.command("generate")
@_spec_options
@click.option("--state", type=click.Choice(["q", "k", "v"]), default="k", show_default=True,
              help="Which synthetic state to write.")
@click.option("--dtype", type=click.Choice(["f32", "f64"]), default="f64", show_default=True)
@seed_option
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="KVT1 file to write.")
@_guard
def cmd_generate(state, dtype, seed, out, **spec_kwargs):
    """Write a synthetic token-norm-imbalance tensor as a KVT1 file.

    The file is b"KVT1", a one-line JSON header (shape, dtype, layout,
    modality_blocks, outlier_tokens, annotations) and a little-endian body
    in [token, head, channel] order. Q and V share the K seed; V carries no
    outlier channels.
    """
    started = time.time()
    spec = _make_spec(seed=seed, **spec_kwargs)
    q, k, v, ann = generate_states(spec)
    x = {"q": q, "k": k, "v": v}[state]
    ann = dict(ann, state=state, manifest=f"{out}.manifest.json")
    write_file(out, x, ann, dtype=dtype)
    _write_manifest(Path(out), "generate", dict(spec.to_dict(), state=state, dtype=dtype),
                    seed, started)


@cli.command("profile")
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--state", type=click.Choice(["q", "k", "v"]), default="k", show_default=True,
              help="State tag written to the report.")
@out_option
@json_option
@_guard
def cmd_profile(input_path, state, out, as_json):
    """Per-token statistics of head-wise L2 norms of a KVT1 tensor.

    CSV columns: token,state,min,median,max,mean -- one row per token, the
    statistics taken over the H head norms of that token.
    """
    started = time.time()
    x, _ = read_file(input_path)
    prof = tni_profile(x, state)
    _table(TNI_COLUMNS, prof.rows(), as_json, out, "profile",
           {"input": str(input_path), "state": prof.state}, None, started)


@cli.command("error-study")
@click.argument("input_path", required=False, type=click.Path(exists=True, dir_okay=False))
@click.option("--synthetic", is_flag=True, help="Study a generated K tensor instead of INPUT_PATH.")
@click.option("--bits", default="2,3,4", show_default=True, help="Comma-separated bit widths.")
@click.option("--group", type=int, default=32, show_default=True, help="Group size G.")
@click.option("--outlier-tokens", default=None,
              help="Comma-separated outlier tokens (default: sinks and heavy tokens from the "
                   "file annotations or the synthetic spec).")
@_spec_options
@seed_option
@out_option
@json_option
@_guard
def cmd_error_study(input_path, synthetic, bits, group, outlier_tokens, seed, out, as_json,
                    **spec_kwargs):
    """Round-to-nearest reconstruction error, mean squared error x 100.

    CSV columns: bits,condition,axis,mse_x100. condition is one of
    with-outliers, without-outliers, mixed-modality, single-modality (the
    last two only when modality blocks exist); axis is per-channel-k
    (groups of G tokens per channel) or per-token-v (groups of G channels
    per token). Outlier conditions cover only the token groups that
    contain outlier tokens.
    """
    started = time.time()
    if synthetic == (input_path is not None):
        raise click.UsageError("give exactly one of INPUT_PATH or --synthetic")
    if synthetic:
        spec = _make_spec(seed=seed, **spec_kwargs)
        x, ann = generate(spec)
        blocks = spec.modality_blocks
        config = {"synthetic": spec.to_dict()}
    else:
        x, ann = read_file(input_path)
        blocks = tuple(tuple(b) for b in ann.get("modality_blocks", []))
        config = {"input": str(input_path)}
    outliers = _int_list(outlier_tokens) if outlier_tokens is not None \
        else tuple(ann.get("outlier_tokens", []))
    bit_list = _int_list(bits)
    report = error_study(x, bits=bit_list, group_size=group, outlier_tokens=outliers,
                         modality_blocks=blocks)
    config.update(bits=list(bit_list), group=group, outlier_tokens=list(outliers))
    _table(ERROR_COLUMNS, report.rows(), as_json, out, "error-study", config,
           seed if synthetic else None, started)


@cli.command("demo-artifact")
@click.option("--bits", type=int, default=2, show_default=True, help="Bit width for the step.")
@json_option
@_guard
def cmd_demo_artifact(bits, as_json):
    """Scale a channel-outlier token and a small uniform token to unit norm.

    Prints both norms, the scaling factors alpha and beta, the scaled
    tokens and, per non-outlier channel, the range before and after the
    small token joins plus the resulting step inflation.
    """
    demo = artifact_demo(bits=bits)
    if as_json:
        doc = {"a": demo.a.tolist(), "b": demo.b.tolist(), "norm_a": demo.norm_a,
               "norm_b": demo.norm_b, "alpha": demo.alpha, "beta": demo.beta,
               "a_scaled": demo.a_scaled.tolist(), "b_scaled": demo.b_scaled.tolist(),
               "bits": demo.bits, "step_inflation": demo.step_inflation.tolist(),
               "condition_holds": demo.condition_holds}
        click.echo(json.dumps(doc, indent=2, sort_keys=True))
    else:
        click.echo("\n".join(demo.lines()))


@cli.command("cost")
@click.option("--d", "d", type=int, default=4096, show_default=True, help="Hidden dimension.")
@click.option("--h", "h", type=int, default=128, show_default=True, help="Head dimension.")
@click.option("--L", "L", type=int, default=10_000, show_default=True, help="Sequence length.")
@click.option("--lookup-weight", type=float, default=5.0, show_default=True,
              help="Cost of one table lookup in arithmetic units.")
@click.option("--methods", default=",".join(COST_METHODS), show_default=True,
              help="Comma-separated methods.")
@out_option
@json_option
@_guard
def cmd_cost(d, h, L, lookup_weight, methods, out, as_json):
    """Effective key-processing cost in millions of units.

    CSV columns: method,prefill_munits,decode_munits -- prefill over L
    tokens and one decode step over an L-token cache, rounded to 0.1M.
    """
    started = time.time()
    cfg = CostConfig(d=d, h=h, L=L, lookup_weight=lookup_weight)
    names = [m.strip() for m in methods.split(",") if m.strip()]
    rows = [b.row() for b in cost_table(names, cfg)]
    _table(COST_COLUMNS, rows, as_json, out, "cost",
           {"d": d, "h": h, "L": L, "lookup_weight": lookup_weight, "methods": names},
           None, started)


@cli.command("simulate")
@click.option("--method", type=click.Choice(PIPELINE_METHODS), default="oscar", show_default=True)
@click.option("--bits", type=int, default=2, show_default=True)
@click.option("--group", type=int, default=32, show_default=True, help="Group size G.")
@click.option("--residual", type=int, default=128, show_default=True, help="Residual length R.")
@click.option("--seq", type=int, default=256, show_default=True, help="Prefill tokens.")
@click.option("--decode-steps", type=int, default=32, show_default=True)
@click.option("--scaling", type=click.Choice(SCALINGS), default="l2", show_default=True)
@click.option("--heads", type=int, default=4, show_default=True)
@click.option("--head-dim", type=int, default=128, show_default=True)
@click.option("--sink-every", type=int, default=32, show_default=True,
              help="Place a low-norm sink token every N tokens (0 for none).")
@click.option("--query-scale", type=float, default=0.03, show_default=True,
              help="Multiplier on synthetic queries (inverse softmax temperature).")
@seed_option
@out_option
@json_option
@_guard
def cmd_simulate(method, bits, group, residual, seq, decode_steps, scaling, heads, head_dim,
                 sink_every, query_scale, seed, out, as_json):
    """Prefill then decode synthetic Q/K/V and compare with full precision.

    CSV columns: method,bits,group,residual,scaling,seed,prefill,
    decode_steps,output_mse,logit_mse,packed_tokens,residual_tokens,
    flushes,total_bits,fp64_bits. MSEs are over the decode steps' per-head
    attention outputs and logits; the last two columns are the cache memory
    ledger.
    """
    started = time.time()
    if seq < 0 or decode_steps < 0:
        raise click.UsageError("--seq and --decode-steps must be non-negative")
    total = seq + decode_steps
    if total == 0:
        raise click.UsageError("nothing to simulate: --seq and --decode-steps are both 0")
    sinks = tuple(range(0, total, sink_every)) if sink_every > 0 else ()
    spec = TniSpec(seq_len=total, num_heads=heads, head_dim=head_dim, sink_tokens=sinks,
                   outlier_channels=tuple(c for c in TniSpec.outlier_channels if c < head_dim),
                   seed=seed)
    cfg = PipelineConfig(method=method, bits=bits, group_size=group, residual_len=residual,
                         scaling=scaling, head_dim=head_dim, num_heads=heads)
    q, k, v, _ = generate_states(spec, query_scale=query_scale)
    res = simulate(q, k, v, cfg, prefill_len=seq)
    row = (method, bits, group, residual, scaling, seed, seq, decode_steps,
           res.output_mse, res.logit_mse, res.packed_tokens, res.residual_tokens, res.flushes,
           res.memory["total_bits"], res.memory["fp64_equivalent_bits"])
    _table(SIMULATE_COLUMNS, [row], as_json, out, "simulate",
           {"pipeline": cfg.to_dict(), "data": spec.to_dict(), "query_scale": query_scale,
            "prefill": seq, "decode_steps": decode_steps}, seed, started)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="oscarkv", standalone_mode=True)
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
