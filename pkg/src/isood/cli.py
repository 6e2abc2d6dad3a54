"""``isood`` command line: a thin client over the benchmark service.

Without ``--server`` (or ISOOD_SERVER) the service app runs in-process behind
an ASGI transport, so single-machine use needs no running daemon; with it,
the same requests go to a remote instance over HTTP.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import asyncio
import json
import sys
from typing import Any, Optional

import click
import httpx

_EXIT_BY_KIND = {"validation": 1, "io": 2, "numerical": 3}


def _call(ctx: click.Context, path: str, payload: dict[str, Any]) -> dict[str, Any]:
    server: Optional[str] = ctx.obj.get("server")
    if server:
        resp = httpx.post(server.rstrip("/") + path, json=payload, timeout=None)
    else:
        from .service.app import create_app

        async def _go() -> httpx.Response:
            transport = httpx.ASGITransport(app=create_app())
            async with httpx.AsyncClient(
                transport=transport, base_url="http://isood.local", timeout=None
            ) as client:
                return await client.post(path, json=payload)

        resp = asyncio.run(_go())

    try:
        body = resp.json()
    except json.JSONDecodeError:
        click.echo(f"error: unparseable response ({resp.status_code})", err=True)
        sys.exit(2)
    if resp.status_code >= 400:
        kind = "validation"
        message = str(body)
        if isinstance(body, dict) and "error" in body:
            kind = body["error"].get("kind", "validation")
            message = body["error"].get("message", message)
        elif isinstance(body, dict) and "detail" in body:
            message = json.dumps(body["detail"])
        click.echo(f"error ({kind}): {message}", err=True)
        sys.exit(_EXIT_BY_KIND.get(kind, 1))
    return body


def _emit(body: dict[str, Any]) -> None:
    click.echo(json.dumps(body, indent=2, sort_keys=True))


@click.group()
@click.option("--server", envvar="ISOOD_SERVER", default=None,
              help="Base URL of a running service; defaults to in-process execution.")
@click.pass_context
def main(ctx: click.Context, server: Optional[str]) -> None:
    """Incremental-shift OOD benchmark toolkit."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Run the benchmark service."""
    import uvicorn

    uvicorn.run("isood.service.app:app", host=host, port=port)


@main.command("train-laid")
@click.option("--text-features", required=True, help="Text feature store (.iseb).")
@click.option("--corpus-spec", required=True, help="Triplet corpus spec JSON.")
@click.option("--out", required=True, help="Output transform file.")
@click.option("--alpha", default=0.2, show_default=True, type=float)
@click.option("--learning-rate", default=0.01, show_default=True, type=float)
@click.option("--epochs", default=200, show_default=True, type=int)
@click.option("--batch-size", default=256, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--orth-weight", default=1.0, show_default=True, type=float)
@click.pass_context
def train_laid(ctx: click.Context, text_features: str, corpus_spec: str, out: str,
               alpha: float, learning_rate: float, epochs: int, batch_size: int,
               seed: int, orth_weight: float) -> None:
    """Train the semantic/covariate decomposition transform on text triplets."""
    _emit(_call(ctx, "/v1/train-laid", {
        "text_features": text_features, "corpus_spec": corpus_spec, "out": out,
        "alpha": alpha, "learning_rate": learning_rate, "epochs": epochs,
        "batch_size": batch_size, "seed": seed, "orth_weight": orth_weight,
    }))


@main.command()
@click.option("--test", required=True, help="Test feature store (.iseb).")
@click.option("--id", "id_", required=True, help="ID feature store (.iseb).")
@click.option("--w", required=True, help="Trained transform file.")
@click.option("--k", default=10, show_default=True, type=int)
@click.option("--out", required=True, help="Output degrees JSONL.")
@click.pass_context
def measure(ctx: click.Context, test: str, id_: str, w: str, k: int, out: str) -> None:
    """Measure per-sample semantic/covariate shift degrees."""
    _emit(_call(ctx, "/v1/measure", {"test": test, "id": id_, "w": w, "k": k, "out": out}))


@main.command()
@click.option("--degrees", required=True, help="Degrees JSONL from 'measure'.")
@click.option("--levels", default=8, show_default=True, type=int)
@click.option("--na-threshold", default=100, show_default=True, type=int)
@click.option("--test", default=None, help="Optional test store fixing the id universe.")
@click.option("--out", required=True, help="Output subset index JSON.")
@click.pass_context
def divide(ctx: click.Context, degrees: str, levels: int, na_threshold: int,
           test: Optional[str], out: str) -> None:
    """Derive per-axis intervals and divide the test ids into level cells."""
    _emit(_call(ctx, "/v1/divide", {
        "degrees": degrees, "levels": levels, "na_threshold": na_threshold,
        "test": test, "out": out,
    }))


@main.command()
@click.option("--outputs", required=True, help="Classifier outputs directory.")
@click.option("--method", required=True,
              type=click.Choice(["msp", "odin", "energy", "mds", "knn", "gradnorm",
                                 "dice", "ash", "rankfeat"]))
@click.option("--param", "params", multiple=True, metavar="K=V",
              help="Scorer parameter override, repeatable.")
@click.option("--fit-outputs", default=None, help="Outputs supplying training statistics.")
@click.option("--out", required=True, help="Output score JSONL.")
@click.pass_context
def score(ctx: click.Context, outputs: str, method: str, params: tuple[str, ...],
          fit_outputs: Optional[str], out: str) -> None:
    """Score a corpus with one post-hoc OOD detector."""
    parsed: dict[str, Any] = {}
    for kv in params:
        if "=" not in kv:
            click.echo(f"error (validation): --param needs K=V, got {kv!r}", err=True)
            sys.exit(1)
        key, value = kv.split("=", 1)
        try:
            parsed[key] = json.loads(value)
        except json.JSONDecodeError:
            parsed[key] = value
    _emit(_call(ctx, "/v1/score", {
        "outputs": outputs, "method": method, "params": parsed,
        "fit_outputs": fit_outputs, "out": out,
    }))


@main.command("eval")
@click.option("--config", "config_path", required=True, help="Benchmark config JSON.")
@click.pass_context
def eval_cmd(ctx: click.Context, config_path: str) -> None:
    """Run the full benchmark described by a config file."""
    _emit(_call(ctx, "/v1/eval", {"config_path": config_path}))


@main.group("synis-prompts")
def synis_prompts() -> None:
    """Style-template prompt collection tools."""


@synis_prompts.command("render")
@click.option("--labels", "labels_path", required=True, help="Label list file, one per line.")
@click.option("--styles", "styles_path", default=None,
              help="Style template JSON; defaults to the bundled collection.")
@click.option("--out", required=True, help="Output prompt JSONL.")
@click.pass_context
def synis_render(ctx: click.Context, labels_path: str, styles_path: Optional[str], out: str) -> None:
    """Render every style-by-label prompt."""
    _emit(_call(ctx, "/v1/synis/render", {
        "labels_path": labels_path, "styles_path": styles_path, "out": out,
    }))


@synis_prompts.command("manifest")
@click.option("--index", required=True, help="Subset index JSON over prompt ids.")
@click.option("--prompts", required=True, help="Prompt JSONL from 'render'.")
@click.option("--per-subset-target", default=5000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, help="Output generation manifest JSON.")
@click.pass_context
def synis_manifest(ctx: click.Context, index: str, prompts: str, per_subset_target: int,
                   seed: int, out: str) -> None:
    """Export the per-cell generation manifest for an external image generator."""
    _emit(_call(ctx, "/v1/synis/manifest", {
        "index": index, "prompts": prompts, "per_subset_target": per_subset_target,
        "seed": seed, "out": out,
    }))


@main.command()
@click.option("--summary", required=True, help="summary.json from a previous eval.")
@click.option("--out-dir", required=True, help="Directory for the re-emitted report files.")
@click.pass_context
def report(ctx: click.Context, summary: str, out_dir: str) -> None:
    """Re-emit CSV/JSON report files from a saved summary."""
    _emit(_call(ctx, "/v1/report", {"summary": summary, "out_dir": out_dir}))


@main.command()
@click.argument("path")
@click.option("--kind", default="auto", show_default=True,
              type=click.Choice(["auto", "store", "outputs", "matrix", "degrees",
                                 "index", "scores"]))
@click.pass_context
def validate(ctx: click.Context, path: str, kind: str) -> None:
    """Validate an on-disk artifact against its format contract."""
    _emit(_call(ctx, "/v1/validate", {"path": path, "kind": kind}))


if __name__ == "__main__":
    main()
