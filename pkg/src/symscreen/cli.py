"""symscreen command line: synth, ingest, stats, extract, eval, screen,
serve, taxonomy, compact.

Exit codes: 0 success, 1 validation/usage error, 2 runtime or backend
failure. All randomness is seed-controlled (seeds default to 7).
"""

from __future__ import annotations

import json
import os
import sys
import tomllib
from pathlib import Path

import click

from . import evaluate as ev
from . import extract as ex
from . import screen as sc
from .corpus import CorpusError, cohort_stats, ingest, read_gold, write_corpus
from .synth import SynthSpec, synthesize
from .taxonomy import taxonomy

DEFAULT_SEED = 7

_MODEL_ALIASES = {
    "logreg": "logreg",
    "tree": "tree",
    "forest": "forest",
    "svm": "linear_svm",
    "mlp": "mlp",
    "bow": "bow_logreg_baseline",
}


def load_config(path: str | None) -> dict:
    path = path or os.environ.get("SYMSCREEN_CONFIG")
    if not path:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def config_backends(cfg: dict) -> dict[str, ex.BackendConfig]:
    from .service import default_backends

    backends = default_backends()
    for row in cfg.get("backend", []):
        b = ex.BackendConfig(
            backend_id=row["backend_id"],
            kind=row["kind"],
            endpoint=row.get("endpoint"),
            model_name=row.get("model_name", ""),
            char_limit=row.get("char_limit", ex.DEFAULT_CHAR_LIMIT),
            max_retries=row.get("max_retries", 4),
            timeout=row.get("timeout", 30.0),
            parallelism=row.get("parallelism", 1),
            fp_rate=row.get("fp_rate", 0.0),
            fn_rate=row.get("fn_rate", 0.0),
            seed=row.get("seed", DEFAULT_SEED),
        )
        backends[b.backend_id] = b
    return backends


@click.group()
@click.option("--config", "config_path", default=None, help="TOML config file.")
@click.pass_context
def cli(ctx, config_path):
    ctx.obj = load_config(config_path)


@cli.command()
@click.option("--seed", default=DEFAULT_SEED, show_default=True)
@click.option("--cases", default=50, show_default=True)
@click.option("--controls", default=50, show_default=True)
@click.option("--notes-min", default=4, show_default=True)
@click.option("--notes-max", default=12, show_default=True)
@click.option("--paraphrase-rate", default=0.3, show_default=True)
@click.option("--negation-rate", default=0.1, show_default=True)
@click.option("--distractor-rate", default=0.3, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--format", "fmt", default="table", type=click.Choice(["table", "jsonl"]))
def synth(seed, cases, controls, notes_min, notes_max, paraphrase_rate,
          negation_rate, distractor_rate, out, fmt):
    """Generate a seeded synthetic corpus with planted gold labels."""
    spec = SynthSpec(
        seed=seed, n_cases=cases, n_controls=controls,
        notes_per_patient=(notes_min, notes_max),
        paraphrase_rate=paraphrase_rate, negation_rate=negation_rate,
        distractor_rate=distractor_rate,
    )
    corpus = synthesize(spec)
    write_corpus(corpus, out)
    summary = {
        "patients": len(corpus.patients),
        "notes": len(corpus.notes),
        "gold_positive": sum(1 for g in corpus.gold if g.present),
        "out": str(out),
    }
    if fmt == "jsonl":
        click.echo(json.dumps(summary))
    else:
        click.echo(f"wrote {summary['patients']} patients, {summary['notes']} notes, "
                   f"{summary['gold_positive']} positive gold labels to {out}")


@cli.command("ingest")
@click.option("--path", required=True, type=click.Path())
@click.option("--format", "fmt", default="table", type=click.Choice(["table", "jsonl"]))
def ingest_cmd(path, fmt):
    """Validate and summarize a corpus directory."""
    corpus = ingest(path)
    summary = {
        "patients": len(corpus.patients),
        "notes": len(corpus.notes),
        "gold_labels": len(corpus.gold),
    }
    if fmt == "jsonl":
        click.echo(json.dumps(summary))
    else:
        click.echo(f"{summary['patients']} patients, {summary['notes']} notes, "
                   f"{summary['gold_labels']} gold labels")


@cli.command()
@click.option("--corpus", "corpus_dir", required=True, type=click.Path())
@click.option("--assume-full/--no-assume-full", default=True, show_default=True,
              help="Treat score-bearing PHQ instances without an item count as full PHQ-9.")
@click.option("--denominator", default="with_phq", type=click.Choice(["with_phq", "cohort"]))
@click.option("--format", "fmt", default="table", type=click.Choice(["table", "jsonl"]))
def stats(corpus_dir, assume_full, denominator, fmt):
    """Per-age-bin PHQ completion statistics."""
    corpus = ingest(corpus_dir)
    rows = cohort_stats(corpus, assume_full=assume_full, denominator=denominator)
    if fmt == "jsonl":
        for r in rows:
            click.echo(json.dumps(r.__dict__))
        return
    header = ("Age", "#pat", "#phq-visits", "#pat-phq", "%1 PHQ", "%1 PHQ9",
              "%1 PHQ2", "%2 PHQ", "%2 PHQ9", "%2 PHQ2")
    click.echo("  ".join(f"{h:>11}" for h in header))
    for r in rows:
        label = "Av." if r.age_bin == -1 else str(r.age_bin)
        cells = [label, f"{r.n_patients:.0f}", f"{r.n_visits_with_phq:.0f}",
                 f"{r.n_patients_with_phq:.0f}"]
        cells += [f"{v:.0f}%" for v in (
            r.pct_at_least_one_phq, r.pct_at_least_one_phq9, r.pct_at_least_one_phq2,
            r.pct_at_least_two_phq, r.pct_at_least_two_phq9, r.pct_at_least_two_phq2)]
        click.echo("  ".join(f"{c:>11}" for c in cells))


@cli.command("extract")
@click.option("--backend", "backend_id", required=True)
@click.option("--corpus", "corpus_dir", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--parallelism", default=1, show_default=True)
@click.option("--char-limit", default=ex.DEFAULT_CHAR_LIMIT, show_default=True)
@click.option("--endpoint", default=None)
@click.option("--model", "model_name", default=None)
@click.option("--format", "fmt", default="table", type=click.Choice(["table", "jsonl"]))
@click.pass_obj
def extract_cmd(cfg, backend_id, corpus_dir, out, parallelism, char_limit,
                endpoint, model_name, fmt):
    """Run one extraction backend over every (note, category) pair."""
    backends = config_backends(cfg or {})
    if backend_id not in backends:
        raise click.ClickException(f"unknown backend: {backend_id}")
    backend = backends[backend_id]
    overrides = {"parallelism": parallelism, "char_limit": char_limit}
    if endpoint:
        overrides["endpoint"] = endpoint
    if model_name:
        overrides["model_name"] = model_name
    backend = ex.BackendConfig(**{**backend.__dict__, **overrides})
    corpus = ingest(corpus_dir)
    detections = ex.run_extraction(backend, corpus)
    ex.write_detections(detections, out)
    n_pos = sum(1 for d in detections if d.present)
    n_err = sum(1 for d in detections if d.status == "backend_error")
    n_unp = sum(1 for d in detections if d.status == "unparseable")
    summary = {"detections": len(detections), "positive": n_pos,
               "backend_errors": n_err, "unparseable": n_unp, "out": str(out)}
    if n_err:
        click.echo(f"warning: {n_err} backend errors (excluded from eval denominators)",
                   err=True)
    if fmt == "jsonl":
        click.echo(json.dumps(summary))
    else:
        click.echo(f"wrote {len(detections)} detections ({n_pos} positive) to {out}")
    if n_err:
        sys.exit(2)


@cli.command("eval")
@click.option("--gold", "gold_path", required=True, type=click.Path())
@click.option("--detections", "det_path", required=True, type=click.Path())
@click.option("--format", "fmt", default="table",
              type=click.Choice(["table", "jsonl", "markdown"]))
@click.option("--na-as-zero", is_flag=True, default=False,
              help="Zero-impute N/A cells in macro averages (sensitivity mode).")
def eval_cmd(gold_path, det_path, fmt, na_as_zero):
    """Score detections against gold labels (per-category P/R/F1)."""
    gold = [g for _, g in read_gold(gold_path)]
    detections = ex.read_detections(det_path)
    report = ev.score(gold, detections, na_as_zero=na_as_zero)
    click.echo(ev.render_report(report, format=fmt), nl=False)


@cli.command("screen")
@click.option("--detections", "det_path", required=True, type=click.Path())
@click.option("--corpus", "corpus_dir", required=True, type=click.Path())
@click.option("--models", default="logreg,tree,forest,svm,mlp,bow", show_default=True)
@click.option("--k", default=5, show_default=True)
@click.option("--seed", default=DEFAULT_SEED, show_default=True)
@click.option("--window-days", default=None, type=int,
              help="Keep only notes within N days of a PHQ instance.")
@click.option("--out", default=None, type=click.Path())
@click.option("--format", "fmt", default="table", type=click.Choice(["table", "jsonl"]))
def screen_cmd(det_path, corpus_dir, models, k, seed, window_days, out, fmt):
    """Train/evaluate the case-control classifier bench on symptom vectors."""
    corpus = ingest(corpus_dir)
    if window_days is not None:
        corpus = sc.filter_phq_window(corpus, window_days=window_days)
    detections = ex.read_detections(det_path)
    names = [m.strip() for m in models.split(",") if m.strip()]
    unknown = [m for m in names if m not in _MODEL_ALIASES]
    if unknown:
        raise click.ClickException(f"unknown models: {', '.join(unknown)}")
    vectors, skipped = sc.vectorize(detections, corpus)
    labels = {p.patient_id: int(p.is_case) for p in corpus.patients.values()}
    results = []
    for name in names:
        kind = _MODEL_ALIASES[name]
        if kind == "bow_logreg_baseline":
            results.append(sc.bow_baseline(corpus, k=k, seed=seed))
        else:
            spec = sc.ModelSpec(kind=kind, seed=seed)
            results.append(sc.run_bench([spec], vectors, labels, k=k, seed=seed)[0])
    payload = {
        "k": k, "seed": seed, "skipped_patients": skipped,
        "results": [
            {"model": r.kind, "auc_roc": r.auc_roc, "f1": r.f1,
             "precision": r.precision, "recall": r.recall,
             "per_fold": list(r.per_fold), "seed": r.seed}
            for r in results
        ],
    }
    if out:
        Path(out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    if fmt == "jsonl":
        for row in payload["results"]:
            click.echo(json.dumps({kk: vv for kk, vv in row.items() if kk != "per_fold"}))
    else:
        click.echo(f"{'Model':<24} {'AUC-ROC':>8} {'F1':>6} {'Prec':>6} {'Rec':>6}")
        for r in results:
            click.echo(f"{r.kind:<24} {r.auc_roc:>8.2f} {r.f1:>6.2f} "
                       f"{r.precision:>6.2f} {r.recall:>6.2f}")


@cli.command()
@click.option("--data-dir", default="data", type=click.Path())
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8787, show_default=True)
@click.option("--ui-dir", default=None, type=click.Path())
@click.pass_obj
def serve(cfg, data_dir, host, port, ui_dir):
    """Run the adjudication HTTP service."""
    import uvicorn

    from .service import create_app

    cfg = cfg or {}
    data_dir = cfg.get("data_dir", data_dir)
    host = cfg.get("host", host)
    port = cfg.get("port", port)
    ui_dir = ui_dir or cfg.get("ui_dir")
    app = create_app(data_dir, backends=config_backends(cfg), ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port)


@cli.group("taxonomy")
def taxonomy_group():
    """Inspect the symptom taxonomy."""


@taxonomy_group.command("show")
@click.option("--format", "fmt", default="table", type=click.Choice(["table", "jsonl"]))
def taxonomy_show(fmt):
    cats = taxonomy()
    if fmt == "jsonl":
        for c in cats:
            click.echo(json.dumps({
                "category_id": c.category_id, "display_name": c.display_name,
                "phq_question": c.phq_question, "direction": c.direction,
                "bdi_items": list(c.bdi_items),
            }))
        return
    click.echo(f"{'Category':<24} {'PHQ':<4} {'Direction':<10} BDI items")
    for c in cats:
        bdi = ",".join(str(i) for i in c.bdi_items) or "-"
        click.echo(f"{c.display_name:<24} {c.phq_question:<4} {c.direction:<10} {bdi}")


@cli.command()
@click.option("--data-dir", required=True, type=click.Path())
@click.pass_obj
def compact(cfg, data_dir):
    """Snapshot-compact the service's append-only logs."""
    from .service import ServiceStore

    store = ServiceStore(data_dir, config_backends(cfg or {}))
    store.compact()
    click.echo(f"compacted logs in {data_dir}")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as e:
        click.echo(e.format_message(), err=True)
        if e.ctx is not None:
            click.echo(e.ctx.get_usage(), err=True)
        sys.exit(1)
    except click.ClickException as e:
        e.show()
        sys.exit(1)
    except CorpusError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    except (ValueError, KeyError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    except SystemExit:
        raise
    except Exception as e:
        click.echo(f"runtime failure: {e}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
