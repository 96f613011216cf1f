"""Command-line pipeline: corpus-build, score, mitigate, report, selftest.

Exit codes: 0 success, 2 usage or input error, 3 backend error, 4 internal
invariant breach. An optional JSON config file provides per-command defaults;
explicit flags override it and the resolved values land in the manifest.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from importlib import resources
from pathlib import Path

import click
import numpy as np

from . import cds as cds_mod
from . import corpus as corpus_mod
from . import report as report_mod
from . import scoring, stats
from . import toy as toy_mod
from .finetune import FinetuneConfig, MlmMaskingPolicy
from .finetune import finetune as run_finetune
from .finetune import write_training_log
from .bridge_client import BridgeScorer
from .conformance import check_scorer
from .errors import BackendUnavailable, BridgeProtocolError, MlmBiasError
from .manifest import RunManifest

EXIT_USAGE = 2
EXIT_BACKEND = 3
EXIT_INTERNAL = 4


def _load_config(ctx: click.Context, _param, value):
    if value is None:
        return None
    try:
        config = json.loads(Path(value).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise click.UsageError(f"cannot read config file {value}: {e}")
    if not isinstance(config, dict):
        raise click.UsageError("config file must hold a JSON object")
    ctx.default_map = config
    return value


@click.group()
@click.version_option(package_name="mlmbias")
@click.option("--config", type=click.Path(), callback=_load_config,
              expose_value=False, is_eager=True,
              help="JSON file with per-command option defaults.")
def main() -> None:
    """Measure and mitigate gender-association bias in masked language models."""


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (BackendUnavailable, BridgeProtocolError) as e:
            click.echo(f"backend error: {e}", err=True)
            sys.exit(EXIT_BACKEND)
        except MlmBiasError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_USAGE)
        except click.ClickException:
            raise
        except Exception as e:  # noqa: BLE001 - anything else is an internal breach
            click.echo(f"internal error: {type(e).__name__}: {e}", err=True)
            sys.exit(EXIT_INTERNAL)
    return wrapper


def _require_file(path: str | None, label: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise click.UsageError(f"{label} file not found: {p}")
    return p


def _load_backend(spec: str):
    """Parse a backend spec: toy:<checkpoint path> or bridge:<url>."""
    kind, _, rest = spec.partition(":")
    if kind == "toy":
        path = Path(rest)
        if not path.exists():
            raise click.UsageError(f"toy checkpoint not found: {path}")
        return toy_mod.ToyMlm.load(path)
    if kind == "bridge":
        return BridgeScorer(rest)
    raise click.UsageError(
        f"unknown backend {spec!r}; expected toy:<path> or bridge:<url>"
    )


def _data_digests(manifest: RunManifest, overrides: dict[str, str | None],
                  defaults: dict[str, str]) -> None:
    for label, override in overrides.items():
        if override is not None:
            manifest.add_input(override)
        else:
            data = resources.files("mlmbias.data").joinpath(
                defaults[label]).read_bytes()
            manifest.add_bytes(f"mlmbias.data/{defaults[label]}", data)


def _out_dir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


@main.command("corpus-build")
@click.option("--lang", type=click.Choice(["en", "de"]), default="en",
              show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
@click.option("--professions", type=click.Path(), default=None,
              help="Override the shipped professions table.")
@click.option("--persons", type=click.Path(), default=None,
              help="Override the shipped person-word list.")
@click.option("--templates", type=click.Path(), default=None,
              help="Override the shipped templates.")
@click.option("--backend", default=None,
              help="Optional scorer used to count attribute sub-tokens "
                   "(toy:<path> or bridge:<url>).")
@click.option("--seed", type=int, default=42, show_default=True)
@_handle_errors
def cmd_corpus_build(lang, out, professions, persons, templates, backend, seed):
    """Build the 5,400-sentence evaluation corpus with all masked variants."""
    language = corpus_mod.Language(lang)
    for label, path in (("professions", professions), ("persons", persons),
                        ("templates", templates)):
        _require_file(path, label)
    scorer = _load_backend(backend) if backend else None
    instances = corpus_mod.build_corpus(
        language, professions_path=professions, persons_path=persons,
        templates_path=templates, scorer=scorer,
    )
    out_path = _out_dir(out)
    corpus_file = out_path / f"becpro_{lang}.tsv"
    corpus_mod.write_corpus(corpus_file, instances)
    manifest = RunManifest(
        command="corpus-build",
        config={"lang": lang, "backend": backend, "professions": professions,
                "persons": persons, "templates": templates},
        seed=seed,
    )
    _data_digests(manifest,
                  {"professions": professions, "persons": persons,
                   "templates": templates},
                  {"professions": "professions_en_de.tsv",
                   "persons": "person_words.tsv", "templates": "templates.tsv"})
    manifest.write(out_path)
    click.echo(f"wrote {len(instances)} instances to {corpus_file}")


@main.command("score")
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--backend", required=True, help="toy:<path> or bridge:<url>.")
@click.option("--state", type=click.Choice(["pre", "post"]), default="pre",
              show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@_handle_errors
def cmd_score(corpus_path, backend, state, out, batch_size, seed):
    """Score a corpus: one association record per instance."""
    corpus_file = _require_file(corpus_path, "corpus")
    scorer = _load_backend(backend)
    instances = corpus_mod.read_corpus(corpus_file)
    model_state = scoring.ModelState(state)

    records = []
    failures: list[tuple[str, str]] = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        try:
            records.extend(scoring.score_corpus(scorer, chunk, model_state,
                                                batch_size=batch_size))
        except MlmBiasError:
            # Batch failed; retry instance by instance so one bad row cannot
            # take down its neighbours, and report the ids that still fail.
            for inst in chunk:
                try:
                    records.extend(scoring.score_corpus(scorer, [inst], model_state,
                                                        batch_size=1))
                except MlmBiasError as e:
                    failures.append((inst.instance_id, str(e)))

    out_path = _out_dir(out)
    records_file = out_path / f"records_{state}.tsv"
    scoring.write_records(records_file, records)
    backend_name = getattr(scorer, "model_name", backend)
    manifest = RunManifest(
        command="score",
        config={"backend": backend, "backend_identity": str(backend_name),
                "state": state, "batch_size": batch_size},
        seed=seed,
    )
    manifest.add_input(corpus_file)
    if backend.startswith("toy:"):
        manifest.add_input(backend.partition(":")[2])
    manifest.write(out_path)
    if failures:
        failures_file = out_path / "failed_instances.tsv"
        with open(failures_file, "w", encoding="utf-8") as fh:
            fh.write("instance_id\terror\n")
            for instance_id, message in failures:
                fh.write(f"{instance_id}\t{message}\n")
        click.echo(f"{len(failures)} instance(s) failed; see {failures_file}",
                   err=True)
        if not records:
            raise BackendUnavailable("every instance failed to score")
    click.echo(f"wrote {len(records)} records to {records_file}")


@main.command("mitigate")
@click.option("--gap", "gap_path", required=True, type=click.Path(),
              help="GAP-style tab-separated corpus with a Text column.")
@click.option("--backend", required=True, help="toy:<path> or bridge:<url>.")
@click.option("--out", required=True, type=click.Path())
@click.option("--lexicon", type=click.Path(), default=None,
              help="Override the shipped gender-pair lexicon.")
@click.option("--names", "names_path", type=click.Path(), default=None,
              help="Override the shipped name-pair list.")
@click.option("--swap-probability", type=float, default=0.5, show_default=True)
@click.option("--epochs", type=int, default=3, show_default=True)
@click.option("--learning-rate", type=float, default=5e-5, show_default=True)
@click.option("--warmup-steps", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--strict", is_flag=True,
              help="Fail on unresolved ambiguous substitutions.")
@click.option("--resolver", type=click.Choice(["heuristic", "none"]),
              default="heuristic", show_default=True,
              help="Possessive/objective resolver for ambiguous forms; "
                   "'none' treats every ambiguous token as unresolved.")
@_handle_errors
def cmd_mitigate(gap_path, backend, out, lexicon, names_path, swap_probability,
                 epochs, learning_rate, warmup_steps, seed, strict, resolver):
    """Apply counterfactual substitution to a corpus, then fine-tune on it."""
    gap_file = _require_file(gap_path, "GAP corpus")
    _require_file(lexicon, "lexicon")
    _require_file(names_path, "names")
    out_path = _out_dir(out)

    pair_lexicon = cds_mod.GenderPairLexicon.load(lexicon)
    names = cds_mod.NamePairList.load(names_path)
    documents = cds_mod.parse_gap(gap_file)
    audit = cds_mod.SubstitutionAudit()
    resolver_fn = (cds_mod.default_ambiguity_resolver
                   if resolver == "heuristic" else None)
    flipped = cds_mod.substitute_corpus(
        documents, pair_lexicon, names, swap_probability, seed,
        resolver=resolver_fn, strict=strict, audit=audit,
    )
    cds_file = out_path / "cds_corpus.tsv"
    cds_mod.write_gap(cds_file, flipped)
    balance = cds_mod.audit_balance(flipped, pair_lexicon)
    audit_file = out_path / "cds_audit.json"
    audit_file.write_text(json.dumps({
        "flipped_documents": sum(1 for d in flipped if d.flipped),
        "total_documents": len(flipped),
        "side_a_tokens": balance.total_a,
        "side_b_tokens": balance.total_b,
        "imbalance_ratio": balance.ratio,
        "resolver_fallbacks": audit.entries,
    }, indent=2) + "\n", encoding="utf-8")

    sentences = [s for doc in flipped
                 for s in cds_mod.split_sentences(doc.text).sentences]
    config = FinetuneConfig(
        epochs=epochs, learning_rate=learning_rate, warmup_steps=warmup_steps,
        seed=seed, masking=MlmMaskingPolicy(seed=seed),
    )
    manifest = RunManifest(
        command="mitigate",
        config={"backend": backend, "swap_probability": swap_probability,
                "epochs": epochs, "learning_rate": learning_rate,
                "warmup_steps": warmup_steps, "strict": strict,
                "resolver": resolver, "lexicon": lexicon, "names": names_path},
        seed=seed,
    )
    manifest.add_input(gap_file)
    _data_digests(manifest, {"lexicon": lexicon, "names": names_path},
                  {"lexicon": "cds_lexicon.tsv", "names": "cds_names.tsv"})

    if backend.startswith("bridge:"):
        scorer = _load_backend(backend)
        job_id = scorer.finetune_start(sentences, {
            "epochs": epochs, "batch_size": 1, "learning_rate": learning_rate,
            "warmup_steps": warmup_steps, "seed": seed,
        })
        click.echo(f"bridge fine-tune job {job_id} started")
        while True:
            status = scorer.finetune_status(job_id)
            if status["state"] in ("done", "failed"):
                break
            time.sleep(1.0)
        (out_path / "bridge_job.json").write_text(
            json.dumps(status, indent=2) + "\n", encoding="utf-8")
        manifest.write(out_path)
        if status["state"] == "failed":
            raise BackendUnavailable(f"bridge fine-tune failed: {status.get('error')}")
        click.echo(f"bridge job {job_id} done; post model at "
                   f"{status.get('output_dir')}")
        return

    model = _load_backend(backend)
    manifest.add_input(backend.partition(":")[2])
    result = run_finetune(model, sentences, config)
    post_file = out_path / "post_checkpoint.json"
    result.model.save(post_file)
    log_file = out_path / "training_log.tsv"
    write_training_log(log_file, result.log)
    manifest.write(out_path)
    click.echo(f"fine-tuned on {len(sentences)} sentences for {epochs} epoch(s); "
               f"post checkpoint at {post_file}")


@main.command("report")
@click.option("--pre", "pre_path", required=True, type=click.Path())
@click.option("--post", "post_path", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--pre-only", is_flag=True,
              help="Report on pre records alone (no mitigation run).")
@click.option("--balance-threshold", type=float, default=0.1, show_default=True)
@click.option("--plots", is_flag=True, help="Also render static bar charts.")
@click.option("--seed", type=int, default=42, show_default=True)
@_handle_errors
def cmd_report(pre_path, post_path, out, pre_only, balance_threshold, plots, seed):
    """Emit group tables, per-profession tables, plot series and verdicts."""
    pre_file = _require_file(pre_path, "pre records")
    if post_path is None and not pre_only:
        raise click.UsageError("--post is required (or pass --pre-only)")
    records_pre = scoring.read_records(pre_file)
    out_path = _out_dir(out)
    manifest = RunManifest(
        command="report",
        config={"pre_only": pre_only, "balance_threshold": balance_threshold,
                "plots": plots},
        seed=seed,
    )
    manifest.add_input(pre_file)

    if pre_only:
        result = stats.aggregate(records_pre, None)
        report_mod.write_group_table(out_path / "group_stats.tsv", result)
        for group, rows in report_mod.profession_pre_tables(records_pre).items():
            if rows:
                report_mod.write_profession_pre_table(
                    out_path / f"professions_{group.value}.tsv", rows)
        manifest.write(out_path)
        click.echo(f"wrote pre-only group statistics to {out_path}")
        return

    post_file = _require_file(post_path, "post records")
    records_post = scoring.read_records(post_file)
    manifest.add_input(post_file)
    result = stats.aggregate(records_pre, records_post)
    report_mod.write_group_table(out_path / "group_stats.tsv", result)
    tables = report_mod.profession_tables(records_pre, records_post)
    for group, rows in tables.items():
        if rows:
            report_mod.write_profession_table(
                out_path / f"professions_{group.value}.tsv", rows)
    report_mod.write_plot_series(out_path / "plot_series.tsv", tables)
    verdicts = stats.hypothesis_check(result, balance_threshold=balance_threshold)
    report_mod.write_verdicts(out_path / "hypotheses.tsv", verdicts)
    if plots:
        report_mod.render_charts(out_path, tables)
    manifest.write(out_path)
    passed = sum(1 for v in verdicts if v.passed)
    click.echo(f"wrote report to {out_path} ({passed}/{len(verdicts)} "
               f"hypothesis cells pass)")


@main.command("toy-train")
@click.option("--corpus", "corpus_path", type=click.Path(), default=None,
              help="Plain-text training corpus, one sentence per line.")
@click.option("--planted", type=float, default=None,
              help="Generate a planted-bias fixture corpus of this strength "
                   "instead of reading --corpus.")
@click.option("--out", required=True, type=click.Path(),
              help="Checkpoint file to write.")
@click.option("--epochs", type=int, default=12, show_default=True)
@click.option("--learning-rate", type=float, default=0.05, show_default=True)
@click.option("--dim", type=int, default=24, show_default=True)
@click.option("--hidden", type=int, default=48, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@_handle_errors
def cmd_toy_train(corpus_path, planted, out, epochs, learning_rate, dim, hidden,
                  seed):
    """Train a toy masked LM usable as a scoring/fine-tuning backend."""
    if (corpus_path is None) == (planted is None):
        raise click.UsageError("pass exactly one of --corpus or --planted")
    if planted is not None:
        fixture = toy_mod.planted_bias_fixture(planted, seed=seed)
        sentences = fixture.train_sentences
    else:
        corpus_file = _require_file(corpus_path, "corpus")
        sentences = corpus_file.read_text(encoding="utf-8").splitlines()
    config = toy_mod.ToyMlmConfig(
        dim=dim, hidden=hidden, epochs=epochs, learning_rate=learning_rate,
        seed=seed,
    )
    model = toy_mod.train(sentences, config)
    out_file = Path(out)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    model.save(out_file)
    click.echo(
        f"trained on {len(sentences)} sentences "
        f"(loss {model.epoch_losses[0]:.4f} -> {model.epoch_losses[-1]:.4f}); "
        f"checkpoint at {out_file}"
    )


@main.command("selftest")
@click.option("--seed", type=int, default=42, show_default=True)
@_handle_errors
def cmd_selftest(seed):
    """Quick internal integrity checks (a desk-scale end-to-end smoke run)."""
    failures = []

    def check(name: str, ok: bool, detail: str = "") -> None:
        click.echo(f"[{'PASS' if ok else 'FAIL'}] {name}"
                   + (f" ({detail})" if detail and not ok else ""))
        if not ok:
            failures.append(name)

    check("association identity", scoring.association(0.5, 0.5) == 0.0)
    check("association log ratio",
          abs(scoring.association(0.5, 0.5 / np.e) - 1.0) < 1e-12)
    wil = stats.wilcoxon_signed_rank([1.0, 2.0, 3.0], mode="exact")
    check("signed-rank exact tail", abs(wil.p_greater - 0.125) < 1e-12)

    lexicon = cds_mod.GenderPairLexicon.load()
    names = cds_mod.NamePairList.load()
    text = "She told her brother about Mary."
    once = cds_mod.flip_text(text, lexicon, names)
    twice = cds_mod.flip_text(once, lexicon, names)
    check("counterfactual flip", once == "He told his sister about James.", once)
    check("counterfactual involution", twice == text, twice)

    fixture = toy_mod.planted_bias_fixture(1.0, seed=seed,
                                           sentences_per_profession=60)
    config = toy_mod.ToyMlmConfig(dim=16, hidden=48, epochs=30, seed=seed)
    model = toy_mod.train(fixture.train_sentences, config)
    check("toy training reduces loss",
          model.epoch_losses[-1] < model.epoch_losses[0])
    conformance = check_scorer(model)
    check("scorer conformance", not conformance, "; ".join(conformance))
    masked = [corpus_mod.apply_masking(i, model) for i in fixture.instances]
    records = scoring.score_corpus(model, masked, scoring.ModelState.PRE)
    by_key = {}
    for rec in records:
        by_key.setdefault((rec.gender, rec.profession_label), []).append(rec.score)
    planted = fixture.planted_professions()
    signs_ok = all(
        np.sign(np.mean(by_key[(gender, prof)]))
        == fixture.expected_signs[(gender, prof)]
        for prof in planted for gender in corpus_mod.Gender
    )
    check("planted-bias sign pattern", signs_ok)

    if failures:
        click.echo(f"{len(failures)} selftest check(s) failed", err=True)
        sys.exit(EXIT_INTERNAL)
    click.echo("selftest ok")


if __name__ == "__main__":
    main()
