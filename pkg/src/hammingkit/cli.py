"""Command-line interface.

Every leaf command accepts ``--config FILE`` where the file holds
``key=value`` lines (``#`` comments allowed); keys are option names with
dashes or underscores. Values from the file become option defaults, so flags
given on the command line always win. Commands exit nonzero when inputs
violate a documented contract.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import bitcode, codebook as codebook_mod, harness, heads, sizing
from .errors import ContractViolation, DivergenceError
from .validation import require


def _load_config(ctx: click.Context, param: click.Parameter, value: str | None) -> None:
    if not value:
        return
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(Path(value).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        require("=" in line, f"{value}:{lineno}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        overrides[key.strip().replace("-", "_")] = val.strip()
    ctx.default_map = {**(ctx.default_map or {}), **overrides}


def config_option(fn):
    return click.option(
        "--config",
        type=click.Path(exists=True, dir_okay=False),
        callback=_load_config,
        is_eager=True,
        expose_value=False,
        help="key=value file of option defaults; command-line flags override.",
    )(fn)


def _parse_pairs(text: str | None) -> tuple[tuple[int, int], ...]:
    if not text:
        return ()
    pairs = []
    for chunk in text.split(","):
        left, sep, right = chunk.partition(":")
        require(bool(sep), f"expected a:b pair, got {chunk!r}")
        pairs.append((int(left), int(right)))
    return tuple(pairs)


def _train_config(learning_rate, decay_rate, batch_size, epochs, seed) -> heads.TrainConfig:
    return heads.TrainConfig(
        learning_rate=learning_rate,
        decay_rate=decay_rate,
        batch_size=batch_size,
        epochs=epochs,
        seed=seed,
    )


_train_options = [
    click.option("--learning-rate", "--lr", type=float, default=1e-3, show_default=True),
    click.option("--decay-rate", type=float, default=0.5, show_default=True),
    click.option("--batch-size", type=int, default=64, show_default=True),
    click.option("--epochs", type=int, default=30, show_default=True),
    click.option("--train-seed", type=int, default=0, show_default=True),
]


def train_options(fn):
    for option in reversed(_train_options):
        fn = option(fn)
    return fn


@click.group()
def cli() -> None:
    """Compact Hamming-code classification heads and their tooling."""


# ---------------------------------------------------------------------------
# bank


@cli.group()
def bank() -> None:
    """Synthetic feature banks."""


@bank.command("gen")
@config_option
@click.option("--classes", type=int, required=True, help="Number of classes.")
@click.option("--dim", type=int, required=True, help="Feature dimensionality.")
@click.option("--samples", type=int, required=True, help="Samples per class.")
@click.option("--noise", type=float, default=0.05, show_default=True)
@click.option("--center-scale", type=float, default=1.0, show_default=True)
@click.option("--confusable", type=str, default=None,
              help="Comma-separated a:b class pairs with nearby centers.")
@click.option("--angle-deg", type=float, default=5.0, show_default=True,
              help="Angle between confusable centers.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def bank_gen(classes, dim, samples, noise, center_scale, confusable, angle_deg, seed, out):
    """Generate a seeded synthetic bank and write it to OUT."""
    spec = harness.SyntheticBankSpec(
        n_classes=classes,
        dim=dim,
        samples_per_class=samples,
        noise=noise,
        center_scale=center_scale,
        confusable_pairs=_parse_pairs(confusable),
        confusable_angle_deg=angle_deg,
        seed=seed,
    )
    generated = harness.generate_bank(spec)
    codebook_mod.write_feature_bank(generated, out)
    click.echo(f"wrote {generated.n_classes} classes x {samples} samples (dim {dim}) to {out}")


# ---------------------------------------------------------------------------
# codebook


@cli.group("codebook")
def codebook_group() -> None:
    """Build and inspect codebooks."""


@codebook_group.command("build")
@config_option
@click.option("--bank", "bank_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--width", type=int, required=True, help="Code width in bits.")
@click.option("--kind", type=click.Choice(["lsh", "random"]), default="lsh", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--retry/--no-retry", default=False, show_default=True,
              help="Redraw hyperplanes (seed+1) while classes collide.")
@click.option("--specials/--no-specials", default=False, show_default=True,
              help="Append start/end/pad codes for sequence decoding.")
@click.option("--special-seed", type=int, default=None,
              help="Seed for special-token codes [default: seed+1].")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def codebook_build(bank_path, width, kind, seed, retry, specials, special_seed, out):
    """Build a codebook for the classes of a feature bank."""
    loaded = codebook_mod.read_feature_bank(bank_path)
    if kind == "lsh":
        projection = codebook_mod.ProjectionMatrix.draw(loaded.dim, width, seed)
        book = codebook_mod.build_codebook(loaded, projection, retry_on_conflict=retry)
    else:
        book = codebook_mod.random_codebook(loaded.n_classes, width, seed, labels=loaded.labels)
    conflicts = codebook_mod.detect_conflicts(book)
    if specials:
        book = codebook_mod.add_special_tokens(
            book, seed + 1 if special_seed is None else special_seed
        )
    bitcode.write_codebook(book, out)
    click.echo(f"wrote {len(book)} codes of width {width} to {out} "
               f"({len(conflicts)} conflicting pairs)")


@codebook_group.command("stats")
@config_option
@click.option("--book", "book_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--as-json", "as_json", is_flag=True, default=False)
def codebook_stats(book_path, as_json):
    """Summarize a codebook: size, conflicts, distance statistics."""
    book = bitcode.read_codebook(book_path)
    conflicts = codebook_mod.detect_conflicts(book)
    stats = {
        "classes": len(book),
        "code_width": book.width,
        "bytes_per_code": book.n_bytes_per_code,
        "total_bytes": len(book) * book.n_bytes_per_code,
        "conflicting_pairs": len(conflicts),
        "mean_pairwise_distance": harness._mean_pairwise_distance(book, len(book)),
        "special_tokens": codebook_mod.special_token_indices(book),
    }
    if as_json:
        click.echo(json.dumps(stats, indent=2, sort_keys=True))
    else:
        for key, value in stats.items():
            click.echo(f"{key}: {value}")


@codebook_group.command("conflicts")
@config_option
@click.option("--book", "book_path", type=click.Path(exists=True, dir_okay=False), required=True)
def codebook_conflicts(book_path):
    """List class pairs that share an identical code."""
    book = bitcode.read_codebook(book_path)
    pairs = codebook_mod.detect_conflicts(book)
    for a, b in pairs:
        click.echo(f"{a}\t{b}\t{book.labels[a]}\t{book.labels[b]}")
    click.echo(f"{len(pairs)} conflicting pairs")


# ---------------------------------------------------------------------------
# train


@cli.group()
def train() -> None:
    """Train classification heads on a feature bank."""


@train.command("softmax")
@config_option
@click.option("--bank", "bank_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--use-bias/--no-bias", default=False, show_default=True)
@train_options
@click.option("--loss-csv", type=click.Path(dir_okay=False), default=None)
def train_softmax(bank_path, use_bias, learning_rate, decay_rate, batch_size, epochs,
                  train_seed, loss_csv):
    """Train the dense softmax baseline head."""
    loaded = codebook_mod.read_feature_bank(bank_path)
    X, y = loaded.to_arrays()
    config = _train_config(learning_rate, decay_rate, batch_size, epochs, train_seed)
    model = heads.SoftmaxRegression(
        n_classes=loaded.n_classes, use_bias=use_bias, **config.estimator_params()
    )
    model.fit(X, y)
    if loss_csv:
        heads.write_loss_history(model.loss_history_, loss_csv)
    accuracy = float(np.mean(model.predict(X) == y))
    click.echo(f"final_loss={model.loss_history_[-1][1]!r} train_accuracy={accuracy:.4f}")


@train.command("hamming")
@config_option
@click.option("--bank", "bank_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--book", "book_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--margin", type=float, default=1.0, show_default=True)
@click.option("--init", type=click.Choice(["auto", "random"]), default="auto", show_default=True)
@train_options
@click.option("--out-head", type=click.Path(dir_okay=False), default=None,
              help="Write the fitted head container here.")
@click.option("--loss-csv", type=click.Path(dir_okay=False), default=None)
def train_hamming(bank_path, book_path, margin, init, learning_rate, decay_rate, batch_size,
                  epochs, train_seed, out_head, loss_csv):
    """Train the bit-wise Hamming head against a codebook."""
    loaded = codebook_mod.read_feature_bank(bank_path)
    book = bitcode.read_codebook(book_path)
    require(
        book.labels[: loaded.n_classes] == loaded.labels,
        "codebook labels do not align with bank classes",
    )
    X, y = loaded.to_arrays()
    config = _train_config(learning_rate, decay_rate, batch_size, epochs, train_seed)
    model = heads.HammingClassifier(
        codebook=book, margin=margin, init=init, **config.estimator_params()
    )
    model.fit(X, y)
    if loss_csv:
        heads.write_loss_history(model.loss_history_, loss_csv)
    if out_head:
        heads.save_classifier(model, out_head)
    accuracy = float(np.mean(model.predict(X) == y))
    click.echo(f"final_loss={model.loss_history_[-1][1]!r} train_accuracy={accuracy:.4f}")


# ---------------------------------------------------------------------------
# decode


@cli.command("decode")
@config_option
@click.option("--head", "head_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--bank", "bank_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="Predictions CSV: sample_index,true_class,predicted_class,distance.")
def decode_cmd(head_path, bank_path, workers, out):
    """Decode every bank sample with a saved head; writes predictions CSV."""
    model = heads.load_classifier(head_path)
    loaded = codebook_mod.read_feature_bank(bank_path)
    X, y = loaded.to_arrays()
    indices, distances = model.decode(X, workers=workers)
    lines = ["sample_index,true_class,predicted_class,distance"]
    lines += [
        f"{i},{int(t)},{int(p)},{int(d)}"
        for i, (t, p, d) in enumerate(zip(y, indices, distances))
    ]
    Path(out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    accuracy = float(np.mean(indices == y))
    click.echo(f"decoded {X.shape[0]} samples accuracy={accuracy:.4f}")


# ---------------------------------------------------------------------------
# size


@cli.group()
def size() -> None:
    """Storage accounting."""


@size.command("report")
@config_option
@click.option("--classes", type=int, required=True)
@click.option("--dim", type=int, required=True)
@click.option("--width", type=int, required=True, help="Code width in bits.")
@click.option("--precision", type=click.Choice(["fp32", "fp16"]), default="fp32",
              show_default=True)
@click.option("--backbone-mib", type=float, default=None,
              help="Opaque backbone size (fp32 MiB); enables a full-model report.")
@click.option("--classifier", type=click.Choice(["softmax", "hamming"]), default="hamming",
              show_default=True)
@click.option("--embedding", type=click.Choice(["table", "hamming"]), default="hamming",
              show_default=True)
@click.option("--layers", type=int, default=3, show_default=True)
@click.option("--heads", "n_heads", type=int, default=8, show_default=True)
@click.option("--ffn/--no-ffn", "use_ffn", default=False, show_default=True)
@click.option("--ffn-inner", type=int, default=2048, show_default=True)
@click.option("--share/--no-share", "share_layers", default=True, show_default=True)
@click.option("--as-json", "as_json", is_flag=True, default=False)
def size_report(classes, dim, width, precision, backbone_mib, classifier, embedding,
                layers, n_heads, use_ffn, ffn_inner, share_layers, as_json):
    """Head-only comparison, or a full model report when --backbone-mib is given."""
    if backbone_mib is None:
        softmax_bytes = sizing.softmax_head_bytes(classes, dim, precision)
        hamming_bytes = sizing.hamming_head_bytes(classes, dim, width, precision)
        payload = {
            "softmax_head_bytes": softmax_bytes,
            "softmax_head_mib": sizing.bytes_to_mib(softmax_bytes),
            "hamming_head_bytes": hamming_bytes,
            "hamming_head_mib": sizing.bytes_to_mib(hamming_bytes),
            "codebook_bytes": sizing.codebook_bytes(classes, width),
            "head_compression_ratio": softmax_bytes / hamming_bytes,
            "crossover_classes": sizing.head_size_crossover(dim, width, precision),
        }
        if as_json:
            click.echo(json.dumps(payload, indent=2, sort_keys=True))
        else:
            for key, value in payload.items():
                click.echo(f"{key}: {value}")
        return
    config = sizing.ModelConfig(
        backbone_bytes=int(backbone_mib * sizing.MIB),
        n_classes=classes,
        dim=dim,
        code_width=width,
        classifier=classifier,
        embedding=embedding,
        layers=layers,
        heads=n_heads,
        use_ffn=use_ffn,
        ffn_inner=ffn_inner,
        share_layers=share_layers,
        precision=precision,
    )
    report = sizing.model_size_report(config)
    click.echo(report.to_json() if as_json else report.to_text(), nl=False)


@size.command("ladder")
@config_option
@click.option("--chain", type=click.Choice(["mobile", "large", "all"]), default="mobile",
              show_default=True)
@click.option("--as-json", "as_json", is_flag=True, default=False)
def size_ladder(chain, as_json):
    """Emit the reference reduction ladders."""
    chains: dict[str, list[sizing.SizeReport]] = {}
    if chain in ("mobile", "all"):
        chains["mobile"] = sizing.mobile_reference_ladder()
    if chain in ("large", "all"):
        chains.update(sizing.large_reference_chains())
    if as_json:
        payload = {
            name: [report.to_dict() for report in reports] for name, reports in chains.items()
        }
        click.echo(json.dumps(payload, indent=2, sort_keys=True))
        return
    for name, reports in chains.items():
        click.echo(f"[{name}]")
        click.echo(sizing.ladder_table(reports), nl=False)


# ---------------------------------------------------------------------------
# sweep / bench


@cli.group()
def sweep() -> None:
    """Multi-configuration experiments."""


@sweep.command("codelen")
@config_option
@click.option("--classes", type=int, required=True)
@click.option("--dim", type=int, required=True)
@click.option("--samples", type=int, required=True)
@click.option("--noise", type=float, default=0.05, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--widths", type=str, required=True, help="Comma-separated code widths.")
@click.option("--codebook-kind", type=click.Choice(["lsh", "random"]), default="lsh",
              show_default=True)
@click.option("--codebook-seed", type=int, default=0, show_default=True)
@click.option("--margin", type=float, default=1.0, show_default=True)
@train_options
@click.option("--eval-samples", type=int, default=10, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def sweep_codelen(classes, dim, samples, noise, seed, widths, codebook_kind, codebook_seed,
                  margin, learning_rate, decay_rate, batch_size, epochs, train_seed,
                  eval_samples, workers, out):
    """Two-stage accuracy across code widths on one synthetic bank."""
    spec = harness.SyntheticBankSpec(
        n_classes=classes, dim=dim, samples_per_class=samples, noise=noise, seed=seed
    )
    config = _train_config(learning_rate, decay_rate, batch_size, epochs, train_seed)
    width_list = [int(w) for w in widths.split(",") if w.strip()]
    report = harness.sweep_code_length(
        spec,
        config,
        width_list,
        margin=margin,
        codebook_kind=codebook_kind,
        codebook_seed=codebook_seed,
        eval_samples_per_class=eval_samples,
        workers=workers,
    )
    harness.save_report(report, out)
    for row in report["rows"]:
        click.echo(
            f"width={row['code_width']} eval_accuracy={row['eval_accuracy']:.4f} "
            f"head_bytes={row['hamming_head_bytes']}"
        )
    click.echo(f"wrote {out}")


@cli.group()
def bench() -> None:
    """Micro-benchmarks."""


@bench.command("search")
@config_option
@click.option("--classes", type=int, default=20948, show_default=True)
@click.option("--width", type=int, default=512, show_default=True)
@click.option("--queries", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
def bench_search(classes, width, queries, seed, workers):
    """Exhaustive-scan throughput; prints queries/sec and a result checksum."""
    result = harness.bench_search(classes, width, queries, seed=seed, workers=workers)
    click.echo(f"checksum={result['result_checksum']}")
    click.echo(
        f"queries_per_second={result['queries_per_second']:.1f} "
        f"(n={queries}, classes={classes}, width={width}, workers={workers})"
    )


def main() -> None:
    """Console entry point with clean contract-violation reporting."""
    try:
        cli(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code or 2)
    except click.exceptions.Abort:
        sys.exit(130)
    except (ContractViolation, DivergenceError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)


if __name__ == "__main__":
    main()
