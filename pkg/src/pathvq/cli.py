"""Command-line pipeline orchestration.

Subcommands: train-vq, compress, decompress, pretrain, finetune, report.
Every run writes into --out: the resolved configuration, metrics.csv,
plots/*.svg, and checkpoints/. The PVQ_SEED environment variable
overrides the configured seed. Exit codes: 0 success, 2 configuration
error, 3 data or format error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import codec, config, downstream, msvq, plotting, pretrain, synth, tiles
from . import rng as rng_mod
from .config import ConfigError, Option
from .tiles import FormatError

# ---------------------------------------------------------------------------
# schemas (paper-scale defaults; desk runs override)
# ---------------------------------------------------------------------------

_COMMON = {"seed": Option(int, 0, help="master seed (PVQ_SEED overrides)")}

TRAIN_VQ = {
    **_COMMON,
    "mode": Option(str, "msvq", help="vq | msvq"),
    "scales": Option("int_list", (1, 2, 4, 7, 14)),
    "data": Option(str, "synthetic", help="'synthetic' or a PVQF path"),
    "tiles": Option(int, 512, help="synthetic tile count"),
    "dim": Option(int, 64, help="synthetic token dimension"),
    "grid": Option(int, 14),
    "prototypes": Option(int, 8),
    "smoothness": Option(float, 2.0),
    "noise": Option(float, 0.01),
    "intrinsic_dim": Option(int, 16),
    "code_dim": Option(int, 16),
    "codebook_size": Option(int, 8192),
    "enc_hidden": Option(int, 512),
    "dec_width": Option(int, 768),
    "dec_blocks": Option(int, 3),
    "dec_heads": Option(int, 12),
    "beta": Option(float, 0.25),
    "epochs": Option(int, 50),
    "batch_size": Option(int, 128),
    "lr": Option(float, 2e-4),
    "warmup_epochs": Option(int, 5),
    "min_lr": Option(float, 1e-5),
    "weight_decay": Option(float, 1e-4),
    "beta1": Option(float, 0.9),
    "beta2": Option(float, 0.99),
    "reinit_dead_every": Option(int, 1),
    "align_adapter": Option(bool, True),
    "align_epochs": Option(int, 20),
    "align_lr": Option(float, 1e-3),
    "eval_fraction": Option(float, 0.1),
    "fig_compare": Option(bool, False, help="also train the summary-only baseline"),
}

COMPRESS = {
    **_COMMON,
    "artifact": Option(str, required=True),
    "data": Option(str, required=True, help="PVQF feature file"),
    "batch_size": Option(int, 256),
}

DECOMPRESS = {
    **_COMMON,
    "artifact": Option(str, required=True),
    "stream": Option(str, required=True, help="PVQI index stream"),
}

PRETRAIN = {
    **_COMMON,
    "artifact": Option(str, required=True),
    "stream": Option(str, required=True, help="PVQI stream of whole regions"),
    "objective": Option(str, "mim", help="abmil | mim"),
    "epochs": Option(int, 20),
    "batch_size": Option(int, 0, help="0 = objective default (64 abmil, 32 mim)"),
    "lr": Option(float, 5e-4),
    "warmup_epochs": Option(int, 2),
    "min_lr": Option(float, 1e-5),
    "weight_decay": Option(float, 1e-4),
    "beta1": Option(float, 0.9),
    "beta2": Option(float, 0.98),
    "mask": Option(int, 96),
    "width": Option(int, 512),
    "heads": Option(int, 8),
    "depth": Option(int, 6),
    "attn_hidden": Option(int, 128),
    "rope_base": Option(float, 100.0),
    "target_scale": Option(str, "tile", help="tile | patch (histogram targets)"),
    "checkpoint_every": Option(int, 1),
}

FINETUNE = {
    **_COMMON,
    "artifact": Option(str, required=True),
    "manifest": Option(str, required=True, help="CSV of tiles and labels"),
    "task": Option(str, "cls", help="cls | surv"),
    "head": Option(str, "abmil", help="abmil | roformer"),
    "folds": Option(int, 5),
    "epochs": Option(int, 20),
    "lr": Option(float, 1e-4),
    "weight_decay": Option(float, 1e-4),
    "init": Option(str, "scratch", help="scratch | pretrained"),
    "pretrained_ckpt": Option(str, ""),
    "adapter": Option(str, "pt-ft", help="rd-fz | rd-ft | pt-fz | pt-ft"),
    "n_bins": Option(int, 4),
    "lora_rank": Option(int, 16),
    "lora_alpha": Option(float, 16.0),
    "width": Option(int, 512),
    "depth": Option(int, 6),
    "heads": Option(int, 8),
    "attn_hidden": Option(int, 128),
    "rope_base": Option(float, 100.0),
    "workers": Option(int, 1),
}

REPORT = {
    **_COMMON,
    "dim": Option(int, 1024),
    "grid": Option(int, 14),
    "scales": Option("int_list", (1, 2, 4, 7, 14)),
    "code_dim": Option(int, 16),
    "dtype": Option(str, "f32"),
    "region_tiles": Option(int, 256),
}

SCHEMAS = {
    "train-vq": TRAIN_VQ,
    "compress": COMPRESS,
    "decompress": DECOMPRESS,
    "pretrain": PRETRAIN,
    "finetune": FINETUNE,
    "report": REPORT,
}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _prepare_run_dir(out: str, values: dict) -> Path:
    run = Path(out)
    (run / "plots").mkdir(parents=True, exist_ok=True)
    (run / "checkpoints").mkdir(exist_ok=True)
    config.write_resolved(run / "config.resolved", values)
    return run


def _resolve(args, schema: dict) -> dict:
    file_values = config.parse_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key.strip()] = val.strip()
    for key, val in vars(args).items():
        if key in schema and val is not None:
            overrides[key] = val
    values = config.resolve(schema, file_values, overrides)
    env_seed = os.environ.get("PVQ_SEED")
    if env_seed is not None and "seed" in schema:
        try:
            values["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"PVQ_SEED must be an integer, got {env_seed!r}") from exc
    return values


def _save_model_checkpoint(path, kind: str, model, extra: dict) -> None:
    header = {"kind": kind, **extra}
    codec.write_container(path, header, [(k, v) for k, v in model.state_dict().items()])


# ---------------------------------------------------------------------------
# train-vq
# ---------------------------------------------------------------------------


def cmd_train_vq(values: dict, run: Path) -> int:
    seed = values["seed"]
    if values["data"] == "synthetic":
        scfg = synth.SynthConfig(
            seed=seed,
            dim=values["dim"],
            grid=values["grid"],
            prototypes=values["prototypes"],
            smoothness=values["smoothness"],
            noise=values["noise"],
            intrinsic_dim=values["intrinsic_dim"],
        )
        all_tiles = [synth.generate_tile(scfg, i) for i in range(values["tiles"])]
        dim, grid = scfg.dim, scfg.grid
        data_id = f"synthetic:{values['tiles']}"
    else:
        all_tiles = list(tiles.read_feature_file(values["data"]))
        if not all_tiles:
            raise FormatError("feature file holds no tiles")
        dim, grid = all_tiles[0].dim, all_tiles[0].p
        data_id = values["data"]

    n_eval = max(1, int(len(all_tiles) * values["eval_fraction"]))
    order = rng_mod.generator(seed, "eval-split").permutation(len(all_tiles))
    eval_tiles = [all_tiles[i] for i in order[:n_eval]]
    train_tiles = [all_tiles[i] for i in order[n_eval:]]
    train_grids = np.stack([t.grid for t in train_tiles])
    eval_grids = np.stack([t.grid for t in eval_tiles])

    if values["mode"] not in ("vq", "msvq"):
        raise ConfigError(f"unknown mode {values['mode']!r}")
    scales = (grid,) if values["mode"] == "vq" else tuple(values["scales"])
    tok_cfg = msvq.TokenizerConfig(
        dim=dim,
        grid=grid,
        code_dim=values["code_dim"],
        codebook_size=values["codebook_size"],
        enc_hidden=values["enc_hidden"],
        dec_width=values["dec_width"],
        dec_blocks=values["dec_blocks"],
        dec_heads=values["dec_heads"],
        scales=scales,
        beta=values["beta"],
    )
    tcfg = msvq.TrainerConfig(
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        lr=values["lr"],
        warmup_epochs=values["warmup_epochs"],
        min_lr=values["min_lr"],
        weight_decay=values["weight_decay"],
        betas=(values["beta1"], values["beta2"]),
        seed=seed,
        reinit_dead_every=values["reinit_dead_every"],
    )
    tok = msvq.Tokenizer(tok_cfg, seed=seed)
    history = msvq.train_tokenizer(tok, train_grids, tcfg, log=lambda r: print(_fmt_row(r)))
    eval_cos = msvq.eval_reconstruction_cosine(tok, eval_grids)
    print(f"held-out reconstruction cosine: {eval_cos:.4f}")

    if values["align_adapter"]:
        acfg = downstream.AlignConfig(
            epochs=values["align_epochs"], lr=values["align_lr"], seed=seed
        )
        align_hist = downstream.align_and_attach(tok, train_grids, acfg)
        plotting.write_csv(run / "align.csv", align_hist)
        plotting.line_chart(
            {"adapter cosine": [r["cosine"] for r in align_hist]},
            run / "plots" / "adapter_align.svg",
            title="adapter alignment",
            ylabel="cosine",
        )

    plotting.write_csv(run / "metrics.csv", history)
    plotting.line_chart(
        {"loss": [r["loss"] for r in history], "cosine": [r["cosine"] for r in history]},
        run / "plots" / "loss.svg",
        title="tokenizer training",
    )
    plotting.line_chart(
        {"perplexity": [r["perplexity"] for r in history]},
        run / "plots" / "perplexity.svg",
        title="codebook perplexity",
        ylabel="perplexity",
    )

    if values["fig_compare"]:
        curves = msvq.cls_baseline_recon(train_tiles, eval_tiles, tok_cfg, tcfg, seed=seed)
        rows = [
            {"epoch": i, "vq_cosine": v, "cls_cosine": c}
            for i, (v, c) in enumerate(zip(curves.vq, curves.cls))
        ]
        plotting.write_csv(run / "fidelity.csv", rows)
        plotting.line_chart(
            {"quantized tokens": curves.vq, "summary vector": curves.cls},
            run / "plots" / "fidelity.svg",
            title="reconstruction fidelity",
            ylabel="mean cosine",
        )
        print(f"fidelity final: vq={curves.vq[-1]:.4f} cls={curves.cls[-1]:.4f}")

    fingerprint = {
        "seed": seed,
        "epochs": values["epochs"],
        "data": data_id,
        "final_loss": history[-1]["loss"] if history else None,
        "eval_cosine": eval_cos,
    }
    codec.save_tokenizer(run / "checkpoints" / "tokenizer.pvqt", tok, fingerprint)
    print(f"artifact written: {run / 'checkpoints' / 'tokenizer.pvqt'}")
    return 0


def _fmt_row(row: dict) -> str:
    parts = []
    for key, val in row.items():
        parts.append(f"{key}={val:.5f}" if isinstance(val, float) else f"{key}={val}")
    return "  ".join(parts)


# ---------------------------------------------------------------------------
# compress / decompress / report
# ---------------------------------------------------------------------------


def _print_report(rep: codec.CompressionReport, regions: int = 250_000) -> None:
    print(f"dim ratio: {rep.dim_ratio:g}x")
    print(f"byte ratio: {rep.byte_ratio:.1f}x ({rep.raw_tile_bytes} B -> {rep.index_tile_bytes} B per tile)")
    print(f"region bytes: {rep.tile_token_region_bytes} (tile tokens) / {rep.full_region_bytes} (all scales)")
    print(
        f"at {regions} regions: "
        f"{rep.tile_token_region_bytes * regions / 1e6:.0f} MB tile tokens, "
        f"{rep.full_region_bytes * regions / 1e6:.0f} MB all scales"
    )


def cmd_compress(values: dict, run: Path) -> int:
    tok = codec.load_tokenizer(values["artifact"])
    info = tiles.probe_feature_file(values["data"])
    if (info.dim, info.p) != (tok.cfg.dim, tok.cfg.grid):
        raise FormatError(
            f"feature geometry ({info.dim},{info.p}) does not match artifact "
            f"({tok.cfg.dim},{tok.cfg.grid})"
        )
    start = time.perf_counter()
    stream = codec.compress_tiles(
        tok, tiles.read_feature_file(values["data"]), batch_size=values["batch_size"]
    )
    seconds = time.perf_counter() - start
    out_path = run / "stream.pvqi"
    codec.write_index_stream(out_path, stream)
    rep = codec.compression_report(
        tok.cfg.dim, tok.cfg.grid, tok.cfg.schedule, tok.cfg.code_dim
    )
    _print_report(rep)
    print(f"compressed {len(stream)} tiles in {seconds:.2f}s -> {out_path}")
    plotting.write_csv(
        run / "metrics.csv",
        [
            {
                "tiles": len(stream),
                "seconds": round(seconds, 4),
                "tiles_per_second": round(len(stream) / max(seconds, 1e-9), 2),
                "raw_tile_bytes": rep.raw_tile_bytes,
                "index_tile_bytes": rep.index_tile_bytes,
                "dim_ratio": rep.dim_ratio,
                "byte_ratio": rep.byte_ratio,
            }
        ],
    )
    return 0


def cmd_decompress(values: dict, run: Path) -> int:
    tok = codec.load_tokenizer(values["artifact"])
    stream = codec.read_index_stream(values["stream"])
    out_path = run / "reconstructed.pvqf"
    count = tiles.write_feature_file(
        out_path,
        codec.decompress_tiles(tok, stream),
        dim=tok.cfg.dim,
        p=tok.cfg.grid,
        has_cls=False,
    )
    print(f"decompressed {count} tiles -> {out_path}")
    return 0


def cmd_report(values: dict, run: Path) -> int:
    schedule = tuple((s, s) for s in values["scales"])
    rep = codec.compression_report(
        values["dim"],
        values["grid"],
        schedule,
        values["code_dim"],
        dtype=values["dtype"],
        region_tiles=values["region_tiles"],
    )
    _print_report(rep)
    plotting.write_csv(run / "metrics.csv", [rep.__dict__])
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def cmd_pretrain(values: dict, run: Path) -> int:
    tok = codec.load_tokenizer(values["artifact"])
    if tok.adapter is None:
        raise FormatError("tokenizer artifact has no aligned adapter; rerun train-vq with align_adapter")
    stream = codec.read_index_stream(values["stream"])
    if tuple(map(tuple, stream.schedule)) != tok.cfg.schedule:
        raise FormatError("stream schedule does not match the tokenizer artifact")
    objective = values["objective"]
    if objective not in ("abmil", "mim"):
        raise ConfigError(f"unknown objective {objective!r}")
    data = pretrain.build_region_dataset(tok, stream, target_scale=values["target_scale"])
    batch = values["batch_size"] or (64 if objective == "abmil" else 32)
    scfg = pretrain.SslTrainerConfig(
        epochs=values["epochs"],
        batch_size=batch,
        lr=values["lr"],
        warmup_epochs=values["warmup_epochs"],
        min_lr=values["min_lr"],
        weight_decay=values["weight_decay"],
        betas=(values["beta1"], values["beta2"]),
        mask_count=values["mask"],
        seed=values["seed"],
    )
    in_dim = data.features.shape[-1]
    extra = {
        "objective": objective,
        "in_dim": in_dim,
        "vocab": data.vocab,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in values.items()},
    }
    ckpt_dir = run / "checkpoints"

    if objective == "abmil":
        model = pretrain.AbmilModel(
            in_dim, data.vocab, attn_hidden=values["attn_hidden"], seed=values["seed"]
        )
        kind = "abmil-ssl"
    else:
        model = pretrain.WsiTransformer(
            in_dim,
            data.vocab,
            width=values["width"],
            heads=values["heads"],
            depth=values["depth"],
            seed=values["seed"],
            rope_base=values["rope_base"],
        )
        kind = "mim-ssl"

    _save_model_checkpoint(ckpt_dir / "init.pvqt", kind, model, extra)

    every = max(values["checkpoint_every"], 1)

    def log(row: dict) -> None:
        print(_fmt_row(row))
        if (row["epoch"] + 1) % every == 0:
            _save_model_checkpoint(ckpt_dir / f"epoch_{row['epoch'] + 1:04d}.pvqt", kind, model, extra)

    if objective == "abmil":
        history = pretrain.train_abmil_ssl(model, data, scfg, log=log)
    else:
        history = pretrain.train_mim(model, data, scfg, log=log)

    _save_model_checkpoint(ckpt_dir / "final.pvqt", kind, model, extra)
    plotting.write_csv(run / "metrics.csv", history)
    if history:
        series = {k: [r[k] for r in history] for k in history[0] if k != "epoch"}
        plotting.line_chart(series, run / "plots" / "pretrain.svg", title=f"{objective} pretraining")
    print(f"checkpoints in {ckpt_dir}")
    return 0


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------


def load_manifest_bags(path, tok: msvq.Tokenizer) -> list:
    """Build slide bags from a CSV manifest of tiles.

    Columns: path (PVQF or PVQI), x, y, slide_id, and either `label` or
    `time` + `event`. Rows belonging to one slide_id form one bag.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError("empty manifest")
    needed = {"path", "x", "y", "slide_id"}
    if not needed.issubset(rows[0]):
        raise FormatError(f"manifest needs columns {sorted(needed)}")
    has_label = "label" in rows[0]
    has_surv = "time" in rows[0] and "event" in rows[0]
    if not has_label and not has_surv:
        raise FormatError("manifest needs a 'label' column or 'time' and 'event' columns")

    base = Path(path).parent
    file_cache: dict = {}

    def tile_index(file_path: str):
        if file_path not in file_cache:
            full = Path(file_path)
            if not full.is_absolute():
                full = base / full
            if full.suffix == ".pvqi":
                stream = codec.read_index_stream(full)
                index = {tuple(c): i for i, c in enumerate(stream.coords.tolist())}
                file_cache[file_path] = ("stream", stream, index)
            else:
                by_coord = {t.coords: t for t in tiles.read_feature_file(full)}
                file_cache[file_path] = ("tiles", by_coord, None)
        return file_cache[file_path]

    slides: dict = {}
    for row in rows:
        slides.setdefault(row["slide_id"], []).append(row)

    bags = []
    for slide_id, slide_rows in slides.items():
        latent_parts, coords = [], []
        for row in slide_rows:
            kind, store, index = tile_index(row["path"])
            key = (int(row["x"]), int(row["y"]))
            if kind == "stream":
                if key not in index:
                    raise FormatError(f"slide {slide_id}: no tile at {key} in {row['path']}")
                maps = store.token_maps([index[key]])
                latent_parts.append(tok.reconstruct_latent(maps)[0])
            else:
                if key not in store:
                    raise FormatError(f"slide {slide_id}: no tile at {key} in {row['path']}")
                maps = tok.encode_grids(store[key].grid[None], update_usage=False)
                latent_parts.append(tok.reconstruct_latent(maps)[0])
            coords.append(key)
        first = slide_rows[0]
        labels: dict = {"slide_id": slide_id}
        if has_label:
            labels["label"] = int(first["label"])
        if has_surv:
            labels["time"] = float(first["time"])
            labels["event"] = int(first["event"])
        bags.append(
            downstream.SlideBag(
                latents=np.stack(latent_parts), coords=np.array(coords, dtype=np.int64), **labels
            )
        )
    return bags


def cmd_finetune(values: dict, run: Path) -> int:
    tok = codec.load_tokenizer(values["artifact"])
    bags = load_manifest_bags(values["manifest"], tok)
    task = {"cls": "classification", "surv": "survival"}.get(values["task"])
    if task is None:
        raise ConfigError(f"unknown task {values['task']!r} (use cls or surv)")
    adapter_mode = values["adapter"]
    channels = (
        tok.adapter.channels
        if tok.adapter is not None
        else downstream.default_adapter_channels(tok.cfg.dim)
    )
    if adapter_mode.startswith("pt") and tok.adapter is None:
        raise FormatError("adapter mode 'pt-*' needs an artifact with an aligned adapter")
    pretrained_state = None
    if values["init"] == "pretrained":
        if not values["pretrained_ckpt"]:
            raise ConfigError("init=pretrained requires pretrained_ckpt")
        header, blobs = codec.read_container(values["pretrained_ckpt"])
        want = "abmil-ssl" if values["head"] == "abmil" else "mim-ssl"
        if header.get("kind") != want:
            raise FormatError(
                f"checkpoint kind {header.get('kind')!r} does not fit head {values['head']!r}"
            )
        pretrained_state = blobs
    cfg = downstream.FinetuneConfig(
        task=task,
        head=values["head"],
        init=values["init"],
        adapter_mode=adapter_mode,
        folds=values["folds"],
        epochs=values["epochs"],
        lr=values["lr"],
        weight_decay=values["weight_decay"],
        seed=values["seed"],
        n_bins=values["n_bins"],
        lora_rank=values["lora_rank"],
        lora_alpha=values["lora_alpha"],
        adapter_channels=tuple(channels),
        code_dim=tok.cfg.code_dim,
        grid=tok.cfg.grid,
        attn_hidden=values["attn_hidden"],
        width=values["width"],
        depth=values["depth"],
        heads=values["heads"],
        rope_base=values["rope_base"],
    )
    result = downstream.finetune_cv(
        bags,
        cfg,
        adapter_state=tok.adapter.state_dict() if tok.adapter is not None else None,
        pretrained_state=pretrained_state,
        workers=values["workers"],
    )
    rows = [dict(f) for f in result.folds]
    summary_row: dict = {"fold": "summary"}
    for metric, (mean, std) in result.summary.items():
        summary_row[metric] = mean
        summary_row[f"{metric}_std"] = std
        print(f"{metric}: {mean:.4f} +/- {std:.4f}")
    rows.append(summary_row)
    plotting.write_csv(run / "metrics.csv", rows)
    metric = next(iter(result.summary))
    plotting.line_chart(
        {metric: [f[metric] for f in result.folds]},
        run / "plots" / "folds.svg",
        title=f"{task} per fold",
        xlabel="fold",
        ylabel=metric,
    )
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathvq",
        description="vector-quantization codec and slide-level SSL pipelines",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, **flags):
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key")
        for flag, key in flags.items():
            p.add_argument(flag, dest=key, default=None)
        return p

    add("train-vq", **{"--mode": "mode", "--scales": "scales", "--epochs": "epochs", "--data": "data", "--seed": "seed"})
    add("compress", **{"--artifact": "artifact", "--data": "data"})
    add("decompress", **{"--artifact": "artifact", "--stream": "stream"})
    add(
        "pretrain",
        **{
            "--artifact": "artifact",
            "--stream": "stream",
            "--objective": "objective",
            "--mask": "mask",
            "--epochs": "epochs",
        },
    )
    add(
        "finetune",
        **{
            "--artifact": "artifact",
            "--manifest": "manifest",
            "--task": "task",
            "--folds": "folds",
            "--init": "init",
            "--adapter": "adapter",
            "--epochs": "epochs",
            "--workers": "workers",
            "--pretrained-ckpt": "pretrained_ckpt",
        },
    )
    add("report")
    return parser


_HANDLERS = {
    "train-vq": cmd_train_vq,
    "compress": cmd_compress,
    "decompress": cmd_decompress,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        values = _resolve(args, SCHEMAS[args.command])
        run = _prepare_run_dir(args.out, values)
        return _HANDLERS[args.command](values, run)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except ad.NonFiniteError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4
    except (FormatError, FileNotFoundError, KeyError, ValueError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
