"""Command-line front end: one experiment config drives every subcommand.

Each subcommand reads its inputs from the run directory that earlier
subcommands populated (corpus/, pyramid.bin, stage1.bin, stage2.bin, ...),
performs one pipeline operation, and appends an immutable JSON run record
under records/. Exit codes: 0 success, 2 usage errors, 3 config problems,
4 training divergence, 1 anything else, always with a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import latent_diffusion as ld
from . import motion_autoencoder as mae
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .dataset import Corpus, load_corpus, save_corpus, synthesize_corpus, corpus_stats
from .motion import FaceTemplate, load_motion, save_motion
from .pyramid import build_pyramid, load_pyramid, save_pyramid
from .rng import named_rng

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DIVERGED = 4


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------

def source_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True,
            cwd=Path(__file__).parent, timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_run_record(out_dir: Path, subcommand: str, cfg_hash: str, seed: int,
                     metrics: dict, wall_clock: float, artifacts: list) -> Path:
    """Append a write-once record; every listed artifact must exist."""
    for art in artifacts:
        if not Path(art).exists():
            raise RuntimeError(f"record lists missing artifact {art}")
    records = out_dir / "records"
    records.mkdir(parents=True, exist_ok=True)
    index = 0
    while (records / f"record-{subcommand}-{index:03d}.json").exists():
        index += 1
    path = records / f"record-{subcommand}-{index:03d}.json"
    payload = {
        "subcommand": subcommand,
        "config_hash": cfg_hash,
        "source_revision": source_revision(),
        "seed": seed,
        "metrics": metrics,
        "wall_clock_s": wall_clock,
        "artifacts": [str(a) for a in artifacts],
    }
    with open(path, "x", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_run_records(out_dir: Path) -> list:
    records = sorted((out_dir / "records").glob("record-*.json"))
    return [json.loads(p.read_text(encoding="utf-8")) for p in records]


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _experiment(args) -> tuple:
    """(config, seed, out_dir) from --config/--seed/--out."""
    if not getattr(args, "config", None):
        raise ConfigError("a --config file is required")
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    cfg = load_config(path)
    seed = args.seed if args.seed is not None else cfg.seed
    out = Path(args.out) if args.out else Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, int(seed), out


def _load_corpus(out: Path) -> Corpus:
    return load_corpus(out / "corpus")


def _load_pyramid(out: Path):
    return load_pyramid(out / "pyramid.bin")


def _pick_split(corpus: Corpus) -> str:
    for split in ("test", "val", "train"):
        if corpus.split_samples(split):
            return split
    raise ValueError("corpus has no samples")


def _pick_sample(corpus: Corpus, name):
    if name is None:
        return corpus.split_samples(_pick_split(corpus))[0]
    for sample in corpus.samples:
        if sample.name == name:
            return sample
    raise ValueError(f"no corpus sample named {name!r}")


def _generation_seeds(seed: int, count: int) -> list:
    rng = named_rng(seed, "harness/generations")
    return [int(s) for s in rng.integers(0, 2**62, size=count)]


def _fixed_initial_noise(t: int, h: int, c: int) -> np.ndarray:
    """Canonical Z^N for --deterministic-sampler: depends on shape only,
    so repeated runs (any seed) denoise the same starting point."""
    return named_rng(0, "harness/fixed-init").standard_normal((t, h, c))


def _generate(corpus, pyramid, ck1, ck2, sample, style_index, seed,
              snap_codebook, deterministic):
    template = FaceTemplate(mesh=sample.template)
    initial = None
    if deterministic:
        initial = _fixed_initial_noise(
            sample.audio.features.shape[0], ck1.config.latent_h, ck1.config.latent_c)
    return ld.generate_animation(
        sample.audio, style_index, template, ck1, ck2, pyramid, seed=seed,
        snap_codebook=snap_codebook, deterministic=deterministic,
        initial_noise=initial)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth_corpus(args) -> int:
    cfg, seed, out = _experiment(args)
    t0 = time.monotonic()
    corpus = synthesize_corpus(cfg.corpus, seed)
    save_corpus(out / "corpus", corpus)
    stats = corpus_stats(corpus)
    write_run_record(out, "synth-corpus", config_hash(cfg), seed, stats,
                     time.monotonic() - t0, [out / "corpus" / "corpus.ini"])
    print(f"corpus: {stats['samples']} samples, {stats['subjects']} subjects -> {out / 'corpus'}")
    return EXIT_OK


def cmd_build_pyramid(args) -> int:
    cfg, seed, out = _experiment(args)
    t0 = time.monotonic()
    corpus = _load_corpus(out)
    pyr = build_pyramid(corpus.base_mesh, cfg.pyramid.levels, cfg.pyramid.keep_ratios,
                        cfg.pyramid.kernel_size, cfg.pyramid.dilation)
    save_pyramid(out / "pyramid.bin", pyr)
    counts = [m.n_vertices for m in pyr.meshes]
    write_run_record(out, "build-pyramid", config_hash(cfg), seed,
                     {"vertex_counts": counts}, time.monotonic() - t0,
                     [out / "pyramid.bin"])
    print(f"pyramid levels {counts} -> {out / 'pyramid.bin'}")
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg, seed, out = _experiment(args)
    stage_cfg = cfg.stage1
    if args.epochs is not None:
        stage_cfg = dataclasses.replace(stage_cfg, epochs=args.epochs)
    t0 = time.monotonic()
    corpus = _load_corpus(out)
    pyr = _load_pyramid(out)
    ckpt = mae.train_stage1(corpus, pyr, stage_cfg, seed=seed)
    mae.save_stage1_checkpoint(out / "stage1.bin", ckpt)
    final = ckpt.loss_curve[-1].tolist() if ckpt.loss_curve.size else None
    write_run_record(out, "train-stage1", config_hash(cfg), seed,
                     {"final_loss": final, "epochs": stage_cfg.epochs},
                     time.monotonic() - t0, [out / "stage1.bin"])
    print(f"stage1 trained {stage_cfg.epochs} epochs -> {out / 'stage1.bin'}")
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg, seed, out = _experiment(args)
    stage_cfg = cfg.stage2
    if args.epochs is not None:
        stage_cfg = dataclasses.replace(stage_cfg, epochs=args.epochs)
    t0 = time.monotonic()
    corpus = _load_corpus(out)
    pyr = _load_pyramid(out)
    ck1 = mae.load_stage1_checkpoint(out / "stage1.bin")
    ckpt = ld.train_stage2(corpus, ck1, pyr, stage_cfg, seed=seed)
    ld.save_stage2_checkpoint(out / "stage2.bin", ckpt)
    final = ckpt.loss_curve[-1].tolist() if ckpt.loss_curve.size else None
    write_run_record(out, "train-stage2", config_hash(cfg), seed,
                     {"final_loss": final, "epochs": stage_cfg.epochs},
                     time.monotonic() - t0, [out / "stage2.bin"])
    print(f"stage2 trained {stage_cfg.epochs} epochs -> {out / 'stage2.bin'}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, seed, out = _experiment(args)
    t0 = time.monotonic()
    corpus = _load_corpus(out)
    pyr = _load_pyramid(out)
    ck1 = mae.load_stage1_checkpoint(out / "stage1.bin")
    ck2 = ld.load_stage2_checkpoint(out / "stage2.bin")
    sample = _pick_sample(corpus, args.sample)
    style = args.subject if args.subject is not None \
        else corpus.style_index(sample.subject_id)
    gen_dir = out / "samples"
    gen_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, gen_seed in enumerate(_generation_seeds(seed, args.gens)):
        anim = _generate(corpus, pyr, ck1, ck2, sample, style, gen_seed,
                         args.snap_codebook, args.deterministic_sampler)
        path = gen_dir / f"{sample.name}-g{k}.bin"
        save_motion(path, anim.motion)
        paths.append(path)
    write_run_record(out, "sample", config_hash(cfg), seed,
                     {"sample": sample.name, "generations": args.gens,
                      "subject": int(style)},
                     time.monotonic() - t0, paths)
    print(f"wrote {len(paths)} generation(s) for {sample.name} under {gen_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, seed, out = _experiment(args)
    t0 = time.monotonic()
    corpus = _load_corpus(out)
    split = args.split or _pick_split(corpus)
    samples = corpus.split_samples(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")

    diversity_value = None
    if args.pred_dir:
        pred_dir = Path(args.pred_dir)
        preds = {s.name: load_motion(pred_dir / f"{s.name}.bin").data for s in samples}
    else:
        pyr = _load_pyramid(out)
        ck1 = mae.load_stage1_checkpoint(out / "stage1.bin")
        ck2 = ld.load_stage2_checkpoint(out / "stage2.bin")
        preds = {}
        for sample, gen_seed in zip(samples, _generation_seeds(seed, len(samples))):
            style = corpus.style_index(sample.subject_id)
            anim = _generate(corpus, pyr, ck1, ck2, sample, style, gen_seed,
                             args.snap_codebook, args.deterministic_sampler)
            preds[sample.name] = anim.motion.data
        if args.gens >= 2:
            first = samples[0]
            style = corpus.style_index(first.subject_id)
            gens = [
                _generate(corpus, pyr, ck1, ck2, first, style, gen_seed,
                          args.snap_codebook, args.deterministic_sampler).motion.data
                for gen_seed in _generation_seeds(seed + 1, args.gens)
            ]
            diversity_value = ev.diversity(gens)

    lve = float(np.mean([
        ev.lip_vertex_error(preds[s.name], s.motion.data, corpus.lip_mask,
                            squared=args.squared_lve)
        for s in samples
    ]))
    fdd = float(np.mean([
        ev.facial_dynamics_deviation(preds[s.name], s.motion.data, corpus.upper_mask)
        for s in samples
    ]))
    report = ev.MetricsReport(lve=lve, fdd=fdd, diversity=diversity_value,
                              sample_count=len(samples), config_hash=config_hash(cfg))
    ev.write_metrics(out / "metrics.txt", report)
    write_run_record(out, "evaluate", config_hash(cfg), seed,
                     {k: v for k, v in report.as_dict().items() if k != "config_hash"},
                     time.monotonic() - t0, [out / "metrics.txt"])
    print(f"split {split}: lve={lve!r} fdd={fdd!r} diversity={diversity_value!r}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    cfg, seed, out = _experiment(args)
    t0 = time.monotonic()
    corpus = _load_corpus(out)
    if args.motion:
        motion = load_motion(args.motion)
    else:
        motion = _pick_sample(corpus, args.sample).motion
    image = out / "heatmap.png"
    raw = out / "heatmap.f32"
    ev.motion_std_heatmap(motion, mesh=corpus.base_mesh, image_path=image, raw_path=raw)
    write_run_record(out, "heatmap", config_hash(cfg), seed,
                     {"frames": motion.n_frames}, time.monotonic() - t0, [image, raw])
    print(f"heatmap -> {image}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg, seed, out = _experiment(args)
    t0 = time.monotonic()
    records = read_run_records(out)
    if not records:
        raise ValueError(f"no run records under {out / 'records'}")
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    table = _format_report_table(records)
    (report_dir / "report.txt").write_text(table, encoding="utf-8")
    plots = _emit_report_plots(records, report_dir)
    write_run_record(out, "report", config_hash(cfg), seed,
                     {"records": len(records)}, time.monotonic() - t0,
                     [report_dir / "report.txt", *plots])
    print(table)
    return EXIT_OK


def _metric_cell(record: dict, key: str) -> str:
    value = record.get("metrics", {}).get(key)
    if value is None:
        return "—"
    return f"{value:.6g}" if isinstance(value, float) else str(value)


def _format_report_table(records: list) -> str:
    header = ["config", "subcommand", "seed", "lve", "fdd", "diversity", "wall_s"]
    rows = []
    by_hash: dict = {}
    for rec in records:
        by_hash.setdefault(rec["config_hash"], []).append(rec)
    for cfg_hash in sorted(by_hash):
        for rec in by_hash[cfg_hash]:
            rows.append([
                cfg_hash[:12],
                rec["subcommand"],
                str(rec["seed"]),
                _metric_cell(rec, "lve"),
                _metric_cell(rec, "fdd"),
                _metric_cell(rec, "diversity"),
                f"{rec['wall_clock_s']:.2f}",
            ])
        rows.append(None)
    if rows and rows[-1] is None:
        rows.pop()
    widths = [max(len(header[i]), *(len(r[i]) for r in rows if r is not None))
              for i in range(len(header))]
    def fmt(row):
        return "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    for row in rows:
        lines.append("" if row is None else fmt(row))
    return "\n".join(lines) + "\n"


def _emit_report_plots(records: list, report_dir: Path) -> list:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    curves = []
    for rec in records:
        if rec["subcommand"] not in ("train-stage1", "train-stage2"):
            continue
        for art in rec["artifacts"]:
            path = Path(art)
            if not path.exists():
                continue
            try:
                if rec["subcommand"] == "train-stage1":
                    curve = mae.load_stage1_checkpoint(path).loss_curve
                else:
                    curve = ld.load_stage2_checkpoint(path).loss_curve
            except Exception:
                continue
            if curve.size:
                curves.append((f"{rec['subcommand']} {rec['config_hash'][:8]}", curve))
    if curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, curve in curves:
            ax.plot(curve[:, 0], label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        path = report_dir / "loss_curves.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    diversities = [(i, rec["metrics"]["diversity"]) for i, rec in enumerate(records)
                   if rec.get("metrics", {}).get("diversity") is not None]
    if diversities:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar([str(i) for i, _ in diversities], [d for _, d in diversities])
        ax.set_xlabel("record")
        ax.set_ylabel("diversity")
        path = report_dir / "diversity.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the config output directory")

    parser = argparse.ArgumentParser(
        prog="spiraldiff",
        description="two-stage quantized latent diffusion for mesh motion",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sub.add_parser("synth-corpus", parents=[common]).set_defaults(fn=cmd_synth_corpus)
    sub.add_parser("build-pyramid", parents=[common]).set_defaults(fn=cmd_build_pyramid)

    p = sub.add_parser("train-stage1", parents=[common])
    p.add_argument("--epochs", type=int, help="override stage-1 epoch count")
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("train-stage2", parents=[common])
    p.add_argument("--epochs", type=int, help="override stage-2 epoch count")
    p.set_defaults(fn=cmd_train_stage2)

    p = sub.add_parser("sample", parents=[common])
    p.add_argument("--sample", help="corpus sample providing audio + template")
    p.add_argument("--subject", type=int, help="style index (defaults to the sample's)")
    p.add_argument("--gens", type=int, default=1, help="number of generations")
    p.add_argument("--snap-codebook", action="store_true",
                   help="quantize sampled latents onto codebook rows")
    p.add_argument("--deterministic-sampler", action="store_true",
                   help="variance-zero sampling from a canonical start")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--pred-dir", help="score stored <name>.bin files instead of sampling")
    p.add_argument("--gens", type=int, default=2,
                   help="generations for the diversity metric")
    p.add_argument("--squared-lve", action="store_true")
    p.add_argument("--snap-codebook", action="store_true")
    p.add_argument("--deterministic-sampler", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("heatmap", parents=[common])
    p.add_argument("--sample", help="corpus sample to visualize")
    p.add_argument("--motion", help="motion file to visualize instead")
    p.set_defaults(fn=cmd_heatmap)

    sub.add_parser("report", parents=[common]).set_defaults(fn=cmd_report)
    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        # keep diagnostics single-line: divergence passes through fp overflow
        with np.errstate(all="ignore"):
            return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except mae.DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
