"""Command-line entry point.

    vlcfusion synth-data      generate the synthetic dataset
    vlcfusion split           build train/val/test_seen/test_unseen splits
    vlcfusion mine-conditions caption, extract and deduplicate conditions
    vlcfusion respond         answer every condition for every scene
    vlcfusion rank            consistency over repeated runs, top-k selection
    vlcfusion train           train one or all fusion variants
    vlcfusion eval            evaluate a checkpoint on seen and unseen splits
    vlcfusion ablate-k        sweep the number of conditions
    vlcfusion ablate-backend  sweep mock backend noise profiles

Every artifact lands under ``--out-dir``; ``run_manifest.json`` there
records the resolved config, its hash and the hash of every file each
command wrote. Settings resolve as flag > config file > default.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import conditions as cp
from . import io as aio
from .detector import DETECTOR_VARIANTS, load_detector, save_detector, evaluate
from .experiments import (
    BenchConfig,
    ORACLE_FLAGS,
    ablate_backend,
    ablate_k,
    oracle_vectors,
    records,
    run_variant,
    scene_vlm,
    vectors_from_responses,
)
from .fusion import VARIANTS
from .synth import SynthSpecError, load_dataset, load_splits, save_dataset, save_splits, build_splits, generate_dataset
from .vlm import HttpVlmBackend, VlmConfig, VlmError

log = logging.getLogger("vlcfusion")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig(BenchConfig):
    seed: int = 0
    captioning_subset: int = 50
    probe_size: int = 200
    runs: int = 5
    workers: int = 1
    backend: str = "mock"
    mock_flip: float = -1.0  # < 0 keeps the question bank's own flip rates
    k: int = 0  # 0 uses every condition
    conditions_source: str = "oracle"
    variant: str = "vlc"
    seeds: str = "0,1,2"
    ks: str = "2,4,6,8,10"
    noisy_flip: float = 0.4
    backend_profiles: str = "clean:0.0,noisy:0.3"

    def seed_list(self) -> list[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]

    def k_list(self) -> list[int]:
        return [int(s) for s in self.ks.split(",") if s.strip()]

    def profiles(self) -> dict[str, float]:
        out = {}
        for item in self.backend_profiles.split(","):
            name, _, flip = item.partition(":")
            out[name.strip()] = float(flip)
        return out

    def bench(self) -> BenchConfig:
        return BenchConfig(**{f.name: getattr(self, f.name) for f in fields(BenchConfig)})

    def validate(self) -> None:
        if self.variant not in DETECTOR_VARIANTS + ("all",):
            raise ConfigError(f"variant must be one of {DETECTOR_VARIANTS + ('all',)}, got {self.variant!r}")
        if self.conditions_source not in ("oracle", "responses"):
            raise ConfigError("conditions_source must be 'oracle' or 'responses'")
        if self.runs < 2:
            raise ConfigError("runs must be >= 2")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        for name in ("n_scenes", "grid", "epochs", "batch_size", "captioning_subset", "probe_size", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.backend.startswith(("mock", "http")):
            raise ConfigError(f"backend must be 'mock' or 'http', got {self.backend!r}")


FLAG_KEYS = {"seed": int, "variant": str, "k": int, "backend": str, "runs": int}


def _coerce(key: str, value: str, typ: type):
    try:
        if typ is bool:
            return value.strip().lower() in ("1", "true", "yes")
        return typ(value.strip())
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot read {value!r} as {typ.__name__}") from exc


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text("utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values: dict = {}
    if args.config:
        raw = read_config_file(args.config)
        unknown = sorted(set(raw) - set(types))
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown}; known keys: {sorted(types)}")
        values.update({k: _coerce(k, v, types[k]) for k, v in raw.items()})
    for key in FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# =============================================================================
# helpers
# =============================================================================


class Context:
    def __init__(self, cfg: RunConfig, out_dir: Path, command: str):
        self.cfg, self.out, self.command = cfg, out_dir, command
        self.written: list[Path] = []

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def write_json(self, rel: str, obj) -> Path:
        p = aio.write_json(self.path(rel), obj)
        self.written.append(p)
        return p

    def write_text(self, rel: str, text: str) -> Path:
        p = aio.atomic_write_text(self.path(rel), text)
        self.written.append(p)
        return p

    def record(self, p: Path) -> Path:
        self.written.append(Path(p))
        return Path(p)

    def finish(self) -> None:
        mpath = self.path("run_manifest.json")
        manifest = aio.read_json(mpath) if mpath.exists() else {"commands": {}}
        cfg = asdict(self.cfg)
        manifest["commands"][self.command] = {
            "config": cfg,
            "config_hash": aio.canonical_hash(cfg),
            "artifacts": {
                str(p.relative_to(self.out)): aio.sha256_file(p) for p in sorted(set(self.written)) if p.is_file()
            },
        }
        manifest["commands"] = dict(sorted(manifest["commands"].items()))
        aio.write_json(mpath, manifest)


def _need_file(path: Path, what: str, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found at {path}; run `vlcfusion {hint}` first")
    return path


def _dataset(ctx: Context):
    return load_dataset(_need_file(ctx.path("dataset", "manifest.json"), "dataset", "synth-data"))


def _splits(ctx: Context):
    return load_splits(_need_file(ctx.path("splits.json"), "splits", "split"))


def _backend(ctx: Context, ds, seed: int | None = None):
    cfg = ctx.cfg
    if cfg.backend.startswith("http"):
        return HttpVlmBackend(VlmConfig.from_env())
    flip = None if cfg.mock_flip < 0 else cfg.mock_flip
    return scene_vlm(ds, seed=cfg.seed if seed is None else seed, flip=flip, noisy_flip=None)


def _image_records(ctx: Context, ds) -> list[cp.ImageRecord]:
    base = ctx.path("dataset")
    return [cp.ImageRecord(s.id, str(base / "scenes" / f"{s.id}.npz")) for s in ds.scenes]


def _csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


# =============================================================================
# commands
# =============================================================================


def cmd_synth_data(ctx: Context) -> int:
    spec = ctx.cfg.bench().synth_spec()
    spec.validate()
    ds = generate_dataset(spec, ctx.cfg.seed, workers=ctx.cfg.workers)
    target = ctx.path("dataset")
    ctx.out.mkdir(parents=True, exist_ok=True)
    # build in a sibling temp dir and swap in, so a failure leaves nothing behind
    tmp = Path(tempfile.mkdtemp(dir=ctx.out, prefix=".dataset."))
    try:
        save_dataset(ds, tmp)
        if target.exists():
            shutil.rmtree(target)
        tmp.rename(target)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp)
    ctx.record(target / "manifest.json")
    print(f"scenes: {len(ds.scenes)}")
    print(f"dataset hash: {ds.hash()}")
    return 0


def cmd_split(ctx: Context) -> int:
    ds = _dataset(ctx)
    splits = build_splits(ds, ctx.cfg.bench().split_plan(ctx.cfg.seed))
    ctx.record(save_splits(splits, ctx.path("splits.json")))
    for k, v in splits.counts().items():
        print(f"{k}: {v}")
    return 0


def cmd_mine_conditions(ctx: Context) -> int:
    cfg = ctx.cfg
    ds = _dataset(ctx)
    vlm = _backend(ctx, ds)
    manifest = _image_records(ctx, ds)
    subset = cp.sample_captioning_subset(manifest, min(cfg.captioning_subset, len(manifest)), cfg.seed)
    cap_path = ctx.path("conditions", "captions.json")
    if cap_path.exists():
        captions = cp.load_captions(cap_path)
        print(f"captions: reusing {len(captions)} from {cap_path}")
    else:
        captions, failures = cp.caption_images(subset, vlm, workers=cfg.workers)
        cp.save_captions(captions, failures, cap_path)
        for f in failures:
            print(f"captioning failed for {f['image_id']} after {f['attempts']} attempts: {f['error']}", file=sys.stderr)
    ctx.record(cap_path)
    by_id = {r.id: r for r in subset}
    pairs = [(by_id[c.image_id], c) for c in captions if c.image_id in by_id]
    raw = cp.extract_conditions(pairs, vlm)
    ctx.write_json("conditions/raw_conditions.json", raw.to_dict())
    deduped = cp.dedup_conditions(raw)
    ctx.record(cp.save_conditions(deduped, ctx.path("conditions", "conditions.json")))
    print(f"conditions before dedup: {len(raw)}")
    print(f"conditions after dedup: {len(deduped)}")
    return 0


def _condition_file(ctx: Context) -> Path:
    return _need_file(ctx.path("conditions", "conditions.json"), "conditions", "mine-conditions")


def cmd_respond(ctx: Context) -> int:
    ds = _dataset(ctx)
    conds = cp.load_conditions(_condition_file(ctx))
    partial = ctx.path("conditions", "responses.partial.json")
    try:
        m = cp.generate_responses(_image_records(ctx, ds), conds, _backend(ctx, ds), workers=ctx.cfg.workers,
                                  checkpoint=partial)
    except cp.PipelineInterrupted as exc:
        print(f"interrupted: {exc}; {exc.done} rows saved to {exc.checkpoint}; rerun to resume", file=sys.stderr)
        return 3
    ctx.record(cp.save_responses(m, ctx.path("conditions", "responses.json")))
    if partial.exists():
        partial.unlink()
    print(f"images: {len(m.rows)}  conditions: {len(conds)}  unknown cells: {m.n_unknown()}")
    print(f"images with >=1 true condition: {m.activation_fraction():.1%}")
    return 0


def cmd_rank(ctx: Context) -> int:
    cfg = ctx.cfg
    ds = _dataset(ctx)
    conds = cp.load_conditions(_condition_file(ctx))
    probe = cp.probe_subset(_image_records(ctx, ds), cfg.seed, cfg.probe_size)
    report = cp.score_consistency(probe, conds, _backend(ctx, ds), runs=cfg.runs, workers=cfg.workers)
    ctx.record(cp.save_consistency(report, ctx.path("conditions", "consistency.json")))
    for c, s in report.ranked():
        print(f"{s:.3f}  {c.index:>3}  {c.question}")
    if cfg.k:
        top = cp.select_top_k(report, cfg.k)
        ctx.record(cp.save_conditions(top, ctx.path("conditions", f"conditions_top{cfg.k}.json")))
        print(f"selected top {cfg.k} conditions")
    return 0


def _condition_vectors(ctx: Context, ds):
    cfg = ctx.cfg
    if cfg.conditions_source == "oracle":
        return oracle_vectors(ds)
    m = cp.load_responses(_need_file(ctx.path("conditions", "responses.json"), "responses", "respond"))
    conds = cp.load_conditions(_condition_file(ctx))
    if m.condition_set_hash != conds.hash():
        raise ValueError("responses.json was generated for a different condition set; rerun `vlcfusion respond`")
    vec = vectors_from_responses(m)
    if cfg.k:
        top = cp.load_conditions(_need_file(ctx.path("conditions", f"conditions_top{cfg.k}.json"),
                                            f"top-{cfg.k} conditions", f"rank --k {cfg.k}"))
        pos = {q: i for i, q in enumerate(conds.questions)}
        cols = [pos[q] for q in top.questions]
        vec = {i: v[cols] for i, v in vec.items()}
    return vec


def _report_files(ctx: Context, variant: str, split: str, rep) -> None:
    ctx.write_json(f"reports/{variant}_{split}.json", rep.to_dict())
    ctx.write_text(f"reports/{variant}_{split}.csv", rep.to_csv())


def cmd_train(ctx: Context) -> int:
    cfg = ctx.cfg
    ds, splits = _dataset(ctx), _splits(ctx)
    variants = list(VARIANTS) if cfg.variant == "all" else [cfg.variant]
    vec = _condition_vectors(ctx, ds) if "vlc" in variants else None
    rows = []
    for v in variants:
        r = run_variant(ds, splits, v, cfg.seed, cfg.bench(), vec if v == "vlc" else None)
        ctx.record(save_detector(r.train.params, ctx.path("checkpoints", f"{v}.ckpt")))
        ctx.write_text(f"logs/{v}_train.csv", r.train.log_csv())
        _report_files(ctx, v, "seen", r.seen)
        _report_files(ctx, v, "unseen", r.unseen)
        rows.append(r.row())
        print(f"{v}: seen mAP50 {r.seen.map50:.3f}  unseen mAP50 {r.unseen.map50:.3f}  "
              f"(best epoch {r.train.best_epoch})")
    if len(rows) > 1:
        ctx.write_text("comparison.csv", _csv(rows))
    return 0


def cmd_eval(ctx: Context) -> int:
    cfg = ctx.cfg
    if cfg.variant == "all":
        raise ConfigError("eval takes a single --variant")
    ckpt = _need_file(ctx.path("checkpoints", f"{cfg.variant}.ckpt"), "checkpoint", f"train --variant {cfg.variant}")
    params = load_detector(ckpt)
    ds, splits = _dataset(ctx), _splits(ctx)
    vec = _condition_vectors(ctx, ds) if cfg.variant == "vlc" else None
    names = {i: f"class_{i}" for i in range(params.config.n_classes)}
    for split in ("test_seen", "test_unseen"):
        rep = evaluate(params, ds.subset(splits[split]), vec, names)
        _report_files(ctx, cfg.variant, split.removeprefix("test_"), rep)
        print(f"{split}: mAP {rep.map:.3f}  mAP50 {rep.map50:.3f}  mAR100 {rep.mar100:.3f}")
    return 0


def _plot(path: Path, draw) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    draw(ax)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, metadata={"Software": None})
    plt.close(fig)
    return aio.atomic_write_bytes(path, buf.getvalue())


def cmd_ablate_k(ctx: Context) -> int:
    cfg = ctx.cfg
    ks = cfg.k_list() if not cfg.k else [cfg.k]
    rows = ablate_k(cfg.bench(), cfg.seed_list(), ks, noisy_flip=cfg.noisy_flip,
                    progress=lambda r: print(f"k={r['k']} seed={r['seed']} seen mAP={r['seen_mAP']:.3f} "
                                             f"unseen mAP={r['unseen_mAP']:.3f}"))
    ctx.write_text("ablations/ablate_k.csv", _csv([{k: v for k, v in r.items() if k != "conditions"} for r in rows]))

    def draw(ax):
        for split in ("seen", "unseen"):
            means = [np.mean([r[f"{split}_mAP"] for r in rows if r["k"] == k]) for k in ks]
            ax.plot(ks, [100 * v for v in means], marker="o", label=split)
        ax.set_xlabel("number of conditions k")
        ax.set_ylabel("mAP@[.5:.95] (mean over seeds)")
        ax.legend()
        ax.grid(alpha=0.3)

    ctx.record(_plot(ctx.path("ablations", "ablate_k.png"), draw))
    return 0


def cmd_ablate_backend(ctx: Context) -> int:
    cfg = ctx.cfg
    profiles = cfg.profiles()
    rows = ablate_backend(cfg.bench(), cfg.seed_list(), profiles,
                          progress=lambda r: print(f"{r['backend']} seed={r['seed']} seen mAP={r['seen_mAP']:.3f} "
                                                   f"unseen mAP={r['unseen_mAP']:.3f}"))
    ctx.write_text("ablations/ablate_backend.csv", _csv(rows))

    def draw(ax):
        names = list(profiles)
        seen = [np.mean([r["seen_mAP"] for r in rows if r["backend"] == n]) for n in names]
        unseen = [np.mean([r["unseen_mAP"] for r in rows if r["backend"] == n]) for n in names]
        x = np.arange(len(names))
        ax.bar(x - 0.2, [100 * v for v in seen], 0.4, label="seen")
        ax.bar(x + 0.2, [100 * v for v in unseen], 0.4, label="unseen")
        ax.set_xticks(x, names)
        ax.set_ylabel("mAP@[.5:.95]")
        ax.legend()

    ctx.record(_plot(ctx.path("ablations", "ablate_backend.png"), draw))
    return 0


COMMANDS = {
    "synth-data": cmd_synth_data,
    "split": cmd_split,
    "mine-conditions": cmd_mine_conditions,
    "respond": cmd_respond,
    "rank": cmd_rank,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate-k": cmd_ablate_k,
    "ablate-backend": cmd_ablate_backend,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlcfusion", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", help=f"one of {', '.join(DETECTOR_VARIANTS)}, or 'all' for train")
    p.add_argument("--k", "--top-k", dest="k", type=int, help="number of top conditions to select or use")
    p.add_argument("--backend", help="mock or http")
    p.add_argument("--runs", type=int, help="repeated runs for consistency scoring")
    p.add_argument("--out-dir", default="runs", help="artifact directory (default: ./runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        ctx = Context(cfg, Path(args.out_dir), args.command)
        code = COMMANDS[args.command](ctx)
        if code == 0:
            ctx.finish()
        return code
    except (ConfigError, SynthSpecError, FileNotFoundError, ValueError, KeyError, cp.ExtractionError, VlmError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
