"""Command implementations shared by the CLI and the ablation sweep.

Every ``run_*`` function takes a resolved config dict (see :mod:`nsync.config`)
plus input paths, writes its outputs into ``out`` through a staging
directory (nothing appears on failure), and returns the :class:`RunManifest`
it wrote. Paths recorded inside manifests are relative to ``out``.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nsync.config import schedule_of, world_of
from nsync.errors import ConfigError, NumericalError
from nsync.manifest import RunManifest, hash_inputs, staged_dir
from nsync.metrics import FeatureExtractor, MetricsReport, evaluate
from nsync.model import GENERIC, STAR, DenoiserConfig, Model
from nsync.records import atomic_write_text, sha256_file, write_json
from nsync.styleworld import Dataset, curate_negatives, make_dataset
from nsync.trainer import PretrainConfig, StepStats, TrainConfig, Variant, pretrain_base, train

log = logging.getLogger(__name__)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _output_hashes(stage: Path) -> dict:
    return {
        str(p.relative_to(stage)): sha256_file(p)
        for p in sorted(stage.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }


def _load_dataset(path, what: str) -> Dataset:
    if path is None or not Path(path).is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return Dataset.load(path)


def _load_model(path) -> Model:
    if path is None or not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return Model.load(path)


def _load_base(path) -> Model:
    model = _load_model(path)
    if not model.pretrained or model.mode is not None:
        raise ConfigError(f"{path} is not a frozen pretrained base checkpoint")
    return model


# ---------------------------------------------------------------------------
# data and base model


def run_make_data(cfg: dict, out, export_csv: bool = False) -> RunManifest:
    """Target-style positive and held-out test sets."""
    start = time.perf_counter()
    world = world_of(cfg)
    d = cfg["data"]
    style = world.style(d["target_style"])
    with staged_dir(out) as stage:
        pos = make_dataset(style, d["n_positives"], seed=d["positives_seed"], world=world)
        test = make_dataset(style, d["n_test"], seed=d["test_seed"], world=world)
        pos.meta["role"] = "positives"
        test.meta["role"] = "test"
        pos.save(stage / "positives.ds")
        test.save(stage / "test.ds")
        if export_csv:
            pos.export_csv(stage / "positives.csv")
            test.export_csv(stage / "test.csv")
        manifest = RunManifest(
            command="make-data",
            config=cfg,
            seeds={"positives": d["positives_seed"], "test": d["test_seed"]},
            outputs=_output_hashes(stage),
            wall_clock_seconds=time.perf_counter() - start,
        )
        manifest.write(stage / "manifest.json")
    return manifest


def run_pretrain(cfg: dict, out) -> RunManifest:
    """Train the base denoiser on the generic-style mixture."""
    start = time.perf_counter()
    world = world_of(cfg)
    pcfg = PretrainConfig.from_dict(cfg["pretrain"])
    with staged_dir(out) as stage:
        model, data, trace = pretrain_base(world, DenoiserConfig(**cfg["model"]), pcfg, schedule_of(cfg))
        model.save(stage / "base.ckpt")
        data.save(stage / "generic.ds")
        rows = [[100 * (i + 1), loss] for i, loss in enumerate(trace)]
        atomic_write_text(stage / "pretrain_loss.csv", _csv_text(["step", "loss"], rows))
        manifest = RunManifest(
            command="pretrain",
            config=cfg,
            seeds={"pretrain": pcfg.seed},
            checkpoints=["base.ckpt"],
            outputs=_output_hashes(stage),
            wall_clock_seconds=time.perf_counter() - start,
        )
        manifest.write(stage / "manifest.json")
    return manifest


def _negatives_for(base: Model, positives: Dataset, cfg: dict, seed: int) -> Dataset:
    n = cfg["negatives"]
    neg = curate_negatives(base, positives.contents, n["n_per_caption"], seed, n["ddim_steps"])
    neg.meta["role"] = "negatives"
    return neg


def run_gen_negatives(cfg: dict, checkpoint, positives, out) -> RunManifest:
    """Negatives sampled from the frozen base with the positives' captions."""
    start = time.perf_counter()
    base = _load_base(checkpoint)
    if GENERIC not in base.style_names:
        raise ConfigError(f"{checkpoint} has no {GENERIC} style token")
    pos = _load_dataset(positives, "positives")
    seed = cfg["negatives"]["seed"]
    with staged_dir(out) as stage:
        neg = _negatives_for(base, pos, cfg, seed)
        neg.save(stage / "negatives.ds")
        manifest = RunManifest(
            command="gen-negatives",
            config=cfg,
            seeds={"negatives": seed},
            dataset_hashes=hash_inputs(checkpoint=checkpoint, positives=positives),
            outputs=_output_hashes(stage),
            wall_clock_seconds=time.perf_counter() - start,
        )
        manifest.write(stage / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# finetuning, sampling, evaluation


def run_finetune(cfg: dict, checkpoint, positives, negatives, out) -> RunManifest:
    start = time.perf_counter()
    tcfg = TrainConfig.from_dict(cfg["train"])
    variant = Variant(tcfg.variant)
    if variant.contrastive and negatives is None:
        raise ConfigError(f"variant {variant.value} needs a negatives file")
    base = _load_base(checkpoint)
    pos = _load_dataset(positives, "positives")
    neg = _load_dataset(negatives, "negatives") if variant.contrastive else None
    refresh_every = cfg["negatives"]["regenerate_every"]
    nseed = cfg["negatives"]["seed"]

    def refresh(k: int) -> Dataset:
        return _negatives_for(base, pos, cfg, nseed * 100003 + k)

    with staged_dir(out) as stage:
        ckpts = []

        def on_checkpoint(step, model):
            name = f"checkpoints/step_{step:06d}.ckpt"
            model.save(stage / name)
            return name

        try:
            result = train(tcfg, base, pos, neg, on_checkpoint, refresh, refresh_every)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        ckpts.extend(result.checkpoints)
        result.model.save(stage / "adapted.ckpt")
        ckpts.append("adapted.ckpt")
        atomic_write_text(stage / "steps.csv", _csv_text(StepStats.FIELDS, [s.row() for s in result.stats]))
        flags = tcfg.interpretation_flags()
        flags["negative_set"] = f"regenerated every {refresh_every} steps" if refresh_every else "fixed once before training"
        manifest = RunManifest(
            command="finetune",
            config=cfg,
            seeds={"train": tcfg.seed, "negatives": nseed},
            dataset_hashes=hash_inputs(
                checkpoint=checkpoint, positives=positives, negatives=negatives if variant.contrastive else None
            ),
            variant=variant.value,
            interpretation_flags=flags,
            checkpoints=ckpts,
            outputs=_output_hashes(stage),
            wall_clock_seconds=time.perf_counter() - start,
        )
        manifest.write(stage / "manifest.json")
    return manifest


def run_sample(cfg: dict, checkpoint, contents, n_per_caption: int, out, style: str | None = STAR) -> RunManifest:
    """``n_per_caption`` DDIM samples for every caption in ``contents``."""
    start = time.perf_counter()
    if n_per_caption < 1:
        raise ConfigError("need at least one sample per caption")
    model = _load_model(checkpoint)
    try:
        model.style_vector(style) if style is not None else None
    except KeyError as exc:
        raise ConfigError(f"{checkpoint}: {exc.args[0]}") from exc
    contents = np.repeat(np.asarray(contents, dtype=np.int64), n_per_caption)
    seed = cfg["eval"]["sample_seed"]
    steps = cfg["eval"]["ddim_steps"]
    with staged_dir(out) as stage:
        try:
            x = model.sample(contents, style, seed, steps)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from exc
        Dataset(x, contents, {"source": "samples", "style_token": style, "seed": seed, "ddim_steps": steps}).save(
            stage / "samples.ds"
        )
        manifest = RunManifest(
            command="sample",
            config=cfg,
            seeds={"sample": seed},
            dataset_hashes=hash_inputs(checkpoint=checkpoint),
            outputs=_output_hashes(stage),
            wall_clock_seconds=time.perf_counter() - start,
        )
        manifest.write(stage / "manifest.json")
    return manifest


def extractor_of(cfg: dict) -> FeatureExtractor:
    e = cfg["eval"]
    return FeatureExtractor(d_in=world_of(cfg).d_data, d_hidden=e["extractor_hidden"], d_f=e["d_f"], seed=e["extractor_seed"])


def run_evaluate(cfg: dict, samples, test, out) -> tuple[MetricsReport, RunManifest]:
    start = time.perf_counter()
    gen = _load_dataset(samples, "samples")
    ref = _load_dataset(test, "test")
    e = cfg["eval"]
    with staged_dir(out) as stage:
        report = evaluate(gen.x, ref.x, extractor_of(cfg), e["cmmd_sigma"], e["kid_blocks"])
        atomic_write_text(stage / "report.json", report.to_json() + "\n")
        atomic_write_text(stage / "report.csv", _csv_text(MetricsReport.CSV_FIELDS, [report.csv_row()]))
        manifest = RunManifest(
            command="evaluate",
            config=cfg,
            seeds={"extractor": e["extractor_seed"]},
            dataset_hashes=hash_inputs(samples=samples, test=test),
            outputs=_output_hashes(stage),
            wall_clock_seconds=time.perf_counter() - start,
        )
        manifest.write(stage / "manifest.json")
    return report, manifest


# ---------------------------------------------------------------------------
# ablation sweep

METRICS = ("csd", "cmmd", "kid", "fid")


@dataclass
class AblationReport:
    """Per-seed metrics for every (target, variant) pair."""

    targets: list
    variants: list
    seeds: list
    runs: list = field(default_factory=list)  # dicts: target, variant, seed, metrics, status, manifest
    complete: bool = True

    def rows_for(self, target: str, variant: str) -> list:
        return [r for r in self.runs if r["target"] == target and r["variant"] == variant and r["status"] == "ok"]

    def summary(self, target: str) -> list:
        out = []
        for v in self.variants:
            rows = self.rows_for(target, v)
            entry = {"target": target, "variant": v, "n_seeds": len(rows)}
            for m in METRICS:
                vals = np.array([r[m] for r in rows], dtype=float)
                entry[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
                entry[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else float("nan")
            out.append(entry)
        return out

    def wins(self, target: str, challenger: str = "ctoa", baseline: str = "ti") -> dict:
        a = {r["seed"]: r for r in self.rows_for(target, challenger)}
        b = {r["seed"]: r for r in self.rows_for(target, baseline)}
        common = sorted(set(a) & set(b))
        csd = [s for s in common if a[s]["csd"] > b[s]["csd"]]
        cmmd = [s for s in common if a[s]["cmmd"] < b[s]["cmmd"]]
        both = sorted(set(csd) & set(cmmd))
        return {"n_seeds": len(common), "csd": len(csd), "cmmd": len(cmmd), "both": len(both)}

    def table(self) -> str:
        lines = []
        if not self.complete:
            lines.append("PARTIAL RESULTS: at least one run failed; see ablation_runs.csv")
        for target in self.targets:
            lines.append(f"target style: {target}  (mean over seeds; std in parentheses)")
            lines.append(f"{'variant':<8}{'CSD':>20}{'CMMD':>20}{'KID':>20}{'FID':>20}")
            for e in self.summary(target):
                cells = "".join(f"{e[m + '_mean']:>11.4f} ({e[m + '_std']:.4f})" for m in METRICS)
                lines.append(f"{e['variant'].upper():<8}{cells}")
            w = self.wins(target)
            lines.append(
                f"CTOA vs TI over {w['n_seeds']} seeds: higher CSD {w['csd']}, lower CMMD {w['cmmd']}, both {w['both']}"
            )
            lines.append("")
        return "\n".join(lines)

    def to_json(self) -> dict:
        return {
            "targets": self.targets,
            "variants": self.variants,
            "seeds": self.seeds,
            "complete": self.complete,
            "summary": {t: self.summary(t) for t in self.targets},
            "wins": {t: self.wins(t) for t in self.targets},
        }


def _ablation_job(job: dict) -> dict:
    run_dir = Path(job["run_dir"])
    row = {"target": job["target"], "variant": job["variant"], "seed": job["seed"]}
    try:
        ft = run_finetune(job["cfg"], job["checkpoint"], job["positives"], job["negatives"], run_dir / "finetune")
        test = Dataset.load(job["test"])
        run_sample(job["cfg"], run_dir / "finetune" / "adapted.ckpt", test.contents, 1, run_dir / "samples")
        report, _ = run_evaluate(job["cfg"], run_dir / "samples" / "samples.ds", job["test"], run_dir / "eval")
    except (ConfigError, NumericalError, ValueError) as exc:
        row.update({m: float("nan") for m in METRICS})
        row.update(status=f"failed: {type(exc).__name__}: {exc}", manifest=None, wall_clock=float("nan"))
        row["error_kind"] = "numerical" if isinstance(exc, NumericalError) else "config"
        return row
    row.update({m: getattr(report, m) for m in METRICS})
    row.update(status="ok", manifest=str(run_dir / "finetune" / "manifest.json"), wall_clock=ft.wall_clock_seconds)
    return row


def _ablation_jobs(cfg: dict, out: Path, checkpoint) -> list:
    a = cfg["ablate"]
    jobs = []
    targets = [cfg["data"]["target_style"]] + [t for t in a["extra_targets"] if t != cfg["data"]["target_style"]]
    for target in targets:
        tcfg = {**cfg, "data": {**cfg["data"], "target_style": target}}
        data_dir = out / target / "data"
        neg_dir = out / target / "negatives"
        if not (data_dir / "manifest.json").is_file():
            run_make_data(tcfg, data_dir)
        if not (neg_dir / "manifest.json").is_file():
            run_gen_negatives(tcfg, checkpoint, data_dir / "positives.ds", neg_dir)
        for seed in a["seeds"]:
            for variant in a["variants"]:
                run_cfg = {**tcfg, "train": {**tcfg["train"], "variant": variant, "seed": seed}}
                jobs.append(
                    {
                        "target": target,
                        "variant": variant,
                        "seed": seed,
                        "cfg": run_cfg,
                        "checkpoint": str(checkpoint),
                        "positives": str(data_dir / "positives.ds"),
                        "negatives": str(neg_dir / "negatives.ds"),
                        "test": str(data_dir / "test.ds"),
                        "run_dir": str(out / target / "runs" / variant / f"seed{seed}"),
                    }
                )
    return targets, jobs


def _write_ablation(out: Path, report: AblationReport) -> None:
    run_fields = ["target", "variant", "seed", *METRICS, "status", "manifest"]
    runs = sorted(report.runs, key=lambda r: (report.targets.index(r["target"]), r["seed"], report.variants.index(r["variant"])))
    atomic_write_text(out / "ablation_runs.csv", _csv_text(run_fields, [[r.get(f) for f in run_fields] for r in runs]))
    summary = [e for t in report.targets for e in report.summary(t)]
    sfields = ["target", "variant", "n_seeds"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")]
    atomic_write_text(out / "ablation.csv", _csv_text(sfields, [[e[f] for f in sfields] for e in summary]))
    atomic_write_text(out / "ablation.txt", report.table())
    write_json(out / "ablation.json", report.to_json())
    # loss curves and gradient cosines of every finished run, in one long table
    series = []
    for r in runs:
        if r["status"] != "ok":
            continue
        path = out / Path(r["manifest"]).parent / "steps.csv"
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                series.append([r["target"], r["variant"], r["seed"]] + [rec[f] for f in StepStats.FIELDS])
    atomic_write_text(out / "series_steps.csv", _csv_text(["target", "variant", "seed", *StepStats.FIELDS], series))


def _relative(row: dict, out: Path) -> dict:
    if row["manifest"]:
        row["manifest"] = str(Path(row["manifest"]).relative_to(out))
    return row


def run_ablate(cfg: dict, out, checkpoint=None, jobs: int = 1) -> AblationReport:
    """Train, sample and score every variant for every seed and target.

    Without ``checkpoint`` a base model is pretrained into ``out/base``. Each
    run lands in ``out/<target>/runs/<variant>/seed<k>`` and is exactly the
    output of :func:`run_finetune` with the same config. On the first
    failure no further runs start; the report files are written with the
    failed run marked and the error is re-raised.
    """
    start = time.perf_counter()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for v in cfg["ablate"]["variants"]:
        Variant(v)
    if checkpoint is None:
        checkpoint = out / "base" / "base.ckpt"
        if not (out / "base" / "manifest.json").is_file():
            run_pretrain(cfg, out / "base")
    _load_base(checkpoint)
    targets, job_list = _ablation_jobs(cfg, out, checkpoint)
    report = AblationReport(targets, list(cfg["ablate"]["variants"]), list(cfg["ablate"]["seeds"]))
    failure = None
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_ablation_job, j) for j in job_list]
            for fut in futures:
                row = fut.result()
                report.runs.append(_relative(row, out))
                if row["status"] != "ok" and failure is None:
                    failure = row
                    for f in futures:
                        f.cancel()
                    break
    else:
        for j in job_list:
            row = _ablation_job(j)
            report.runs.append(_relative(row, out))
            log.info("%s %s seed %s: %s", row["target"], row["variant"], row["seed"], row["status"])
            if row["status"] != "ok":
                failure = row
                break
    report.complete = failure is None and len(report.runs) == len(job_list)
    _write_ablation(out, report)
    manifest = RunManifest(
        command="ablate",
        config=cfg,
        seeds={"ablation": report.seeds, "negatives": cfg["negatives"]["seed"], "sample": cfg["eval"]["sample_seed"]},
        dataset_hashes=hash_inputs(checkpoint=checkpoint),
        interpretation_flags={
            v: TrainConfig.from_dict({**cfg["train"], "variant": v}).interpretation_flags() for v in report.variants
        },
        checkpoints=[str(Path(r["manifest"]).parent / "adapted.ckpt") for r in report.runs if r["manifest"]],
        outputs={p: sha256_file(out / p) for p in ("ablation.csv", "ablation_runs.csv", "ablation.txt", "series_steps.csv")},
        wall_clock_seconds=time.perf_counter() - start,
    )
    manifest.write(out / "manifest.json")
    if failure is not None:
        msg = f"ablation run {failure['target']}/{failure['variant']}/seed{failure['seed']} {failure['status']}"
        raise (NumericalError if failure["error_kind"] == "numerical" else ConfigError)(msg)
    return report
