"""Command-line entry points tying the pipeline together.

Verbs: synth-data, pretrain, fit-baseline, distill, evaluate, report.
Exit codes: 0 success, 2 usage error, 1 runtime failure. Set
RAREDISTILL_WORKERS to cap the compute thread count.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import config as cfg
from . import data as data_mod
from .baseline import fit_baseline, load_teacher, save_teacher
from .distill import DistillConfig, distill as run_distill, load_student, save_student
from .encoder import load_checkpoint, save_checkpoint
from .estimators import DistilledStudentClassifier, FrozenEncoderClassifier
from .evaluation import Report, render_table, run_protocol
from .pretrain import pretrain as run_pretrain


def _set_workers():
    workers = os.environ.get("RAREDISTILL_WORKERS")
    if workers:
        import torch

        torch.set_num_threads(int(workers))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out(out: str, overwrite: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not overwrite:
        raise click.UsageError(f"output directory {out_dir} is not empty; pass --overwrite")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_provenance(out_dir: Path, config: cfg.RunConfig, inputs: dict[str, Path]):
    cfg.save_resolved(config, out_dir / "config.yaml")
    payload = {name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items() if p.is_file()}
    for name, p in inputs.items():
        if p.is_dir():
            payload[name] = {"path": str(p)}
    with open(out_dir / "provenance.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _write_jsonl(path: Path, records: list[dict]):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_run_config(config_path, profile, seed) -> cfg.RunConfig:
    run = cfg.load_config(config_path, profile=profile)
    if seed is not None:
        run = run.with_seed(seed)
    else:
        run = run.with_seed(run.seed)
    return run


common_options = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None),
    click.option("--profile", type=click.Choice(cfg.PROFILES), default=None),
    click.option("--seed", type=int, default=None),
    click.option("--out", required=True, type=click.Path(file_okay=False)),
    click.option("--overwrite", is_flag=True, default=False),
]


def with_common_options(fn):
    for option in reversed(common_options):
        fn = option(fn)
    return fn


@click.group()
def main():
    """Contrastive pretraining + pseudo-label self-distillation pipeline."""
    _set_workers()


@main.command("synth-data")
@with_common_options
def cmd_synth_data(config_path, profile, seed, out, overwrite):
    """Generate a synthetic class-folder dataset with meta.json."""
    run = _load_run_config(config_path, profile, seed)
    d = run.data
    if not 0.0 < d.separability <= 1.0:
        raise click.UsageError(f"separability must be in (0, 1], got {d.separability}")
    dataset = data_mod.make_synthetic_dataset(
        d.n_classes, d.per_class, d.image_size, d.separability, run.seed
    )
    out_dir = _prepare_out(out, overwrite)
    meta = {
        "n_classes": d.n_classes,
        "per_class": d.per_class,
        "image_size": d.image_size,
        "separability": d.separability,
        "seed": run.seed,
    }
    data_mod.write_dataset(dataset, out_dir, meta=meta)
    cfg.save_resolved(run, out_dir / "config.yaml")
    click.echo(f"wrote {len(dataset)} images over {dataset.n_classes} classes to {out_dir}")


@main.command("pretrain")
@with_common_options
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
def cmd_pretrain(config_path, profile, seed, out, overwrite, data_dir, resume):
    """Contrastive pretraining on the base split of a dataset directory."""
    run = _load_run_config(config_path, profile, seed)
    dataset = data_mod.load_dataset(data_dir, layout=run.data.layout)
    base, _ = data_mod.split_base_rare(dataset, run.data.n_rare)
    initial, start_epoch = None, 0
    if resume is not None:
        initial, start_epoch = load_checkpoint(resume)
    encoder, log = run_pretrain(
        base, run.encoder, run.pretrain, augment=run.augment, initial=initial, start_epoch=start_epoch
    )
    out_dir = _prepare_out(out, overwrite)
    ckpt = save_checkpoint(out_dir / "encoder.ckpt", encoder, step=run.pretrain.epochs)
    _write_jsonl(out_dir / "pretrain_log.jsonl", log)
    _write_provenance(out_dir, run, {"data": Path(data_dir)})
    click.echo(f"pretrained {run.pretrain.epochs - start_epoch} epochs; checkpoint at {ckpt}")


def _rare_split(run: cfg.RunConfig, data_dir: str) -> data_mod.Dataset:
    dataset = data_mod.load_dataset(data_dir, layout=run.data.layout)
    _, rare = data_mod.split_base_rare(dataset, run.data.n_rare)
    return rare


def _protocol_seeds(run: cfg.RunConfig) -> list[int]:
    return [run.eval.task_seed_base + i for i in range(run.eval.n_tasks)]


@main.command("fit-baseline")
@with_common_options
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--task-seed", type=int, default=0)
def cmd_fit_baseline(config_path, profile, seed, out, overwrite, data_dir, checkpoint, task_seed):
    """Fit the frozen-encoder baseline on one task and evaluate the protocol."""
    run = _load_run_config(config_path, profile, seed)
    encoder, _ = load_checkpoint(checkpoint)
    rare = _rare_split(run, data_dir)
    task = data_mod.sample_task(rare, run.eval.n_way, run.eval.k_shot, task_seed)
    teacher = fit_baseline(encoder, task.support_images, task.support_labels, c=run.eval.baseline_c)
    out_dir = _prepare_out(out, overwrite)
    save_teacher(out_dir / "teacher.json", teacher)
    report = run_protocol(
        FrozenEncoderClassifier(encoder=encoder, c=run.eval.baseline_c),
        rare,
        run.eval.n_way,
        run.eval.k_shot,
        n_tasks=run.eval.n_tasks,
        seeds=_protocol_seeds(run),
        method_id="baseline_lr",
    )
    report.save(out_dir / "report_baseline.json")
    _write_provenance(out_dir, run, {"data": Path(data_dir), "encoder": Path(checkpoint)})
    click.echo(render_table([report]))


@main.command("distill")
@with_common_options
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--teacher", "teacher_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--label-design", type=click.Choice(("hard", "soft", "adaptive_hard", "adaptive_soft")), default=None)
@click.option("--loss-variant", type=click.Choice(("cls_only", "con_plus_cls", "con_plus_reg")), default=None)
def cmd_distill(config_path, profile, seed, out, overwrite, data_dir, teacher_path, label_design, loss_variant):
    """Self-distill a student from a saved teacher; evaluate both usage modes."""
    run = _load_run_config(config_path, profile, seed)
    dcfg = run.distill
    if label_design is not None:
        dcfg = dataclasses.replace(dcfg, label_design=label_design)
    if loss_variant is not None:
        dcfg = dataclasses.replace(dcfg, loss_variant=loss_variant)
    run = dataclasses.replace(run, distill=dcfg)
    teacher = load_teacher(teacher_path)
    dataset = data_mod.load_dataset(data_dir, layout=run.data.layout)
    base, rare = data_mod.split_base_rare(dataset, run.data.n_rare)
    student, log = run_distill(base, teacher, run.encoder, run.distill, augment=run.augment)
    student.provenance["teacher_sha256"] = _sha256(Path(teacher_path))
    out_dir = _prepare_out(out, overwrite)
    save_student(out_dir / "student.ckpt", student)
    _write_jsonl(out_dir / "distill_log.jsonl", log)
    reports = []
    for usage in ("direct", "lr_refit"):
        report = run_protocol(
            DistilledStudentClassifier(student=student, usage=usage),
            rare,
            run.eval.n_way,
            run.eval.k_shot,
            n_tasks=run.eval.n_tasks,
            seeds=_protocol_seeds(run),
            method_id=f"student_{usage}",
        )
        report.save(out_dir / f"report_student_{usage}.json")
        reports.append(report)
    _write_provenance(out_dir, run, {"data": Path(data_dir), "teacher": Path(teacher_path)})
    click.echo(render_table(reports))


@main.command("evaluate")
@with_common_options
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--student", "student_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--mode", type=click.Choice(("baseline", "direct", "lr_refit")), default="baseline")
def cmd_evaluate(config_path, profile, seed, out, overwrite, data_dir, checkpoint, student_path, mode):
    """Run the episodic protocol for a saved encoder or student artifact."""
    run = _load_run_config(config_path, profile, seed)
    rare = _rare_split(run, data_dir)
    if mode == "baseline":
        if checkpoint is None:
            raise click.UsageError("--checkpoint is required for baseline evaluation")
        encoder, _ = load_checkpoint(checkpoint)
        method = FrozenEncoderClassifier(encoder=encoder, c=run.eval.baseline_c)
        method_id, source = "baseline_lr", Path(checkpoint)
    else:
        if student_path is None:
            raise click.UsageError("--student is required for student evaluation")
        student = load_student(student_path)
        method = DistilledStudentClassifier(student=student, usage=mode)
        method_id, source = f"student_{mode}", Path(student_path)
    report = run_protocol(
        method, rare, run.eval.n_way, run.eval.k_shot,
        n_tasks=run.eval.n_tasks, seeds=_protocol_seeds(run), method_id=method_id,
    )
    out_dir = _prepare_out(out, overwrite)
    report.save(out_dir / f"report_{method_id}.json")
    _write_provenance(out_dir, run, {"data": Path(data_dir), "model": source})
    click.echo(render_table([report]))


@main.command("report")
@click.argument("run_dirs", nargs=-1, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--overwrite", is_flag=True, default=False)
def cmd_report(run_dirs, out, overwrite):
    """Merge run reports into a comparison table and plots."""
    if not run_dirs:
        raise click.UsageError("at least one run directory is required")
    reports, logs = [], {}
    for d in run_dirs:
        d = Path(d)
        for path in sorted(d.glob("report_*.json")):
            reports.append(Report.load(path))
        for path in sorted(d.glob("*log.jsonl")):
            with open(path) as fh:
                logs[f"{d.name}/{path.stem}"] = [json.loads(line) for line in fh]
    if not reports:
        raise click.UsageError("no report_*.json files found in the given run directories")
    out_dir = _prepare_out(out, overwrite)
    table = render_table(reports)
    (out_dir / "comparison.txt").write_text(table + "\n")
    _plot_reports(reports, logs, out_dir)
    click.echo(table)


def _plot_reports(reports, logs, out_dir: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if logs:
        fig, ax = plt.subplots(figsize=(7, 4))
        for name, records in logs.items():
            key = "mean_loss" if records and "mean_loss" in records[0] else "con_loss"
            if records and key in records[0]:
                ax.plot([r["epoch"] for r in records], [r[key] for r in records], label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / "loss_curves.png", dpi=120)
        plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    idx = np.arange(len(reports))
    width = 0.35
    ax.bar(idx - width / 2, [r.mean_acc for r in reports], width,
           yerr=[r.std_acc for r in reports], capsize=3, label="accuracy")
    ax.bar(idx + width / 2, [r.mean_f1 for r in reports], width,
           yerr=[r.std_f1 for r in reports], capsize=3, label="macro F1")
    ax.set_xticks(idx)
    ax.set_xticklabels([r.method_id for r in reports], rotation=20, ha="right", fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "comparison.png", dpi=120)
    plt.close(fig)


def run_main():
    try:
        main(standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        sys.exit(2)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except Exception as exc:  # runtime failure -> exit 1
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    run_main()
