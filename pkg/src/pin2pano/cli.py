"""Command-line entry point: gen-data, train, eval, report.

Every command takes a config file; all randomness derives from config seeds.
Failures exit nonzero with a single machine-parsable line on stderr:
`error: <class>: <detail>` where class is one of config-error, io-error,
invalid-argument.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ENV_DATA_ROOT, ENV_RUN_ROOT, ConfigError, RunConfig, load_config
from .evalreport import (
    EvalReport,
    evaluate_model,
    format_class_table,
    format_gap_table,
    gap_report,
    load_reports,
    save_reports,
)
from .scene import generate_scene, load_split, render, write_manifest, write_split
from .train import load_generator, run_training


def _data_root(cfg: RunConfig) -> Path:
    return Path(os.environ.get(ENV_DATA_ROOT) or cfg.data.root)


def _run_dir(cfg: RunConfig) -> Path:
    return Path(os.environ.get(ENV_RUN_ROOT) or "runs") / cfg.run_name


def _camera_dict(cam) -> dict:
    d = {"kind": cam.kind, "width": cam.width, "height": cam.height}
    if cam.horizontal_fov is not None:
        d["horizontal_fov"] = cam.horizontal_fov
    return d


def cmd_gen_data(cfg: RunConfig) -> int:
    root = _data_root(cfg)
    spec = cfg.data.synth
    root.mkdir(parents=True, exist_ok=True)
    plans = [
        (cfg.data.source_train, spec.source_camera, 0, spec.train_scenes),
        (cfg.data.target_train, spec.target_camera, 10_000, spec.train_scenes),
        (cfg.data.target_val, spec.target_camera, 20_000, spec.val_scenes),
    ]
    splits = {}
    for name, cam, offset, count in plans:
        samples = [
            render(generate_scene(spec.seed + offset + i, spec.complexity), cam)
            for i in range(count)
        ]
        entry = write_split(root, name, samples)
        entry["camera"] = _camera_dict(cam)
        entry["scene_seeds"] = [spec.seed + offset + i for i in range(count)]
        entry["complexity"] = spec.complexity
        splits[name] = entry
    write_manifest(root, {"synth_seed": spec.seed, "splits": splits})
    print(f"wrote {sum(s['count'] for s in splits.values())} samples under {root}")
    return 0


def cmd_train(cfg: RunConfig, resume: str | None, config_path: str) -> int:
    root = _data_root(cfg)
    source = load_split(root, cfg.data.source_train)
    target = load_split(root, cfg.data.target_train)
    run_dir = _run_dir(cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    # One experiment, one artifact: keep the exact config next to its outputs.
    (run_dir / "config.yaml").write_text(Path(config_path).read_text(encoding="utf-8"))
    final, metrics = run_training(
        cfg.train, source, target, cfg.model, run_dir, resume=resume
    )
    print(f"final checkpoint: {final}")
    print(f"metrics log: {metrics}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str | None, out: str | None) -> int:
    run_dir = _run_dir(cfg)
    ckpt = checkpoint or cfg.eval.checkpoint or str(run_dir / "checkpoints" / "final.pt")
    model = load_generator(ckpt)
    dataset = load_split(_data_root(cfg), cfg.eval.split)
    report = evaluate_model(
        model,
        dataset,
        input_size=cfg.eval.input_size,
        model_tag=cfg.run_name,
        dataset_tag=cfg.eval.split,
    )
    out_path = Path(out) if out else run_dir / "reports" / f"{cfg.eval.split}.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_reports(out_path, [report])
    sys.stdout.write(format_class_table([report]))
    print(f"report: {out_path}")
    return 0


def _single_report(path: str) -> EvalReport:
    reports = load_reports(path)
    if len(reports) != 1:
        raise ValueError(f"expected exactly one report record in {path}, got {len(reports)}")
    return reports[0]


def cmd_report(cfg: RunConfig, out: str | None) -> int:
    parts = []
    rows = []
    for r in cfg.report.rows:
        if "source" in r:
            src = _single_report(r["source"])
            tgt = _single_report(r["target"])
            rows.append(gap_report(src, tgt, backbone=r["backbone"]))
        else:
            blank = (None,) * 19
            src = EvalReport(r["name"], "source", blank, r["source_miou"])
            tgt = EvalReport(r["name"], "target", blank, r["target_miou"])
            rows.append(gap_report(src, tgt, backbone=r["backbone"]))
    if rows:
        parts.append(format_gap_table(rows))
    for path in cfg.report.class_tables:
        parts.append(format_class_table(load_reports(path)))
    text = "\n".join(parts)
    sys.stdout.write(text)
    target = out or cfg.report.output
    if target:
        out_path = Path(target)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text)
        print(f"report written: {out_path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pin2pano",
        description="Pinhole-to-panoramic domain-adaptive segmentation workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="render a synthetic paired-domain dataset")
    p_gen.add_argument("--config", required=True)

    p_train = sub.add_parser("train", help="run adversarial adaptation training")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a labeled split")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--out", default=None)

    p_report = sub.add_parser("report", help="emit gap and per-class tables")
    p_report.add_argument("--config", required=True)
    p_report.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume, args.config)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.out)
        if args.command == "report":
            return cmd_report(cfg, args.out)
        raise ValueError(f"unknown command: {args.command}")
    except ConfigError as e:
        print(f"error: config-error: {e.path}: {e.message}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError) as e:
        print(f"error: io-error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: invalid-argument: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
