"""Command line entry points: gen-data, train, eval, synth, report.

Every command validates its inputs before touching the filesystem and writes
its artifacts into a temporary sibling directory that is renamed into place
only after success, so a failed run never leaves a half-written output.
"""

import argparse
import contextlib
import hashlib
import itertools
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch
import yaml

from .checkpoint import CheckpointError, load_checkpoint, load_model
from .config import (ABLATION_STAGES, ConfigValidationError, architecture_hash, build_config,
                     load_config, parse_ratios)
from .dataset import (IngestionError, PhantomSpec, generate_phantom, load_manifest, read_image,
                      schema_from_names, write_image, write_manifest)
from .evaluation import compare, records_from_csv, records_to_csv, run_matrix, write_report
from .model import MedK2N
from .types import (ContractError, MaskParseError, SchemaError, make_task, mask_from_names,
                    parse_mask, schema_lookup)

EXIT_OK, EXIT_USAGE, EXIT_IO = 0, 2, 3


class CLIError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


@contextlib.contextmanager
def staged_dir(final: Path, overwrite=True):
    """Yield a temp directory next to ``final``; move it into place on success."""
    final = Path(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        if not overwrite:
            shutil.rmtree(tmp, ignore_errors=True)
            raise CLIError(f"{final} already exists")
        old = final.with_name(f".{final.name}.old")
        shutil.rmtree(old, ignore_errors=True)
        os.replace(final, old)
        os.replace(tmp, final)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.replace(tmp, final)


def content_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def tree_hash(root: Path) -> str:
    """Hash of relative paths and bytes of every file under ``root``."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# config and data plumbing


def config_from_args(args):
    overrides = {}
    if getattr(args, "ablation", None):
        overrides["ablation"] = args.ablation
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides.setdefault("optim", {})["epochs"] = args.epochs
    if getattr(args, "curriculum_ratios", None):
        overrides["curriculum"] = {"ratios": list(parse_ratios(args.curriculum_ratios))}
    if getattr(args, "data", None):
        overrides["data"] = {"manifest": str(args.data)}
    cfg = load_config(getattr(args, "config", None), getattr(args, "profile", None), overrides)
    return cfg.validate()


def split_cases(samples, val_fraction):
    n_val = int(round(len(samples) * val_fraction))
    if n_val == 0 or n_val >= len(samples):
        return list(samples), []
    return list(samples[:-n_val]), list(samples[-n_val:])


def dataset_for(cfg):
    if cfg.data.manifest:
        return load_manifest(cfg.data.manifest)
    schema = schema_from_names(cfg.data.modalities)
    spec = PhantomSpec(seed=cfg.data.seed, n_cases=cfg.data.n_cases, image_size=cfg.model.image_size,
                       schema=schema, lesion_count_range=tuple(cfg.data.lesion_count_range))
    return generate_phantom(spec)


def load_trained(path):
    """Rebuild the model stored in a checkpoint (its own config is authoritative)."""
    _, meta, arch = load_checkpoint(path)
    if "config" not in meta or "schema" not in meta:
        raise CheckpointError(f"{path}: checkpoint lacks config/schema metadata")
    cfg = build_config(meta["config"].get("profile", "desk"), meta["config"])
    schema = schema_from_names([n for n, _ in meta["schema"]], {n: t for n, t in meta["schema"]})
    expected = architecture_hash(cfg.architecture())
    if expected != arch:
        raise CheckpointError(f"{path}: stored architecture hash does not match its own config")
    model = MedK2N(schema, cfg.model)
    load_model(model, path, expected)
    model.eval()
    return model, cfg, schema


def check_compatible(cfg_user, cfg_ckpt, path):
    if architecture_hash(cfg_user.architecture()) != architecture_hash(cfg_ckpt.architecture()):
        raise CheckpointError(f"{path}: checkpoint architecture {cfg_ckpt.architecture()} does not "
                              f"match the configured model {cfg_user.architecture()}")


def checkpoint_path(p):
    p = Path(p)
    return p / "checkpoints" / "final.mk2n" if p.is_dir() else p


def all_masks(M):
    return ["".join(b) for b in itertools.product("01", repeat=M) if "1" in b and "0" in b]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    if args.cases < 1:
        raise CLIError("--cases: must be >= 1")
    if args.size < 16 or args.size % 16:
        raise CLIError("--size: must be a positive multiple of 16")
    names = [s.strip() for s in args.modalities.split(",") if s.strip()]
    schema = schema_from_names(names)
    samples = generate_phantom(PhantomSpec(seed=args.seed, n_cases=args.cases, image_size=args.size,
                                           schema=schema))
    out = Path(args.out)
    with staged_dir(out) as tmp:
        write_manifest(samples, tmp, name=f"phantom-seed{args.seed}")
    print(f"wrote {len(samples)} cases ({','.join(names)}) to {out / 'manifest.json'}")
    print(f"content hash {tree_hash(out)[:16]}")
    return EXIT_OK


def cmd_train(args):
    from .training import Trainer
    cfg = config_from_args(args)
    samples = dataset_for(cfg)
    train, val = split_cases(samples, cfg.data.val_fraction)
    out = Path(args.out or cfg.out_dir)
    snapshot = cfg.to_dict()
    with staged_dir(out) as tmp:
        (tmp / "config.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=True))
        info = {"config_hash": content_hash(snapshot), "ablation": cfg.ablation,
                "n_train": len(train), "n_val": len(val),
                "stage_boundaries": list(cfg.curriculum.boundaries()),
                "val_cases": [s.case_id for s in val]}
        trainer = Trainer(cfg, train, val, log_path=tmp / "train_log.jsonl",
                          ckpt_dir=tmp / "checkpoints", quiet=args.quiet)
        losses = trainer.fit()
        info["epoch_losses"] = losses
        (tmp / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    print(f"trained {cfg.ablation} for {cfg.optim.epochs} epochs; loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"run directory {out} (config {info['config_hash'][:12]})")
    return EXIT_OK


def _eval_samples(args, cfg, schema):
    if args.data:
        return load_manifest(args.data, schema)
    samples = dataset_for(cfg)
    _, val = split_cases(samples, cfg.data.val_fraction)
    return val or samples


def cmd_eval(args):
    ckpt = checkpoint_path(args.checkpoint)
    model, cfg, schema = load_trained(ckpt)
    if args.config or args.profile:
        check_compatible(config_from_args(args), cfg, ckpt)
    names = [m.name for m in schema]
    masks = args.mask or all_masks(len(schema))
    for code in masks:
        parse_mask(code, schema)
    targets = args.targets.split(",") if args.targets else names
    samples = _eval_samples(args, cfg, schema)
    records = run_matrix(model, samples, masks, targets, cfg.ablation_flags)
    comparison = None
    if args.compare:
        ckpt_b = checkpoint_path(args.compare)
        model_b, cfg_b, schema_b = load_trained(ckpt_b)
        if [m.name for m in schema_b] != names:
            raise CheckpointError(f"{ckpt_b}: modality schema differs from {ckpt}")
        records_b = run_matrix(model_b, samples, masks, targets, cfg_b.ablation_flags)
        comparison = compare(records, records_b, cfg.ablation, cfg_b.ablation)
    out = Path(args.out)
    with staged_dir(out) as tmp:
        table = write_report(records, tmp, names, comparison)
        if comparison is not None:
            records_to_csv(records_b, tmp / "metrics_compare.csv")
    print(table)
    return EXIT_OK


def _parse_inputs(items, schema):
    images = {}
    for item in items:
        if "=" not in item:
            raise CLIError(f"--input {item!r}: expected MODALITY=PATH")
        name, path = item.split("=", 1)
        m = schema_lookup(schema, name)
        if m.name in images:
            raise CLIError(f"--input: modality {m.name} given twice")
        images[m.name] = read_image(path)
    return images


def _contact_sheet(inputs, outputs, path):
    from PIL import Image
    tiles = list(inputs.values()) + list(outputs.values())
    h, w = tiles[0].shape
    sheet = np.zeros((h, w * len(tiles)))
    for i, t in enumerate(tiles):
        sheet[:, i * w:(i + 1) * w] = t
    Image.fromarray(np.round(np.clip(sheet, 0, 1) * 255).astype(np.uint8)).save(path)


def cmd_synth(args):
    ckpt = checkpoint_path(args.checkpoint)
    model, cfg, schema = load_trained(ckpt)
    if not args.input:
        raise CLIError("--input: at least one MODALITY=PATH is required")
    images = _parse_inputs(args.input, schema)
    targets = [t.strip() for t in args.targets.split(",") if t.strip()]
    if not targets:
        raise CLIError("--targets: at least one target modality is required")
    tmods = [schema_lookup(schema, t) for t in targets]
    for t in tmods:
        if t.name in images:
            raise CLIError(f"--targets: {t.name} is also an input")
    shapes = {v.shape for v in images.values()}
    if len(shapes) != 1:
        raise CLIError(f"--input: images differ in shape {sorted(shapes)}")
    H, W = shapes.pop()
    if H % 16 or W % 16:
        raise CLIError(f"--input: image size {H}x{W} must be a multiple of 16")
    task = make_task(mask_from_names(list(images), schema), set(tmods), schema)
    batch = {k: torch.as_tensor(v[None], dtype=torch.float32) for k, v in images.items()}
    with torch.no_grad():
        res = model(batch, task, cfg.ablation_flags, mode="infer")
    outputs, sidecar = {}, {"task": task.describe(), "key_frame": task.key_frame.name,
                            "ablation": cfg.ablation, "targets": {}}
    for t in task.ordered_targets():
        o = res[t.name]
        outputs[t.name] = o.final[0, 0].double().numpy()
        sidecar["targets"][t.name] = {
            "quality_scores": [round(float(x), 8) for x in o.scores[0]],
            "winner": int(o.winners[0]),
            "fusion": [{k: (round(v, 8) if isinstance(v, float) else v) for k, v in d.summary().items()}
                       for d in o.decisions]}
    out = Path(args.out)
    with staged_dir(out) as tmp:
        for name, img in outputs.items():
            write_image(tmp / f"{name}.png", img)
        (tmp / "synth.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        if args.sheet:
            _contact_sheet(images, outputs, tmp / "sheet.png")
    print(f"wrote {', '.join(outputs)} to {out}")
    return EXIT_OK


def cmd_report(args):
    dirs = [Path(d) for d in args.eval_dirs]
    for d in dirs:
        if not (d / "metrics.csv").exists():
            raise CLIError(f"{d}: no metrics.csv (run `eval` first)", EXIT_IO)
    records = records_from_csv(dirs[0] / "metrics.csv")
    if args.modalities:
        names = args.modalities.split(",")
    else:
        summary = dirs[0] / "summary.json"
        names = json.loads(summary.read_text()).get("modalities") if summary.exists() else None
        names = names or [f"M{i}" for i in range(len(records[0].mask) if records else 0)]
    comparison = None
    if len(dirs) == 2:
        comparison = compare(records, records_from_csv(dirs[1] / "metrics.csv"),
                             dirs[0].name, dirs[1].name)
    out = Path(args.out)
    with staged_dir(out) as tmp:
        table = write_report(records, tmp, names, comparison)
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_config_flags(p):
    p.add_argument("--config", type=Path, help="YAML run config (may contain a CURRICULUM block)")
    p.add_argument("--profile", choices=["desk", "paper"], default=None)
    p.add_argument("--ablation", choices=ABLATION_STAGES, default=None)
    p.add_argument("--curriculum-ratios", default=None, metavar="A,B,C,D")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)


def build_parser():
    ap = argparse.ArgumentParser(prog="medk2n", description="K->N multimodal image synthesis")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a procedural phantom dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--modalities", default="T1n,T1c,T2w,T2f")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, help="manifest.json (default: phantoms from the config)")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over availability masks")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--compare", default=None, help="second checkpoint for Wilcoxon comparison")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--mask", action="append", default=None, help="mask code such as 1110 (repeatable)")
    p.add_argument("--targets", default=None, help="comma-separated target modalities")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate target modalities from input images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", action="append", default=[], metavar="MOD=PATH")
    p.add_argument("--targets", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sheet", action="store_true", help="also write a contact sheet")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="rebuild tables from eval directories")
    p.add_argument("eval_dirs", nargs="+")
    p.add_argument("--modalities", default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "report" and len(args.eval_dirs) > 2:
        parser.error("report compares at most two eval directories")
    try:
        return args.func(args)
    except ConfigValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, MaskParseError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (CheckpointError, IngestionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
