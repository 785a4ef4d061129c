"""Phantom benchmark shared by the ablation, input-count and identity checks.

One run trains a variant on the first 160 of 200 phantom cases and scores the
last 40 over every availability mask and every missing target. Runs are
cached as JSON under a fingerprint of the settings and the package source, so
editing the code invalidates the cache.
"""

import hashlib
import itertools
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .config import build_config
from .dataset import PhantomSpec, generate_phantom
from .evaluation import generate, order_combinations, run_matrix
from .training import Trainer
from .types import make_task

SETTINGS = {"n_cases": 200, "n_val": 40, "image_size": 64, "epochs": 30, "accumulation": 1,
            "data_seed": 0}
SEEDS = (0, 1, 2)
VARIANTS = {
    "B0": ("B0", {}),
    "B3": ("B3", {}),
    "B5": ("B5", {}),
    "B5-no-identity": ("B5", {"loss": {"causal": 0.0, "metric": 0.0}}),
}


def source_fingerprint():
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def all_masks(M):
    return ["".join(b) for b in itertools.product("01", repeat=M) if "1" in b and "0" in b]


def benchmark_data(settings=SETTINGS):
    data = generate_phantom(PhantomSpec(seed=settings["data_seed"], n_cases=settings["n_cases"],
                                        image_size=settings["image_size"]))
    n_val = settings["n_val"]
    return data[:-n_val], data[-n_val:]


def variant_config(name, seed, settings=SETTINGS):
    ablation, extra = VARIANTS[name]
    over = {"ablation": ablation, "seed": seed,
            "model": {"image_size": settings["image_size"]},
            "optim": {"epochs": settings["epochs"], "accumulation": settings["accumulation"]},
            "data": {"n_cases": settings["n_cases"]}}
    for k, v in extra.items():
        over.setdefault(k, {}).update(v)
    return build_config("desk", over).validate()


@torch.no_grad()
def identity_rate(model, samples, ablation):
    """Share of held-out generations whose nearest template text is the target."""
    schema = samples[0].schema
    names = [m.name for m in schema]
    hits = total = 0
    for mask, tgt in order_combinations(all_masks(len(schema)), names, schema):
        task = make_task(mask, {tgt}, schema)
        out = generate(model, samples, task, ablation)[tgt.name]
        pred = model.cmim.nearest_modality(torch.as_tensor(out[:, None], dtype=torch.float32))
        hits += int((pred == tgt.index).sum())
        total += len(out)
    return hits / total


@torch.no_grad()
def real_identity_rate(model, samples):
    """Same rate for the real held-out images, a check on the encoders alone."""
    hits = total = 0
    for m in samples[0].schema:
        imgs = torch.as_tensor(np.stack([s.slices[m.name] for s in samples])[:, None], dtype=torch.float32)
        hits += int((model.cmim.nearest_modality(imgs) == m.index).sum())
        total += len(samples)
    return hits / total


def run_variant(name, seed, train, val, settings=SETTINGS):
    cfg = variant_config(name, seed, settings)
    t0 = time.time()
    trainer = Trainer(cfg, train, val)
    trainer.fit()
    model = trainer.model.eval()
    names = [m.name for m in val[0].schema]
    records = run_matrix(model, val, all_masks(len(names)), names, trainer.ablation)
    return {"variant": name, "seed": seed, "seconds": round(time.time() - t0, 1),
            "records": [asdict(r) for r in records],
            "identity_rate": identity_rate(model, val, trainer.ablation),
            "real_identity_rate": real_identity_rate(model, val)}


def run_benchmark(cache_dir, variants=tuple(VARIANTS), seeds=SEEDS, settings=SETTINGS, log=None):
    """All (variant, seed) runs, reusing cached results when the fingerprint matches."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = hashlib.sha256(json.dumps([settings, source_fingerprint()], sort_keys=True).encode()).hexdigest()[:16]
    train = val = None
    runs = []
    for name in variants:
        for seed in seeds:
            path = cache_dir / f"{name}_s{seed}_{key}.json"
            if path.exists():
                runs.append(json.loads(path.read_text()))
                continue
            if train is None:
                train, val = benchmark_data(settings)
            res = run_variant(name, seed, train, val, settings)
            path.write_text(json.dumps(res))
            if log:
                log(f"{name} seed {seed}: {res['seconds']}s")
            runs.append(res)
    return runs


def validation_psnr(run):
    return float(np.mean([r["psnr"] for r in run["records"]]))


def aggregate(runs):
    """Seed-averaged figures per variant.

    ``psnr`` is the mean over the full held-out matrix; ``by_target`` holds
    the mean PSNR per target for one, two and three available inputs.
    """
    out = {}
    for name in dict.fromkeys(r["variant"] for r in runs):
        rs = [r for r in runs if r["variant"] == name]
        by_target = {}
        for t in dict.fromkeys(rec["target"] for rec in rs[0]["records"]):
            by_target[t] = {}
            for k in (1, 2, 3):
                vals = [np.mean([rec["psnr"] for rec in r["records"]
                                 if rec["target"] == t and rec["mask"].count("1") == k]) for r in rs]
                by_target[t][k] = float(np.mean(vals))
        out[name] = {"psnr": float(np.mean([validation_psnr(r) for r in rs])),
                     "psnr_per_seed": [validation_psnr(r) for r in rs],
                     "identity_rate": float(np.mean([r["identity_rate"] for r in rs])),
                     "real_identity_rate": float(np.mean([r["real_identity_rate"] for r in rs])),
                     "by_target": by_target}
    return out
