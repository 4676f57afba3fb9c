"""The full comparison suite: data, experts, coresets, distillation variants,
cross-architecture and LoRA runs, and one merged report.

A config directory holds ``main.json`` (identity backbone), ``lora.json``
(LoRA backbone, same datagen) and any number of ``arch_*.json`` backbone specs
for cross-architecture evaluation. The bundled golden directory pins every
seed used by the acceptance suite.
"""

from __future__ import annotations

import contextlib
import dataclasses
import importlib.resources
import json
import logging
import time
from pathlib import Path

from . import cli
from .runconfig import RunConfig, RunConfigError, load_run_config

log = logging.getLogger("bitraj.pipeline")

SELECTORS = {"random": "R", "herding": "H", "kcenter": "K", "forgetting": "F"}
# variant name -> (report label, distill-section overrides)
VARIANTS = {
    "co": ("Dist", {}),
    "image_only": ("Dist-img", {"freeze_txt": True}),
    "text_only": ("Dist-txt", {"freeze_img": True}),
    "gauss_img": ("Dist-gauss-img", {"init_img": "gaussian"}),
    "gauss_txt": ("Dist-gauss-txt", {"init_txt": "gaussian"}),
}


@contextlib.contextmanager
def golden_dir():
    with importlib.resources.as_file(importlib.resources.files("bitraj") / "configs" / "golden") as p:
        yield Path(p)


def _with_distill(cfg: RunConfig, **overrides) -> RunConfig:
    return dataclasses.replace(cfg, distill=dataclasses.replace(cfg.need("distill"), **overrides))


def _read_report(path: Path) -> dict:
    d = json.loads((path / "report.json").read_text())
    return {r["direction"]: {int(k): v for k, v in r["recall"].items()} for r in d["reports"]}


def write_tree_manifest(root: Path) -> dict:
    files = sorted(p for p in root.rglob("*") if p.is_file() and p != root / "manifest.json")
    manifest = {"files": {str(p.relative_to(root)): cli.sha256_file(p) for p in files}}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run_pipeline(out, config_dir=None, force: bool = False, jobs: int = 1) -> dict:
    """Run every stage under ``out``; returns {"recall": label -> {TR, IR}, "timings": stage -> seconds}."""
    if config_dir is None:
        with golden_dir() as g:
            return run_pipeline(out, g, force, jobs)
    config_dir = Path(config_dir)
    root = cli.Outputs(out, force).root
    main = load_run_config(config_dir / "main.json")
    lora_path = config_dir / "lora.json"
    lora = load_run_config(lora_path) if lora_path.exists() else None
    if lora is not None and lora.datagen != main.datagen:
        raise RunConfigError("lora.json must use the same datagen section as main.json")
    arches = sorted(config_dir.glob("arch_*.json"))

    timings: dict[str, float] = {}
    recall: dict[str, dict] = {}
    evals: list[Path] = []

    def stage(name, fn, *args, **kw):
        t0 = time.perf_counter()
        fn(*args, **kw, force=force)
        timings[name] = time.perf_counter() - t0
        log.info("%s: %.1fs", name, timings[name])

    def evaluate(name, cfg, label, set_path, arch=None):
        out_dir = root / "eval" / name
        stage(f"eval/{name}", cli.eval_cmd, cfg, data, out_dir, str(set_path), arch=arch, label=label, jobs=jobs)
        recall[label] = _read_report(out_dir)
        evals.append(out_dir)

    data = root / "data"
    stage("gen-data", cli.gen_data, main, data)
    stage("experts", cli.train_experts_cmd, main, data, root / "experts", jobs=jobs)

    for method, label in SELECTORS.items():
        sel = root / "select" / method
        stage(f"select/{method}", cli.select_cmd, main, data, sel, method)
        evaluate(method, main, label, sel / "selection.json")

    for name, (label, overrides) in VARIANTS.items():
        target = root / "distill" / name
        stage(f"distill/{name}", cli.distill_cmd, _with_distill(main, **overrides), data, target, "trajectory", root / "experts")
        evaluate(name, main, label, target / "distilled.bdst")

    stage("distill/mmd", cli.distill_cmd, main, data, root / "distill" / "mmd", "mmd")
    evaluate("mmd", main, "DM", root / "distill" / "mmd" / "distilled.bdst")

    for arch in arches:
        kind = arch.stem[len("arch_"):]
        evaluate(f"cross_{kind}", main, f"Dist@{kind}", root / "distill" / "co" / "distilled.bdst", arch=arch)

    if lora is not None:
        lora_arch = root / "lora" / "backbone.json"
        lora_arch.parent.mkdir(parents=True, exist_ok=True)
        lora_arch.write_text(json.dumps(lora.need("backbone").to_dict(), indent=2, sort_keys=True) + "\n")
        stage("lora/experts", cli.train_experts_cmd, lora, data, root / "lora" / "experts", jobs=jobs)
        stage("lora/distill", cli.distill_cmd, lora, data, root / "lora" / "distill", "trajectory", root / "lora" / "experts")
        evaluate("lora", lora, "Dist-lora", root / "lora" / "distill" / "distilled.bdst")
        evaluate("lora_random", lora, "R-lora", root / "select" / "random" / "selection.json")

    stage("report", cli.report_cmd, [str(p) for p in evals], root / "report")
    write_tree_manifest(root)
    return {"recall": recall, "timings": timings}
