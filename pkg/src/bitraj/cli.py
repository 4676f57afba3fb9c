"""Command line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 data or format
error, 4 numeric failure (NaN/inf abort or degenerate expert segments).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import coresets
from .container import ContainerError
from .datagen import PairedDataset, generate, load_dataset, save_dataset
from .distill import (
    DegenerateSegmentError,
    DistillError,
    distill,
    load_distilled,
    mmd_distill,
    save_distilled,
)
from .experts import NonFiniteTrainingError, TrainingError, load_trajectory, save_trajectory, train_experts
from .model import ModelError, arch_digest
from .retrieval import MethodResult, compare_report, evaluate_set, parse_report_json
from .runconfig import RunConfig, RunConfigError, load_backbone, load_run_config
from .tensor import NonFiniteError

log = logging.getLogger("bitraj")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class Outputs:
    """An output directory that records what it writes and ends with a manifest."""

    def __init__(self, root, force: bool = False):
        self.root = Path(root)
        if self.root.exists() and any(self.root.iterdir()) and not force:
            raise UsageError(f"output directory {self.root} is not empty (use --force to overwrite)")
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        p = self.root / name
        p.parent.mkdir(parents=True, exist_ok=True)
        if name not in self.files:
            self.files.append(name)
        return p

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, _dump(obj))

    def finish(self, command: str, cfg: RunConfig | None, extra: dict | None = None) -> dict:
        if cfg is not None:
            self.write_text("config.json", cfg.to_json())
        manifest = {
            "command": command,
            "config_digest": None if cfg is None else cfg.digest(),
            "files": {n: sha256_file(self.root / n) for n in sorted(self.files)},
        }
        if extra:
            manifest.update(extra)
        (self.root / "manifest.json").write_text(_dump(manifest))
        return manifest


# ---------------------------------------------------------------------------
# loading helpers


def load_split(data_dir, split: str) -> PairedDataset:
    path = Path(data_dir) / f"{split}.bvld"
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    ds = load_dataset(path)
    if ds.split != split:
        raise ContainerError(f"{path} holds split '{ds.split}', expected '{split}'")
    return ds


def load_trajectories(trajs_dir, expect_arch: str):
    paths = sorted(Path(trajs_dir).glob("*.btrj"))
    if not paths:
        raise FileNotFoundError(f"no .btrj files in {trajs_dir}")
    return [load_trajectory(p, expect_arch=expect_arch) for p in paths]


def load_train_set(spec_path: str, train: PairedDataset):
    """A training set for evaluation: 'train', a selection JSON or a BDST file."""
    if spec_path == "train":
        return train, "full", len(train)
    p = Path(spec_path)
    if p.is_dir():
        cands = [p / "distilled.bdst", p / "selection.json"]
        p = next((c for c in cands if c.exists()), cands[0])
    if p.suffix == ".json":
        sel = json.loads(p.read_text())
        if sel.get("train_digest") != train.gen_config_hash:
            raise ContainerError(f"selection {p} was made on a different dataset")
        return train.subset(sel["indices"]), sel["method"], len(sel["indices"])
    d = load_distilled(p)
    return d, d.provenance.get("method", "distilled"), len(d)


def set_digest(set_path: str, train: PairedDataset) -> str:
    if set_path == "train":
        return train.gen_config_hash
    p = Path(set_path)
    if p.is_dir():
        p = next((c for c in (p / "distilled.bdst", p / "selection.json") if c.exists()), p)
    return sha256_file(p)


# ---------------------------------------------------------------------------
# commands (each usable from Python; the pipeline calls them directly)


def gen_data(cfg: RunConfig, out, force: bool = False) -> dict:
    o = Outputs(out, force)
    splits = generate(cfg.datagen)
    for name in SPLITS:
        save_dataset(splits[name], o.path(f"{name}.bvld"))
    return o.finish("gen-data", cfg)


def train_experts_cmd(cfg: RunConfig, data, out, force: bool = False, jobs: int = 1) -> dict:
    spec, ecfg = cfg.need("backbone"), cfg.need("expert")
    train = load_split(data, "train")
    o = Outputs(out, force)
    trajs = train_experts(train, spec, ecfg, ecfg.num_trajectories, jobs=jobs)
    for i, t in enumerate(trajs):
        save_trajectory(t, o.path(f"traj_{i:03d}.btrj"))
    o.write_json("loss_log.json", {str(t.seed): t.loss_log for t in trajs})
    return o.finish("train-experts", cfg, {"arch_digest": arch_digest(spec, train.e_txt), "scope": spec.scope})


def select_cmd(cfg: RunConfig, data, out, method: str, m: int | None = None, seed: int | None = None,
               force: bool = False) -> dict:
    train = load_split(data, "train")
    cs = cfg.coreset
    m = m if m is not None else cfg.need("coreset").M
    seed = cfg.seed if seed is None else seed
    if method == "forgetting":
        cfg.need("backbone")
        cfg.need("expert")
    if m > len(train):
        raise coresets.SelectionError(f"cannot select {m} of {len(train)} pairs")
    o = Outputs(out, force)
    idx = coresets.select(method, train, m, seed, cfg.backbone, cfg.expert, encoded=bool(cs and cs.encoded))
    o.write_json("selection.json", {"method": method, "m": m, "seed": seed, "indices": idx,
                                    "train_digest": train.gen_config_hash})
    return o.finish("select", cfg)


def distill_cmd(cfg: RunConfig, data, out, method: str, trajs_dir=None, force: bool = False) -> dict:
    spec, dcfg = cfg.need("backbone"), cfg.need("distill")
    if method == "trajectory" and trajs_dir is None:
        raise UsageError("--method trajectory needs --trajs")
    if method not in ("trajectory", "mmd"):
        raise UsageError(f"unknown distillation method {method!r}")
    train = load_split(data, "train")
    trajs = load_trajectories(trajs_dir, arch_digest(spec, train.e_txt)) if method == "trajectory" else None
    o = Outputs(out, force)
    if method == "trajectory":
        d, hist = distill(trajs, train, spec, dcfg)
    else:
        d, hist = mmd_distill(train, spec, dcfg)
    save_distilled(d, o.path("distilled.bdst"))
    o.write_json("history.json", hist)
    return o.finish("distill", cfg, {"method": method, "alpha": d.alpha})


def eval_cmd(cfg: RunConfig, data, out, set_path: str, arch=None, seeds: int | None = None,
             label: str | None = None, force: bool = False, jobs: int = 1) -> dict:
    ecfg = cfg.need("eval")
    spec = load_backbone(arch) if arch else cfg.need("backbone")
    train, test = load_split(data, "train"), load_split(data, "test")
    if spec.in_dim != test.d_img:
        raise RunConfigError(f"eval backbone in_dim {spec.in_dim} != data d_img {test.d_img}")
    train_set, method, pairs = load_train_set(set_path, train)
    o = Outputs(out, force)
    n = ecfg.seeds if seeds is None else seeds
    reports = evaluate_set(train_set, spec, ecfg.train, test, n_seeds=n, seed0=ecfg.seed0, jobs=jobs)
    prov = {"config_digest": cfg.digest(), "arch_digest": arch_digest(spec, test.e_txt), "set": set_digest(set_path, train)}
    res = MethodResult(label or method, pairs, reports, prov)
    o.write_json("report.json", res.to_dict())
    csv_text, _ = compare_report({res.method: res})
    o.write_text("report.csv", csv_text)
    return o.finish("eval", cfg, {"arch_digest": arch_digest(spec, test.e_txt)})


def report_cmd(inputs, out, force: bool = False) -> dict:
    results: dict[str, MethodResult] = {}
    for inp in inputs:
        p = Path(inp)
        p = p / "report.json" if p.is_dir() else p
        text = p.read_text()
        d = json.loads(text)
        found = parse_report_json(text) if "reports" not in d else {d["method"]: MethodResult.from_dict(d)}
        for k, v in found.items():
            if k in results:
                raise UsageError(f"method '{k}' appears in more than one input")
            results[k] = v
    if not results:
        raise UsageError("report needs at least one input")
    o = Outputs(out, force)
    csv_text, js = compare_report(results)
    o.write_text("compare.csv", csv_text)
    o.write_text("compare.json", js + "\n")
    return o.finish("report", None, {"methods": sorted(results)})


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, config=True, data=True) -> None:
    if config:
        p.add_argument("--config", required=True, help="run config JSON")
    if data:
        p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow a non-empty --out")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bitraj", description="Paired image-text dataset distillation at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic paired dataset")
    _add_common(p, data=False)

    p = sub.add_parser("train-experts", help="train expert trajectories on the train split")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("select", help="select a real-data coreset")
    _add_common(p)
    p.add_argument("--method", required=True, choices=coresets.SELECTORS)
    p.add_argument("--m", type=int, default=None, help="budget (default: coreset.M)")
    p.add_argument("--seed", type=int, default=None, help="selection seed (default: config seed)")

    p = sub.add_parser("distill", help="distill a small paired set")
    _add_common(p)
    p.add_argument("--method", default="trajectory", choices=("trajectory", "mmd"))
    p.add_argument("--trajs", default=None, help="directory of .btrj files")

    p = sub.add_parser("eval", help="train fresh students on a set and report R@K on the test split")
    _add_common(p)
    p.add_argument("--set", required=True, dest="set_path", help="'train', a selection.json, a .bdst, or a directory holding one")
    p.add_argument("--arch", default=None, help="backbone spec JSON (default: the config backbone)")
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--label", default=None, help="method name in the report")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", help="merge eval reports into one CSV/JSON table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("pipeline", help="run the full comparison suite from a config directory")
    p.add_argument("--config-dir", default=None, help="directory with main.json, lora.json and arch_*.json (default: bundled golden)")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    return ap


def _dispatch(args) -> None:
    if args.command == "report":
        report_cmd(args.inputs, args.out, args.force)
        return
    if args.command == "pipeline":
        from .pipeline import run_pipeline

        run_pipeline(args.out, config_dir=args.config_dir, force=args.force, jobs=args.jobs)
        return
    cfg = load_run_config(args.config)
    if args.command == "gen-data":
        gen_data(cfg, args.out, args.force)
    elif args.command == "train-experts":
        train_experts_cmd(cfg, args.data, args.out, args.force, args.jobs)
    elif args.command == "select":
        select_cmd(cfg, args.data, args.out, args.method, args.m, args.seed, args.force)
    elif args.command == "distill":
        distill_cmd(cfg, args.data, args.out, args.method, args.trajs, args.force)
    elif args.command == "eval":
        eval_cmd(cfg, args.data, args.out, args.set_path, args.arch, args.seeds, args.label, args.force, args.jobs)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (NonFiniteTrainingError, NonFiniteError, DegenerateSegmentError)):
        return EXIT_NUMERIC
    if isinstance(exc, (RunConfigError, UsageError, coresets.SelectionError)):
        return EXIT_CONFIG
    if isinstance(exc, (ContainerError, OSError, DistillError, TrainingError, ModelError, KeyError, json.JSONDecodeError)):
        return EXIT_DATA
    raise exc


def threads_from_env() -> int:
    raw = os.environ.get("BITRAJ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise RunConfigError(f"BITRAJ_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise RunConfigError("BITRAJ_THREADS must be >= 1")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with threadpool_limits(limits=threads_from_env()):
            _dispatch(args)
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = exit_code_for(exc)
        print(f"bitraj: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
