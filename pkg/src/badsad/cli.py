"""Command-line entry point: pretrain, train, eval, sweep, robustness, project, reproduce-table1.

Every command reads an experiment config (or the config echoed into a run
directory), writes its artifacts under a run directory and exits with
0 on success, 2 on configuration errors, 3 on data/format errors and 4 on
numerical/training errors.  Artifacts carry no timestamps, so rerunning a
command reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .datasets import DatasetSplit, build_split, data_files, load_partitions, split_from_manifest, synth_blobs
from .errors import BadSADError, ConfigurationError, ConsistencyError, DataError, UsageError
from .evaluation import (
    PROJECTION_GROUPS,
    EvalReport,
    ScoreSet,
    anomaly_scores,
    asr_from_scores,
    auc,
    project_latent,
    robustness_eval,
    rows_to_csv,
    scatter_svg,
    select_threshold,
    sweep_from_scores,
)
from .model import arch_for_sample, encode, load_checkpoint, pretrain_autoencoder, save_checkpoint
from .training import LOG_COLUMNS, train
from .trigger import TriggerMask, apply_trigger, build_mask, poison_set

logger = logging.getLogger("badsad")

PRETRAIN_DIR = "pretrain"
PRETRAIN_CKPT = "pretrain.ckpt"
MODEL_CKPT = "model.ckpt"
MANIFEST = "manifest.json"
SPLIT_FILE = "split.json"
COLUMNS = {
    "pretrain_log.csv": ["epoch", "mse"],
    "train_log.csv": list(LOG_COLUMNS),
    "steps.csv": ["step", "loss"],
    "report.csv": ["dataset", "normal_class", "mode", "auc", "asr", "tau"],
    "sweep_threshold.csv": ["ratio", "tau", "auc", "asr"],
    "sweep_alpha.csv": ["alpha", "auc", "asr", "tau", "run", "manifest_sha256"],
    "sweep_beta.csv": ["beta", "auc", "asr", "tau", "run", "manifest_sha256"],
    "robustness.csv": ["trigger", "asr", "tau"],
    "projection.csv": ["x", "y", "group"],
    "table1.csv": ["dataset", "normal_class", "mode", "auc", "asr"],
}

_cache_lock = threading.Lock()
_partition_cache: dict[tuple[str, str], tuple] = {}
_digest_cache: dict[str, str] = {}


# -- small helpers -------------------------------------------------------------------------


def _json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats spelled out."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def inputs_digest(cfg: dict, *digests: str) -> str:
    """Digest of everything that determines a run's outputs; where they are written is left out."""
    settings = {k: v for k, v in cfg.items() if k != "output"}
    return _sha256((json.dumps(_clean(settings), sort_keys=True) + "".join(digests)).encode())


def _file_digest(path: Path) -> str:
    key = str(path.resolve())
    with _cache_lock:
        if key in _digest_cache:
            return _digest_cache[key]
    digest = _sha256(path.read_bytes())
    with _cache_lock:
        _digest_cache[key] = digest
    return digest


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _read_manifest(run_dir: Path) -> dict:
    path = run_dir / MANIFEST
    if not path.exists():
        raise DataError(f"run manifest not found: {path}")
    return json.loads(path.read_text())


# -- data ------------------------------------------------------------------------------------


def _partitions(dataset: str, root: Path):
    key = (dataset, str(root.resolve()))
    with _cache_lock:
        if key in _partition_cache:
            return _partition_cache[key]
    parts = load_partitions(dataset, root)
    with _cache_lock:
        _partition_cache[key] = parts
    return parts


def _check_data(cfg: dict) -> None:
    if cfg["data"]["dataset"] == "synth":
        return
    root = cfgmod.data_root(cfg)
    if not root.exists():
        raise DataError(f"data path does not exist: {root}")
    for path in data_files(cfg["data"]["dataset"], root):
        if not path.exists():
            raise DataError(f"data file not found: {path}")


def data_digest(cfg: dict) -> str:
    """Content hash of every data file the experiment reads (or of the synthetic spec)."""
    if cfg["data"]["dataset"] == "synth":
        return _sha256(json.dumps(_clean(vars(cfgmod.synth_spec(cfg))), sort_keys=True).encode())
    _check_data(cfg)
    files = data_files(cfg["data"]["dataset"], cfgmod.data_root(cfg))
    return _sha256("".join(f"{p.name}:{_file_digest(p)}\n" for p in files).encode())


def load_split(cfg: dict, manifest: dict | None = None) -> DatasetSplit:
    """The split for ``cfg``; with a recorded split manifest it is rebuilt from its indices."""
    if cfg["data"]["dataset"] == "synth":
        split = synth_blobs(cfgmod.synth_spec(cfg), cfgmod.split_sizes(cfg))
    else:
        _check_data(cfg)
        train_set, test_set = _partitions(cfg["data"]["dataset"], cfgmod.data_root(cfg))
        if manifest is not None:
            split = split_from_manifest(manifest, train_set, test_set)
        else:
            split = build_split(train_set, cfg["data"]["normal_class"], cfgmod.split_sizes(cfg), cfg["data"]["split_seed"], test=test_set)
    if manifest is not None and _sha256(json.dumps(split.manifest(), sort_keys=True).encode()) != _sha256(
        json.dumps(manifest, sort_keys=True).encode()
    ):
        raise ConsistencyError("recorded split manifest does not match the data on disk")
    return split


def attach_poison(cfg: dict, split: DatasetSplit) -> tuple[TriggerMask, np.ndarray]:
    spec = cfgmod.poison_spec(cfg, split.sample_shape)
    trigger = build_mask(spec.kind, spec.square_size, *split.sample_shape, mu=spec.mu)
    if cfg["train"]["mode"] in ("poison_only", "badsad"):
        split.poisoned, idx = poison_set(split.labeled_normal, spec, trigger)
    else:
        idx = np.zeros(0, np.int64)
    return trigger, idx


# -- pretrain ----------------------------------------------------------------------------------


def pretrain_dir(cfg: dict) -> Path:
    return Path(cfg["output"]["dir"]) / PRETRAIN_DIR


def cmd_pretrain(cfg: dict, out_dir: Path | None = None) -> Path:
    """Pretrain the autoencoder on the normal training roles; returns the checkpoint path."""
    out_dir = Path(out_dir) if out_dir else pretrain_dir(cfg)
    split = load_split(cfg)
    p = cfg["pretrain"]
    arch = arch_for_sample(cfg["data"]["dataset"], split.sample_shape, p["hidden"], p["rep_dim"])
    data = np.concatenate([split.unlabeled, split.labeled_normal])
    state = pretrain_autoencoder(
        data,
        arch,
        epochs=p["epochs"],
        lr=p["lr"],
        batch_size=p["batch_size"],
        seed=p["seed"],
        weight_decay=p["weight_decay"],
        dtype=np.dtype(cfg["train"]["dtype"]),
    )
    ckpt = out_dir / PRETRAIN_CKPT
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, state)
    rows = [{"epoch": i, "mse": float(m)} for i, m in enumerate(state.history)]
    _write(out_dir / "pretrain_log.csv", rows_to_csv(rows, COLUMNS["pretrain_log.csv"]))
    split_text = json.dumps(split.manifest(), sort_keys=True) + "\n"
    _write(out_dir / SPLIT_FILE, split_text)
    manifest = {
        "command": "pretrain",
        "config": cfg,
        "arch": arch.tag,
        "data_sha256": data_digest(cfg),
        "split_sha256": _sha256(split_text.encode()),
        "checkpoint_sha256": _file_digest_fresh(ckpt),
        "columns": {"pretrain_log.csv": COLUMNS["pretrain_log.csv"]},
    }
    manifest["inputs_sha256"] = inputs_digest(cfg, manifest["data_sha256"])
    _write(out_dir / MANIFEST, _json(manifest))
    logger.info("pretrained %s for %d epochs -> %s", arch.tag, p["epochs"], ckpt)
    return ckpt


def _file_digest_fresh(path: Path) -> str:
    return _sha256(Path(path).read_bytes())


# -- train -------------------------------------------------------------------------------------


def cmd_train(cfg: dict, run_dir: Path | None = None, pretrained: Path | None = None) -> Path:
    """Train one mode from a pretrained checkpoint; returns the run directory."""
    mode = cfg["train"]["mode"]
    run_dir = Path(run_dir) if run_dir else Path(cfg["output"]["dir"]) / mode
    pretrained = Path(pretrained) if pretrained else pretrain_dir(cfg) / PRETRAIN_CKPT
    if not pretrained.exists():
        raise DataError(f"pretrained checkpoint not found: {pretrained} (run `badsad pretrain` first)")
    state, _ = load_checkpoint(pretrained)
    split = load_split(cfg)
    trigger, poison_idx = attach_poison(cfg, split)
    spec = cfgmod.poison_spec(cfg, split.sample_shape)
    tcfg = cfgmod.train_config(cfg, spec)
    run = train(tcfg, split, state)

    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run_dir / MODEL_CKPT, run.state, run.centers, include_decoder=False)
    _write(run_dir / "train_log.csv", rows_to_csv(run.history, COLUMNS["train_log.csv"]))
    steps = [{"step": i, "loss": v} for i, v in enumerate(run.step_losses)]
    _write(run_dir / "steps.csv", rows_to_csv(steps, COLUMNS["steps.csv"]))
    split_text = json.dumps(split.manifest(), sort_keys=True) + "\n"
    _write(run_dir / SPLIT_FILE, split_text)

    data_sha = data_digest(cfg)
    pre_sha = _file_digest_fresh(pretrained)
    manifest = {
        "command": "train",
        "mode": mode,
        "config": cfg,
        "train_config": run.config,
        "trigger": {"kind": trigger.kind, "square_size": trigger.square_size, "mu": trigger.mu, "popcount": trigger.popcount},
        "poison_source_indices": [int(i) for i in poison_idx],
        "audit": run.audit,
        "arch": run.state.arch.tag,
        "pretrained_checkpoint": str(pretrained),
        "pretrained_sha256": pre_sha,
        "data_sha256": data_sha,
        "split_sha256": _sha256(split_text.encode()),
        "checkpoint_sha256": _file_digest_fresh(run_dir / MODEL_CKPT),
        "inputs_sha256": inputs_digest(cfg, data_sha, pre_sha),
        "columns": {k: COLUMNS[k] for k in ("train_log.csv", "steps.csv")},
    }
    _write(run_dir / MANIFEST, _json(manifest))
    logger.info("trained %s for %d epochs -> %s", mode, tcfg.epochs, run_dir)
    return run_dir


# -- evaluation --------------------------------------------------------------------------------


class RunContext:
    """Everything needed to score a finished run, rebuilt from its directory."""

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.manifest = _read_manifest(self.run_dir)
        if self.manifest.get("command") != "train":
            raise UsageError(f"{self.run_dir} is not a training run directory")
        self.cfg = cfgmod.resolve(self.manifest["config"])
        ckpt = self.run_dir / MODEL_CKPT
        if not ckpt.exists():
            raise DataError(f"checkpoint not found: {ckpt}")
        self.state, self.centers = load_checkpoint(ckpt)
        if self.centers is None:
            raise DataError(f"{ckpt} holds no hypersphere centers")
        split_path = self.run_dir / SPLIT_FILE
        if not split_path.exists():
            raise DataError(f"split manifest not found: {split_path}")
        self.split = load_split(self.cfg, json.loads(split_path.read_text()))
        self.trigger, _ = attach_poison(self.cfg, self.split)
        self._scores: dict[str, np.ndarray] = {}

    def scores(self, group: str) -> np.ndarray:
        if group not in self._scores:
            if group == "triggered_abnormal":
                x = apply_trigger(self.split.asr_abnormal, self.trigger)
            else:
                x = self.split.role(group)
            self._scores[group] = anomaly_scores(self.state, self.centers, x)
        return self._scores[group]

    def threshold(self) -> tuple[float, float]:
        val = ScoreSet(self.scores("val_normal"), self.scores("val_abnormal"))
        return select_threshold(val, self.cfg["eval"]["criterion"])

    def test_scores(self) -> ScoreSet:
        return ScoreSet(self.scores("test_normal"), self.scores("test_abnormal"))


def evaluate_run(ctx: RunContext) -> EvalReport:
    tau, val_score = ctx.threshold()
    test = ctx.test_scores()
    triggered = ctx.scores("triggered_abnormal")
    sweep = sweep_from_scores(test, triggered, tau, cfgmod.ratios(ctx.cfg))
    rob = robustness_eval(ctx.state, ctx.centers, tau, ctx.split.asr_abnormal, ctx.trigger)
    d = ctx.cfg["data"]
    meta = {
        "dataset": d["dataset"],
        "normal_class": d["normal_class"],
        "mode": ctx.manifest["mode"],
        "criterion": ctx.cfg["eval"]["criterion"],
        "checkpoint_sha256": ctx.manifest["checkpoint_sha256"],
        "n_test_normal": len(test.normal),
        "n_test_abnormal": len(test.abnormal),
        "n_triggered": len(triggered),
    }
    return EvalReport(auc(test), tau, asr_from_scores(triggered, tau), val_score, sweep, rob, meta)


def _report_row(report: EvalReport) -> dict:
    m = report.meta
    return {"dataset": m["dataset"], "normal_class": m["normal_class"], "mode": m["mode"], "auc": report.auc, "asr": report.asr, "tau": report.tau}


def cmd_eval(run_dir: Path) -> EvalReport:
    ctx = RunContext(run_dir)
    report = evaluate_run(ctx)
    _write(ctx.run_dir / "report.json", _json(_clean(vars(report))))
    _write(ctx.run_dir / "report.csv", rows_to_csv([_report_row(report)], COLUMNS["report.csv"]))
    logger.info("auc %.4f asr %.4f tau %.6g", report.auc, report.asr, report.tau)
    return report


def cmd_robustness(run_dir: Path) -> list[dict]:
    ctx = RunContext(run_dir)
    tau, _ = ctx.threshold()
    rob = robustness_eval(ctx.state, ctx.centers, tau, ctx.split.asr_abnormal, ctx.trigger)
    rows = [{"trigger": k, "asr": rob[k], "tau": tau} for k in ("full", "sub", "distinct")]
    _write(ctx.run_dir / "robustness.csv", rows_to_csv(rows, COLUMNS["robustness.csv"]))
    return rows


def cmd_project(run_dir: Path, n_per_group: int | None = None, svg: bool = False) -> tuple[np.ndarray, list[str]]:
    """2-D principal projection of normal, poisoned, abnormal and triggered-abnormal embeddings."""
    ctx = RunContext(run_dir)
    n = n_per_group or ctx.cfg["eval"]["n_per_group"]
    poisoned = ctx.split.poisoned
    if poisoned is None or len(poisoned) == 0:
        spec = cfgmod.poison_spec(ctx.cfg, ctx.split.sample_shape)
        poisoned, _ = poison_set(ctx.split.labeled_normal, spec, ctx.trigger)
    pools = {
        "normal": ctx.split.test_normal,
        "poisoned": poisoned,
        "abnormal": ctx.split.test_abnormal,
        "triggered_abnormal": apply_trigger(ctx.split.asr_abnormal, ctx.trigger),
    }
    seed = ctx.cfg["eval"]["projection_seed"]
    groups = {}
    for i, name in enumerate(PROJECTION_GROUPS):
        pool = pools[name]
        if len(pool) < n:
            raise UsageError(f"group {name!r} holds {len(pool)} samples, fewer than the {n} requested")
        pick = np.sort(np.random.default_rng([seed, i]).choice(len(pool), size=n, replace=False))
        groups[name] = encode(ctx.state, pool[pick])
    coords, labels = project_latent(groups, seed=seed)
    rows = [{"x": float(x), "y": float(y), "group": g} for (x, y), g in zip(coords, labels)]
    _write(ctx.run_dir / "projection.csv", rows_to_csv(rows, COLUMNS["projection.csv"]))
    if svg:
        _write(ctx.run_dir / "projection.svg", scatter_svg(coords, labels))
    return coords, labels


def _parallel(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_sweep(run_dir: Path, what: str, grid=None, jobs: int = 1) -> list[dict]:
    """Threshold-ratio sweep on a finished run, or an alpha/beta sweep with one retrain per grid point."""
    run_dir = Path(run_dir)
    if what == "threshold":
        ctx = RunContext(run_dir)
        tau, _ = ctx.threshold()
        ratios = tuple(grid) if grid is not None else cfgmod.ratios(ctx.cfg)
        rows = sweep_from_scores(ctx.test_scores(), ctx.scores("triggered_abnormal"), tau, ratios)
        _write(run_dir / "sweep_threshold.csv", rows_to_csv(rows, COLUMNS["sweep_threshold.csv"]))
        return rows
    if what not in ("alpha", "beta"):
        raise ConfigurationError(f"unknown sweep {what!r}; expected threshold, alpha or beta")
    base = _read_manifest(run_dir)
    if base.get("command") != "train":
        raise UsageError(f"{run_dir} is not a training run directory")
    cfg = cfgmod.resolve(base["config"])
    grid = tuple(grid) if grid is not None else tuple(round(0.1 * i, 1) for i in range(11))
    pretrained = Path(base["pretrained_checkpoint"])

    def one(value):
        sub_cfg = copy.deepcopy(cfg)
        sub_cfg["train"][what] = float(value)
        sub_cfg["train"]["mode"] = "badsad"
        cfgmod.resolve(sub_cfg)
        sub_dir = run_dir / f"sweep_{what}" / f"{what}_{float(value)!r}"
        cmd_train(sub_cfg, sub_dir, pretrained)
        report = cmd_eval(sub_dir)
        digest = _file_digest_fresh(sub_dir / MANIFEST)
        return {what: float(value), "auc": report.auc, "asr": report.asr, "tau": report.tau, "run": sub_dir.name, "manifest_sha256": digest}

    rows = _parallel(one, list(grid), jobs)
    _write(run_dir / f"sweep_{what}.csv", rows_to_csv(rows, COLUMNS[f"sweep_{what}.csv"]))
    return rows


def cmd_reproduce_table1(cfg: dict, classes=None, modes=("clean", "poison_only", "badsad"), jobs: int = 1) -> list[dict]:
    """Pretrain and train every (class, mode) cell; emits a Table-1-shaped CSV with per-mode means."""
    classes = list(range(10)) if classes is None else list(classes)
    root = Path(cfg["output"]["dir"])

    def one_class(k):
        ccfg = copy.deepcopy(cfg)
        ccfg["data"]["normal_class"] = int(k)
        ccfg["output"]["dir"] = str(root / f"class_{k}")
        cfgmod.resolve(ccfg)
        ckpt = cmd_pretrain(ccfg)
        rows = []
        for mode in modes:
            mcfg = copy.deepcopy(ccfg)
            mcfg["train"]["mode"] = mode
            run = cmd_train(mcfg, None, ckpt)
            report = cmd_eval(run)
            rows.append({"dataset": cfg["data"]["dataset"], "normal_class": k, "mode": mode, "auc": report.auc, "asr": report.asr})
        return rows

    rows = [r for chunk in _parallel(one_class, classes, jobs) for r in chunk]
    for mode in modes:
        cells = [r for r in rows if r["mode"] == mode]
        rows.append(
            {
                "dataset": cfg["data"]["dataset"],
                "normal_class": "mean",
                "mode": mode,
                "auc": float(np.mean([r["auc"] for r in cells])),
                "asr": float(np.mean([r["asr"] for r in cells])),
            }
        )
    _write(root / "table1.csv", rows_to_csv(rows, COLUMNS["table1.csv"]))
    return rows


# -- argument parsing ----------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="badsad", description="Backdoor experiments against semi-supervised hypersphere anomaly detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("-c", "--config", type=Path, help="INI or JSON experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key")
        p.add_argument("--out", type=Path, help="output directory (overrides output.dir)")

    p = sub.add_parser("pretrain", help="pretrain the autoencoder")
    with_config(p)

    p = sub.add_parser("train", help="train one mode from the pretrained autoencoder")
    with_config(p)
    p.add_argument("--mode", choices=("clean", "poison_only", "badsad", "dirty_label"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--run-dir", type=Path, help="run directory (default <output.dir>/<mode>)")
    p.add_argument("--pretrained", type=Path, help="pretrained checkpoint (default <output.dir>/pretrain/pretrain.ckpt)")

    for name, helptext in (("eval", "write report.json/report.csv for a run"), ("robustness", "full/sub/distinct trigger ASR table")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("run_dir", type=Path)

    p = sub.add_parser("sweep", help="threshold-ratio sweep, or alpha/beta retrain sweep")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--what", choices=("threshold", "alpha", "beta"), default="threshold")
    p.add_argument("--grid", type=_floats, help="comma-separated grid values")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("project", help="2-D latent projection of four groups")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--n-per-group", type=int)
    p.add_argument("--svg", action="store_true", help="also write projection.svg")

    p = sub.add_parser("reproduce-table1", help="all classes x {clean, poison_only, badsad}")
    with_config(p)
    p.add_argument("--classes", type=_ints, help="comma-separated normal classes (default 0-9)")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("show-config", help="print the fully resolved config")
    with_config(p)
    return parser


def _config_from_args(args) -> dict:
    overrides = cfgmod.merge_overrides(cfgmod.Override.parse(o) for o in args.overrides)
    if getattr(args, "out", None) is not None:
        overrides.setdefault("output", {})["dir"] = str(args.out)
    for key in ("mode", "alpha", "beta"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.setdefault("train", {})[key] = value
    return cfgmod.load_config(args.config, overrides)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s", stream=sys.stderr)
    cmd = args.command
    if cmd == "pretrain":
        print(cmd_pretrain(_config_from_args(args)))
    elif cmd == "train":
        print(cmd_train(_config_from_args(args), args.run_dir, args.pretrained))
    elif cmd == "eval":
        report = cmd_eval(args.run_dir)
        print(f"auc={report.auc:.6f} asr={report.asr:.6f} tau={report.tau:.6g}")
    elif cmd == "robustness":
        for row in cmd_robustness(args.run_dir):
            print(f"{row['trigger']}: asr={row['asr']:.6f}")
    elif cmd == "sweep":
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        rows = cmd_sweep(args.run_dir, args.what, args.grid, args.jobs)
        print(f"{len(rows)} rows -> {args.run_dir / f'sweep_{args.what}.csv'}")
    elif cmd == "project":
        coords, _ = cmd_project(args.run_dir, args.n_per_group, args.svg)
        print(f"{len(coords)} points -> {args.run_dir / 'projection.csv'}")
    elif cmd == "reproduce-table1":
        if args.jobs < 1:
            raise ConfigurationError("--jobs must be >= 1")
        cfg = _config_from_args(args)
        rows = cmd_reproduce_table1(cfg, args.classes, jobs=args.jobs)
        print(rows_to_csv(rows, COLUMNS["table1.csv"]), end="")
    elif cmd == "show-config":
        print(cfgmod.to_ini(_config_from_args(args)), end="")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except BadSADError as exc:
        print(f"badsad: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"badsad: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
