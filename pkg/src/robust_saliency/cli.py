"""Command-line interface: ``robust-saliency {train,certify,attack,verify}``.

Configuration is a flat ``key = value`` text file (``#`` starts a comment).
Every key is optional; see ``DEFAULTS`` for the full list. Distances (``rho``,
``sigma``) are in standardised pixel units, i.e. multiples of the training
set's pixel standard deviation, not raw [0, 1] intensities.

Exit codes: 0 success, 1 suite or assertion failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .attack import AttackConfig, SmoothedProvider, l2_topk_attack
from .certificates import certified_ranks, median_rank_bound, topk_certificate, topk_overlap
from .data import Dataset, IDXFormatError, downsample, load_digits_split, load_idx, synth_blobs
from .nn import TinyModel, TrainConfig, TrainingDiverged, accuracy, init_model, load_model, save_model, train
from .numerics import CertificateParams
from .saliency import GradientSaliency, NotDifferentiableError, SparsifyParams, TRANSFORMS
from .smoothing import SmoothingConfig, smooth
from .verify import run_all

logger = logging.getLogger("robust_saliency")

CSV_VERSION = 1
REPORT_FORMAT = "robust_saliency.certificate_report"
SUMMARY_COLUMNS = ["input_id", "K", "tau", "gamma", "sigma", "rho", "q", "p", "c",
                   "r_cert", "r_cert_over_K", "median_rank_bound"]
ATTACK_COLUMNS = ["input_id", "rho", "overlap_before", "overlap_after", "normalized_overlap", "attack_failed"]
PERCENTILES = (48, 60, 72)

DEFAULTS = {
    "dataset": "digits",  # digits | blobs | idx
    "train_images": "", "train_labels": "", "test_images": "", "test_labels": "",
    "downsample": "1",
    "test_fraction": "0.2",
    "split_seed": "0",  # fixed so that train and certify see the same split under any --seed
    "blob_classes": "3", "blob_samples": "200", "blob_dims": "2", "blob_separation": "10", "blob_std": "1",
    "model": "",  # checkpoint path; train writes <out>/model.tmdl when empty
    "hidden": "256,128",
    "activation": "softplus",
    "beta": "1",
    "epochs": "30", "learning_rate": "0.05", "momentum": "0.9", "batch_size": "64", "weight_decay": "5e-4",
    "transform": "sparsified",  # comma-separated list allowed
    "smoothed": "true",
    "tau": "0.25", "gamma": "0",
    "sigma": "0.2", "q": "4096", "p": "0.95",
    "rho": "0.1",  # attack accepts a comma-separated list
    "k": "16",
    "n": "",  # optional; checked against the data when given
    "inputs": "10",
    "attack_iters": "20", "attack_samples": "100", "attack_restarts": "5", "attack_q": "64",
    "drop_failed": "false",
    "workers": "1",
    "seed": "0",
    "out": "results",
    "verify_q": "",
    "verify_suites": "halfspace,hoeffding,soundness,numerics",
}


class ConfigError(ValueError):
    """Bad or inconsistent configuration; reported with exit code 2."""


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    seed: int
    out: Path

    @classmethod
    def load(cls, path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None) -> "ExperimentConfig":
        values = dict(DEFAULTS)
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
            parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
            try:
                parser.read_string("[experiment]\n" + text)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from exc
            unknown = set(parser["experiment"]) - set(DEFAULTS)
            if unknown:
                raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
            values.update(parser["experiment"])
        try:
            seed = int(values["seed"]) if seed is None else seed
        except ValueError as exc:
            raise ConfigError(f"seed must be an integer, got {values['seed']!r}") from exc
        return cls(values, seed, Path(out if out is not None else values["out"]))

    def get(self, key: str) -> str:
        return self.values[key].strip()

    def num(self, key: str, kind=float):
        try:
            return kind(self.get(key))
        except ValueError as exc:
            raise ConfigError(f"{key} must be {kind.__name__}, got {self.get(key)!r}") from exc

    @property
    def model_path(self) -> Path:
        return Path(self.get("model")) if self.get("model") else self.out / "model.tmdl"

    @property
    def transforms(self) -> list:
        names = [t.strip() for t in self.get("transform").split(",") if t.strip()]
        for name in names:
            if name not in TRANSFORMS:
                raise ConfigError(f"unknown transform {name!r}; choose from {', '.join(TRANSFORMS)}")
        return names

    def sparsity(self) -> SparsifyParams:
        try:
            return SparsifyParams(self.num("tau"), self.num("gamma"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def provider(self, model: TinyModel, transform: str) -> GradientSaliency:
        sp = self.sparsity() if transform in ("sparsified", "relaxed") else None
        return GradientSaliency(model, transform, sp)

    def smoothing(self, q_key: str = "q") -> SmoothingConfig:
        try:
            return SmoothingConfig(self.num("sigma"), self.num(q_key, int), seed=self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def certificate_params(self, n: int) -> CertificateParams:
        # sigma and q come from the same keys as the smoothing, so they cannot disagree
        s = self.smoothing()
        try:
            return CertificateParams(float(_floats(self.get("rho"))[0]), s.sigma, s.q, self.num("p"), n)
        except (ValueError, IndexError) as exc:
            raise ConfigError(str(exc)) from exc

    def attack_config(self, rho: float, box) -> AttackConfig:
        try:
            return AttackConfig(self.num("k", int), rho, self.num("attack_iters", int),
                                self.num("attack_samples", int), self.num("attack_restarts", int), box=box)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def check_dimensions(self, n: int) -> int:
        k = self.num("k", int)
        if self.get("n") and self.num("n", int) != n:
            raise ConfigError(f"config says n = {self.get('n')} but the data has {n} features")
        if not 1 <= k <= n:
            raise ConfigError(f"k = {k} must lie in [1, n = {n}]")
        return k


# -- data and model ------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    kind = cfg.get("dataset")
    if kind == "digits":
        train_set, test_set = load_digits_split(cfg.num("test_fraction"), seed=cfg.num("split_seed", int))
    elif kind == "blobs":
        full = synth_blobs(cfg.num("blob_classes", int), cfg.num("blob_samples", int), cfg.num("blob_dims", int),
                           cfg.num("blob_separation"), seed=cfg.num("split_seed", int),
                            blob_std=cfg.num("blob_std"))
        order = np.random.default_rng(cfg.num("split_seed", int)).permutation(len(full))
        n_test = int(round(cfg.num("test_fraction") * len(full)))
        return full.subset(order[n_test:]), full.subset(order[:n_test])
    elif kind == "idx":
        paths = [cfg.get(k) for k in ("train_images", "train_labels", "test_images", "test_labels")]
        for p in paths:
            if not p or not Path(p).is_file():
                raise ConfigError(f"dataset file not found: {p or '(empty path)'}")
        try:
            train_set = load_idx(paths[0], paths[1])
            test_set = load_idx(paths[2], paths[3], stats=(train_set.mean, train_set.std))
        except IDXFormatError as exc:
            raise ConfigError(str(exc)) from exc
        classes = int(max(train_set.labels.max(initial=0), test_set.labels.max(initial=0))) + 1
        train_set = Dataset(train_set.inputs, train_set.labels, train_set.image_shape,
                            train_set.mean, train_set.std, classes)
        test_set = Dataset(test_set.inputs, test_set.labels, test_set.image_shape,
                           test_set.mean, test_set.std, classes)
    else:
        raise ConfigError(f"unknown dataset {kind!r}; choose digits, blobs or idx")
    factor = cfg.num("downsample", int)
    if factor != 1:
        try:
            train_set, test_set = downsample(train_set, factor), downsample(test_set, factor)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return train_set, test_set


def _box(dataset: Dataset) -> tuple:
    return dataset.box() if dataset.image_shape is not None else (-np.inf, np.inf)


def _load_checkpoint(cfg: ExperimentConfig) -> TinyModel:
    path = cfg.model_path
    if not path.is_file():
        raise ConfigError(f"model checkpoint not found: {path} (run 'train' first or set 'model')")
    try:
        return load_model(path)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _selected(cfg: ExperimentConfig, test_set: Dataset, model: TinyModel) -> np.ndarray:
    if model.n_inputs != test_set.n_features:
        raise ConfigError(f"model expects {model.n_inputs} inputs but the data has {test_set.n_features}")
    count = min(cfg.num("inputs", int), len(test_set))
    return np.arange(count)


def _prepare_out(cfg: ExperimentConfig) -> None:
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {cfg.out}: {exc.strerror}") from exc


def _write_manifest(cfg: ExperimentConfig, command: str, files: list) -> None:
    manifest = {"command": command, "csv_version": CSV_VERSION, "seed": cfg.seed,
                "config": {k: cfg.values[k] for k in sorted(cfg.values)},
                "files": sorted(str(Path(f).relative_to(cfg.out)) for f in files)}
    (cfg.out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, columns: list, rows: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def write_pgm(path, values, shape) -> None:
    """8-bit binary PGM (P5) of values in [0, 1]."""
    rows, cols = shape
    pixels = np.clip(np.rint(np.asarray(values, dtype=float).reshape(rows, cols) * 255.0), 0, 255)
    with open(path, "wb") as f:
        f.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        f.write(pixels.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4], np.uint8, rows * cols).reshape(rows, cols) / float(maxval)


# -- commands ------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig) -> int:
    """Train a model and write its checkpoint and metrics."""
    train_set, test_set = load_data(cfg)
    _prepare_out(cfg)
    hidden = [int(h) for h in _floats(cfg.get("hidden"))]
    classes = train_set.n_classes or int(train_set.labels.max()) + 1
    sizes = [train_set.n_features, *hidden, classes]
    try:
        model = init_model(sizes, seed=cfg.seed, activation=cfg.get("activation"), beta=cfg.num("beta"))
        tc = TrainConfig(cfg.num("learning_rate"), cfg.num("momentum"), cfg.num("epochs", int),
                         cfg.num("batch_size", int), cfg.num("weight_decay"), seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model, history = train(model, train_set.inputs, train_set.labels, tc)
    path = cfg.model_path
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, path)
    metrics = cfg.out / "metrics.csv"
    rows = [{"epoch": e + 1, "loss": l, "accuracy": a}
            for e, (l, a) in enumerate(zip(history.loss, history.accuracy))]
    _write_csv(metrics, ["epoch", "loss", "accuracy"], rows)
    test_acc = accuracy(model, test_set.inputs, test_set.labels)
    logger.info("trained %s: train accuracy %s, test accuracy %.4f", sizes,
                _fmt(history.final_accuracy), test_acc)
    files = [metrics] + ([path] if path.parent == cfg.out else [])
    _write_manifest(cfg, "train", files)
    return 0


def _certify_one(cfg, provider, dataset: Dataset, idx: int, k: int, params: CertificateParams):
    x = dataset.inputs[idx]
    bound = provider.at(x)
    s = smooth(bound, x, cfg.smoothing(), workers=1)
    report = topk_certificate(s, k, params)
    ranks = certified_ranks(s, params)
    sp = provider.sparsity
    mrb = None
    if provider.transform == "sparsified":
        mrb = median_rank_bound(int(s.median_ranks.min()), sp.tau, params)
    return {
        "format": REPORT_FORMAT,
        "version": 1,
        "input_id": int(idx),
        "label": int(dataset.labels[idx]),
        "predicted_class": int(bound.class_index),
        "transform": provider.tag,
        "tau": sp.tau if sp is not None else None,
        "gamma": sp.gamma if sp is not None and provider.transform == "relaxed" else None,
        "smoothing": {"sigma": s.config.sigma, "q": s.config.q, "seed": s.config.seed},
        "certificate": report.to_dict(),
        "r_cert_over_k": report.r_cert / k,
        "certified_ranks": ranks,
        "median_ranks": [int(r) for r in s.median_ranks],
        "median_rank_bound": mrb,
        "smoothed_map": [float(v) for v in s.mean],
    }


def percentile_rows(tag: str, k: int, ratios) -> dict:
    ratios = np.asarray(ratios, dtype=float)
    row = {"transform": tag, "K": k, "inputs": ratios.size}
    for pct in PERCENTILES:
        row[f"p{pct}"] = float(np.percentile(ratios, pct)) if ratios.size else None
    return row


def cmd_certify(cfg: ExperimentConfig) -> int:
    """Smooth saliency maps and write certificates, reports and images."""
    _, test_set = load_data(cfg)
    model = _load_checkpoint(cfg)
    ids = _selected(cfg, test_set, model)
    n = test_set.n_features
    k = cfg.check_dimensions(n)
    params = cfg.certificate_params(n)
    transforms = cfg.transforms
    providers = [cfg.provider(model, t) for t in transforms]
    _prepare_out(cfg)
    (cfg.out / "reports").mkdir(exist_ok=True)
    (cfg.out / "images").mkdir(exist_ok=True)
    shape = test_set.image_shape or (1, n)
    files, pct_rows = [], []
    workers = max(1, cfg.num("workers", int))
    for transform, provider in zip(transforms, providers):
        with ThreadPoolExecutor(workers) as pool:
            reports = list(pool.map(lambda i: _certify_one(cfg, provider, test_set, i, k, params), ids))
        rows = []
        for rep in reports:  # single writer, input order
            stem = f"{transform}_input{rep['input_id']:05d}"
            path = cfg.out / "reports" / f"{stem}.json"
            path.write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
            img = cfg.out / "images" / f"{stem}.pgm"
            write_pgm(img, rep["smoothed_map"], shape)
            files += [path, img]
            rows.append({"input_id": rep["input_id"], "K": k, "tau": rep["tau"], "gamma": rep["gamma"],
                         "sigma": params.sigma, "rho": params.rho, "q": params.q, "p": params.p,
                         "c": params.c, "r_cert": rep["certificate"]["r_cert"],
                         "r_cert_over_K": rep["r_cert_over_k"], "median_rank_bound": rep["median_rank_bound"]})
        summary = cfg.out / f"summary_{transform}.csv"
        _write_csv(summary, SUMMARY_COLUMNS, rows)
        files.append(summary)
        pct_rows.append(percentile_rows(providers[transforms.index(transform)].tag, k,
                                        [r["r_cert_over_K"] for r in rows]))
        logger.info("%s: 60th-percentile r_cert/K = %s over %d inputs", transform,
                    _fmt(pct_rows[-1]["p60"]), len(rows))
    for i in ids:
        raw = np.clip(test_set.inputs[i] * test_set.std + test_set.mean, 0.0, 1.0)
        img = cfg.out / "images" / f"input{int(i):05d}.pgm"
        write_pgm(img, raw, shape)
        files.append(img)
    pct = cfg.out / "percentiles.csv"
    _write_csv(pct, ["transform", "K", "inputs"] + [f"p{p}" for p in PERCENTILES], pct_rows)
    files.append(pct)
    _write_manifest(cfg, "certify", files)
    return 0


def _attack_seed(seed: int, input_id: int, rho_index: int) -> int:
    return int(np.random.SeedSequence([seed, input_id, rho_index]).generate_state(1)[0])


def attack_one(model, provider, x, k: int, attack_cfg: AttackConfig, seed: int,
               eval_config: Optional[SmoothingConfig] = None) -> tuple:
    """Attack one input and measure the top-K overlap of the evaluated map before and after.

    With ``eval_config`` the evaluated map is the empirical smoothing of the
    provider's base map under that (fixed) configuration; the attacker works
    with its own noise, derived from ``seed``.
    """
    base = provider.base if isinstance(provider, SmoothedProvider) else provider
    base = base.at(x)

    def evaluated(z):
        if eval_config is None:
            return base(z[None, :])[0]
        return smooth(base, z, eval_config, track_ranks=False).mean

    result = l2_topk_attack(model, provider, x, attack_cfg, seed=seed)
    if result.failed:
        return result, None
    return result, topk_overlap(evaluated(x), evaluated(result.adversarial_input), k)


def cmd_attack(cfg: ExperimentConfig) -> int:
    """Attack top-K saliency overlap and write per-input results."""
    _, test_set = load_data(cfg)
    model = _load_checkpoint(cfg)
    ids = _selected(cfg, test_set, model)
    n = test_set.n_features
    k = cfg.check_dimensions(n)
    rhos = _floats(cfg.get("rho"))
    smoothed = _bool(cfg.get("smoothed"))
    configs = [cfg.attack_config(rho, _box(test_set)) for rho in rhos]
    eval_config = cfg.smoothing() if smoothed else None
    attack_smoothing = cfg.smoothing("attack_q") if smoothed else None
    providers = []
    for transform in cfg.transforms:
        base = cfg.provider(model, transform)
        if not base.differentiable:
            raise ConfigError(
                f"transform {transform!r} has no gradient, so it cannot be attacked; "
                "set 'transform = relaxed' (with gamma > 0) to attack a sparsified-style map")
        providers.append((transform, SmoothedProvider(base, attack_smoothing) if smoothed else base))
    _prepare_out(cfg)
    drop_failed = _bool(cfg.get("drop_failed"))
    workers = max(1, cfg.num("workers", int))
    files, summary_rows = [], []
    for transform, provider in providers:
        stem = f"attack_{transform}{'_smoothed' if smoothed else ''}"
        jobs = [(int(i), r, ac) for r, ac in enumerate(configs) for i in ids]

        def run(job):
            i, r, ac = job
            return attack_one(model, provider, test_set.inputs[i], k, ac,
                              _attack_seed(cfg.seed, i, r), eval_config)

        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(run, jobs))
        rows, adversarial = [], np.full((len(jobs), n), np.nan)
        for j, ((i, r, ac), (res, overlap)) in enumerate(zip(jobs, outcomes)):
            failed = res.failed
            if not failed:
                adversarial[j] = res.adversarial_input
            rows.append({"input_id": i, "rho": ac.rho, "overlap_before": k,
                         "overlap_after": None if failed else overlap,
                         "normalized_overlap": None if failed else overlap / k,
                         "attack_failed": int(failed)})
        path = cfg.out / f"{stem}.csv"
        _write_csv(path, ATTACK_COLUMNS, rows)
        npz = cfg.out / f"{stem}_inputs.npz"
        np.savez(npz, input_id=np.array([j[0] for j in jobs]), rho=np.array([j[2].rho for j in jobs]),
                 adversarial=adversarial)
        files += [path, npz]
        for rho in rhos:
            sel = [row for row in rows if row["rho"] == rho]
            failed = sum(row["attack_failed"] for row in sel)
            vals = [row["normalized_overlap"] if not row["attack_failed"] else 0.0
                    for row in sel if not (drop_failed and row["attack_failed"])]
            mean = float(np.mean(vals)) if vals else None
            summary_rows.append({"provider": stem, "rho": rho, "inputs": len(sel), "failed": failed,
                                 "mean_normalized_overlap": mean})
            logger.info("%s rho=%g: mean normalized overlap %s (%d failed)", stem, rho, _fmt(mean), failed)
    summary = cfg.out / "attack_summary.csv"
    _write_csv(summary, ["provider", "rho", "inputs", "failed", "mean_normalized_overlap"], summary_rows)
    files.append(summary)
    _write_manifest(cfg, "attack", files)
    return 0


def cmd_verify(cfg: ExperimentConfig) -> int:
    """Run the self-check suites."""
    q = cfg.num("verify_q", int) if cfg.get("verify_q") else None
    names = [s.strip() for s in cfg.get("verify_suites").split(",") if s.strip()]
    results = run_all(seed=cfg.seed, q=q, names=names)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    print(f"verify: {len(results) - len(failed)}/{len(results)} suites ok")
    return 1 if failed else 0


COMMANDS = {"train": cmd_train, "certify": cmd_certify, "attack": cmd_attack, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-saliency", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__ or name)
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", metavar="DIR", help="output directory (default: results)")
        p.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, seed=args.seed, out=args.out)
        return COMMANDS[args.command](cfg)
    except (ConfigError, NotDifferentiableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
