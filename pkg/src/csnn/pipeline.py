"""Batch pipeline: prep -> learn -> calibrate -> cross-validated eval.

Every stage reads a flat ``key = value`` config (see :data:`CONFIG_KEYS`)
and writes deterministic artifacts under ``work_dir``: no timestamps, floats
written with ``repr``.
"""
from __future__ import annotations

import configparser
import csv
import logging
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels as kn
from .colanet import ColaNet, ColanetParams
from .netbuild import CalibrationError, ConvLayerPlan, PoolLayerPlan, build_network, calibrate
from .preprocess import (PATCH_SIDE, ImageError, load_image, load_patches, make_patch,
                         read_box_manifest, round_half_away, save_gray, write_patch_manifest)

log = logging.getLogger(__name__)

REFERENCE_NEURON_COUNT = 9412
_LP = kn.LearnerParams(corpus_size=1)  # only for reading defaults


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _auto_float(text: str):
    t = text.strip().lower()
    return None if t == "auto" else float(t)


# key -> (parser, help); defaults live on PipelineConfig
CONFIG_KEYS: dict[str, tuple] = {
    "raw_dir": (str, "directory that image paths in the box manifest are relative to"),
    "boxes": (str, "box manifest CSV with columns path,x,y,w,h,label (relative to raw_dir)"),
    "work_dir": (str, "output directory for patches, bank, logs and reports"),
    "seed": (int, "master seed; every random stream derives a named sub-seed from it"),
    "folds": (int, "number of cross-validation folds (>= 2)"),
    "kernels": (int, "number of convolution kernels N_C"),
    "kernel_size": (int, "kernel side K"),
    "stride": (int, "convolution stride s"),
    "brightness": (_auto_float, "pixel brightness threshold B; 'auto' = mean patch brightness"),
    "w_min": (float, "minimum kernel weight (< 0)"),
    "w_max": (float, "maximum kernel weight (> 0)"),
    "kernel_rate": (_auto_float, "kernel learning rate l; 'auto' = 100/255/N_E"),
    "recruit_at_zero": (_bool, "let zero-stimulation positions win when a fresh bank has no positive ones"),
    "pool": (str, "pooling mode: average or max_wta"),
    "target_hz": (float, "target mean pooling-layer firing rate in Hz"),
    "calib_tol": (float, "relative tolerance on the calibrated rate"),
    "calib_sample": (int, "number of training patches used for calibration"),
    "microcolumns": (int, "microcolumns per class column"),
    "learning_rate": (float, "classifier learning rate"),
    "weight_min": (float, "classifier minimum weight"),
    "weight_max": (float, "classifier maximum weight"),
    "bias_increment": (float, "BIASGATE current increment per silent presentation"),
    "reward_mode": (str, "dopamine potentiation: once per reward, or per_fire"),
}


@dataclass
class PipelineConfig:
    raw_dir: str = "."
    boxes: str = "boxes.csv"
    work_dir: str = "work"
    seed: int = 0
    folds: int = 5
    kernels: int = _LP.n_kernels
    kernel_size: int = _LP.K
    stride: int = _LP.stride
    brightness: float | None = None
    w_min: float = _LP.w_min
    w_max: float = _LP.w_max
    kernel_rate: float | None = None
    recruit_at_zero: bool = True
    pool: str = "average"
    target_hz: float = 50.0
    calib_tol: float = 0.1
    calib_sample: int = 64
    microcolumns: int = 22
    learning_rate: float = 0.0035
    weight_min: float = -0.0628
    weight_max: float = 0.152
    bias_increment: float = 0.3
    reward_mode: str = "once"

    def __post_init__(self):
        problems = []
        if self.folds < 2:
            problems.append("folds >= 2")
        if self.pool not in ("average", "max_wta"):
            problems.append("pool in {average, max_wta}")
        if self.calib_sample < 1:
            problems.append("calib_sample >= 1")
        if problems:
            raise ConfigError("invalid config, violated: " + "; ".join(problems))

    # -- derived paths -------------------------------------------------------

    @property
    def work(self) -> Path:
        return Path(self.work_dir)

    @property
    def patch_manifest(self) -> Path:
        return self.work / "patches.csv"

    @property
    def bank_path(self) -> Path:
        return self.work / "kernels.txt"

    def learner_params(self, corpus_size: int, brightness: float) -> kn.LearnerParams:
        return kn.LearnerParams(K=self.kernel_size, n_kernels=self.kernels, stride=self.stride,
                                brightness=brightness, w_min=self.w_min, w_max=self.w_max,
                                learning_rate=self.kernel_rate, seed=sub_seed(self.seed, "kernels"),
                                corpus_size=corpus_size, recruit_at_zero=self.recruit_at_zero)

    def colanet_params(self, num_classes: int, n_inputs: int, fold: int) -> ColanetParams:
        return ColanetParams(num_classes=num_classes, microcolumns=self.microcolumns,
                             learning_rate=self.learning_rate, weight_min=self.weight_min,
                             weight_max=self.weight_max, n_inputs=n_inputs,
                             bias_increment=self.bias_increment, reward_mode=self.reward_mode,
                             seed=sub_seed(self.seed, f"weight_init/{fold}"))

    def dump(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))


def config_help() -> str:
    lines = []
    defaults = PipelineConfig()
    for key, (_, doc) in CONFIG_KEYS.items():
        default = getattr(defaults, key)
        shown = "auto" if default is None else default
        lines.append(f"  {key} (default {shown}): {doc}")
    return "\n".join(lines)


def parse_config(text: str, **overrides) -> PipelineConfig:
    """Parse flat ``key = value`` text; ``#`` starts a comment; unknown keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for key, raw in cp["config"].items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key][0](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**values)


def load_config(path=None, **overrides) -> PipelineConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    return parse_config(text, **overrides)


def sub_seed(seed: int, name: str) -> int:
    """Deterministic named sub-seed so each random stream is independently reproducible."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(sub_seed(seed, name))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# -- prep --------------------------------------------------------------------

@dataclass
class PrepStats:
    written: int = 0
    skipped_rows: int = 0
    skipped_images: int = 0
    mean_brightness: float = 0.0
    per_label: dict[str, int] = field(default_factory=dict)

    def text(self) -> str:
        lines = [f"patches {self.written}", f"skipped_rows {self.skipped_rows}",
                 f"skipped_images {self.skipped_images}",
                 f"mean_brightness {self.mean_brightness!r}"]
        lines += [f"label {k} {v}" for k, v in sorted(self.per_label.items())]
        return "\n".join(lines) + "\n"


def cmd_prep(cfg: PipelineConfig) -> PrepStats:
    """Turn every box of the raw manifest into a 31x31 heat-map patch."""
    raw = Path(cfg.raw_dir)
    boxes = raw / cfg.boxes
    if not boxes.is_file():
        raise FileNotFoundError(f"box manifest not found: {boxes}")
    rows, skipped = read_box_manifest(boxes)
    out_dir = cfg.work / "patches"
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = PrepStats(skipped_rows=skipped)
    entries = []
    total = 0.0
    cache: dict[str, np.ndarray | None] = {}  # last image only; manifests list boxes image by image
    for rel, box in rows:
        if rel not in cache:
            try:
                cache = {rel: load_image(raw / rel)}
            except (OSError, ValueError) as exc:
                log.warning("unreadable image %s skipped: %s", rel, exc)
                cache = {rel: None}
        img = cache[rel]
        if img is None:
            stats.skipped_images += 1
            continue
        try:
            patch = make_patch(img, box)
        except (ImageError, ValueError) as exc:
            log.warning("box in %s skipped: %s", rel, exc)
            stats.skipped_images += 1
            continue
        name = f"patches/p{stats.written:07d}.png"
        save_gray(cfg.work / name, patch)
        entries.append((name, box.label))
        total += float(patch.mean())
        stats.written += 1
        stats.per_label[box.label] = stats.per_label.get(box.label, 0) + 1
    write_patch_manifest(cfg.patch_manifest, entries)
    stats.mean_brightness = total / stats.written if stats.written else 0.0
    (cfg.work / "prep_summary.txt").write_text(stats.text(), encoding="utf-8")
    return stats


# -- learn -------------------------------------------------------------------

def _load_corpus(cfg: PipelineConfig):
    if not cfg.patch_manifest.is_file():
        raise FileNotFoundError(f"patch manifest not found: {cfg.patch_manifest} (run prep first)")
    patches, labels = load_patches(cfg.patch_manifest)
    return patches, labels


def learn_from_patches(patches: np.ndarray, cfg: PipelineConfig):
    """Shuffle with the ``shuffle`` sub-seed and learn a bank. Returns (bank, reports, params)."""
    if len(patches) == 0:
        raise ValueError("empty patch corpus")
    order = _rng(cfg.seed, "shuffle").permutation(len(patches))
    corpus = patches[order]
    b = cfg.brightness if cfg.brightness is not None else float(patches.mean())
    params = cfg.learner_params(len(corpus), b)
    bank, reports = kn.learn_bank(corpus, params)
    return bank, reports, params


def cmd_learn(cfg: PipelineConfig) -> kn.KernelBank:
    patches, _ = _load_corpus(cfg)
    if patches.shape[1:] != (PATCH_SIDE, PATCH_SIDE):
        raise ValueError(f"patches must be {PATCH_SIDE}x{PATCH_SIDE}, got {patches.shape[1:]}")
    bank, reports, params = learn_from_patches(patches, cfg)
    cfg.work.mkdir(parents=True, exist_ok=True)
    kn.save_bank(cfg.bank_path, bank)
    kn.write_learning_log(cfg.work / "learning_log.csv", reports)
    cos = kn.cosine_matrix(bank)
    iu = np.triu_indices(bank.n_kernels, 1)
    lines = [f"images {len(patches)}", f"kernels {bank.n_kernels}", f"K {bank.K}",
             f"brightness {params.brightness!r}", f"learning_rate {params.rate!r}",
             f"updates {sum(r.updates for r in reports)}",
             f"pairs_cos_below_0.9 {int((cos[iu] < 0.9).sum())} of {len(iu[0])}"]
    (cfg.work / "learn_summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return bank


# -- viz ---------------------------------------------------------------------

def kernel_colors(w: np.ndarray, scale: float) -> np.ndarray:
    """Diverging palette: negative -> blue, zero -> white, positive -> red, at ``|w| / scale``."""
    w = np.asarray(w, dtype=np.float64)
    v = np.clip(w / scale, -1.0, 1.0) if scale > 0 else np.zeros_like(w)
    fade = round_half_away(255.0 * (1.0 - np.abs(v))).astype(np.uint8)
    rgb = np.full(w.shape + (3,), 255, dtype=np.uint8)
    pos, neg = v > 0, v < 0
    rgb[pos, 1] = fade[pos]
    rgb[pos, 2] = fade[pos]
    rgb[neg, 0] = fade[neg]
    rgb[neg, 1] = fade[neg]
    return rgb


def render_bank(bank: kn.KernelBank, cell: int = 8, gap: int = 4, cols: int | None = None) -> np.ndarray:
    """Grid image of all kernels, one ``cell``-pixel square per weight, normalized to max |w|."""
    n, K = bank.n_kernels, bank.K
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    side = K * cell
    h = rows * side + (rows + 1) * gap
    w = cols * side + (cols + 1) * gap
    img = np.full((h, w, 3), 128, dtype=np.uint8)
    scale = float(np.abs(bank.w).max()) if n else 0.0
    for a in range(n):
        r, c = divmod(a, cols)
        tile = np.kron(kernel_colors(bank.w[a], scale), np.ones((cell, cell, 1), dtype=np.uint8))
        y0, x0 = gap + r * (side + gap), gap + c * (side + gap)
        img[y0:y0 + side, x0:x0 + side] = tile
    return img


def cmd_viz(bank_path, out_path, cell: int = 8) -> np.ndarray:
    bank = kn.load_bank(bank_path)
    img = render_bank(bank, cell=cell)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(out_path, format="PNG")
    return img


# -- calibrate / eval ----------------------------------------------------------

def _net_for(bank: kn.KernelBank, cfg: PipelineConfig):
    return build_network(bank, ConvLayerPlan.for_bank(bank), PoolLayerPlan(mode=cfg.pool))


def cmd_calibrate(cfg: PipelineConfig):
    bank = kn.load_bank(cfg.bank_path, stride=cfg.stride)
    patches, _ = _load_corpus(cfg)
    order = _rng(cfg.seed, "calibration").permutation(len(patches))
    sample = patches[order[:cfg.calib_sample]]
    net = _net_for(bank, cfg)
    try:
        scale, rep = calibrate(net, sample, cfg.target_hz, cfg.calib_tol)
    except CalibrationError as exc:
        (cfg.work / "calibration.txt").write_text(exc.report.text(), encoding="utf-8")
        raise
    (cfg.work / "calibration.txt").write_text(rep.text(), encoding="utf-8")
    return scale, rep


def stratified_folds(labels, k: int, seed: int) -> list[np.ndarray]:
    """Test-index arrays of ``k`` disjoint folds covering every sample.

    Samples are shuffled, grouped by class, and dealt round-robin with one
    running counter, so fold sizes differ by at most one and each class is
    spread evenly.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("need at least 2 folds")
    order = np.random.default_rng(seed).permutation(len(labels))
    order = order[np.argsort(labels[order], kind="stable")]
    assign = np.arange(len(order)) % k
    return [np.sort(order[assign == f]) for f in range(k)]


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_test: int
    status: str
    accuracy: float = float("nan")
    train_accuracy: float = float("nan")
    scale: float = float("nan")
    pool_rate_hz: float = float("nan")
    confusion: np.ndarray | None = None


def fit_and_score(bank: kn.KernelBank, train_x, train_y, test_x, test_y, num_classes: int,
                  cfg: PipelineConfig, fold: int = 0, log_path=None) -> FoldResult:
    """Calibrate on the training split, train the head for one epoch, score the test split."""
    res = FoldResult(fold, len(train_x), len(test_x), "ok")
    net = _net_for(bank, cfg)
    order = _rng(cfg.seed, f"train_order/{fold}").permutation(len(train_x))
    train_x, train_y = train_x[order], np.asarray(train_y)[order]
    try:
        scale, rep = calibrate(net, train_x[:cfg.calib_sample], cfg.target_hz, cfg.calib_tol)
    except CalibrationError as exc:
        log.error("fold %d: calibration failed: %s", fold, exc)
        res.status = "calibration_failed"
        return res
    net = net.with_scale(scale)
    res.scale, res.pool_rate_hz = scale, rep.achieved_hz
    head = ColaNet(cfg.colanet_params(num_classes, net.pool.size, fold))
    stats = head.train_epoch(net.pool_raster(train_x), train_y)
    if log_path is not None:
        stats.to_csv(log_path)
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for r, y in zip(net.pool_raster(test_x), test_y):
        conf[int(y), head.classify(r).label] += 1
    res.confusion = conf
    res.train_accuracy = stats.accuracy
    res.accuracy = float(np.trace(conf) / conf.sum()) if conf.sum() else float("nan")
    return res


def neuron_counts(bank: kn.KernelBank, cfg: PipelineConfig, num_classes: int) -> dict[str, int]:
    net = _net_for(bank, cfg)
    head = ColaNet(cfg.colanet_params(num_classes, net.pool.size, 0))
    hn = head.network
    n_ext = int(net.network.external.sum())
    return {
        "input": int(len(net.inputs)),
        "conv": int(net.conv.size),
        "pool": int(net.pool.size),
        "pool_internal": int(net.network.n - n_ext - net.conv.size - net.pool.size),
        "classifier": int(hn.n - len(hn.inputs)),
        "synapses_convpool": int(net.network.n_synapses),
        "synapses_classifier": int(hn.n_synapses),
    }


@dataclass
class EvalReport:
    folds: list[FoldResult]
    classes: list[str]
    counts: dict[str, int]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([f.accuracy for f in self.folds if f.status == "ok"])

    @property
    def ok(self) -> bool:
        return all(f.status == "ok" for f in self.folds)

    @property
    def mean(self) -> float:
        a = self.accuracies
        return float(a.mean()) if len(a) else float("nan")

    @property
    def std(self) -> float:
        a = self.accuracies
        return float(a.std(ddof=1)) if len(a) > 1 else float("nan")

    @property
    def confusion(self) -> np.ndarray:
        C = len(self.classes)
        total = np.zeros((C, C), dtype=np.int64)
        for f in self.folds:
            if f.confusion is not None:
                total += f.confusion
        return total

    @property
    def total_neurons(self) -> int:
        c = self.counts
        return c["conv"] + c["pool"] + c["pool_internal"] + c["classifier"]

    def mean_rate(self) -> float:
        r = [f.pool_rate_hz for f in self.folds if f.status == "ok"]
        return float(np.mean(r)) if r else float("nan")

    def summary(self) -> str:
        lines = [f"folds {len(self.folds)} (stratified by class)",
                 f"classes {' '.join(self.classes)}"]
        for f in self.folds:
            lines.append(f"fold {f.fold} status {f.status} n_train {f.n_train} n_test {f.n_test} "
                         f"accuracy {_fmt(f.accuracy)}")
        lines += [f"mean_accuracy {_fmt(self.mean)}", f"std_accuracy {_fmt(self.std)} (ddof=1)",
                  f"mean_pool_rate_hz {_fmt(self.mean_rate())}", "confusion (rows true, cols predicted)"]
        lines += ["  " + " ".join(str(v) for v in row) for row in self.confusion]
        c = self.counts
        lines += [f"neurons conv {c['conv']} pool {c['pool']} pool_internal {c['pool_internal']} "
                  f"classifier {c['classifier']} (plus {c['input']} input nodes)",
                  f"neurons_total {self.total_neurons} (reference network {REFERENCE_NEURON_COUNT})",
                  f"synapses {c['synapses_convpool'] + c['synapses_classifier']}"]
        return "\n".join(lines) + "\n"

    def write(self, work: Path) -> None:
        rows = [(f.fold, f.n_train, f.n_test, f.status, _fmt(f.accuracy), _fmt(f.train_accuracy),
                 _fmt(f.scale), _fmt(f.pool_rate_hz)) for f in self.folds]
        _write_csv(work / "eval_folds.csv",
                   ["fold", "n_train", "n_test", "status", "accuracy", "train_accuracy", "scale",
                    "pool_rate_hz"], rows)
        _write_csv(work / "eval_confusion.csv", ["true"] + self.classes,
                   [[name] + list(map(int, row)) for name, row in zip(self.classes, self.confusion)])
        (work / "eval_summary.txt").write_text(self.summary(), encoding="utf-8")


def evaluate(bank: kn.KernelBank, patches: np.ndarray, labels, cfg: PipelineConfig,
             log_dir: Path | None = None) -> EvalReport:
    classes = sorted(set(labels))
    y = np.array([classes.index(lab) for lab in labels])
    folds = stratified_folds(y, cfg.folds, sub_seed(cfg.seed, "folds"))
    results = []
    for f, test_idx in enumerate(folds):
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[test_idx] = False
        log_path = log_dir / f"train_log_fold{f}.csv" if log_dir is not None else None
        results.append(fit_and_score(bank, patches[train_mask], y[train_mask], patches[test_idx],
                                     y[test_idx], len(classes), cfg, fold=f, log_path=log_path))
    return EvalReport(results, classes, neuron_counts(bank, cfg, len(classes)))


def cmd_eval(cfg: PipelineConfig) -> EvalReport:
    bank = kn.load_bank(cfg.bank_path, stride=cfg.stride)
    patches, labels = _load_corpus(cfg)
    if len(patches) < cfg.folds:
        raise ValueError(f"{len(patches)} patches cannot fill {cfg.folds} folds")
    rep = evaluate(bank, patches, labels, cfg, log_dir=cfg.work)
    rep.write(cfg.work)
    return rep
