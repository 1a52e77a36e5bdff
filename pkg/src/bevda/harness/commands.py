"""Pipeline stages: data generation, CycleGAN training, translation, detector
training, evaluation and the five-model comparison table."""
from __future__ import annotations

import dataclasses
import shutil
import time
from pathlib import Path
from typing import Optional

import numpy as np

from ..bev_raster import BevImage, save_bev, to_pgm
from ..cyclegan import CycleGAN, LossReport, from_signed, to_signed, translate_array
from ..detector import Anchor, Detector, DetectorNet, train_detector
from ..engine import Tensor, checkpoint
from ..eval_metrics import evaluate
from . import datasets as ds
from .config import ExperimentConfig, detector_arch_hash, to_ini

SNAPSHOT_EVERY = 500


def _f(x) -> str:
    """Shortest round-tripping text for a float (numpy scalars included)."""
    return repr(float(x))


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


class CheckpointMismatch(ValueError):
    pass


@dataclasses.dataclass
class Layout:
    """Where each stage reads and writes under the output directory."""

    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    def split(self, name: str) -> Path:
        return self.data / name

    @property
    def cyclegan(self) -> Path:
        return self.root / "cyclegan"

    @property
    def cyclegan_ckpt(self) -> Path:
        return self.cyclegan / "cyclegan.bda"

    def detector(self, model: str) -> Path:
        return self.root / "detectors" / model

    @property
    def eval(self) -> Path:
        return self.root / "eval"


def _prepare(out: Path, cfg: ExperimentConfig) -> Layout:
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(to_ini(cfg), encoding="utf-8")
    except OSError as exc:
        raise ds.DatasetError(f"cannot write to {out}: {exc}") from exc
    return Layout(out)


def _fresh(directory: Path) -> Path:
    if directory.exists():
        shutil.rmtree(directory)
    directory.mkdir(parents=True)
    return directory


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(cfg: ExperimentConfig, out, real_kitti=None) -> dict[str, list]:
    """Write S (ideal scans), R and test_R (artefact-injected, or real KITTI) splits."""
    lay = _prepare(Path(out), cfg)
    s_dir, r_dir, t_dir = (_fresh(lay.split(n)) for n in ("S", "R", "test_R"))
    entries = {"S": ds.generate_split(cfg, s_dir, "S", cfg.n_train_s, real=False)}
    if real_kitti is not None:
        entries["R"], entries["test_R"] = ds.import_kitti(cfg, real_kitti, r_dir, t_dir)
    else:
        entries["R"] = ds.generate_split(cfg, r_dir, "R", cfg.n_train_r, real=True)
        entries["test_R"] = ds.generate_split(cfg, t_dir, "test_R", cfg.n_test_r, real=True)
    return entries


# ---------------------------------------------------------------------------
# train-cyclegan

def _pool(samples: list, split: str) -> np.ndarray:
    if not samples:
        raise ds.DatasetError(f"CycleGAN training needs a nonempty {split} pool")
    return to_signed(ds.stack_images(samples))


def _write_snapshot(directory: Path, step: int, gan: CycleGAN, s_image: np.ndarray) -> None:
    """Side-by-side (s, G_s2r(s), G_r2s(G_s2r(s))) per channel, as 8-bit PGM."""
    fake = gan.g_s2r(Tensor(to_signed(s_image[None])))
    rec = gan.g_r2s(fake)
    row = np.concatenate([s_image, from_signed(fake.data[0]), from_signed(rec.data[0])], axis=2)
    for c in range(row.shape[0]):
        (directory / f"step{step:05d}_c{c}.pgm").write_bytes(to_pgm(row[c]))


def cmd_train_cyclegan(cfg: ExperimentConfig, out, resume: Optional[str] = None,
                       log=None) -> list[LossReport]:
    """Train on the S and R pools; writes checkpoint, loss CSV and PGM snapshots.

    Each step draws one S and one R batch independently with ``rng([seed, step])``,
    so a resumed run replays exactly the batches an unbroken run would see.
    """
    lay = _prepare(Path(out), cfg)
    gcfg = cfg.cyclegan
    s_pool = _pool(ds.load_dataset(lay.split("S"), cfg.grid), "S")
    r_pool = _pool(ds.load_dataset(lay.split("R"), cfg.grid), "R")
    if s_pool.shape[1] != gcfg.channels:
        raise CheckpointMismatch(f"dataset has {s_pool.shape[1]} channels, config says {gcfg.channels}")
    lay.cyclegan.mkdir(parents=True, exist_ok=True)
    snaps = lay.cyclegan / "snapshots"
    snaps.mkdir(exist_ok=True)
    csv_path = lay.cyclegan / "losses.csv"

    gan = CycleGAN(gcfg)
    rows = [LossReport.CSV_HEADER]
    if resume is not None:
        gan.load_state_arrays(checkpoint.load(resume))
        _check_generator_channels(gan, gcfg.channels)
        if csv_path.is_file():
            kept = csv_path.read_text(encoding="utf-8").splitlines()[1:]
            rows += [r for r in kept if int(r.split(",", 1)[0]) <= gan.step]
    reports = []
    s_image = (s_pool[0] + 1.0) / 2.0
    while gan.step < gcfg.steps:
        rng = np.random.default_rng([gcfg.seed, gan.step + 1, 0xBA7])
        si = rng.integers(len(s_pool), size=gcfg.batch_size)
        ri = rng.integers(len(r_pool), size=gcfg.batch_size)
        rep = gan.train_step(s_pool[si], r_pool[ri])
        reports.append(rep)
        rows.append(rep.csv_row())
        if log is not None:
            log(rep)
        if gan.step % SNAPSHOT_EVERY == 0:
            _write_snapshot(snaps, gan.step, gan, s_image)
            checkpoint.save(lay.cyclegan / f"cyclegan_step{gan.step:05d}.bda", gan.state_arrays())
            csv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    csv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    checkpoint.save(lay.cyclegan_ckpt, gan.state_arrays())
    return reports


def _check_generator_channels(gan: CycleGAN, channels: int) -> None:
    w = gan.g_s2r.params["enc0.weight"].data
    if w.shape[1] != channels:
        raise CheckpointMismatch(f"checkpoint generator takes {w.shape[1]} channels, expected {channels}")


def load_cyclegan(cfg: ExperimentConfig, path) -> CycleGAN:
    arrays = checkpoint.load(path)
    key = "g_s2r.enc0.weight"
    if key not in arrays:
        raise CheckpointMismatch(f"{path} is not a CycleGAN checkpoint")
    expected = CycleGAN(cfg.cyclegan).state_arrays()[key].shape
    if arrays[key].shape != expected:
        raise CheckpointMismatch(f"checkpoint generator shape {arrays[key].shape} does not match "
                                 f"config {expected}")
    gan = CycleGAN(cfg.cyclegan)
    gan.load_state_arrays(arrays)
    return gan


# ---------------------------------------------------------------------------
# translate

def cmd_translate(cfg: ExperimentConfig, out, ckpt=None, source: str = "S", target: str = "DA") -> list:
    """G_s2r over every image of ``source``; labels are copied byte for byte."""
    lay = _prepare(Path(out), cfg)
    gan = load_cyclegan(cfg, ckpt or lay.cyclegan_ckpt)
    src_dir, dst_dir = lay.split(source), _fresh(lay.split(target))
    entries = []
    for i, e in enumerate(ds.read_manifest(src_dir)):
        sample = ds.load_bev(src_dir / f"{e.id}.bev", cfg.grid)
        if sample.channels.shape[0] != gan.g_s2r.channels:
            raise CheckpointMismatch(f"{e.id} has {sample.channels.shape[0]} channels, generator "
                                     f"expects {gan.g_s2r.channels}")
        image = BevImage(translate_array(gan.g_s2r, sample.channels), sample.grid)
        sid = f"{target}_{i:05d}"
        save_bev(dst_dir / f"{sid}.bev", image)
        shutil.copyfile(src_dir / f"{e.id}.txt", dst_dir / f"{sid}.txt")
        entries.append(ds.Entry(sid, e.seed, e.id))
    ds.write_manifest(dst_dir, target, entries, cfg)
    return entries


# ---------------------------------------------------------------------------
# train-detector / eval

# model tag -> (role shown in the table, training splits)
MODELS = {
    "DET_S": ("SYN only", ("S",)),
    "DET_R_DA": ("DA only", ("DA",)),
    "DET_K": ("KITTI only", ("R",)),
    "DET_KS": ("KITTI+SYN", ("R", "S")),
    "DET_KR": ("KITTI+DA", ("R", "DA")),
}
# Table 1 reference values (AP %), shown for context only
PAPER_AP = {"DET_S": 29.93, "DET_R_DA": 34.78, "DET_K": 57.26, "DET_KS": 59.16, "DET_KR": 64.29}


def cmd_train_detector(cfg: ExperimentConfig, out, model: str, splits=None, log=None) -> Detector:
    lay = _prepare(Path(out), cfg)
    splits = tuple(splits) if splits else MODELS[model][1]
    train = []
    for split in splits:
        train += ds.as_training_pairs(ds.load_dataset(lay.split(split), cfg.grid))
    if not train:
        raise ds.DatasetError(f"{model}: training splits {splits} are empty")
    det = train_detector(train, cfg.detector, log=log)
    directory = lay.detector(model)
    directory.mkdir(parents=True, exist_ok=True)
    checkpoint.save(directory / "detector.bda", det.state_arrays())
    (directory / "losses.csv").write_text(
        "step,loss\n" + "".join(f"{i},{_f(v)}\n" for i, v in enumerate(det.losses, 1)), encoding="utf-8")
    (directory / "info.txt").write_text(
        f"model = {model}\nsplits = {','.join(splits)}\nn_train = {len(train)}\n"
        f"arch_hash = {detector_arch_hash(cfg.detector, train[0][0].shape[0])}\n", encoding="utf-8")
    return det


def load_detector(cfg: ExperimentConfig, path) -> Detector:
    arrays = checkpoint.load(path)
    anchors = [Anchor(float(w), float(h)) for w, h in arrays.pop("det.anchors")]
    channels = arrays["det.b0.weight"].shape[1]
    net = DetectorNet(channels, cfg.detector.widths, len(anchors), cfg.detector.n_classes)
    net.load_state_arrays(arrays, "det.")
    return Detector(net, anchors, cfg.detector)


def _detections_csv(ids: list, preds: list) -> str:
    lines = ["image_id,cx,cy,w,h,confidence"]
    for sid, dets in zip(ids, preds):
        for d in dets:
            b = d.box
            lines.append(f"{sid},{_f(b.cx)},{_f(b.cy)},{_f(b.w)},{_f(b.h)},{_f(d.confidence)}")
    return "\n".join(lines) + "\n"


def cmd_eval(cfg: ExperimentConfig, out, model: str, split: str = "test_R", iou_min: float = 0.5):
    """Evaluate a trained detector on ``split``; writes detections, PR curve and report CSVs."""
    lay = _prepare(Path(out), cfg)
    det = load_detector(cfg, lay.detector(model) / "detector.bda")
    samples = ds.load_dataset(lay.split(split), cfg.grid)
    preds = det.predict(ds.stack_images(samples))
    ids = [s.id for s in samples]
    result = evaluate(dict(zip(ids, preds)), {s.id: s.pixel_boxes() for s in samples}, iou_min)
    lay.eval.mkdir(parents=True, exist_ok=True)
    (lay.eval / f"{model}_detections.csv").write_text(_detections_csv(ids, preds), encoding="utf-8")
    (lay.eval / f"{model}_pr.csv").write_text(
        "recall,precision,threshold\n"
        + "".join(f"{_f(p.recall)},{_f(p.precision)},{_f(p.threshold)}\n" for p in result.curve),
        encoding="utf-8")
    (lay.eval / f"{model}_report.csv").write_text(
        "model,ap,tp,fp,n_gt\n" + _report_row(model, result), encoding="utf-8")
    return result


def _report_row(model: str, r) -> str:
    return f"{model},{_f(r.ap)},{r.tp},{r.fp},{r.n_gt}\n"


# ---------------------------------------------------------------------------
# run-table1

def _stage(name: str, fn, *args, timer=None, **kwargs):
    start = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    if timer is not None:
        timer(name, time.perf_counter() - start)
    return result


def cmd_run_table1(cfg: ExperimentConfig, out, real_kitti=None, log=None, timer=None,
                   gan_log=None) -> dict:
    """Full pipeline: data, CycleGAN, translation, five detectors, shared evaluation.

    ``log(model, result)`` follows each evaluation, ``gan_log(report)`` each
    CycleGAN step and ``timer(stage, seconds)`` each stage.
    """
    out = Path(out)
    lay = _prepare(out, cfg)
    _stage("gen-data", cmd_gen_data, cfg, out, real_kitti, timer=timer)
    _stage("train-cyclegan", cmd_train_cyclegan, cfg, out, log=gan_log, timer=timer)
    _stage("translate", cmd_translate, cfg, out, timer=timer)
    test_sum = ds.manifest_checksum(lay.split("test_R"))
    results, hashes = {}, {}
    for model in MODELS:
        _stage(f"train-detector {model}", cmd_train_detector, cfg, out, model, timer=timer)
        results[model] = _stage(f"eval {model}", cmd_eval, cfg, out, model, timer=timer)
        hashes[model] = detector_arch_hash(cfg.detector, cfg.cyclegan.channels)
        if log is not None:
            log(model, results[model])
    if ds.manifest_checksum(lay.split("test_R")) != test_sum:
        raise StageError("eval", RuntimeError("test manifest changed during the run"))
    _write_tables(out, results, hashes, test_sum)
    return results


def _write_tables(out: Path, results: dict, hashes: dict, test_sum: str) -> None:
    table = ["model,role,training_data,ap"]
    report = ["model,ap,tp,fp,n_gt"]
    for model, r in results.items():
        role, splits = MODELS[model]
        table.append(f"{model},{role},{'+'.join(splits)},{_f(r.ap)}")
        report.append(_report_row(model, r).rstrip("\n"))
    table.append("# paper reference AP % (context only, not reproduced at desk scale): "
                 + " ".join(f"{m}={v}" for m, v in PAPER_AP.items()))
    table.append("# architecture hash: " + " ".join(f"{m}={h}" for m, h in hashes.items()))
    table.append(f"# test manifest sha256: {test_sum}")
    (out / "table1.csv").write_text("\n".join(table) + "\n", encoding="utf-8")
    (out / "report.csv").write_text("\n".join(report) + "\n", encoding="utf-8")
