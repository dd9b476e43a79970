"""Training loop, evaluation, run logs and checkpoints for the three-model ensemble."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from . import metrics as MT
from .data import BatchSampler, BatchSpec, DatasetSplit, zscore
from .network import (
    DEFAULT_SUBMODELS,
    ConfigurationError,
    EnsembleConfig,
    build_ensemble,
    ensemble_forward,
    forward_multiscale,
    imd_configs,
)
from .tensor import Tensor, backward, sgd_step

RUNLOG_COLUMNS = ("step", "l_sup", "l_mc", "l_dihc", "lambda_cst", "l_total", "disagreement")


@dataclass
class TrainConfig:
    t_max: int = 1000
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    labelled_fraction: float = 0.1
    enable_imd: bool = True
    enable_ms: bool = True
    enable_dihc: bool = True
    enable_consistency: bool = True
    detach_pseudo: bool = True
    ramp_squared: bool = False
    eval_every: int = 100
    temperature: float = 0.1
    alpha1: float = 1.0
    alpha2: float = 0.75
    alpha3: float = 0.5
    lambda_sup: float = 1.0
    ramp_base: float = 0.1
    # batch composition
    labelled_per_batch: int = 2
    unlabelled_per_batch: int = 2
    augment: bool = True
    # sub-model architecture
    base_channels: int = 8
    depth: int = 4
    decoder_convs: int = 2

    def validate(self):
        if self.t_max <= 0:
            raise ConfigurationError(f"t_max must be positive, got {self.t_max}")
        if self.eval_every <= 0:
            raise ConfigurationError(f"eval_every must be positive, got {self.eval_every}")
        if self.enable_dihc and not self.enable_ms:
            raise ConfigurationError("enable_dihc requires enable_ms (diagonal terms target intermediate heads)")
        if not 0.0 < self.labelled_fraction <= 1.0:
            raise ConfigurationError(f"labelled_fraction must lie in (0, 1], got {self.labelled_fraction}")
        self.weights()
        self.sharpen_config()
        self.batch_spec()
        for c in self.submodel_configs():
            c.validate()
        return self

    def weights(self) -> L.ConsistencyWeights:
        return L.ConsistencyWeights(self.alpha1, self.alpha2, self.alpha3)

    def sharpen_config(self) -> L.SharpenConfig:
        return L.SharpenConfig(self.temperature)

    def ramp_schedule(self) -> L.RampSchedule:
        # Steps run 0..t_max-1, so the last logged step sees the full weight.
        return L.RampSchedule(max(self.t_max - 1, 1), self.ramp_base, self.lambda_sup, self.ramp_squared)

    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.labelled_per_batch, self.unlabelled_per_batch, self.seed, self.augment)

    def submodel_configs(self) -> tuple:
        base = tuple(
            replace(c, base_channels=self.base_channels, depth=self.depth, decoder_convs=self.decoder_convs)
            for c in DEFAULT_SUBMODELS
        )
        return apply_imd(base, self.enable_imd)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(types)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = {k: _coerce(k, v, types[k]) for k, v in d.items()}
        return cls(**kw)


def _coerce(key, value, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ == "float":
            return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"config key {key!r}: cannot interpret {value!r} as {typ}") from None
    return value


def apply_imd(cfgs: Sequence, enable_imd: bool) -> tuple:
    """Diversified sub-model configs, or three copies of the second one."""
    return imd_configs(enable_imd, tuple(cfgs))


# ---------------------------------------------------------------------------
# one optimisation step


class NumericalAbort(RuntimeError):
    """A loss term became NaN or infinite; ``dump`` holds the diagnostic values."""

    def __init__(self, term: str, step: int, dump: dict):
        self.term, self.step, self.dump = term, step, dump
        super().__init__(f"non-finite {term} at step {step}: {dump}")


@dataclass
class StepRecord:
    step: int
    breakdown: L.LossBreakdown
    disagreement: float

    def row(self) -> tuple:
        b = self.breakdown
        return (self.step, b.l_sup, b.l_mc, b.l_dihc, b.lambda_cst, b.l_total, self.disagreement)


def disagreement(preds: Sequence) -> float:
    """Mean over voxels of |p1-p2| + |p2-p3| + |p1-p3| on the final heads."""
    p1, p2, p3 = (p.scale(1).data.astype(np.float64) for p in preds)
    return float(np.mean(np.abs(p1 - p2) + np.abs(p2 - p3) + np.abs(p1 - p3)))


def _check_finite(term: str, value, t: int, partial: dict):
    v = value.item() if isinstance(value, Tensor) else float(value)
    partial[term] = v
    if not math.isfinite(v):
        raise NumericalAbort(term, t, dict(partial))


def compute_losses(preds: Sequence, y: np.ndarray, n_labelled: int, cfg: TrainConfig, t: int):
    """Total-loss tensor and breakdown for one forward pass.

    Raises ``NumericalAbort`` naming the first term that is not finite.
    """
    seen: dict = {"lambda_cst": L.ramp_weight(t, cfg.ramp_schedule())}
    l_sup = L.deep_supervised_loss(preds, y, slice(0, n_labelled), None if cfg.enable_ms else 1)
    _check_finite("l_sup", l_sup, t, seen)
    l_mc = l_dihc = 0.0
    if cfg.enable_consistency:
        w, sc = cfg.weights(), cfg.sharpen_config()
        for term, fn, on in (("l_mc", L.mutual_consistency_loss, True),
                             ("l_dihc", L.diagonal_consistency_loss, cfg.enable_dihc)):
            if not on:
                continue
            try:
                value = fn(preds, w, sc, cfg.detach_pseudo)
            except ValueError:  # sharpening refuses NaN predictions
                value = math.nan
            _check_finite(term, value, t, seen)
            if term == "l_mc":
                l_mc = value
            else:
                l_dihc = value
    total, bd = L.total_loss(l_sup, l_mc, l_dihc, t, cfg.ramp_schedule())
    _check_finite("l_total", bd.l_total, t, seen)
    return total, bd


def train_step(models: Sequence, batch, cfg: TrainConfig, t: int, velocity: dict | None = None) -> StepRecord:
    """Forward all models, back-propagate the total loss and take one SGD step."""
    if t >= cfg.t_max:
        raise ValueError(f"step {t} is past t_max={cfg.t_max}")
    x, y, lab = batch
    preds = ensemble_forward(models, Tensor(x), training=True)
    dis = disagreement(preds)
    try:
        total, bd = compute_losses(preds, y, len(lab), cfg, t)
    except NumericalAbort as e:
        e.dump["disagreement"] = dis
        raise
    backward(total)
    params = [p for m in models for p in m.parameters()]
    for p in params:
        # heads left out of the objective (e.g. without deep supervision) get a zero gradient
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    sgd_step(params, cfg.lr, cfg.momentum, cfg.weight_decay, velocity if velocity is not None else {})
    return StepRecord(t, bd, dis)


# ---------------------------------------------------------------------------
# evaluation


def predict(model, volume: np.ndarray) -> np.ndarray:
    """Final-head foreground probabilities for one raw volume."""
    x = Tensor(zscore(volume)[None, None])
    return forward_multiscale(model, x, training=False).scale(1).data[0]


def evaluate(models: Sequence, eval_set: Sequence, ids: Sequence[str] | None = None) -> list:
    """Per-case reports from the first model's final head thresholded at 0.5."""
    if not eval_set:
        raise ValueError("evaluation set is empty")
    first = next(m for m in models if m.cfg.model_index == 1)
    ids = list(ids) if ids is not None else [f"case_{i:03d}" for i in range(len(eval_set))]
    reports = []
    for cid, (v, m) in zip(ids, eval_set):
        reports.append(MT.evaluate_probabilities(predict(first, v), m, 0.5, cid))
    return reports


# ---------------------------------------------------------------------------
# run log


class RunLog:
    """Append-only per-step loss rows, optionally mirrored to a CSV file."""

    def __init__(self, path=None, keep: int = 0):
        self.rows: list = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            if keep and self.path.exists():
                self.rows = read_runlog(self.path)[:keep]
            with open(self.path, "w", newline="") as fh:
                fh.write(format_rows(self.rows))

    def append(self, rec: StepRecord):
        row = rec.row()
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                fh.write(format_rows([row], header=False))

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> list:
        i = RUNLOG_COLUMNS.index(name)
        return [r[i] for r in self.rows]

    def to_csv(self) -> str:
        return format_rows(self.rows)


def format_rows(rows, header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(RUNLOG_COLUMNS)
    for r in rows:
        w.writerow([int(r[0])] + [repr(float(v)) for v in r[1:]])
    return buf.getvalue()


def read_runlog(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        head = next(rd, None)
        if tuple(head or ()) != RUNLOG_COLUMNS:
            raise ValueError(f"{path}: not a run log (header {head})")
        return [(int(r[0]),) + tuple(float(v) for v in r[1:]) for r in rd]


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"DCKP"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


def encode_checkpoint(meta: dict, blobs: dict) -> bytes:
    """DCKP | u32 version | u32 len + JSON metadata | u32 count | named f32 blobs."""
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", CKPT_VERSION)
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(mb)) + mb
    out += struct.pack("<I", len(blobs))
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name], dtype="<f4")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload = arr.tobytes()
        out += struct.pack("<Q", len(payload)) + payload
    return bytes(out)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"checkpoint truncated at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint metadata: {e}") from None
    (count,) = struct.unpack("<I", take(4))
    blobs = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"blob {name!r}: {nbytes} bytes do not match shape {shape}")
        blobs[name] = np.frombuffer(bytes(take(nbytes)), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last blob")
    return meta, blobs


def read_checkpoint(path) -> tuple[dict, dict]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# trainer state


class Trainer:
    """Owns the three models, optimiser buffers, batch sampler and step counter."""

    def __init__(self, cfg: TrainConfig, split: DatasetSplit, patch_shape: Sequence[int] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.split = split
        if patch_shape is None:
            patch_shape = split.labelled[0][0].shape
        self.patch_shape = tuple(int(s) for s in patch_shape)
        self.models = build_ensemble(EnsembleConfig(cfg.submodel_configs(), self.patch_shape, cfg.seed))
        self.velocity: dict = {}
        self.step = 0
        self.sampler = BatchSampler(split, cfg.batch_spec())

    def train_step(self) -> StepRecord:
        rec = train_step(self.models, self.sampler.batch(self.step), self.cfg, self.step, self.velocity)
        self.step += 1
        return rec

    def evaluate(self, eval_set, ids=None) -> list:
        return evaluate(self.models, eval_set, ids)

    # -- checkpoint ----------------------------------------------------

    def state_blobs(self) -> dict:
        blobs = {}
        for m in self.models:
            for p in m.parameters():
                blobs[f"param/{p.name}"] = p.data
            for name, st in m.norms.items():
                if st.running_mean is not None:
                    tag = f"m{m.cfg.model_index}.{name}"
                    blobs[f"norm/{tag}.running_mean"] = st.running_mean
                    blobs[f"norm/{tag}.running_var"] = st.running_var
        for key, v in self.velocity.items():
            blobs[f"velocity/{key}"] = v
        return blobs

    def metadata(self) -> dict:
        return {
            "step": self.step,
            "config": self.cfg.to_dict(),
            "patch_shape": list(self.patch_shape),
            "sampler": "stateless in (seed, step)",
        }

    def save(self, path):
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(encode_checkpoint(self.metadata(), self.state_blobs()))
        os.replace(tmp, path)

    def load_state(self, meta: dict, blobs: dict):
        expected = self.state_blobs()
        missing = [k for k in expected if not k.startswith("velocity/") and k not in blobs]
        if missing:
            raise CheckpointError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[0]!r}")
        for m in self.models:
            for p in m.parameters():
                arr = blobs[f"param/{p.name}"]
                if arr.shape != p.shape:
                    raise CheckpointError(f"{p.name}: shape {arr.shape} != model {p.shape}")
                p.data = arr.copy()
            for name, st in m.norms.items():
                tag = f"norm/m{m.cfg.model_index}.{name}"
                if f"{tag}.running_mean" in blobs:
                    st.running_mean = blobs[f"{tag}.running_mean"].copy()
                    st.running_var = blobs[f"{tag}.running_var"].copy()
        self.velocity = {k[len("velocity/"):]: v.copy() for k, v in blobs.items() if k.startswith("velocity/")}
        self.step = int(meta["step"])

    @classmethod
    def from_checkpoint(cls, path, split: DatasetSplit, overrides: dict | None = None) -> "Trainer":
        meta, blobs = read_checkpoint(path)
        cfg_d = dict(meta["config"])
        cfg_d.update(overrides or {})
        tr = cls(TrainConfig.from_dict(cfg_d), split, meta.get("patch_shape"))
        tr.load_state(meta, blobs)
        return tr


def models_from_checkpoint(path) -> tuple[list, dict]:
    """Rebuild the ensemble for inference from a checkpoint file."""
    meta, blobs = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["config"])
    models = build_ensemble(EnsembleConfig(cfg.submodel_configs(), tuple(meta["patch_shape"]), cfg.seed))
    shell = Trainer.__new__(Trainer)
    shell.models, shell.velocity, shell.step = models, {}, 0
    Trainer.load_state(shell, meta, blobs)
    return models, meta


# ---------------------------------------------------------------------------
# full run


@dataclass
class RunResult:
    log: RunLog
    evals: list = field(default_factory=list)  # (step, aggregate MetricReport)
    final_reports: list = field(default_factory=list)
    trainer: Trainer | None = None


EVAL_HISTORY_COLUMNS = ("step", "dice", "jaccard", "asd", "hd95")


def run(cfg: TrainConfig, split: DatasetSplit, eval_set: Sequence = (), eval_ids=None, out_dir=None,
        trainer: Trainer | None = None, progress=None, stop_at: int | None = None) -> RunResult:
    """Train from ``trainer.step`` (0 for a fresh run) to ``t_max``.

    Evaluates every ``eval_every`` steps and at the end. With ``out_dir`` the run
    log, eval history, final per-case CSV and ``last``/``best`` checkpoints are written there.
    ``stop_at`` halts early after that many steps, leaving a resumable ``last`` checkpoint.
    """
    tr = trainer if trainer is not None else Trainer(cfg, split)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = RunLog(out / "runlog.csv" if out else None, keep=tr.step)
    result = RunResult(log, trainer=tr)
    best = _reset_eval_history(out / "eval_history.csv", tr.step) if out is not None else -math.inf
    end = cfg.t_max if stop_at is None else min(stop_at, cfg.t_max)
    while tr.step < end:
        try:
            rec = tr.train_step()
        except NumericalAbort as e:
            if out is not None:
                (out / "nan_dump.json").write_text(json.dumps({"term": e.term, "step": e.step, **e.dump}, indent=1))
            raise
        log.append(rec)
        if progress is not None:
            progress(rec)
        done = tr.step
        if eval_set and (done % cfg.eval_every == 0 or done == cfg.t_max):
            reports = tr.evaluate(eval_set, eval_ids)
            agg = MT.aggregate(reports)
            result.evals.append((done, agg))
            result.final_reports = reports
            if out is not None:
                _append_eval(out / "eval_history.csv", done, agg)
                if agg.dice > best:
                    best = agg.dice
                    tr.save(out / "best.dckp")
    if out is not None:
        tr.save(out / "last.dckp")
        if result.final_reports:
            MT.write_csv(out / "eval.csv", result.final_reports)
    return result


def _reset_eval_history(path: Path, keep_until: int) -> float:
    """Drop rows after ``keep_until``; return the best Dice among those kept."""
    rows = []
    if keep_until > 0 and path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if int(r[0]) <= keep_until]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HISTORY_COLUMNS)
        w.writerows(rows)
    return max((float(r[1]) for r in rows), default=-math.inf)


def _append_eval(path: Path, step: int, agg: MT.MetricReport):
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([step, MT._fmt(agg.dice), MT._fmt(agg.jaccard),
                    MT._fmt(agg.asd, agg.surface_defined), MT._fmt(agg.hd95, agg.surface_defined)])
