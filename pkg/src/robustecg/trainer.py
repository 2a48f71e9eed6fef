"""Alternating dual-teacher pretraining.

Even steps distill on lead-masked views and update the masking teacher;
odd steps distill on noise-corrupted views and update the noise teacher.
The signal-report contrastive term is applied on every step.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .corruption import MASK, NOISE, CorruptionConfig, build_views
from .encoder import (
    Backbone,
    EncoderConfig,
    HashedTextEncoder,
    HeadConfig,
    ProjectionHead,
    as_batch,
)
from .errors import (
    BatchTooSmall,
    ConfigError,
    ConfigMismatch,
    CorruptCheckpoint,
    MissingFile,
    NonFiniteLoss,
    NumericError,
    ShapeMismatch,
)
from .objectives import (
    ContrastiveConfig,
    DistillConfig,
    LossWeights,
    Temperature,
    duodistill_loss,
    report_align_loss,
    total_loss,
    update_center,
)
from .signalio import EcgRecord, NoiseBank

log = logging.getLogger(__name__)

SHARED = "shared"
CHECKPOINT_FORMAT = 1


@dataclass
class OptimConfig:
    lr: float = 3e-5
    weight_decay: float = 0.04
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 3.0
    batch_size: int = 32
    epochs: int = 10
    ema_start: float = 0.996
    ema_end: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0 or self.batch_size < 2 or self.epochs < 1:
            raise ConfigError(f"need lr > 0, batch_size >= 2, epochs >= 1; got {self}")
        if not 0 <= self.ema_start <= self.ema_end <= 1:
            raise ConfigError("EMA schedule must be non-decreasing within [0, 1]")


@dataclass
class PretrainConfig:
    """Everything needed to rebuild a run; serialized as the experiment config."""

    data: dict = field(default_factory=dict)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    single_teacher: bool = False
    seed: int = 0

    _sections = {
        "corruption": CorruptionConfig, "encoder": EncoderConfig, "heads": HeadConfig,
        "distill": DistillConfig, "contrastive": ContrastiveConfig, "optim": OptimConfig,
        "weights": LossWeights,
    }

    def to_dict(self) -> dict:
        d = {"data": dict(self.data), "single_teacher": self.single_teacher, "seed": self.seed}
        for name in self._sections:
            sec = asdict(getattr(self, name))
            d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PretrainConfig":
        known = set(cls._sections) | {"data", "single_teacher", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            kw = {name: sec(**d.get(name, {})) for name, sec in cls._sections.items()}
        except TypeError as e:
            raise ConfigError(str(e)) from e
        return cls(data=dict(d.get("data", {})), single_teacher=bool(d.get("single_teacher", False)),
                   seed=int(d.get("seed", 0)), **kw)

    @classmethod
    def load(cls, path: str | Path) -> "PretrainConfig":
        path = Path(path)
        if not path.is_file():
            raise MissingFile(f"config not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


class Student(nn.Module):
    def __init__(self, config: PretrainConfig):
        super().__init__()
        self.backbone = Backbone(config.encoder, config.heads)
        self.ecg_proj = ProjectionHead(self.backbone.encoder.embed_dim, config.heads.proj_dim)

    @property
    def encoder(self):
        return self.backbone.encoder


class TextTower(nn.Module):
    def __init__(self, config: PretrainConfig):
        super().__init__()
        self.encoder = HashedTextEncoder(config.heads.text_buckets, config.heads.text_dim, seed=config.seed)
        self.proj = ProjectionHead(config.heads.text_dim, config.heads.proj_dim)

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        return self.proj(self.encoder(texts))


@dataclass
class StepMetrics:
    step: int
    mode: str
    l_report: float | None
    l_distill: float | None
    l_total: float
    tau: float
    ema_m: float

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({k: v for k, v in d.items() if v is not None})


class TrainState:
    """Student, text tower, temperature, EMA teachers, centers and optimizer."""

    def __init__(self, config: PretrainConfig, total_steps: int = 1):
        self.config = config
        self.total_steps = max(int(total_steps), 1)
        torch.manual_seed(config.seed)
        self.student = Student(config)
        self.text = TextTower(config)
        self.temperature = Temperature(config.contrastive)
        keys = (SHARED,) if config.single_teacher else (MASK, NOISE)
        self.teachers = {k: self._make_teacher() for k in keys}
        d = config.heads.dino_out
        self.centers = {k: torch.zeros(d) for k in keys}
        self.optimizer = torch.optim.AdamW(
            self.trainable_parameters(), lr=config.optim.lr,
            weight_decay=config.optim.weight_decay, betas=config.optim.betas,
        )
        self.step = 0

    def _make_teacher(self) -> Backbone:
        t = copy.deepcopy(self.student.backbone)
        for p in t.parameters():
            p.requires_grad_(False)
        return t.eval()

    def trainable_parameters(self) -> list[nn.Parameter]:
        mods = (self.student, self.text, self.temperature)
        return [p for m in mods for p in m.parameters() if p.requires_grad]

    def teacher_for(self, mode: str) -> str:
        return SHARED if self.config.single_teacher else mode

    def ema_momentum(self, step: int | None = None) -> float:
        """Cosine ramp from ``ema_start`` to ``ema_end`` over the run."""
        o = self.config.optim
        s = self.step if step is None else step
        return o.ema_end - (o.ema_end - o.ema_start) * (math.cos(math.pi * s / self.total_steps) + 1) / 2

    def tensors(self) -> dict[str, torch.Tensor]:
        """Every persistent tensor, by stable name."""
        out = {}
        for prefix, mod in (("student", self.student), ("text", self.text), ("temperature", self.temperature)):
            for k, v in mod.state_dict().items():
                out[f"{prefix}.{k}"] = v
        for name, t in self.teachers.items():
            for k, v in t.state_dict().items():
                out[f"teacher.{name}.{k}"] = v
        for name, c in self.centers.items():
            out[f"center.{name}"] = c
        opt = self.optimizer.state_dict()
        for idx, st in opt["state"].items():
            for k, v in st.items():
                out[f"optim.{idx}.{k}"] = torch.as_tensor(v)
        out["rng.torch"] = torch.get_rng_state()
        return out


def ema_update(teacher, student, momentum: float):
    """In-place ``t <- m * t + (1 - m) * s`` over matching tensors; returns the teacher.

    Accepts modules or name-to-tensor mappings.
    """
    if not 0 <= momentum <= 1:
        raise ConfigError(f"EMA momentum must be in [0, 1], got {momentum}")
    t_params = dict(teacher.named_parameters()) if isinstance(teacher, nn.Module) else teacher
    s_params = dict(student.named_parameters()) if isinstance(student, nn.Module) else student
    if t_params.keys() != s_params.keys():
        raise ShapeMismatch("teacher and student parameter names differ")
    with torch.no_grad():
        for name, t in t_params.items():
            s = s_params[name]
            if t.shape != s.shape:
                raise ShapeMismatch(f"{name}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
            if momentum == 0:
                t.copy_(s)
            elif momentum != 1:
                t.mul_(momentum).add_(s.detach(), alpha=1 - momentum)
    return teacher


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Counter-based stream: corruption draws depend only on (seed, step)."""
    return np.random.default_rng([seed, step, 0x5EED])


def train_step(
    state: TrainState,
    records: Sequence[EcgRecord],
    reports: Sequence[str] | None,
    bank: NoiseBank | None,
) -> tuple[TrainState, StepMetrics]:
    cfg = state.config
    if len(records) < 2:
        raise BatchTooSmall("a training batch needs at least two records")
    w = cfg.weights
    mode = MASK if state.step % 2 == 0 else NOISE
    key = state.teacher_for(mode)
    teacher = state.teachers[key]
    rng = step_rng(cfg.seed, state.step)
    k = cfg.corruption.k_minor

    state.student.train()
    state.text.train()

    l_distill = None
    teacher_logits = None
    if w.beta > 0:
        batches = [build_views(r, mode, bank, cfg.corruption, rng) for r in records]
        views = torch.from_numpy(np.stack([vb.stacked() for vb in batches]))
        b, v = views.shape[:2]
        flat = views.reshape(b * v, *views.shape[2:])
        student_logits = state.student.backbone(flat).reshape(b, v, -1)
        with torch.no_grad():
            teacher_logits = teacher(views[:, :k].reshape(b * k, *views.shape[2:])).reshape(b, k, -1)
        l_distill = duodistill_loss(teacher_logits, student_logits, state.centers[key],
                                    cfg.distill.tau_t, cfg.distill.tau_s)

    l_report = None
    tau = state.temperature()
    if w.alpha > 0:
        if reports is None or len(reports) != len(records):
            raise ConfigError("contrastive term needs one report per record")
        s = state.student.ecg_proj(state.student.encoder(as_batch(list(records))))
        t = state.text(list(reports))
        l_report = report_align_loss(s, t, tau)

    loss = total_loss(l_report, l_distill, w) if _finite(l_report, l_distill) else None
    if loss is None or not torch.isfinite(loss):
        raise NonFiniteLoss(
            f"non-finite loss at step {state.step} ({mode}): report={_item(l_report)} distill={_item(l_distill)}"
        )

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if any(p.grad is not None for t in state.teachers.values() for p in t.parameters()):
        raise NumericError("teacher parameters received gradients")
    torch.nn.utils.clip_grad_norm_(state.trainable_parameters(), cfg.optim.grad_clip)
    state.optimizer.step()

    m = state.ema_momentum()
    ema_update(teacher, state.student.backbone, m)
    if teacher_logits is not None:
        state.centers[key] = update_center(state.centers[key], teacher_logits, cfg.distill.center_momentum)

    metrics = StepMetrics(state.step, mode, _item(l_report), _item(l_distill), float(loss.item()),
                          float(tau.item()), m)
    state.step += 1
    return state, metrics


def _finite(*losses) -> bool:
    return all(l is None or bool(torch.isfinite(l)) for l in losses)


def _item(x):
    return None if x is None else float(x.item())


def steps_per_epoch(n_records: int, batch_size: int) -> int:
    return math.ceil(n_records / batch_size)


def epoch_batches(n_records: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; a trailing singleton borrows one index to keep B >= 2."""
    order = np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n_records)
    out = [order[i:i + batch_size] for i in range(0, n_records, batch_size)]
    if len(out[-1]) < 2 and n_records >= 2:
        out[-1] = np.concatenate([out[-1], order[:1]])
    return out


@dataclass
class Checkpoint:
    state: TrainState
    metrics: list[StepMetrics]
    path: Path | None = None


def pretrain(
    config: PretrainConfig,
    dataset: Sequence[EcgRecord],
    bank: NoiseBank | None,
    reports: Mapping[str, str] | Sequence[str] | None,
    out_dir: str | Path | None = None,
    checkpoint_every: int | None = None,
    resume_from: str | Path | None = None,
    stop_after: int | None = None,
) -> Checkpoint:
    """Run ``epochs * ceil(len(dataset) / batch_size)`` alternating steps.

    ``reports`` maps record ids to report text (or is aligned by position).
    With ``out_dir`` set, per-step metrics stream to ``metrics.jsonl`` and
    checkpoints land in ``out_dir/step_<n>`` plus ``out_dir/final``.
    ``stop_after`` halts early at that global step (for resume tests).
    """
    dataset = list(dataset)
    if len(dataset) < 2:
        raise BatchTooSmall("pretraining needs at least two records")
    if reports is not None and not isinstance(reports, Mapping):
        reports = {r.record_id: t for r, t in zip(dataset, reports, strict=True)}
    if reports is not None:
        missing = [r.record_id for r in dataset if r.record_id not in reports]
        if missing:
            raise ConfigError(f"{len(missing)} records have no report, e.g. {missing[0]!r}")
    if bank is not None:
        bank = bank.prepared(dataset[0].sample_rate_hz)

    bs = config.optim.batch_size
    per_epoch = steps_per_epoch(len(dataset), bs)
    total = per_epoch * config.optim.epochs
    state = load_checkpoint(resume_from, config) if resume_from else TrainState(config, total)
    state.total_steps = total

    out_dir = Path(out_dir) if out_dir else None
    metrics_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        config.save(out_dir / "config.json")
        metrics_fh = (out_dir / "metrics.jsonl").open("a" if resume_from else "w", encoding="utf-8")

    history = []
    end = total if stop_after is None else min(total, stop_after)
    try:
        while state.step < end:
            epoch, i = divmod(state.step, per_epoch)
            idx = epoch_batches(len(dataset), bs, config.seed, epoch)[i]
            recs = [dataset[j] for j in idx]
            texts = [reports[r.record_id] for r in recs] if reports is not None else None
            state, m = train_step(state, recs, texts, bank)
            history.append(m)
            if metrics_fh:
                metrics_fh.write(m.to_json() + "\n")
            if out_dir and checkpoint_every and state.step % checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"step_{state.step}")
    finally:
        if metrics_fh:
            metrics_fh.close()
    path = save_checkpoint(state, out_dir / "final") if out_dir else None
    return Checkpoint(state, history, path)


# checkpoints ---------------------------------------------------------------

def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def write_tensor_dir(tensors: Mapping[str, torch.Tensor], path: str | Path, extra: Mapping) -> Path:
    """Directory of float32 little-endian blobs plus a JSON manifest with checksums.

    Every tensor dtype used here (float32 parameters, uint8 RNG bytes) is
    exactly representable in float32, so the round-trip is lossless.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, t) in enumerate(tensors.items()):
        t = t.detach().cpu()
        data = t.to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
        fname = f"t{i:04d}.f32"
        (path / fname).write_bytes(data)
        entries.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).removeprefix("torch."),
                        "file": fname, "sha256": _sha256(data)})
    manifest = {"format": CHECKPOINT_FORMAT, **extra, "tensors": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path


def read_tensor_dir(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    manifest = _read_manifest(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpoint(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest, {e["name"]: _read_tensor(path, e) for e in manifest["tensors"]}


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    opt = state.optimizer.state_dict()
    return write_tensor_dir(state.tensors(), path, {
        "kind": "pretrain",
        "step": state.step,
        "total_steps": state.total_steps,
        "config": state.config.to_dict(),
        "param_groups": opt["param_groups"],
        "rng": {"kind": "counter", "seed": state.config.seed},
    })


def _read_manifest(path: Path) -> dict:
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise MissingFile(f"no checkpoint manifest in {path}")
    try:
        return json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptCheckpoint(f"{mpath}: {e}") from e


def _read_tensor(path: Path, entry: dict) -> torch.Tensor:
    blob = path / entry["file"]
    if not blob.is_file():
        raise CorruptCheckpoint(f"missing tensor blob {blob}")
    data = blob.read_bytes()
    if _sha256(data) != entry["sha256"]:
        raise CorruptCheckpoint(f"checksum mismatch for {entry['name']} ({blob})")
    n = int(np.prod(entry["shape"], dtype=np.int64))
    if len(data) != 4 * n:
        raise CorruptCheckpoint(f"{blob}: {len(data)} bytes for {n} values")
    arr = np.frombuffer(data, dtype="<f4").reshape(entry["shape"]).copy()
    return torch.from_numpy(arr).to(getattr(torch, entry["dtype"]))


def load_checkpoint(path: str | Path, config: PretrainConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`.

    With ``config`` given, the stored tensors must match the shapes that
    config produces; the first difference raises :class:`ConfigMismatch`.
    """
    path = Path(path)
    manifest, tensors = read_tensor_dir(path)
    if manifest.get("kind") != "pretrain":
        raise CorruptCheckpoint(f"{path} is not a pretraining checkpoint")
    stored_cfg = PretrainConfig.from_dict(manifest["config"])
    state = TrainState(config or stored_cfg, manifest["total_steps"])
    expected = {k: tuple(v.shape) for k, v in state.tensors().items() if not k.startswith("optim.")}
    stored = {e["name"]: e for e in manifest["tensors"]}
    for name, shape in expected.items():
        if name not in stored:
            raise ConfigMismatch(f"checkpoint lacks tensor {name} of shape {shape}")
        if tuple(stored[name]["shape"]) != shape:
            raise ConfigMismatch(
                f"{name}: checkpoint shape {tuple(stored[name]['shape'])} != config shape {shape}"
            )
    def sub(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    state.student.load_state_dict(sub("student."))
    state.text.load_state_dict(sub("text."))
    state.temperature.load_state_dict(sub("temperature."))
    for name, t in state.teachers.items():
        t.load_state_dict(sub(f"teacher.{name}."))
    for name in state.centers:
        state.centers[name] = tensors[f"center.{name}"].clone()
    opt_state = {}
    for k, v in sub("optim.").items():
        idx, key = k.split(".", 1)
        opt_state.setdefault(int(idx), {})[key] = v
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": manifest["param_groups"]})
    torch.set_rng_state(tensors["rng.torch"].to(torch.uint8))
    state.step = int(manifest["step"])
    return state


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def pretrained_encoder(path: str | Path):
    """The student ECG encoder of a saved run, with its config."""
    state = load_checkpoint(path)
    return state.student.encoder, state.config
