"""Seeded training loop, evaluation, checkpoint resume and the ablation harness."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import ccm as ccm_mod
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .losses import LossConfig, one_hot_labels, one_hot_mask, total_loss
from .metrics import MetricsReport, build_report
from .model import ModelConfig, RCCMNet, build_model, parameter_checksum
from .rcm import DEFAULT_ALPHA, SOFTMAX_AXES, check_alpha
from .synthdata import DatasetSplit, Sample

log = logging.getLogger(__name__)

MASK_SOURCES = ("s4", "mean")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch_ids: list[str], losses: dict):
        self.epoch = epoch
        self.batch_ids = batch_ids
        self.losses = losses
        super().__init__(f"non-finite loss at epoch {epoch}; batch ids {batch_ids}; terms {losses}")


class CheckpointMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class RcmSettings:
    alpha: tuple[float, float, float, float] = DEFAULT_ALPHA
    softmax_axis: str = "levels"

    def __post_init__(self):
        object.__setattr__(self, "alpha", check_alpha(self.alpha))
        if self.softmax_axis not in SOFTMAX_AXES:
            raise ConfigError(f"rcm.softmax_axis must be one of {SOFTMAX_AXES}")


@dataclass(frozen=True)
class CcmSettings:
    transform: str = "identity"
    normalize_mean_one: bool = False
    epsilon: float = ccm_mod.DEFAULT_EPSILON

    def __post_init__(self):
        if self.transform not in ccm_mod.TRANSFORMS:
            raise ConfigError(f"ccm.transform must be one of {ccm_mod.TRANSFORMS}")
        if not self.epsilon > 0:
            raise ConfigError("ccm.epsilon must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 10
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    use_rcm: bool = True
    use_ccm: bool = True
    eval_every: int = 0
    mask_source: str = "s4"
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    rcm: RcmSettings = field(default_factory=RcmSettings)
    ccm: CcmSettings = field(default_factory=CcmSettings)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.mask_source not in MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {MASK_SOURCES}")
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        # one seed drives both initialisation and shuffling
        if self.model.rng_seed != self.seed:
            object.__setattr__(self, "model", replace(self.model, rng_seed=self.seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"]["lambda"] = d["loss"].pop("lam")
        d["ablation"] = {"use_rcm": d.pop("use_rcm"), "use_ccm": d.pop("use_ccm")}
        d["model"]["input_shape"] = list(d["model"]["input_shape"])
        d["rcm"]["alpha"] = list(d["rcm"]["alpha"])
        d["betas"] = list(d["betas"])
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        d = _expand_dotted(raw)
        d = {k: (dict(v) if isinstance(v, dict) else v) for k, v in d.items()}
        sections = {}
        try:
            ablation = d.pop("ablation", {})
            for key in ("use_rcm", "use_ccm"):
                if key in ablation:
                    d[key] = bool(ablation.pop(key))
            _reject_unknown("ablation", ablation, ())
            if "model" in d:
                m = d.pop("model")
                _reject_unknown("model", m, [f.name for f in fields(ModelConfig)])
                if "input_shape" in m:
                    m["input_shape"] = tuple(m["input_shape"])
                sections["model"] = ModelConfig(**m)
            if "loss" in d:
                lc = d.pop("loss")
                if "lambda" in lc:
                    lc["lam"] = lc.pop("lambda")
                _reject_unknown("loss", lc, [f.name for f in fields(LossConfig)])
                sections["loss"] = LossConfig(**lc)
            if "rcm" in d:
                rc = d.pop("rcm")
                _reject_unknown("rcm", rc, [f.name for f in fields(RcmSettings)])
                sections["rcm"] = RcmSettings(**rc)
            if "ccm" in d:
                cc = d.pop("ccm")
                _reject_unknown("ccm", cc, [f.name for f in fields(CcmSettings)])
                sections["ccm"] = CcmSettings(**cc)
            top = [f.name for f in fields(cls) if f.name not in ("model", "loss", "rcm", "ccm")]
            _reject_unknown("top level", d, top)
            if "betas" in d:
                d["betas"] = tuple(d["betas"])
            return cls(**d, **sections)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


def _expand_dotted(raw: dict) -> dict:
    out: dict = {}
    for key, value in raw.items():
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        if isinstance(value, dict):
            node.setdefault(parts[-1], {}).update(_expand_dotted(value))
        else:
            node[parts[-1]] = value
    return out


def _reject_unknown(section: str, d: dict, allowed) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {unknown}")


def load_config(path) -> TrainConfig:
    """Read a TOML or JSON training config."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        raw = json.loads(text)
    elif path.suffix.lower() == ".toml":
        import tomli

        raw = tomli.loads(text)
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError:
            import tomli

            raw = tomli.loads(text)
    return TrainConfig.from_dict(raw)


def model_for(cfg: TrainConfig) -> RCCMNet:
    return build_model(cfg.model, alpha=cfg.rcm.alpha, softmax_axis=cfg.rcm.softmax_axis, use_rcm=cfg.use_rcm)


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------


@dataclass
class Tensors:
    ids: list[str]
    images: torch.Tensor  # (N, 1, H, W) float32
    masks: torch.Tensor  # (N, H, W) int64
    labels: torch.Tensor  # (N,) int64
    spacings: list[float]


def stack_samples(samples: Sequence[Sample]) -> Tensors:
    return Tensors(
        ids=[s.id for s in samples],
        images=torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).unsqueeze(1),
        masks=torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64)),
        labels=torch.tensor([s.class_label for s in samples], dtype=torch.int64),
        spacings=[s.pixel_spacing for s in samples],
    )


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for an epoch, a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def sample_weights_for(cfg: TrainConfig, labels: torch.Tensor, cls_logits: torch.Tensor) -> torch.Tensor:
    if not cfg.use_ccm:
        return torch.ones(len(labels), dtype=cls_logits.dtype)
    return ccm_mod.batch_weights(
        labels,
        ccm_mod.class_prediction(cls_logits.detach()),
        transform=cfg.ccm.transform,
        normalize_mean_one=cfg.ccm.normalize_mean_one,
        epsilon=cfg.ccm.epsilon,
    )


def training_step(model, optimizer, cfg: TrainConfig, images, masks, labels):
    out = model(images)
    weights = sample_weights_for(cfg, labels, out.cls_logits)
    terms = total_loss(out, one_hot_mask(masks), one_hot_labels(labels), weights, cfg.loss)
    return out, weights, terms


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    val_reports: list[dict] = field(default_factory=list)
    wall_clock_s: float = 0.0
    parameter_checksum: str = ""
    final_checkpoint: str | None = None
    final_val_report: MetricsReport | None = None
    model: RCCMNet | None = field(default=None, repr=False, compare=False)

    def loss_curve(self, key: str = "total") -> list[float]:
        return [e["loss"][key] for e in self.epochs]


def _summary_of(report: MetricsReport) -> dict:
    d = report.to_dict()
    d.pop("per_sample")
    return d


def _state_checkpoint(model, optimizer, cfg, epoch, history) -> Checkpoint:
    return Checkpoint(
        config=cfg.to_dict(),
        epoch=epoch,
        model_state=model.state_dict(),
        optimizer_state=optimizer.state_dict(),
        rng={"shuffle": {"kind": "stateless", "seed": cfg.seed, "next_epoch": epoch + 1}},
        torch_rng=torch.get_rng_state(),
        extra={"history": history, "config_hash": cfg.config_hash()},
    )


def _check_resume_compatible(cfg: TrainConfig, ckpt: Checkpoint) -> None:
    saved = TrainConfig.from_dict(ckpt.config)
    if replace(saved, epochs=cfg.epochs) != cfg:
        raise CheckpointMismatchError("resume checkpoint was written with a different config (other than epochs)")
    if ckpt.epoch >= cfg.epochs:
        raise CheckpointMismatchError(f"checkpoint is at epoch {ckpt.epoch}; nothing left to train for {cfg.epochs} epochs")


def train(split: DatasetSplit, cfg: TrainConfig, out_dir=None, resume_from=None) -> RunRecord:
    """Train on ``split.train``; returns the run record.

    With ``out_dir`` the run directory receives ``config.echo.json``,
    ``record.jsonl``, ``ckpt_final`` and ``report.json`` (validation).
    """
    if not split.train:
        raise ValueError("training split is empty")
    start = time.perf_counter()
    torch.manual_seed(cfg.seed)
    model = model_for(cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    history: list[dict] = []
    first_epoch = 1
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        _check_resume_compatible(cfg, ckpt)
        model.load_state_dict(ckpt.model_state)
        optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.torch_rng is not None:
            torch.set_rng_state(ckpt.torch_rng)
        history = list(ckpt.extra.get("history", []))
        first_epoch = ckpt.epoch + 1

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.echo.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    data = stack_samples(split.train)
    n = len(data.ids)
    record = RunRecord(config=cfg.to_dict(), config_hash=cfg.config_hash(), seed=cfg.seed)
    val_report = None

    for epoch in range(first_epoch, cfg.epochs + 1):
        model.train()
        order = epoch_order(cfg.seed, epoch, n)
        sums: dict[str, float] = {}
        weight_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[lo : lo + cfg.batch_size])
            _, weights, terms = training_step(model, optimizer, cfg, data.images[idx], data.masks[idx], data.labels[idx])
            values = terms.as_floats()
            if not all(math.isfinite(v) for v in values.values()):
                batch_ids = [data.ids[i] for i in idx.tolist()]
                if out_dir is not None:
                    (out_dir / "nonfinite_batch.json").write_text(
                        json.dumps({"epoch": epoch, "batch_ids": batch_ids, "losses": values, "weights": weights.tolist()}, indent=2)
                    )
                raise NonFiniteLossError(epoch, batch_ids, values)
            optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            optimizer.step()
            k = len(idx)
            for key, v in values.items():
                sums[key] = sums.get(key, 0.0) + v * k
            sums["weight_mean"] = sums.get("weight_mean", 0.0) + float(weights.sum())
            weight_sum += k
        entry = {"epoch": epoch, "loss": {key: v / weight_sum for key, v in sums.items()}}
        is_last = epoch == cfg.epochs
        if split.val and ((cfg.eval_every and epoch % cfg.eval_every == 0) or is_last):
            val_report = evaluate(model, split.val, mask_source=cfg.mask_source)
            entry["val"] = _summary_of(val_report)
            record.val_reports.append(entry["val"])
        history.append(entry)
        log.info("epoch %d/%d total %.4f seg %.4f cls %.4f", epoch, cfg.epochs, entry["loss"]["total"], entry["loss"]["l_seg"], entry["loss"]["l_cls"])
        if cfg.checkpoint_dir and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(Path(cfg.checkpoint_dir) / f"ckpt_epoch{epoch:04d}", _state_checkpoint(model, optimizer, cfg, epoch, history))

    record.epochs = history
    record.parameter_checksum = parameter_checksum(model)
    record.final_val_report = val_report
    final = _state_checkpoint(model, optimizer, cfg, cfg.epochs, history)
    if out_dir is not None:
        path = save_checkpoint(out_dir / "ckpt_final", final)
        record.final_checkpoint = str(path)
        with open(out_dir / "record.jsonl", "w") as fh:
            for entry in history:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        if val_report is not None:
            val_report.write(out_dir / "report.json")
    record.wall_clock_s = time.perf_counter() - start
    log.info("trained %d epochs in %.1f s", cfg.epochs - first_epoch + 1, record.wall_clock_s)
    record.model = model
    return record


def same_architecture(a: TrainConfig, b: TrainConfig) -> bool:
    return replace(a.model, rng_seed=0) == replace(b.model, rng_seed=0) and a.rcm == b.rcm and a.use_rcm == b.use_rcm


def load_trained(path, expected: TrainConfig | None = None) -> tuple[RCCMNet, TrainConfig]:
    ckpt = load_checkpoint(path)
    cfg = TrainConfig.from_dict(ckpt.config)
    if expected is not None and not same_architecture(expected, cfg):
        raise CheckpointMismatchError("checkpoint network does not match the supplied config")
    model = model_for(cfg)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


@torch.inference_mode()
def predict_batch(model: RCCMNet, images: torch.Tensor, mask_source: str = "s4"):
    """Returns (masks (B, H, W) uint8, class probabilities (B, 3))."""
    model.eval()
    out = model(images)
    if mask_source == "s4":
        seg = out.seg_logits[-1]
        masks = seg.argmax(dim=1)
    elif mask_source == "mean":
        probs = torch.stack([torch.softmax(s, dim=1) for s in out.seg_logits]).mean(dim=0)
        masks = probs.argmax(dim=1)
    else:
        raise ValueError(f"mask_source must be one of {MASK_SOURCES}")
    return masks.to(torch.uint8), torch.softmax(out.cls_logits, dim=1)


def evaluate(
    model_or_checkpoint,
    samples: Sequence[Sample],
    cfg: TrainConfig | None = None,
    mask_source: str | None = None,
    batch_size: int = 32,
) -> MetricsReport:
    """Full metric report for ``samples`` under a model or checkpoint path."""
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    if isinstance(model_or_checkpoint, RCCMNet):
        model = model_or_checkpoint
        if cfg is not None and replace(cfg.model, rng_seed=0) != replace(model.config, rng_seed=0):
            raise CheckpointMismatchError("model does not match the supplied config")
    else:
        model, saved = load_trained(model_or_checkpoint, expected=cfg)
        cfg = cfg or saved
    mask_source = mask_source or (cfg.mask_source if cfg is not None else "s4")
    was_training = model.training
    data = stack_samples(samples)
    pred_masks, pred_labels = [], []
    for lo in range(0, len(samples), batch_size):
        masks, probs = predict_batch(model, data.images[lo : lo + batch_size], mask_source)
        pred_masks.extend(masks.numpy())
        pred_labels.extend(probs.argmax(dim=1).tolist())
    model.train(was_training)
    return build_report(
        data.ids,
        pred_masks,
        [s.mask for s in samples],
        data.spacings,
        pred_labels,
        data.labels.tolist(),
    )


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_ROWS = (
    ("Base", False, False),
    ("+CCM", False, True),
    ("+RCM", True, False),
    ("+CCM+RCM", True, True),
)
_ROW_SLUGS = {"Base": "base", "+CCM": "ccm", "+RCM": "rcm", "+CCM+RCM": "ccm_rcm"}
ABLATION_COLUMNS = {
    "DSC": lambda r: r.aggregate["dsc"]["mean"],
    "ASSD": lambda r: r.aggregate["assd_mm"]["mean"],
    "HD": lambda r: r.aggregate["hd_mm"]["mean"],
    "dPA": lambda r: r.aggregate["d_pa_mm2"]["mean"],
    "ACC": lambda r: r.acc,
    "Precision": lambda r: r.precision_macro,
    "F1": lambda r: r.f1_macro,
    "Kappa": lambda r: r.kappa,
}


@dataclass
class AblationTable:
    seeds: list[int]
    rows: dict[str, dict[str, dict[str, float]]]  # row -> column -> {mean, sd}
    runs: list[dict]  # one entry per (row, seed)

    @property
    def flags(self) -> dict[str, bool]:
        def best(col, higher=True):
            vals = {name: cols[col]["mean"] for name, cols in self.rows.items()}
            target = max(vals.values()) if higher else min(vals.values())
            return vals["+CCM+RCM"] == target

        return {"full_best_dsc": best("DSC"), "full_best_acc": best("ACC")}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["modules", *ABLATION_COLUMNS])
            for name, cols in self.rows.items():
                writer.writerow([name, *(f"{cols[c]['mean']:.4f}±{cols[c]['sd']:.4f}" for c in ABLATION_COLUMNS)])

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "rows": self.rows, "runs": self.runs, "flags": self.flags}

    def render(self) -> str:
        lines = [f"{'modules':<10}" + "".join(f"{c:>18}" for c in ABLATION_COLUMNS)]
        for name, cols in self.rows.items():
            lines.append(f"{name:<10}" + "".join(f"{cols[c]['mean']:>10.3f}±{cols[c]['sd']:<7.3f}" for c in ABLATION_COLUMNS))
        return "\n".join(lines)


def _num(v) -> float:
    return float("nan") if v is None else float(v)


def ablate(split: DatasetSplit, base_cfg: TrainConfig, seeds: Sequence[int], out_dir=None) -> AblationTable:
    """Train every (use_rcm, use_ccm) combination for each seed and score on
    the test split (the validation split if there is no test split)."""
    if not seeds:
        raise ValueError("ablate needs at least one seed")
    eval_samples = split.test or split.val
    if not eval_samples:
        raise ValueError("ablation needs a non-empty test or validation split")
    runs = []
    per_row: dict[str, list[MetricsReport]] = {name: [] for name, _, _ in ABLATION_ROWS}
    for name, use_rcm, use_ccm in ABLATION_ROWS:
        for seed in seeds:
            cfg = replace(base_cfg, seed=int(seed), use_rcm=use_rcm, use_ccm=use_ccm)
            run_dir = Path(out_dir) / f"{_ROW_SLUGS[name]}_seed{seed}" if out_dir else None
            record = train(split, cfg, out_dir=run_dir)
            report = evaluate(record.model, eval_samples, mask_source=cfg.mask_source)
            per_row[name].append(report)
            runs.append({"row": name, "seed": int(seed), **{c: _num(fn(report)) for c, fn in ABLATION_COLUMNS.items()}})
            log.info("ablation %s seed %s: %s", name, seed, report.summary())
    rows = {}
    for name, reports in per_row.items():
        rows[name] = {}
        for col, fn in ABLATION_COLUMNS.items():
            vals = np.array([_num(fn(r)) for r in reports], dtype=np.float64)
            rows[name][col] = {"mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return AblationTable(seeds=[int(s) for s in seeds], rows=rows, runs=runs)

