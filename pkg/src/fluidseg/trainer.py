"""Training loop for all supervision regimes.

Regimes share one skeleton: assemble a batch (all strong, or half strong and
half weak when the regime consumes weak data), run the student in train mode,
combine the regime's loss terms, take an SGD momentum step, then move the EMA
teacher if one exists.  Pseudo-label and teacher forwards run in eval mode
with no graph and never touch BN running statistics.

Four independent RNG streams (init, batch, augmentation, teacher) are spawned
from the config seed, so a regime that simply skips a term replays another
regime's trajectory exactly; the reduction tests rely on this.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import supervision as sup
from .autodiff import Tensor
from .distill import (TeacherState, apply_perturbation, consistency_mse,
                      ema_update, invert_geometric, make_pseudo_label,
                      sample_perturbation)
from .errors import ConfigError, DataError, DivergenceError
from .evalmetrics import ConfusionAccumulator
from .model import (ModelConfig, SegModel, build_model, init_xavier, load_params,
                    save_checkpoint, snapshot_params)

REGIMES = ("baseline", "mlds", "mil", "ds_mil", "self_taught", "mean_taught",
           "consistency")
WEAK_TIERS = ("unlabeled", "global", "box")

_WEAK_USERS = frozenset({"mil", "ds_mil", "self_taught", "mean_taught", "consistency"})
_TEACHER_USERS = frozenset({"mean_taught", "consistency"})
_PSEUDO_USERS = frozenset({"self_taught", "mean_taught"})


def head_roles_for(regime: str) -> frozenset:
    roles = {"std"}
    if regime in ("mlds", "self_taught", "mean_taught"):
        roles.add("pyramid")
    if regime == "mil":
        roles.add("mil")
    if regime == "ds_mil":
        roles.add("mil_deep")
    return frozenset(roles)


@dataclass
class TrainConfig:
    regime: str = "baseline"
    weak_tier: str = "unlabeled"
    epochs: int = 100
    baseline_epoch_multiplier: int = 10
    batch_size: int = 16
    lr: float = 0.01
    lr_late_factor: float = 0.1
    lr_drop_at: float = 0.8       # fraction of the epoch schedule
    momentum: float = 0.9
    aug_flip_prob: float = 0.5
    aug_strength: float = 0.1
    teacher_strength: float = 0.4
    teacher_flip_prob: float = 0.5
    ema_alpha: float = 0.5
    mse_weight: float = 0.0       # extra consistency term for mean_taught only
    w_ce: float = 1.0
    w_pyramid: float = 1.0
    w_pseudo: float = 1.0
    w_mil: float = 1.0
    val_period: int = 10
    seed: int = 0

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.weak_tier not in WEAK_TIERS:
            raise ConfigError(f"unknown weak tier {self.weak_tier!r}")
        if self.regime in ("mil", "ds_mil") and self.weak_tier == "unlabeled":
            raise ConfigError(f"{self.regime} needs image-level labels; "
                              "weak_tier must be global or box")
        if self.epochs < 1 or self.batch_size < 1 or self.val_period < 1:
            raise ConfigError("epochs, batch_size and val_period must be positive")
        if self.baseline_epoch_multiplier < 1:
            raise ConfigError("baseline_epoch_multiplier must be >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr > 0 and momentum in [0, 1)")
        if not 0 <= self.lr_drop_at <= 1:
            raise ConfigError("lr_drop_at is a fraction of the schedule")
        if not 0 <= self.ema_alpha <= 1:
            raise ConfigError("ema_alpha must be in [0, 1]")
        for name in ("aug_flip_prob", "teacher_flip_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        for name in ("aug_strength", "teacher_strength"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.mse_weight < 0:
            raise ConfigError("mse_weight must be non-negative")
        if self.mse_weight > 0 and self.regime != "mean_taught":
            raise ConfigError("mse_weight only applies to mean_taught; "
                              "the consistency regime fixes its weight at 1")


@dataclass
class BatchItem:
    record_id: int
    image: np.ndarray
    is_strong: bool
    onehot: np.ndarray | None = None
    global_label: np.ndarray | None = None
    boxmask: np.ndarray | None = None


@dataclass
class HistoryRow:
    epoch: int
    step: int
    regime: str
    loss_total: float | None = None
    loss_ce: float | None = None
    loss_mlds: float | None = None
    loss_mil: float | None = None
    loss_mse: float | None = None
    lr: float | None = None
    val_miou: float | None = None


HISTORY_COLUMNS = ("epoch", "step", "regime", "loss_total", "loss_ce", "loss_mlds",
                   "loss_mil", "loss_mse", "lr", "val_miou")


def write_history_csv(rows, path):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        for r in rows:
            out = []
            for col in HISTORY_COLUMNS:
                v = getattr(r, col)
                if v is None:
                    out.append("")
                elif isinstance(v, float):
                    out.append(f"{v:.8f}")
                else:
                    out.append(v)
            w.writerow(out)


@dataclass
class TrainState:
    model: SegModel
    velocities: list
    teacher: TeacherState | None = None
    teacher_buffer: SegModel | None = None
    step: int = 0
    batch_rng: np.random.Generator | None = None
    aug_rng: np.random.Generator | None = None
    teacher_rng: np.random.Generator | None = None

    def teacher_view(self) -> SegModel:
        """Teacher parameters materialized in a model buffer for forwards."""
        load_params(self.teacher_buffer, self.teacher.params)
        return self.teacher_buffer


@dataclass
class FitResult:
    state: TrainState
    history: list
    best_params: np.ndarray
    best_val: float | None
    best_epoch: int | None
    epochs_total: int
    steps_per_epoch: int
    meta: dict = field(default_factory=dict)


def assemble_batch(dataset, split, budget: int, cfg: TrainConfig,
                   batch_rng, aug_rng) -> list:
    """Sample and augment one batch.

    Weak-consuming regimes take half the batch from the weak pool when it is
    non-empty; an empty weak pool silently degrades to an all-strong batch.
    Pools smaller than their half are sampled with replacement.
    """
    ordered = split.ordered_train
    strong_pool = ordered[:budget]
    weak_pool = ordered[budget:] if cfg.regime in _WEAK_USERS else []
    if not strong_pool:
        raise DataError("annotation budget leaves no strong scans")
    if weak_pool:
        n_weak = cfg.batch_size // 2
        n_strong = cfg.batch_size - n_weak
    else:
        n_strong, n_weak = cfg.batch_size, 0
    picks = [(strong_pool[i], True) for i in
             batch_rng.choice(len(strong_pool), size=n_strong,
                              replace=len(strong_pool) < n_strong)]
    if n_weak:
        picks += [(weak_pool[i], False) for i in
                  batch_rng.choice(len(weak_pool), size=n_weak,
                                   replace=len(weak_pool) < n_weak)]

    items = []
    for rid, is_strong in picks:
        rec = dataset.records[rid]
        spec = sample_perturbation(cfg.aug_strength, aug_rng, cfg.aug_flip_prob)
        img = apply_perturbation(rec.image, spec)
        item = BatchItem(record_id=rid, image=img, is_strong=is_strong)
        if is_strong:
            item.onehot = rec.onehot[:, :, ::-1] if spec.flip else rec.onehot
        else:
            if cfg.weak_tier in ("global", "box"):
                item.global_label = rec.global_label
            if cfg.weak_tier == "box":
                item.boxmask = rec.boxmask[:, :, ::-1] if spec.flip else rec.boxmask
        items.append(item)
    return items


def _np_softmax(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _pseudo_pyramids(state, batch, weak_idx, cfg, tap_sizes):
    """Refined pseudo-label pyramids for the weak items, teacher RNG aside."""
    imgs = np.stack([batch[j].image for j in weak_idx])
    if cfg.regime == "self_taught":
        logits = state.model.predict_std(imgs)
    else:
        specs = [sample_perturbation(cfg.teacher_strength, state.teacher_rng,
                                     cfg.teacher_flip_prob) for _ in weak_idx]
        pert = np.stack([apply_perturbation(img, sp) for img, sp in zip(imgs, specs)])
        raw = state.teacher_view().predict_std(pert)
        logits = np.stack([invert_geometric(raw[i], sp) for i, sp in enumerate(specs)])
    probs = _np_softmax(logits, axis=1)
    out = []
    for i, j in enumerate(weak_idx):
        b = batch[j]
        refined = make_pseudo_label(probs[i], b.global_label, b.boxmask)
        out.append(sup.build_pyramid(refined, tap_sizes, source="pseudo"))
    return out


def _mse_targets(state, batch, cfg):
    """Teacher softmax maps under fresh perturbations, aligned to the student."""
    specs = [sample_perturbation(cfg.teacher_strength, state.teacher_rng,
                                 cfg.teacher_flip_prob) for _ in batch]
    pert = np.stack([apply_perturbation(b.image, sp) for b, sp in zip(batch, specs)])
    probs = _np_softmax(state.teacher_view().predict_std(pert), axis=1)
    return np.stack([invert_geometric(probs[i], sp) for i, sp in enumerate(specs)])


def train_step(state: TrainState, batch, cfg: TrainConfig, tap_sizes, lr: float) -> dict:
    """One optimization step; returns the raw loss breakdown."""
    model = state.model
    strong_idx = np.array([i for i, b in enumerate(batch) if b.is_strong], dtype=np.int64)
    weak_idx = np.array([i for i, b in enumerate(batch) if not b.is_strong], dtype=np.int64)
    if strong_idx.size == 0:
        raise DataError("a batch must contain at least one strong item")

    mse_weight = 1.0 if cfg.regime == "consistency" else cfg.mse_weight
    pseudo = None
    if cfg.regime in _PSEUDO_USERS and cfg.w_pseudo != 0.0 and weak_idx.size:
        pseudo = _pseudo_pyramids(state, batch, weak_idx, cfg, tap_sizes)
    mse_tgt = None
    if cfg.regime in _TEACHER_USERS and mse_weight != 0.0:
        mse_tgt = _mse_targets(state, batch, cfg)

    imgs = np.stack([b.image for b in batch])
    taps = model.features(Tensor(imgs), "train")
    std_logits = model.logits_std(taps, "train")

    terms = {}  # name -> (Tensor, weight)
    ce_logits = ad.index_select0(std_logits, strong_idx)
    ce_target = np.stack([batch[i].onehot for i in strong_idx])
    terms["ce"] = (sup.loss_ce(ce_logits, ce_target), cfg.w_ce)

    if "pyramid" in model.head_roles:
        pyr_logits = model.logits_pyramid(taps, "train")
        gt_pyrs = [sup.build_pyramid(batch[i].onehot, tap_sizes) for i in strong_idx]
        lv_logits = [ad.index_select0(pl, strong_idx) for pl in pyr_logits]
        lv_targets = [np.stack([p.levels[k] for p in gt_pyrs])
                      for k in range(len(tap_sizes))]
        terms["mlds_gt"] = (sup.loss_mlds(lv_logits, lv_targets), cfg.w_pyramid)
        if pseudo is not None:
            wl = [ad.index_select0(pl, weak_idx) for pl in pyr_logits]
            wt = [np.stack([p.levels[k] for p in pseudo])
                  for k in range(len(tap_sizes))]
            terms["mlds_pseudo"] = (sup.loss_mlds(wl, wt), cfg.w_pseudo)

    if model.heads_mil is not None and weak_idx.size and cfg.w_mil != 0.0:
        g = np.stack([batch[i].global_label for i in weak_idx])
        mil_sum = None
        for k, head in sorted(model.heads_mil.items()):
            feat = ad.index_select0(taps[k], weak_idx)
            term = sup.loss_mil(feat, lambda t, h=head: h(t, "train"), g)
            mil_sum = term if mil_sum is None else ad.add(mil_sum, term)
        terms["mil"] = (ad.scale(mil_sum, 1.0 / len(model.heads_mil)), cfg.w_mil)

    if mse_tgt is not None:
        student_probs = ad.softmax_channels(std_logits)
        terms["mse"] = (consistency_mse(student_probs, mse_tgt), mse_weight)

    total = None
    breakdown = {}
    for name in ("ce", "mlds_gt", "mlds_pseudo", "mil", "mse"):
        if name not in terms:
            continue
        term, weight = terms[name]
        breakdown[name] = float(term.data)
        if weight == 0.0:
            continue
        piece = ad.scale(term, weight)
        total = piece if total is None else ad.add(total, piece)
    breakdown["total"] = float(total.data)
    if not np.isfinite(breakdown["total"]):
        raise DivergenceError(f"non-finite loss at step {state.step}: {breakdown}")

    total.backward()
    params = model.parameters()
    ad.sgd_momentum_step(params, [p.grad for p in params], state.velocities,
                         lr, cfg.momentum)
    for p in params:
        p.zero_grad()
    if state.teacher is not None:
        ema_update(state.teacher, snapshot_params(model))
    state.step += 1
    return breakdown


def evaluate_ids(model: SegModel, dataset, ids, batch_size: int = 16):
    """Pooled per-class IoU and mIoU of the standard head over the given records."""
    acc = ConfusionAccumulator(dataset.num_classes)
    classes = np.arange(dataset.num_classes)
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        imgs = np.stack([dataset.records[i].image for i in chunk])
        grids = model.predict_std(imgs).argmax(axis=1)
        pred = (grids[:, None] == classes[None, :, None, None]).astype(np.uint8)
        true = np.stack([dataset.records[i].onehot for i in chunk])
        acc.add(pred, true)
    return acc.iou_per_class(), acc.miou()


def steps_for(cfg: TrainConfig, split, budget: int) -> tuple:
    """(epochs_total, steps_per_epoch) for this regime and pool."""
    mult = cfg.baseline_epoch_multiplier if cfg.regime == "baseline" else 1
    pool = len(split.ordered_train) if cfg.regime in _WEAK_USERS else budget
    return cfg.epochs * mult, max(1, math.ceil(pool / cfg.batch_size))


def fit(cfg: TrainConfig, mcfg: ModelConfig, dataset, split, budget: int,
        out_dir=None, progress=None) -> FitResult:
    """Train one model; returns the best-validation parameters and history.

    The retained parameters are those of the inference network: the EMA
    teacher for mean_taught, the student otherwise.  With out_dir set, writes
    history.csv and best.fseg there.  The progress callback receives
    (epoch, epochs_total, last_history_row, train_state) after each epoch;
    a truthy return value stops training at that epoch.
    """
    cfg.validate()
    mcfg.validate()
    if not 1 <= budget <= len(split.ordered_train):
        raise ConfigError(f"budget {budget} outside 1..{len(split.ordered_train)}")
    if dataset.num_classes != mcfg.num_classes:
        raise ConfigError("model num_classes does not match dataset")

    init_ss, batch_ss, aug_ss, teacher_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    model = build_model(mcfg, head_roles_for(cfg.regime))
    init_xavier(model, int(init_ss.generate_state(1)[0]))
    state = TrainState(model=model,
                       velocities=[np.zeros_like(p.data) for p in model.parameters()])
    state.batch_rng = np.random.default_rng(batch_ss)
    state.aug_rng = np.random.default_rng(aug_ss)
    state.teacher_rng = np.random.default_rng(teacher_ss)
    if cfg.regime in _TEACHER_USERS:
        state.teacher = TeacherState.from_student(snapshot_params(model), cfg.ema_alpha)
        state.teacher_buffer = build_model(mcfg, head_roles_for(cfg.regime))

    epochs_total, steps_per_epoch = steps_for(cfg, split, budget)
    drop_epoch = math.floor(cfg.lr_drop_at * epochs_total)
    tap_sizes = mcfg.tap_sizes()
    val_ids = [r.id for r in dataset.records if r.volume in set(split.val_volumes)]

    history = []
    best_params, best_val, best_epoch = None, None, None
    for epoch in range(epochs_total):
        lr = cfg.lr if epoch < drop_epoch else cfg.lr * cfg.lr_late_factor
        sums = defaultdict(float)
        for _ in range(steps_per_epoch):
            batch = assemble_batch(dataset, split, budget, cfg,
                                   state.batch_rng, state.aug_rng)
            breakdown = train_step(state, batch, cfg, tap_sizes, lr)
            for k, v in breakdown.items():
                sums[k] += v
        n = steps_per_epoch
        history.append(HistoryRow(
            epoch=epoch, step=state.step, regime=cfg.regime,
            loss_total=sums["total"] / n,
            loss_ce=sums["ce"] / n if "ce" in sums else None,
            loss_mlds=((sums.get("mlds_gt", 0.0) + sums.get("mlds_pseudo", 0.0)) / n
                       if ("mlds_gt" in sums or "mlds_pseudo" in sums) else None),
            loss_mil=sums["mil"] / n if "mil" in sums else None,
            loss_mse=sums["mse"] / n if "mse" in sums else None,
            lr=lr))
        if (epoch + 1) % cfg.val_period == 0 and val_ids:
            infer = state.teacher_view() if cfg.regime == "mean_taught" else model
            _, miou = evaluate_ids(infer, dataset, val_ids, cfg.batch_size)
            history.append(HistoryRow(epoch=epoch, step=state.step, regime=cfg.regime,
                                      val_miou=miou))
            if miou is not None and (best_val is None or miou > best_val):
                best_val, best_epoch = miou, epoch
                best_params = (state.teacher.params.copy()
                               if cfg.regime == "mean_taught"
                               else snapshot_params(model))
        if progress is not None and progress(epoch, epochs_total, history[-1], state):
            break  # callback asked to stop early (e.g. a target was reached)

    if best_params is None:  # no validation happened; keep the final weights
        best_params = (state.teacher.params.copy() if cfg.regime == "mean_taught"
                       else snapshot_params(model))

    meta = {
        "regime": cfg.regime,
        "weak_tier": cfg.weak_tier,
        "budget": budget,
        "split_id": split.split_id,
        "seed": cfg.seed,
        "epochs_total": epochs_total,
        "steps_per_epoch": steps_per_epoch,
        "best_epoch": best_epoch,
        "best_val_miou": best_val,
        "inference_source": "teacher" if cfg.regime == "mean_taught" else "student",
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_history_csv(history, out / "history.csv")
        ckpt = build_model(mcfg, head_roles_for(cfg.regime))
        load_params(ckpt, best_params)
        save_checkpoint(out / "best.fseg", ckpt, meta)
    return FitResult(state=state, history=history, best_params=best_params,
                     best_val=best_val, best_epoch=best_epoch,
                     epochs_total=epochs_total, steps_per_epoch=steps_per_epoch,
                     meta=meta)
