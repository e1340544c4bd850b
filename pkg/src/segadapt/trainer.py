"""Three-stage training: supervised pretraining, adversarial feature
alignment, and consistency fine-tuning, plus the method-variant registry
and the degenerate-solution guard.

A run is a single thread of parameter mutation driven entirely by one seed:
torch's global generator covers weight init and dropout, a SeededRng tree
covers batching and augmentation draws. With torch limited to one thread,
repeated runs of the same (variant, seed, config) produce bitwise identical
checkpoints and manifests.

Variant -> stage pipeline:
    no_adaptation     stage 1 on source only
    supervised_upper  stage 1 on pooled labeled source + target
    adversarial       stages 1-2
    mean_teacher      stage 1 + EMA-teacher consistency stage
    tc                stages 1, 3 (no discriminator, beta inactive)
    tc_adversarial    stages 1-2-3
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .augment import AffineParams, AugmentationSpec, compose_and_apply, replay_spatial
from .core import DatasetSplit, LabeledSample, SeededRng, binarize
from .evaluation import dice_score
from .losses import DomainTarget, LossWeights, adversarial_loss, consistency_loss, soft_dice_loss
from .nets import (DiscriminatorConfig, DomainDiscriminator, SegmenterConfig,
                   UNet, config_hash, freeze, save_checkpoint, unfreeze)


class TrainerError(RuntimeError):
    pass


VARIANTS = ("no_adaptation", "adversarial", "mean_teacher", "tc",
            "tc_adversarial", "supervised_upper")

VARIANT_STAGES: dict = {
    "no_adaptation": ("stage1",),
    "supervised_upper": ("stage1",),
    "adversarial": ("stage1", "stage2"),
    "mean_teacher": ("stage1", "mean_teacher"),
    "tc": ("stage1", "stage3"),
    "tc_adversarial": ("stage1", "stage2", "stage3"),
}


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageSchedule:
    """Epoch budgets, decay milestones, and the stage-2 stopping band.

    Defaults are the full-scale schedule; ``scaled`` shrinks every epoch
    count and milestone by one divisor (ceil), keeping the schedule's shape.
    Milestones are 1-based epoch numbers: the decayed rate applies from the
    epoch after the milestone.
    """

    stage1_epochs: int = 400
    stage1_milestones: tuple = (30, 350)
    stage2_warmup_epochs: int = 30
    stage2_joint_epochs: int = 100
    stage3_epochs: int = 300
    stage3_milestones: tuple = (200, 250)
    lr: float = 1e-3
    disc_lr: float | None = None  # None: follow lr; desk runs want a hotter disc
    gamma: float = 0.1
    fooled_delta: float = 0.15
    batch_size: int = 4
    guard_window: int = 3
    ema_decay: float = 0.99
    val_every: int = 1

    def __post_init__(self):
        for name in ("stage1_epochs", "stage2_warmup_epochs",
                     "stage2_joint_epochs", "stage3_epochs"):
            if getattr(self, name) < 0:
                raise TrainerError(f"{name} must be nonnegative")
        for ms_name, ep_name in (("stage1_milestones", "stage1_epochs"),
                                 ("stage3_milestones", "stage3_epochs")):
            ms = tuple(int(m) for m in getattr(self, ms_name))
            object.__setattr__(self, ms_name, ms)
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise TrainerError(f"{ms_name} must be strictly increasing, got {ms}")
            if ms and ms[-1] >= getattr(self, ep_name):
                raise TrainerError(f"{ms_name} must lie below {ep_name}")
        if not 0.0 < self.gamma <= 1.0:
            raise TrainerError("gamma must be in (0, 1]")
        if not 0.0 < self.fooled_delta < 0.5:
            raise TrainerError("fooled_delta must be in (0, 0.5)")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise TrainerError("ema_decay must be in [0, 1]")
        if self.batch_size < 1 or self.guard_window < 1 or self.val_every < 1:
            raise TrainerError("batch_size, guard_window, val_every must be >= 1")

    def scaled(self, divisor: int) -> "StageSchedule":
        if divisor < 1:
            raise TrainerError("divisor must be >= 1")
        up = lambda n: math.ceil(n / divisor)
        return StageSchedule(
            stage1_epochs=up(self.stage1_epochs),
            stage1_milestones=tuple(up(m) for m in self.stage1_milestones),
            stage2_warmup_epochs=up(self.stage2_warmup_epochs),
            stage2_joint_epochs=up(self.stage2_joint_epochs),
            stage3_epochs=up(self.stage3_epochs),
            stage3_milestones=tuple(up(m) for m in self.stage3_milestones),
            lr=self.lr, disc_lr=self.disc_lr, gamma=self.gamma,
            fooled_delta=self.fooled_delta, batch_size=self.batch_size,
            guard_window=self.guard_window, ema_decay=self.ema_decay,
            val_every=self.val_every)

    @classmethod
    def desk(cls, divisor: int = 10, **kw) -> "StageSchedule":
        """Compressed schedule. Two defaults differ from the full-scale
        profile because scaling cuts the optimizer-step budget quadratically
        (epochs and dataset both shrink): the discriminator learning rate is
        hot (1e-2), and batches are single samples so each epoch yields ten
        steps instead of three on the 20-subject benchmark."""
        kw.setdefault("disc_lr", 1e-2)
        kw.setdefault("batch_size", 1)
        return cls(**kw).scaled(divisor)

    def lr_at(self, epoch: int, milestones) -> float:
        """lr0 * gamma^(number of passed milestones), epoch 1-based."""
        return self.lr * self.gamma ** sum(1 for m in milestones if epoch > m)

    @property
    def disc_lr_effective(self) -> float:
        return self.lr if self.disc_lr is None else self.disc_lr


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


# ---------------------------------------------------------------------------
# EMA teacher and degenerate guard
# ---------------------------------------------------------------------------

class EmaTeacher:
    """Exponential moving average copy of a student network.

    Floating-point parameters and buffers follow teacher <- d*teacher +
    (1-d)*student; integer buffers (batch counters) are copied through.
    """

    def __init__(self, student: UNet, decay: float):
        if not 0.0 <= decay <= 1.0:
            raise TrainerError(f"decay must be in [0, 1], got {decay}")
        self.decay = decay
        self.net = copy.deepcopy(student)
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()

    @torch.no_grad()
    def update(self, student: UNet) -> None:
        d = self.decay
        for t, s in zip(self.net.parameters(), student.parameters()):
            t.mul_(d).add_(s, alpha=1.0 - d)
        for t, s in zip(self.net.buffers(), student.buffers()):
            if t.dtype.is_floating_point:
                t.mul_(d).add_(s, alpha=1.0 - d)
            else:
                t.copy_(s)


class DegenerateGuard:
    """Trips when target predictions collapse to (nearly) all foreground or
    all background for ``window`` consecutive observations."""

    def __init__(self, window: int = 3, low: float = 1e-5, high: float = 0.5):
        if window < 1:
            raise TrainerError("guard window must be >= 1")
        self.window = window
        self.low = low
        self.high = high
        self.streak = 0
        self.tripped = False
        self.history: list = []

    def observe(self, probs) -> bool:
        """probs: batch of probability maps; returns the tripped flag."""
        arr = probs.detach().numpy() if isinstance(probs, torch.Tensor) else np.asarray(probs)
        frac = float((arr >= 0.5).mean())
        self.history.append(frac)
        if frac > self.high or frac < self.low:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.window:
            self.tripped = True
        return self.tripped


# ---------------------------------------------------------------------------
# batching and tensor plumbing
# ---------------------------------------------------------------------------

def _images_tensor(samples) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image.pixels for s in samples])[:, None])


def _masks_tensor(samples) -> torch.Tensor:
    return torch.from_numpy(
        np.stack([s.mask.labels for s in samples])[:, None].astype(np.float64))


def _epoch_batches(n: int, batch_size: int, rng: SeededRng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _cycled_indices(n: int, count: int, rng: SeededRng) -> np.ndarray:
    """Concatenated fresh permutations, truncated to ``count`` indices, so a
    short stream can feed as many steps as a longer one."""
    parts = []
    total = 0
    while total < count:
        parts.append(rng.permutation(n))
        total += n
    return np.concatenate(parts)[:count]


def _two_stream_batches(n_a: int, n_b: int, batch_size: int, rng: SeededRng):
    """Paired (source, target) index batches; the shorter stream cycles."""
    steps = max(math.ceil(n_a / batch_size), math.ceil(n_b / batch_size))
    a = _cycled_indices(n_a, steps * batch_size, rng)
    b = _cycled_indices(n_b, steps * batch_size, rng)
    return [(a[i * batch_size:(i + 1) * batch_size],
             b[i * batch_size:(i + 1) * batch_size]) for i in range(steps)]


def torch_replay_spatial(pred: torch.Tensor, affines) -> torch.Tensor:
    """Differentiable counterpart of augment.replay_spatial for a batch of
    maps (N, 1, H, W). ``affines`` is one AffineParams-or-None per sample;
    None entries pass through. Uses the identical inverse coordinate map and
    bilinear/zero-fill convention, so values match the scipy path."""
    n, _, h, w = pred.shape
    if len(affines) != n:
        raise TrainerError(f"need {n} affine entries, got {len(affines)}")
    rows = torch.arange(h, dtype=pred.dtype)
    cols = torch.arange(w, dtype=pred.dtype)
    rr, cc = torch.meshgrid(rows, cols, indexing="ij")
    center_r, center_c = (h - 1) / 2.0, (w - 1) / 2.0
    out = []
    for i, aff in enumerate(affines):
        if aff is None:
            out.append(pred[i:i + 1])
            continue
        inv = np.linalg.inv(aff.matrix())
        lin = inv[:2, :2]
        off_r = center_r + inv[0, 2] - (lin[0, 0] * center_r + lin[0, 1] * center_c)
        off_c = center_c + inv[1, 2] - (lin[1, 0] * center_r + lin[1, 1] * center_c)
        r_in = lin[0, 0] * rr + lin[0, 1] * cc + off_r
        c_in = lin[1, 0] * rr + lin[1, 1] * cc + off_c
        grid = torch.stack([2.0 * c_in / (w - 1) - 1.0,
                            2.0 * r_in / (h - 1) - 1.0], dim=-1)[None]
        sampled = F.grid_sample(pred[i:i + 1], grid, mode="bilinear",
                                padding_mode="zeros", align_corners=True)
        # scipy's constant mode fills strictly-outside samples with cval
        # instead of blending into the pad, so mask rather than rely on
        # grid_sample's zero padding
        inside = ((r_in >= 0) & (r_in <= h - 1) &
                  (c_in >= 0) & (c_in <= w - 1)).to(pred.dtype)
        out.append(sampled * inside[None, None])
    return torch.cat(out, dim=0)


def _augment_batch(samples, spec: AugmentationSpec, rng: SeededRng):
    """Draw one augmentation per sample. Returns (augmented image tensor,
    affines for alignment, records)."""
    pixels, affines, records = [], [], []
    for s in samples:
        aug, rec = compose_and_apply(s.image, spec, rng)
        pixels.append(aug.pixels)
        affines.append(rec.affine)
        records.append(rec)
    return torch.from_numpy(np.stack(pixels)[:, None]), affines, records


# ---------------------------------------------------------------------------
# evaluation probes used inside training
# ---------------------------------------------------------------------------

def _mean_val_dice(f: UNet, samples) -> float:
    f.eval()
    with torch.no_grad():
        probs, _ = f(_images_tensor(samples))
    scores = [dice_score(binarize(probs[i, 0].numpy(), 0.5), s.mask)
              for i, s in enumerate(samples)]
    return float(np.mean(scores))


def _features(f: UNet, samples) -> torch.Tensor:
    f.eval()
    with torch.no_grad():
        _, h = f(_images_tensor(samples))
    return h


def domain_accuracy(f: UNet, d: DomainDiscriminator, samples, domain_to_idx) -> float:
    """Balanced discriminator accuracy on ``samples``: mean of per-domain
    accuracies, so unequal held-out sizes do not skew the estimate."""
    d.eval()
    h = _features(f, samples)
    with torch.no_grad():
        picked = d(h).argmax(dim=1).numpy()
    truth = np.array([domain_to_idx[s.image.domain_id] for s in samples])
    per_domain = [float((picked[truth == k] == k).mean())
                  for k in np.unique(truth)]
    return float(np.mean(per_domain))


def _domain_map(*sample_groups) -> dict:
    ids = sorted({s.image.domain_id for group in sample_groups for s in group})
    if len(ids) < 2:
        raise TrainerError(f"adversarial stages need >= 2 domains, got {ids}")
    return {dom: k for k, dom in enumerate(ids)}


def _onehot(samples, domain_to_idx) -> DomainTarget:
    return DomainTarget.from_indices(
        [domain_to_idx[s.image.domain_id] for s in samples], len(domain_to_idx))


# ---------------------------------------------------------------------------
# stage results
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    name: str
    metrics: list
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "epochs_run": len(self.metrics),
                "metrics": self.metrics, **self.extra}


def _clone_state(net) -> dict:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


# ---------------------------------------------------------------------------
# stage 1: supervised pretraining on labeled data
# ---------------------------------------------------------------------------

def _augmented_labeled_batch(samples, spec: AugmentationSpec, rng: SeededRng):
    """Fresh augmentation draw per sample; the mask follows the drawn affine
    (nearest neighbor), intensity operators leave it untouched."""
    imgs, masks = [], []
    for s in samples:
        aug, rec = compose_and_apply(s.image, spec, rng)
        imgs.append(aug.pixels)
        masks.append(replay_spatial(rec, s.mask.labels.astype(np.float64),
                                    interpolation="nearest"))
    return (torch.from_numpy(np.stack(imgs)[:, None]),
            torch.from_numpy(np.stack(masks)[:, None]))


def run_stage1_supervised(f: UNet, source_split: DatasetSplit,
                          sched: StageSchedule, rng: SeededRng,
                          augment: AugmentationSpec | None = None) -> StageResult:
    """Adam + milestone decay on the dice loss; afterwards ``f`` carries the
    weights of the epoch with the highest validation Dice (the untouched
    initialization when the epoch budget is zero). ``augment`` turns on
    classic stochastic data augmentation of the labeled batches; validation
    always sees clean images."""
    train, val = list(source_split.train), list(source_split.val)
    if not train:
        raise TrainerError("stage 1 requires labeled training samples")
    if not val:
        raise TrainerError("stage 1 requires a nonempty validation split")
    opt = torch.optim.Adam(f.parameters(), lr=sched.lr)
    batch_rng = rng.child("stage1:batches")
    aug_rng = rng.child("stage1:augment")
    metrics: list = []
    best_dice, best_epoch, best_state = -1.0, 0, None
    for epoch in range(1, sched.stage1_epochs + 1):
        lr = sched.lr_at(epoch, sched.stage1_milestones)
        _set_lr(opt, lr)
        f.train()
        losses = []
        for idx in _epoch_batches(len(train), sched.batch_size, batch_rng):
            chosen = [train[i] for i in idx]
            if augment is not None:
                images, masks = _augmented_labeled_batch(chosen, augment, aug_rng)
            else:
                images, masks = _images_tensor(chosen), _masks_tensor(chosen)
            probs, _ = f(images)
            loss = soft_dice_loss(probs, masks)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        row = {"epoch": epoch, "lr": lr, "sup": float(np.mean(losses))}
        if epoch % sched.val_every == 0 or epoch == sched.stage1_epochs:
            row["val_dice"] = _mean_val_dice(f, val)
            if row["val_dice"] > best_dice:
                best_dice, best_epoch, best_state = row["val_dice"], epoch, _clone_state(f)
        metrics.append(row)
    if best_state is not None:
        f.load_state_dict(best_state)
    return StageResult("stage1", metrics,
                       {"best_epoch": best_epoch, "best_val_dice": best_dice})


# ---------------------------------------------------------------------------
# stage 2: adversarial feature alignment
# ---------------------------------------------------------------------------

def _disc_update(f, d, d_opt, src_batch, tgt_batch, domain_to_idx) -> float:
    """One discriminator step on detached features. The segmenter runs in
    eval mode here so its batch-norm statistics cannot drift during a phase
    in which its parameters are contractually frozen."""
    f.eval()
    with torch.no_grad():
        _, h_s = f(_images_tensor(src_batch))
        _, h_t = f(_images_tensor(tgt_batch))
    d.train()
    logits = d(torch.cat([h_s, h_t]))
    loss = adversarial_loss(logits, _onehot(list(src_batch) + list(tgt_batch), domain_to_idx))
    d_opt.zero_grad()
    loss.backward()
    d_opt.step()
    return float(loss.detach())


def run_stage2_adversarial(f: UNet, d: DomainDiscriminator,
                           source_split: DatasetSplit, target_split: DatasetSplit,
                           sched: StageSchedule, weights: LossWeights,
                           rng: SeededRng) -> StageResult:
    """Phase A trains the discriminator on frozen-segmenter features; phase B
    alternates discriminator and segmenter updates (sup - beta*adv) until the
    discriminator is fooled on held-out features or the budget ends.

    Held-out accuracy uses source validation and target test samples; those
    never feed a gradient in this stage.
    """
    src_train, tgt_train = list(source_split.train), list(target_split.train)
    if not src_train or not tgt_train:
        raise TrainerError("stage 2 requires source and target training samples")
    heldout = list(source_split.val) + (list(target_split.test) or list(target_split.val))
    held_domains = {s.image.domain_id for s in heldout}
    if len(held_domains) < 2:
        raise TrainerError("stage 2 requires held-out samples from both domains")
    domain_to_idx = _domain_map(src_train, tgt_train)
    if d.cfg.n_domains != len(domain_to_idx):
        raise TrainerError(f"discriminator emits {d.cfg.n_domains} logits "
                           f"but data spans {len(domain_to_idx)} domains")

    d_opt = torch.optim.Adam(d.parameters(), lr=sched.disc_lr_effective)
    f_opt = torch.optim.Adam(f.parameters(), lr=sched.lr)
    batch_rng = rng.child("stage2:batches")
    metrics: list = []

    # phase A: discriminator warmup against a frozen segmenter
    freeze(f)
    for epoch in range(1, sched.stage2_warmup_epochs + 1):
        losses = [_disc_update(f, d, d_opt, [src_train[i] for i in ia],
                               [tgt_train[i] for i in ib], domain_to_idx)
                  for ia, ib in _two_stream_batches(len(src_train), len(tgt_train),
                                                    sched.batch_size, batch_rng)]
        metrics.append({"epoch": epoch, "phase": "warmup",
                        "disc_lr": sched.disc_lr_effective,
                        "disc": float(np.mean(losses)),
                        "accuracy": domain_accuracy(f, d, heldout, domain_to_idx)})
    warmup_accuracy = metrics[-1]["accuracy"] if metrics else None
    if warmup_accuracy is not None and warmup_accuracy <= 0.5 + sched.fooled_delta:
        unfreeze(f)
        raise TrainerError(
            f"discriminator reached only {warmup_accuracy:.3f} accuracy after warmup; "
            "features may already be aligned or the tap is misconfigured")
    unfreeze(f)

    # phase B: alternating updates until fooled
    fooled_epoch = None
    for epoch in range(1, sched.stage2_joint_epochs + 1):
        disc_losses, sup_losses, adv_losses = [], [], []
        for ia, ib in _two_stream_batches(len(src_train), len(tgt_train),
                                          sched.batch_size, batch_rng):
            src_batch = [src_train[i] for i in ia]
            tgt_batch = [tgt_train[i] for i in ib]
            disc_losses.append(_disc_update(f, d, d_opt, src_batch, tgt_batch, domain_to_idx))
            f.train()
            d.eval()  # deterministic fooling signal: no discriminator dropout
            probs_s, h_s = f(_images_tensor(src_batch))
            _, h_t = f(_images_tensor(tgt_batch))
            sup = soft_dice_loss(probs_s, _masks_tensor(src_batch))
            adv = adversarial_loss(d(torch.cat([h_s, h_t])),
                                   _onehot(src_batch + tgt_batch, domain_to_idx))
            loss = sup - weights.beta * adv
            f_opt.zero_grad()
            d_opt.zero_grad()
            loss.backward()
            f_opt.step()
            sup_losses.append(float(sup.detach()))
            adv_losses.append(float(adv.detach()))
        acc = domain_accuracy(f, d, heldout, domain_to_idx)
        metrics.append({"epoch": epoch, "phase": "joint", "lr": sched.lr,
                        "disc_lr": sched.disc_lr_effective,
                        "disc": float(np.mean(disc_losses)),
                        "sup": float(np.mean(sup_losses)),
                        "adv": float(np.mean(adv_losses)), "accuracy": acc})
        if abs(acc - 0.5) <= sched.fooled_delta:
            fooled_epoch = epoch
            break
    return StageResult("stage2", metrics,
                       {"warmup_accuracy": warmup_accuracy, "fooled_epoch": fooled_epoch,
                        "final_accuracy": metrics[-1]["accuracy"] if metrics else None})


# ---------------------------------------------------------------------------
# stage 3: consistency training
# ---------------------------------------------------------------------------

def _consistency_term(f: UNet, tgt_batch, spec: AugmentationSpec,
                      aug_rng: SeededRng, paired: bool):
    """Dice disagreement between two predictions of the same anatomy.

    Unpaired: prediction on the original image, spatially re-aligned, against
    the prediction on its augmented version. Paired: each acquisition is
    augmented independently and both predictions are aligned back to the
    subject frame. Gradients flow through both branches.
    """
    if paired:
        a_imgs, a_aff, recs_a = _augment_batch(tgt_batch, spec, aug_rng)
        b_pixels, b_aff, recs_b = [], [], []
        for s in tgt_batch:
            aug, rec = compose_and_apply(s.partner, spec, aug_rng)
            b_pixels.append(aug.pixels)
            b_aff.append(rec.affine)
            recs_b.append(rec)
        b_imgs = torch.from_numpy(np.stack(b_pixels)[:, None])
        pred_a, _ = f(a_imgs)
        pred_b, _ = f(b_imgs)
        back_a = [aff.inverse() if aff is not None else None for aff in a_aff]
        back_b = [aff.inverse() if aff is not None else None for aff in b_aff]
        aligned_a = torch_replay_spatial(pred_a, back_a).clamp(0.0, 1.0)
        aligned_b = torch_replay_spatial(pred_b, back_b).clamp(0.0, 1.0)
        return consistency_loss(aligned_a, aligned_b), len(recs_a) + len(recs_b)
    aug_imgs, affines, recs = _augment_batch(tgt_batch, spec, aug_rng)
    pred_orig, _ = f(_images_tensor(tgt_batch))
    pred_aug, _ = f(aug_imgs)
    aligned = torch_replay_spatial(pred_orig, affines).clamp(0.0, 1.0)
    return consistency_loss(aligned, pred_aug), len(recs)


def run_stage3_consistency(f: UNet, d, source_split: DatasetSplit,
                           target_split: DatasetSplit, spec: AugmentationSpec,
                           sched: StageSchedule, weights: LossWeights,
                           rng: SeededRng, *, paired: bool = False,
                           guard: DegenerateGuard | None = None) -> StageResult:
    """Optimize sup + alpha*cons (- beta*adv when a discriminator is passed)
    with milestone decay. A per-epoch degenerate guard watches target
    predictions; a trip stops the stage and is flagged, never silently
    continued."""
    src_train, tgt_train = list(source_split.train), list(target_split.train)
    if not src_train or not tgt_train:
        raise TrainerError("stage 3 requires source and target training samples")
    use_adv = d is not None
    domain_to_idx = _domain_map(src_train, tgt_train) if use_adv else {}
    guard = guard or DegenerateGuard(window=sched.guard_window)
    f_opt = torch.optim.Adam(f.parameters(), lr=sched.lr)
    d_opt = torch.optim.Adam(d.parameters(), lr=sched.disc_lr_effective) if use_adv else None
    batch_rng = rng.child("stage3:batches")
    aug_rng = rng.child("stage3:augment")

    # fixed probe batch for the stochastic-descent diagnostic: the objective
    # is re-evaluated on frozen inputs (and one frozen augmentation draw)
    probe_src = src_train[:sched.batch_size]
    probe_tgt = tgt_train[:sched.batch_size]
    probe_rng = rng.child("stage3:probe")
    if paired:
        probe_pix, probe_aff = [], []
        for s in probe_tgt:
            aug, rec = compose_and_apply(s.image, spec, probe_rng)
            probe_pix.append(aug.pixels)
            probe_aff.append(rec.affine)
    else:
        probe_aug, probe_aff, _ = _augment_batch(probe_tgt, spec, probe_rng)

    def probe_objective() -> float:
        f.eval()
        with torch.no_grad():
            probs_s, h_s = f(_images_tensor(probe_src))
            sup = soft_dice_loss(probs_s, _masks_tensor(probe_src))
            pred_orig, h_t = f(_images_tensor(probe_tgt))
            if paired:
                # original prediction already sits in the subject frame; the
                # augmented one is warped back to it
                aligned = pred_orig
                pred_aug, _ = f(torch.from_numpy(np.stack(probe_pix)[:, None]))
                pred_aug = torch_replay_spatial(
                    pred_aug, [a.inverse() if a is not None else None for a in probe_aff])
            else:
                aligned = torch_replay_spatial(pred_orig, probe_aff)
                pred_aug, _ = f(probe_aug)
            cons = consistency_loss(aligned.clamp(0.0, 1.0), pred_aug.clamp(0.0, 1.0))
            total = float(sup + weights.alpha * cons)
            if use_adv:
                d.eval()
                adv = adversarial_loss(d(torch.cat([h_s, h_t])),
                                       _onehot(probe_src + probe_tgt, domain_to_idx))
                total -= float(weights.beta * adv)
        return total

    metrics: list = []
    augment_draws = 0
    for epoch in range(1, sched.stage3_epochs + 1):
        lr = sched.lr_at(epoch, sched.stage3_milestones)
        _set_lr(f_opt, lr)
        sup_l, cons_l, adv_l, tot_l = [], [], [], []
        for ia, ib in _two_stream_batches(len(src_train), len(tgt_train),
                                          sched.batch_size, batch_rng):
            src_batch = [src_train[i] for i in ia]
            tgt_batch = [tgt_train[i] for i in ib]
            if use_adv:
                _disc_update(f, d, d_opt, src_batch, tgt_batch, domain_to_idx)
            f.train()
            probs_s, h_s = f(_images_tensor(src_batch))
            sup = soft_dice_loss(probs_s, _masks_tensor(src_batch))
            cons, n_draws = _consistency_term(f, tgt_batch, spec, aug_rng, paired)
            augment_draws += n_draws
            loss = sup + weights.alpha * cons
            adv_val = 0.0
            if use_adv:
                d.eval()
                _, h_t = f(_images_tensor(tgt_batch))
                adv = adversarial_loss(d(torch.cat([h_s, h_t])),
                                       _onehot(src_batch + tgt_batch, domain_to_idx))
                loss = loss - weights.beta * adv
                adv_val = float(adv.detach())
            f_opt.zero_grad()
            if d_opt is not None:
                d_opt.zero_grad()
            loss.backward()
            f_opt.step()
            sup_l.append(float(sup.detach()))
            cons_l.append(float(cons.detach()))
            adv_l.append(adv_val)
            tot_l.append(float(loss.detach()))
        f.eval()
        with torch.no_grad():
            tgt_probs, _ = f(_images_tensor(tgt_train))
        tripped = guard.observe(tgt_probs)
        row = {"epoch": epoch, "lr": lr, "sup": float(np.mean(sup_l)),
               "cons": float(np.mean(cons_l)), "total": float(np.mean(tot_l)),
               "target_fg_fraction": guard.history[-1],
               "probe_total": probe_objective()}
        if use_adv:
            row["adv"] = float(np.mean(adv_l))
        metrics.append(row)
        if tripped:
            break
    return StageResult("stage3", metrics,
                       {"degenerate": guard.tripped, "augment_draws": augment_draws,
                        "adversarial_active": use_adv})


# ---------------------------------------------------------------------------
# mean teacher
# ---------------------------------------------------------------------------

def mean_teacher_step(student: UNet, teacher: EmaTeacher, optimizer,
                      source_images: torch.Tensor, source_masks: torch.Tensor,
                      target_images: torch.Tensor, target_aug_images: torch.Tensor,
                      align_affines, weights: LossWeights) -> dict:
    """One student update against the teacher's (aligned, detached)
    prediction, followed by the EMA update of the teacher."""
    with torch.no_grad():
        teacher_pred, _ = teacher.net(target_images)
    aligned = torch_replay_spatial(teacher_pred, align_affines).clamp(0.0, 1.0)
    student.train()
    pred_aug, _ = student(target_aug_images)
    probs_s, _ = student(source_images)
    sup = soft_dice_loss(probs_s, source_masks)
    cons = consistency_loss(aligned.detach(), pred_aug)
    loss = sup + weights.alpha * cons
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    teacher.update(student)
    return {"sup": float(sup.detach()), "cons": float(cons.detach()),
            "total": float(loss.detach())}


def run_stage_mean_teacher(f: UNet, source_split: DatasetSplit,
                           target_split: DatasetSplit, spec: AugmentationSpec,
                           sched: StageSchedule, weights: LossWeights,
                           rng: SeededRng,
                           guard: DegenerateGuard | None = None) -> StageResult:
    """Consistency stage against an EMA teacher instead of the student's own
    prediction; shares the stage-3 epoch budget and decay schedule."""
    src_train, tgt_train = list(source_split.train), list(target_split.train)
    if not src_train or not tgt_train:
        raise TrainerError("mean teacher requires source and target training samples")
    guard = guard or DegenerateGuard(window=sched.guard_window)
    teacher = EmaTeacher(f, sched.ema_decay)
    opt = torch.optim.Adam(f.parameters(), lr=sched.lr)
    batch_rng = rng.child("mt:batches")
    aug_rng = rng.child("mt:augment")
    metrics: list = []
    augment_draws = 0
    for epoch in range(1, sched.stage3_epochs + 1):
        lr = sched.lr_at(epoch, sched.stage3_milestones)
        _set_lr(opt, lr)
        rows = []
        for ia, ib in _two_stream_batches(len(src_train), len(tgt_train),
                                          sched.batch_size, batch_rng):
            src_batch = [src_train[i] for i in ia]
            tgt_batch = [tgt_train[i] for i in ib]
            aug_imgs, affines, recs = _augment_batch(tgt_batch, spec, aug_rng)
            augment_draws += len(recs)
            rows.append(mean_teacher_step(
                f, teacher, opt, _images_tensor(src_batch), _masks_tensor(src_batch),
                _images_tensor(tgt_batch), aug_imgs, affines, weights))
        f.eval()
        with torch.no_grad():
            tgt_probs, _ = f(_images_tensor(tgt_train))
        tripped = guard.observe(tgt_probs)
        metrics.append({"epoch": epoch, "lr": lr,
                        "sup": float(np.mean([r["sup"] for r in rows])),
                        "cons": float(np.mean([r["cons"] for r in rows])),
                        "total": float(np.mean([r["total"] for r in rows])),
                        "target_fg_fraction": guard.history[-1]})
        if tripped:
            break
    return StageResult("mean_teacher", metrics,
                       {"degenerate": guard.tripped, "augment_draws": augment_draws,
                        "ema_decay": sched.ema_decay})


# ---------------------------------------------------------------------------
# run manifest and the variant dispatcher
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """Everything needed to replay a run: identity (variant, seed, hashed
    configs), the data split by sample id, and the per-epoch stage record."""

    variant: str
    seed: int
    config_hash: str
    segmenter: dict
    discriminator: dict | None
    schedule: dict
    weights: dict
    augmentation: dict | None
    paired: bool
    data: dict
    stages: list
    degenerate: bool
    checkpoints: dict
    source_augment: bool = False

    def to_dict(self) -> dict:
        # canonical JSON types (tuples become lists) so a saved-and-reloaded
        # manifest compares equal to the in-memory one
        return json.loads(json.dumps(asdict(self)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _split_ids(split: DatasetSplit) -> dict:
    return {part: [s.sample_id for s in getattr(split, part)]
            for part in ("train", "val", "test")}


def _pooled_split(source: DatasetSplit, target: DatasetSplit) -> DatasetSplit:
    """Source and target labeled pools merged for the supervised upper bound;
    an empty pooled validation split falls back to the source one."""
    for s in target.train:
        if not isinstance(s, LabeledSample):
            raise TrainerError("supervised_upper requires labeled target samples")
    val = tuple(source.val) + tuple(target.val)
    return DatasetSplit(train=tuple(source.train) + tuple(target.train),
                        val=val if val else tuple(source.val),
                        test=tuple(source.test) + tuple(target.test),
                        fractions=source.fractions)


def train_method(variant: str, source_split: DatasetSplit, target_split: DatasetSplit,
                 sched: StageSchedule, spec: AugmentationSpec,
                 weights: LossWeights, seed: int, *,
                 seg_config: SegmenterConfig | None = None,
                 disc_config: DiscriminatorConfig | None = None,
                 paired: bool = False, source_augment: bool = False,
                 out_dir=None) -> tuple[UNet, RunManifest]:
    """Dispatch the stage pipeline for one method variant and return the
    trained segmenter with its manifest. With ``out_dir`` set, per-stage
    checkpoints, the manifest, and a JSONL metrics log are written there.
    ``source_augment`` augments the labeled batches of stage 1 (the classic
    augmented-baseline setting)."""
    if variant not in VARIANTS:
        raise TrainerError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    torch.set_num_threads(1)
    torch.manual_seed(seed)
    rng = SeededRng(seed)
    seg_config = seg_config or SegmenterConfig.desk_profile()
    f = UNet(seg_config)

    needs_disc = variant in ("adversarial", "tc_adversarial")
    d = None
    if needs_disc:
        if disc_config is None:
            n_dom = len(_domain_map(source_split.train, target_split.train))
            disc_config = DiscriminatorConfig(in_channels=seg_config.tap_channels(),
                                              n_domains=n_dom)
        d = DomainDiscriminator(disc_config)

    run_hash = config_hash({
        "variant": variant, "seed": seed, "paired": paired,
        "source_augment": source_augment,
        "segmenter": asdict(seg_config),
        "discriminator": asdict(disc_config) if needs_disc else None,
        "schedule": asdict(sched), "weights": asdict(weights),
        "augmentation": asdict(spec)})

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    stages: list[StageResult] = []
    checkpoints: dict = {}

    def finish_stage(result: StageResult, net, label: str) -> None:
        stages.append(result)
        if out_dir is not None:
            path = out_dir / f"{label}.npz"
            save_checkpoint(path, net, run_hash, label)
            checkpoints[label] = path.name

    stage1_split = (_pooled_split(source_split, target_split)
                    if variant == "supervised_upper" else source_split)
    finish_stage(run_stage1_supervised(f, stage1_split, sched, rng,
                                       augment=spec if source_augment else None),
                 f, "stage1")

    if variant in ("adversarial", "tc_adversarial"):
        finish_stage(run_stage2_adversarial(f, d, source_split, target_split,
                                            sched, weights, rng), f, "stage2")
    if variant == "tc_adversarial":
        finish_stage(run_stage3_consistency(f, d, source_split, target_split,
                                            spec, sched, weights, rng,
                                            paired=paired), f, "stage3")
    elif variant == "tc":
        finish_stage(run_stage3_consistency(f, None, source_split, target_split,
                                            spec, sched, weights, rng,
                                            paired=paired), f, "stage3")
    elif variant == "mean_teacher":
        finish_stage(run_stage_mean_teacher(f, source_split, target_split,
                                            spec, sched, weights, rng), f,
                     "mean_teacher")

    if out_dir is not None:
        save_checkpoint(out_dir / "final.npz", f, run_hash, "final")
        checkpoints["final"] = "final.npz"
    degenerate = any(s.extra.get("degenerate", False) for s in stages)
    manifest = RunManifest(
        variant=variant, seed=seed, config_hash=run_hash,
        segmenter=asdict(seg_config),
        discriminator=asdict(disc_config) if needs_disc else None,
        schedule=asdict(sched), weights=asdict(weights),
        augmentation=asdict(spec), paired=paired,
        data={"source": _split_ids(source_split), "target": _split_ids(target_split)},
        stages=[s.to_dict() for s in stages], degenerate=degenerate,
        checkpoints=checkpoints, source_augment=source_augment)
    if out_dir is not None:
        manifest.save(out_dir / "manifest.json")
        with open(out_dir / "metrics.jsonl", "w") as fh:
            for s in stages:
                for row in s.metrics:
                    fh.write(json.dumps({"stage": s.name, **row}, sort_keys=True) + "\n")
    return f, manifest
