"""Metrics, the attribute classifier oracle, and the reconstruction/editing benchmarks."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .cyclefit import PerceptualNet, reconstruct
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, ddim_solve
from .editor import EditRequest, GuiderConfig, edit
from .icd import SegmentPlan
from .numcore import AdamState, adam_step, backward, trainable
from .synthdata import FILLS, SHAPES, AttributeLabel, render_sample, derive_seed, to_tensors

log = logging.getLogger(__name__)

SUBSTITUTIONS = (
    "perceptual = fixed random-orthogonal conv pyramid (stands in for VGG-16 LPIPS); "
    "edit_success / preservation = attribute classifier (stands in for CLIPScore, ImageReward, DINOv2); "
    "latents = pixels (identity codec)"
)
CERTIFY_THRESHOLD = 0.98


class UncertifiedClassifier(RuntimeError):
    pass


def mse_metric(a: Tensor, b: Tensor) -> Tensor:
    """Per-image mean squared pixel difference."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).flatten(1).mean(dim=1)


class AttrClassifier(nn.Module):
    """Predicts (shape, fill) of a toy image with two softmax heads."""

    def __init__(self):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.SiLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 32, 3, padding=1), nn.SiLU(), nn.Flatten(),
            nn.Linear(32 * 16, 64), nn.SiLU(),
        )
        self.shape_head = nn.Linear(64, len(SHAPES))
        self.fill_head = nn.Linear(64, len(FILLS))
        self.certified = False
        self.accuracy = 0.0

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.body(x)
        return self.shape_head(h), self.fill_head(h)

    @torch.no_grad()
    def predict(self, x: Tensor) -> tuple[Tensor, Tensor]:
        s, f = self(x.clamp(-1, 1))
        return s.argmax(1), f.argmax(1)

    @torch.no_grad()
    def predict_label(self, x: Tensor) -> Tensor:
        s, f = self.predict(x)
        return 2 * s + f


def train_classifier(x: Tensor, y: Tensor, steps: int = 1500, seed: int = 0, batch: int = 64,
                     lr: float = 2e-3, noise_max: float = 0.15) -> AttrClassifier:
    """Fit on clean renders with random additive noise so generated images are in range."""
    torch.manual_seed(seed)
    clf = AttrClassifier()
    g = torch.Generator().manual_seed(seed)
    opt = AdamState(trainable(clf), lr=lr)
    for _ in range(steps):
        idx = torch.randint(0, x.shape[0], (batch,), generator=g)
        xb, yb = x[idx], y[idx]
        amp = torch.rand(batch, 1, 1, 1, generator=g) * noise_max
        xb = (xb + amp * torch.randn(xb.shape, generator=g)).clamp(-1, 1)
        s, f = clf(xb)
        loss = F.cross_entropy(s, yb // 2) + F.cross_entropy(f, yb % 2)
        adam_step(opt, backward(loss, opt.params))
    clf.eval()
    return clf


def certify(clf: AttrClassifier, x: Tensor, y: Tensor, threshold: float = CERTIFY_THRESHOLD) -> float:
    """Joint-label accuracy on held-out renders; marks the classifier usable iff >= threshold."""
    acc = (clf.predict_label(x) == y).float().mean().item()
    clf.accuracy = acc
    clf.certified = acc >= threshold
    return acc


def _require_certified(clf: AttrClassifier) -> None:
    if not clf.certified:
        raise UncertifiedClassifier(f"classifier accuracy {clf.accuracy:.4f} < {CERTIFY_THRESHOLD}")


def label_accuracy(clf: AttrClassifier, images: Tensor, labels: Tensor) -> float:
    _require_certified(clf)
    return (clf.predict_label(images) == labels).float().mean().item()


def edit_success(edited: Tensor, y_trg: Tensor, y_src: Tensor, clf: AttrClassifier) -> tuple[Tensor, Tensor]:
    """Per image: did the changed attribute reach its target, and did the other one keep its source value?

    A pair where both attributes differ has nothing to preserve; ``preserved``
    is then reported as True.
    """
    _require_certified(clf)
    s, f = clf.predict(edited)
    shape_changed = (y_trg // 2) != (y_src // 2)
    fill_changed = (y_trg % 2) != (y_src % 2)
    hit_shape = torch.where(shape_changed, s == y_trg // 2, torch.ones_like(shape_changed))
    hit_fill = torch.where(fill_changed, f == y_trg % 2, torch.ones_like(fill_changed))
    target_hit = hit_shape & hit_fill & (shape_changed | fill_changed)
    keep_shape = torch.where(shape_changed, torch.ones_like(shape_changed), s == y_src // 2)
    keep_fill = torch.where(fill_changed, torch.ones_like(fill_changed), f == y_src % 2)
    return target_hit, keep_shape & keep_fill


# --------------------------------------------------------------------------
# reports


@dataclass
class BenchRow:
    method: str
    mse: float
    perceptual: float
    edit_success: float | None = None
    preservation_success: float | None = None
    n: int = 0


@dataclass
class BenchReport:
    title: str
    rows: list[BenchRow]
    config_hash: str
    seed: int
    notes: list[str] = field(default_factory=list)

    def row(self, method: str) -> BenchRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "n", "mse", "perceptual", "edit_success", "preservation_success"])
        for r in self.rows:
            w.writerow([r.method, r.n, f"{r.mse:.6f}", f"{r.perceptual:.6f}",
                        "" if r.edit_success is None else f"{r.edit_success:.4f}",
                        "" if r.preservation_success is None else f"{r.preservation_success:.4f}"])
        w.writerow([f"# config={self.config_hash}", f"seed={self.seed}"])
        w.writerow([f"# substitutions: {SUBSTITUTIONS}"])
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"== {self.title} ==", f"config {self.config_hash}  seed {self.seed}"]
        for r in self.rows:
            extra = ""
            if r.edit_success is not None:
                extra = f"  edit_success {r.edit_success:.3f}  preserved {r.preservation_success:.3f}"
            lines.append(f"{r.method:<28} n={r.n:<4} mse {r.mse:.5f}  perceptual {r.perceptual:.5f}{extra}")
        lines += self.notes
        lines.append(f"substitutions: {SUBSTITUTIONS}")
        return "\n".join(lines) + "\n"


def _batched(n: int, bs: int):
    for i in range(0, n, bs):
        yield slice(i, min(i + bs, n))


@torch.no_grad()
def run_reconstruction_bench(models: dict[str, tuple], x: Tensor, y: Tensor, schedule: NoiseSchedule,
                             plan: SegmentPlan, percept: PerceptualNet, config_hash: str = "", seed: int = 0,
                             teacher: Denoiser | None = None, teacher_steps: int = 64,
                             batch: int = 64) -> BenchReport:
    """Invert + regenerate every image with CFG off; ``models`` maps a row name to (forward, backward)."""
    if not models and teacher is None:
        raise ValueError("need at least one model configuration")
    rows = []
    methods = []
    if teacher is not None:
        methods.append((f"DDIM teacher ({teacher_steps} steps)", None))
    methods += [(name, fb) for name, fb in models.items()]
    for name, fb in methods:
        mse_sum, per_sum = 0.0, 0.0
        for sl in _batched(x.shape[0], batch):
            xb, yb = x[sl], y[sl]
            if fb is None:
                zt = ddim_solve(teacher, schedule, xb, 0, schedule.T, teacher_steps, yb, 0.0)
                xr = ddim_solve(teacher, schedule, zt, schedule.T, 0, teacher_steps, yb, 0.0)
            else:
                xr = reconstruct(fb[0], fb[1], schedule, xb, yb, plan)
            mse_sum += mse_metric(xr, xb).double().sum().item()
            per_sum += percept.per_sample(xr, xb).double().sum().item()
        n = x.shape[0]
        rows.append(BenchRow(name, mse_sum / n, per_sum / n, n=n))
    return BenchReport("reconstruction", rows, config_hash, seed)


def make_edit_pairs(n_images: int, seed: int, size: int = 16) -> tuple[Tensor, Tensor, Tensor]:
    """Held-out sources, each flipped once in shape and once in fill: 2 * n_images single-attribute edits."""
    rng = np.random.default_rng(seed)
    images, src, trg = [], [], []
    for i in range(n_images):
        s = derive_seed(seed, i)
        label = AttributeLabel.from_index(int(rng.integers(0, 8)))
        im = render_sample(label, s, size)
        shape_i, fill_i = divmod(label.index, 2)
        new_shape = (shape_i + 1 + int(rng.integers(0, 3))) % 4
        for t in (2 * new_shape + fill_i, 2 * shape_i + (1 - fill_i)):
            images.append(im)
            src.append(label.index)
            trg.append(t)
    x, _ = to_tensors(images)
    return x, torch.tensor(src), torch.tensor(trg)


def run_editing_bench(variants: dict[str, tuple], x: Tensor, y_src: Tensor, y_trg: Tensor,
                      schedule: NoiseSchedule, plan: SegmentPlan, clf: AttrClassifier, percept: PerceptualNet,
                      cfg_schedule, guider: GuiderConfig, config_hash: str = "", seed: int = 0,
                      batch: int = 64) -> BenchReport:
    """``variants`` maps a row name to (forward, backward, guidance_enabled)."""
    _require_certified(clf)
    rows = []
    for name, (fwd, bwd, guided) in variants.items():
        mse_sum = per_sum = hit_sum = keep_sum = 0.0
        for sl in _batched(x.shape[0], batch):
            req = EditRequest(x[sl], y_src[sl], y_trg[sl], tuple(cfg_schedule), guider, guided)
            out, _ = edit(fwd, bwd, schedule, plan, req)
            with torch.no_grad():
                mse_sum += mse_metric(out, x[sl]).double().sum().item()
                per_sum += percept.per_sample(out, x[sl]).double().sum().item()
            hit, keep = edit_success(out, y_trg[sl], y_src[sl], clf)
            hit_sum += hit.sum().item()
            keep_sum += keep.sum().item()
        n = x.shape[0]
        rows.append(BenchRow(name, mse_sum / n, per_sum / n, hit_sum / n, keep_sum / n, n))
    return BenchReport("editing", rows, config_hash, seed)
