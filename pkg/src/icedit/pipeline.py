"""Pipeline stages over an output directory.

Each stage reads its inputs from ``out``, verifies their fingerprints
against the current config, writes its artifacts, and returns a metric
summary. The CLI wraps these and appends one manifest record per stage.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .config import RunConfig
from .cyclefit import CycleConfig, PerceptualNet, finetune_cycle, reconstruct
from .denoiser import Arch, Denoiser
from .diffusion import distill_w, make_schedule, train_teacher
from .editor import EditRequest, GuiderConfig, edit
from .evalbench import (AttrClassifier, BenchReport, UncertifiedClassifier, certify, make_edit_pairs,
                        run_editing_bench, run_reconstruction_bench, train_classifier)
from .icd import ConsistencyPair, ICDConfig, SegmentPlan, train_icd
from .synthdata import AttributeLabel, load_dataset, render_sample, sample_dataset, save_dataset, to_tensors

log = logging.getLogger(__name__)

HOLDOUT_SALT = 0x5EED_0001
EDIT_SALT = 0x5EED_0002
STAGE_SEED = {"teacher": 0, "student": 1, "icd": 2, "cycle": 3, "classifier": 4}


@dataclass
class Run:
    cfg: RunConfig
    seed: int
    out: Path

    def __post_init__(self):
        self.out = Path(self.out)
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)

    def path(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def fp(self, stage: str) -> str:
        return self.cfg.fingerprint(stage, self.seed)

    def stage_seed(self, stage: str) -> int:
        return self.seed * 1000 + STAGE_SEED[stage]

    @property
    def schedule(self):
        return make_schedule(self.cfg.teacher.T)

    @property
    def plan(self) -> SegmentPlan:
        return SegmentPlan.uniform(self.cfg.teacher.T, self.cfg.distill.segments)

    @property
    def arch(self) -> Arch:
        return Arch(image_size=self.cfg.data.image_size, T=self.cfg.teacher.T)

    def guider(self) -> GuiderConfig:
        e = self.cfg.edit
        return GuiderConfig(e.w_self, e.w_feat, e.r_lower, e.r_upper, e.eps_den, tuple(e.r_profile) or None)

    # -- artifacts --------------------------------------------------------
    def train_data(self):
        images = load_dataset(self._data_file("train.toyd"))
        return to_tensors(images)

    def holdout_data(self):
        return to_tensors(load_dataset(self._data_file("holdout.toyd")))

    def _data_file(self, name: str) -> Path:
        p = self.path("data", name)
        meta = self.path("data", "fingerprint")
        if not p.exists() or not meta.exists():
            raise ckpt.CheckpointError(f"missing dataset {p}; run gen-data first")
        if meta.read_text().strip() != self.fp("data"):
            raise ckpt.CheckpointError("dataset fingerprint does not match the current config")
        return p

    def load(self, name: str, stage: str) -> Denoiser:
        return ckpt.load_denoiser(self.path(name), self.fp(stage))

    def pair(self, finetuned: bool) -> tuple[Denoiser, Denoiser]:
        bwd = self.load("icd_backward.iccm", "icd")
        fwd = self.load("cycle_forward.iccm", "cycle") if finetuned else self.load("icd_forward.iccm", "icd")
        return fwd, bwd


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# stages


def gen_data(run: Run) -> dict:
    d = run.cfg.data
    train = sample_dataset(d.n_train, run.seed + d.seed_offset, d.image_size)
    hold = sample_dataset(d.n_holdout, (run.seed + d.seed_offset) ^ HOLDOUT_SALT, d.image_size)
    save_dataset(train, run.path("data", "train.toyd"))
    save_dataset(hold, run.path("data", "holdout.toyd"))
    ckpt.atomic_write(run.path("data", "fingerprint"), run.fp("data").encode())
    return {"n_train": len(train), "n_holdout": len(hold), "artifacts": ["data/train.toyd", "data/holdout.toyd"]}


def stage_train_teacher(run: Run) -> dict:
    x, y = run.train_data()
    t = run.cfg.teacher
    model = train_teacher(x, y, run.schedule, t.steps, run.stage_seed("teacher"), run.arch, t.batch, t.lr, t.p_null)
    ckpt.save_denoiser(model, run.path("teacher.iccm"), run.fp("teacher"), run.seed)
    return {"artifacts": ["teacher.iccm"]}


def stage_distill_w(run: Run) -> dict:
    x, y = run.train_data()
    teacher = run.load("teacher.iccm", "teacher")
    d = run.cfg.distill
    student = distill_w(teacher, x, y, run.schedule, d.w_steps, run.stage_seed("student"), d.omega_max,
                        d.w_batch, d.w_lr)
    ckpt.save_denoiser(student, run.path("student.iccm"), run.fp("student"), run.seed)
    return {"artifacts": ["student.iccm"]}


def stage_distill_icd(run: Run) -> dict:
    x, y = run.train_data()
    student = run.load("student.iccm", "student")
    d = run.cfg.distill
    icfg = ICDConfig(d.steps, d.batch, d.lr, d.lambda_f, d.lambda_r, d.ema_decay, d.solver_skip, d.start_offset,
                     d.omega_max, d.adapter_rank)
    pair = train_icd(student, x, y, run.schedule, run.plan, icfg, run.stage_seed("icd"))
    ckpt.save_denoiser(pair.forward, run.path("icd_forward.iccm"), run.fp("icd"), run.seed)
    ckpt.save_denoiser(pair.backward, run.path("icd_backward.iccm"), run.fp("icd"), run.seed)
    return {"artifacts": ["icd_forward.iccm", "icd_backward.iccm"]}


def stage_finetune_cycle(run: Run) -> dict:
    x, y = run.train_data()
    frozen = ["teacher.iccm", "student.iccm", "icd_backward.iccm"]
    before = {n: file_digest(run.path(n)) for n in frozen}
    fwd, bwd = run.pair(finetuned=False)
    solver = run.load("student.iccm", "student")
    c = run.cfg.cycle
    d = run.cfg.distill
    ccfg = CycleConfig(c.iterations, c.batch, c.lr, c.lambda_rec, c.lambda_f, c.lambda_cd, c.adapter_rank,
                       c.rec_loss, c.patch_grid, c.noise_t, d.solver_skip, d.start_offset)
    pair = ConsistencyPair(fwd, bwd, fwd, bwd, run.plan, d.ema_decay)
    tuned = finetune_cycle(pair, solver, x, y, run.schedule, ccfg, run.stage_seed("cycle"),
                           PerceptualNet(patch_grid=c.patch_grid))
    ckpt.save_denoiser(tuned.forward, run.path("cycle_forward.iccm"), run.fp("cycle"), run.seed)
    after = {n: file_digest(run.path(n)) for n in frozen}
    if before != after:
        raise AssertionError("a frozen checkpoint changed during cycle fine-tuning")
    return {"artifacts": ["cycle_forward.iccm"], "frozen_sha256": after}


def classifier(run: Run) -> AttrClassifier:
    """Attribute oracle, trained once per dataset and cached; certification is re-checked on load."""
    path = run.path("classifier.iccm")
    x, y = run.train_data()
    xh, yh = run.holdout_data()
    fp = f"{run.fp('data')}-c{run.cfg.eval.classifier_steps}"
    if path.exists():
        clf = AttrClassifier()
        ckpt.load_into(clf, path, fp)
        clf.eval()
    else:
        clf = train_classifier(x, y, run.cfg.eval.classifier_steps, run.stage_seed("classifier"))
        ckpt.save_module(clf, path, "classifier", {"kind": "attr_classifier"}, fp, run.seed)
    acc = certify(clf, xh, yh)
    if not clf.certified:
        raise UncertifiedClassifier(f"attribute classifier held-out accuracy {acc:.4f} below 0.98")
    return clf


def reconstruct_images(run: Run, n: int = 8, finetuned: bool = True) -> dict:
    from .cli import export_image

    xh, yh = run.holdout_data()
    fwd, bwd = run.pair(finetuned)
    with torch.no_grad():
        xr = reconstruct(fwd, bwd, run.schedule, xh[:n], yh[:n], run.plan)
    paths = []
    for i in range(min(n, xh.shape[0])):
        for tag, img in (("src", xh[i]), ("rec", xr[i].clamp(-1, 1))):
            p = run.path("recon", f"{i:03d}_{tag}.pgm")
            export_image(img, p)
            paths.append(str(p.relative_to(run.out)))
    mse = (xr - xh[:n]).pow(2).mean().item()
    return {"mse": mse, "artifacts": paths}


def edit_one(run: Run, src: AttributeLabel, trg: AttributeLabel, image: torch.Tensor | None = None,
             finetuned: bool = True, guidance: bool = True) -> dict:
    from .cli import export_image

    if image is None:
        image = render_sample(src, run.seed, run.cfg.data.image_size).tensor()
    image = image.reshape(1, 1, *image.shape[-2:])
    fwd, bwd = run.pair(finetuned)
    req = EditRequest(image, torch.tensor([src.index]), torch.tensor([trg.index]), tuple(run.cfg.edit.cfg_schedule),
                      run.guider(), guidance)
    out, logs = edit(fwd, bwd, run.schedule, run.plan, req)
    export_image(image[0], run.path("edit", "source.pgm"))
    export_image(out[0].clamp(-1, 1), run.path("edit", "edited.pgm"))
    lines = [json.dumps({"step": s.step, "t": s.t, "omega": s.omega, "r": s.r, "gamma": s.gamma[0],
                         "floored": s.floored[0]}) for s in logs]
    ckpt.atomic_write(run.path("edit", "gamma_log.jsonl"), ("\n".join(lines) + "\n").encode())
    return {"src": str(src), "trg": str(trg), "cfg_schedule": list(run.cfg.edit.cfg_schedule),
            "gamma": [s.gamma[0] for s in logs],
            "artifacts": ["edit/source.pgm", "edit/edited.pgm", "edit/gamma_log.jsonl"]}


def _write_report(run: Run, report: BenchReport, stem: str) -> list[str]:
    ckpt.atomic_write(run.path("reports", f"{stem}.csv"), report.to_csv().encode())
    ckpt.atomic_write(run.path("reports", f"{stem}.txt"), report.summary().encode())
    return [f"reports/{stem}.csv", f"reports/{stem}.txt"]


def eval_recon(run: Run) -> tuple[BenchReport, dict]:
    xh, yh = run.holdout_data()
    n = run.cfg.eval.n_recon
    if xh.shape[0] < n:
        raise ValueError(f"holdout has {xh.shape[0]} images, need {n}")
    teacher = run.load("teacher.iccm", "teacher")
    base = run.pair(finetuned=False)
    tuned = run.pair(finetuned=True)
    report = run_reconstruction_bench(
        {"iCD 4-step": base, "iCD 4-step + cycle fine-tune": tuned}, xh[:n], yh[:n], run.schedule, run.plan,
        PerceptualNet(patch_grid=run.cfg.cycle.patch_grid), run.cfg.config_hash(), run.seed,
        teacher=teacher, teacher_steps=run.cfg.eval.teacher_steps, batch=run.cfg.eval.batch)
    arts = _write_report(run, report, "recon")
    return report, {"rows": {r.method: {"mse": r.mse, "perceptual": r.perceptual} for r in report.rows},
                    "artifacts": arts}


def eval_edit(run: Run) -> tuple[BenchReport, dict]:
    clf = classifier(run)
    x, ys, yt = make_edit_pairs(run.cfg.eval.n_edit_images, (run.seed + run.cfg.data.seed_offset) ^ EDIT_SALT,
                                run.cfg.data.image_size)
    base_f, bwd = run.pair(finetuned=False)
    tuned_f, _ = run.pair(finetuned=True)
    variants = {
        "base w/o guidance": (base_f, bwd, False),
        "base + guidance": (base_f, bwd, True),
        "fine-tuned w/o guidance": (tuned_f, bwd, False),
        "fine-tuned + guidance": (tuned_f, bwd, True),
    }
    report = run_editing_bench(variants, x, ys, yt, run.schedule, run.plan, clf,
                               PerceptualNet(patch_grid=run.cfg.cycle.patch_grid), run.cfg.edit.cfg_schedule,
                               run.guider(), run.cfg.config_hash(), run.seed, batch=run.cfg.eval.batch)
    report.notes.append(f"classifier held-out accuracy {clf.accuracy:.4f}")
    report.notes += provenance(run)
    arts = _write_report(run, report, "edit")
    rows = {r.method: {"perceptual": r.perceptual, "mse": r.mse, "edit_success": r.edit_success,
                       "preserved": r.preservation_success} for r in report.rows}
    return report, {"rows": rows, "cfg_schedule": list(run.cfg.edit.cfg_schedule), "artifacts": arts}


# --------------------------------------------------------------------------
# manifest


def read_manifest(out: str | Path) -> list[dict]:
    p = Path(out) / "manifest.jsonl"
    if not p.exists():
        return []
    return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]


def append_manifest(out: str | Path, record: dict) -> None:
    """Rewrite-and-rename so a reader never sees a half-written record."""
    p = Path(out) / "manifest.jsonl"
    old = p.read_bytes() if p.exists() else b""
    ckpt.atomic_write(p, old + (json.dumps(record, sort_keys=True) + "\n").encode())


def provenance(run: Run) -> list[str]:
    """Latest manifest record per training stage, reduced to the fields that do not depend on wall time."""
    latest = {}
    for rec in read_manifest(run.out):
        if rec.get("status") == "ok":
            latest[rec["command"]] = rec
    lines = []
    for cmd in ("train-teacher", "distill-w", "distill-icd", "finetune-cycle"):
        if cmd in latest:
            lines.append(f"provenance {cmd}: config {latest[cmd]['config_hash']} seed {latest[cmd]['seed']}")
    return lines


def now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()) + f".{int(time.time() * 1000) % 1000:03d}Z"
