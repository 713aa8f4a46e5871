"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation error (bad flags, config, missing or
mismatched artifacts), 2 numeric divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import pipeline as pl
from .checkpoint import CheckpointError, atomic_write
from .config import ConfigError, load_config
from .evalbench import UncertifiedClassifier
from .numcore import NonFiniteError
from .synthdata import AttributeLabel

log = logging.getLogger("icedit")

COMMANDS = ("gen-data", "train-teacher", "distill-w", "distill-icd", "finetune-cycle", "reconstruct", "edit",
            "eval-recon", "eval-edit")


def export_image(img: torch.Tensor | np.ndarray, path: str | Path) -> None:
    """Binary PGM (P5), linear -1 -> 0, 1 -> 255, rounding half away from zero."""
    a = np.asarray(img.detach().cpu() if isinstance(img, torch.Tensor) else img, dtype=np.float64)
    if a.ndim < 2 or any(d != 1 for d in a.shape[:-2]):
        raise ValueError(f"expected a single-channel 2-D image, got shape {a.shape}")
    a = a.reshape(a.shape[-2:])
    if not np.isfinite(a).all() or a.min() < -1.0 or a.max() > 1.0:
        raise ValueError("image values must lie in [-1, 1]")
    v = (a + 1.0) * 127.5
    q = np.floor(v + 0.5).astype(np.uint8)  # v >= 0, so this is half away from zero
    h, w = q.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def import_image(path: str | Path) -> torch.Tensor:
    """Inverse of ``export_image``; returns (1, H, W) float32 in [-1, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: expected an 8-bit P5 graymap")
    w, h = int(tokens[1]), int(tokens[2])
    q = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
    return torch.from_numpy(q.astype(np.float32) / 127.5 - 1.0)[None]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icedit", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="key=value config overriding the profile")
    p.add_argument("--profile", choices=("toy", "paper"), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/default"))
    p.add_argument("--checkpoint", type=Path, help="forward model to use instead of the run's latest")
    p.add_argument("--src-label", help="e.g. square,bright")
    p.add_argument("--trg-label", help="e.g. circle,bright")
    p.add_argument("--image", type=Path, help="source PGM for edit (default: a rendered sample)")
    p.add_argument("--no-guidance", action="store_true")
    p.add_argument("--n", type=int, default=8, help="images written by reconstruct")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _run_stage(args, run: pl.Run) -> tuple[dict, str]:
    cmd = args.command
    if cmd == "gen-data":
        return pl.gen_data(run), ""
    if cmd == "train-teacher":
        return pl.stage_train_teacher(run), ""
    if cmd == "distill-w":
        return pl.stage_distill_w(run), ""
    if cmd == "distill-icd":
        return pl.stage_distill_icd(run), ""
    if cmd == "finetune-cycle":
        return pl.stage_finetune_cycle(run), ""
    if cmd == "reconstruct":
        return pl.reconstruct_images(run, args.n, finetuned=run.path("cycle_forward.iccm").exists()), ""
    if cmd == "edit":
        if not args.src_label or not args.trg_label:
            raise ValueError("edit needs --src-label and --trg-label")
        src, trg = AttributeLabel.parse(args.src_label), AttributeLabel.parse(args.trg_label)
        image = import_image(args.image) if args.image else None
        return pl.edit_one(run, src, trg, image, guidance=not args.no_guidance), ""
    if cmd == "eval-recon":
        report, summary = pl.eval_recon(run)
        return summary, report.summary()
    if cmd == "eval-edit":
        report, summary = pl.eval_edit(run)
        return summary, report.summary()
    raise ValueError(cmd)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    record = {"command": args.command, "seed": args.seed, "start": pl.now(), "profile": args.profile}
    code = 0
    try:
        cfg = load_config(args.config, args.profile)
        record.update(config_hash=cfg.config_hash(), cfg_schedule=list(cfg.edit.cfg_schedule))
        run = pl.Run(cfg, args.seed, args.out)
        if args.checkpoint is not None:
            _use_checkpoint(run, args.checkpoint)
        args.out.mkdir(parents=True, exist_ok=True)
        atomic_write(run.path("config.ini"), cfg.to_text().encode())
        summary, text = _run_stage(args, run)
        record.update(status="ok", metrics={k: v for k, v in summary.items() if k != "artifacts"},
                      artifacts=summary.get("artifacts", []))
        if text:
            sys.stdout.write(text)
    except NonFiniteError as e:
        log.error("numeric divergence: %s", e)
        record.update(status="diverged", error=str(e))
        code = 2
    except (ConfigError, CheckpointError, UncertifiedClassifier, ValueError, FileNotFoundError) as e:
        sys.stderr.write(f"error: {e}\n")
        record.update(status="invalid", error=str(e))
        code = 1
    record["end"] = pl.now()
    if args.out.exists():
        pl.append_manifest(args.out, record)
    return code


def _use_checkpoint(run: pl.Run, path: Path) -> None:
    """Point the run's forward-model lookups at an explicit checkpoint."""
    from .checkpoint import load_denoiser

    original = run.pair

    def pair(finetuned: bool):
        _, bwd = original(False)
        return load_denoiser(path), bwd

    run.pair = pair


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
