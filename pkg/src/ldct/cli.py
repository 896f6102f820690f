"""Command-line entry point: ``ldct <command> [options]``.

Output layout under the run root (``--root``, else ``$LDCT_OUTPUT_ROOT``,
else ``./runs``)::

    data/      clean/, ndct/, dose_<f>/ sinograms and images + manifest.json
    proj/      projection checkpoint
    refiner/   latent refiner checkpoint
    results/<tag>/  pred/, prior/, ldct/, lambda/ + manifest.json
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import DependencyError, LDCTError, ValidationError
from .fusion import dose_shift_policy, infer
from .manifest import (MANIFEST_NAME, load_image, load_sinogram, read_json, save_array, save_image,
                       save_sinogram, write_json)
from .metrics import aggregate, evaluate, format_table
from .phantom import PhantomSpec, generate
from .pipeline import prior_images, simulate_case

log = logging.getLogger("ldct")


def _dose_dir(f: float) -> str:
    return f"dose_{float(f):g}"


def _case(seed: int) -> str:
    return f"case_{seed:04d}"


class Run:
    """Paths and manifests of one run root."""

    def __init__(self, root: Path, cfg: ExperimentConfig):
        self.root = Path(root)
        self.cfg = cfg

    data = property(lambda self: self.root / "data")
    proj = property(lambda self: self.root / "proj")
    refiner = property(lambda self: self.root / "refiner")
    results = property(lambda self: self.root / "results")

    def require(self, path: Path, command: str, what: str) -> dict:
        if not (path / MANIFEST_NAME).exists():
            raise DependencyError(f"{what} not found under {path}; run `ldct {command}` first")
        return read_json(path / MANIFEST_NAME)

    def guard(self, path: Path, force: bool) -> None:
        """Refuse to overwrite a finished stage unless ``force``."""
        man_path = path / MANIFEST_NAME
        if man_path.exists() and not force:
            old = read_json(man_path).get("config_hash")
            same = "the same" if old == self.cfg.hash else "a different"
            raise ValidationError(f"{path} already holds output of {same} config (hash {old}); pass --force to redo")


# ---------------------------------------------------------------------------
# commands

def cmd_phantom(args, cfg: ExperimentConfig) -> int:
    img = generate(PhantomSpec(args.kind, args.size, args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, img, phantom={"kind": args.kind, "size": args.size, "seed": args.seed})
    print(f"wrote {out}.f32")
    return 0


def cmd_simulate(args, cfg: ExperimentConfig, run: Run) -> int:
    run.guard(run.data, args.force)
    geom = cfg.geometry.build()
    dose_cfg = cfg.dose.build(cfg.seed)
    seeds = list(range(cfg.data.num_phantoms))
    t0 = time.time()
    for s in seeds:
        case = simulate_case(s, geom, cfg.dose.doses, dose_cfg, cfg.data.kind)
        save_image(run.data / "phantom" / _case(s), case.phantom, seed=s)
        save_sinogram(run.data / "clean" / _case(s), case.clean, seed=s)
        save_image(run.data / "ndct" / _case(s), case.ndct, seed=s)
        for f, sino in case.noisy.items():
            save_sinogram(run.data / _dose_dir(f) / _case(s), sino, seed=s)
    write_json(run.data / MANIFEST_NAME, {
        "kind": "dataset", "config_hash": run.cfg.hash, "seed": cfg.seed, "geometry": geom,
        "doses": cfg.dose.doses, "train_seeds": cfg.data.train_seeds, "test_seeds": cfg.data.test_seeds,
        "version": __version__})
    print(f"simulated {len(seeds)} phantoms x {len(cfg.dose.doses)} doses in {time.time() - t0:.1f}s -> {run.data}")
    return 0


def _sinos(run: Run, dose: float, seeds):
    d = run.data / _dose_dir(dose)
    if not d.is_dir():
        raise DependencyError(f"no sinograms at dose {dose} under {run.data}; run `ldct simulate` with that dose")
    return [load_sinogram(d / _case(s))[0] for s in seeds]


def cmd_train_proj(args, cfg: ExperimentConfig, run: Run) -> int:
    from .projection import train_projection

    data = run.require(run.data, "simulate", "simulated dataset")
    run.guard(run.proj, args.force)
    net_cfg, train_cfg = cfg.projection.build(cfg.seed, cfg.sampler.patch_size)
    sinos = _sinos(run, cfg.dose.train_dose, cfg.data.train_seeds)
    t0 = time.time()
    ck = train_projection(sinos, train_cfg, net_cfg=net_cfg,
                          progress=lambda e, v: log.info("train-proj epoch %d loss %.5f", e, v))
    man = ck.save(run.proj)
    man.update({"config_hash": run.cfg.hash, "checkpoint_hash": man["config_hash"],
                "dataset": data["config_hash"], "train_dose": cfg.dose.train_dose,
                "seconds": time.time() - t0})
    write_json(run.proj / MANIFEST_NAME, man)
    print(f"projection checkpoint -> {run.proj} ({time.time() - t0:.1f}s)")
    return 0


def _load_proj(run: Run):
    from .projection import ProjCheckpoint

    run.require(run.proj, "train-proj", "projection checkpoint")
    return ProjCheckpoint.load(run.proj)


def _load_refiner(run: Run):
    from .refiner import RefinerCheckpoint

    run.require(run.refiner, "train-latent", "latent refiner checkpoint")
    return RefinerCheckpoint.load(run.refiner)


def cmd_train_latent(args, cfg: ExperimentConfig, run: Run) -> int:
    from .refiner import train_refiner

    run.require(run.data, "simulate", "simulated dataset")
    proj = _load_proj(run)
    run.guard(run.refiner, args.force)
    net_cfg, train_cfg = cfg.refiner.build(cfg.seed)
    t0 = time.time()
    pairs = prior_images(_sinos(run, cfg.dose.train_dose, cfg.data.train_seeds), proj)
    proj_hash = proj.manifest()["config_hash"]
    ck = train_refiner(pairs, cfg.refiner.schedule(), train_cfg, net_cfg,
                       schedule_args={"T": cfg.refiner.T, "T_L": cfg.refiner.T_L}, prior_checkpoint=proj_hash,
                       progress=lambda e, v: log.info("train-latent epoch %d loss %.5f", e, v))
    man = ck.save(run.refiner)
    man.update({"config_hash": run.cfg.hash, "checkpoint_hash": man["config_hash"],
                "seconds": time.time() - t0})
    write_json(run.refiner / MANIFEST_NAME, man)
    print(f"refiner checkpoint -> {run.refiner} ({time.time() - t0:.1f}s)")
    return 0


def _resolve_shift(args, cfg: ExperimentConfig, test_dose: float) -> float:
    if args.dose_shift is None:
        return cfg.fusion.dose_shift
    if args.dose_shift == "auto":
        return dose_shift_policy(args.train_dose or cfg.dose.train_dose, test_dose)
    try:
        return float(args.dose_shift)
    except ValueError:
        raise ValidationError(f"--dose-shift must be a number or 'auto', got {args.dose_shift!r}") from None


def cmd_infer(args, cfg: ExperimentConfig, run: Run) -> int:
    proj = _load_proj(run)
    ref_ck = _load_refiner(run)
    test_dose = args.test_dose or cfg.dose.train_dose
    b = _resolve_shift(args, cfg, test_dose)
    fusion_cfg = cfg.fusion.build(b)
    if args.sinogram:
        stems = [Path(args.sinogram)]
        sinos = [load_sinogram(stems[0])[0]]
        names = [stems[0].name.removesuffix(".f32")]
    else:
        run.require(run.data, "simulate", "simulated dataset")
        seeds = cfg.data.test_seeds
        sinos = _sinos(run, test_dose, seeds)
        names = [_case(s) for s in seeds]
    tag = args.tag or f"{_dose_dir(test_dose)}_b{b:+.3f}"
    out = run.results / tag
    run.guard(out, args.force)
    net, refiner = proj.build(), ref_ck.build()
    t0 = time.time()
    per_case = {}
    for name, y in zip(names, sinos):
        res = infer(y, proj, ref_ck, fusion_cfg=fusion_cfg, seed=cfg.seed, proj_net=net, refiner=refiner,
                    window=args.filter)
        save_image(out / "pred" / name, res.image)
        save_image(out / "prior" / name, res.prior)
        save_image(out / "ldct" / name, res.ldct)
        save_array(out / "lambda" / name, res.weights.lam, kind="fusion-weight", **res.weights.stats())
        per_case[name] = res.manifest
    write_json(out / MANIFEST_NAME, {
        "kind": "inference", "config_hash": run.cfg.hash, "test_dose": test_dose, "dose_shift": b,
        "projection_checkpoint": proj.manifest()["config_hash"],
        "refiner_checkpoint": ref_ck.manifest()["config_hash"], "cases": per_case})
    print(f"inferred {len(names)} case(s) at dose {test_dose:g}, b = {b:+.3f} -> {out} ({time.time() - t0:.1f}s)")
    return 0


def _load_dir(d: Path) -> dict:
    return {p.name.removesuffix(".meta.json"): load_image(p.with_name(p.name.removesuffix(".meta.json")))[0]
            for p in sorted(d.glob("*.meta.json"))}


def _panels(path: Path, ref, ldct, pred, window, title=""):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    shown = [("reference", ref)] + ([("LDCT", ldct)] if ldct is not None else []) + [("ours", pred)]
    fig, axes = plt.subplots(1, len(shown), figsize=(3 * len(shown), 3.2))
    for ax, (label, img) in zip(np.atleast_1d(axes), shown):
        ax.imshow(img.hu(), cmap="gray", vmin=window[0], vmax=window[1])
        ax.set_title(label)
        ax.axis("off")
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_evaluate(args, cfg: ExperimentConfig, run: Run) -> int:
    window = tuple(args.window or cfg.metrics.window)
    pred_dir = Path(args.pred_dir)
    ref_dir = Path(args.ref_dir) if args.ref_dir else run.data / "ndct"
    if not pred_dir.is_dir():
        raise DependencyError(f"{pred_dir} does not exist; run `ldct infer` first")
    if not ref_dir.is_dir():
        raise DependencyError(f"{ref_dir} does not exist; run `ldct simulate` first")
    preds, refs = _load_dir(pred_dir), _load_dir(ref_dir)
    names = sorted(set(preds) & set(refs))
    if not names:
        raise ValidationError(f"no matching case names between {pred_dir} and {ref_dir}")
    methods = {"ours": preds}
    for extra in ("prior", "ldct"):
        d = pred_dir.parent / extra
        if d.is_dir() and d != pred_dir:
            methods[extra] = _load_dir(d)
    reports = {m: {n: evaluate(imgs[n], refs[n], window) for n in names if n in imgs} for m, imgs in methods.items()}
    table = {m: aggregate(r.values()) for m, r in reports.items()}
    text = format_table(table)
    print(text)
    out = Path(args.out) if args.out else pred_dir.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(text + "\n")
    write_json(out / "metrics.json", {"window": window, "summary": table,
                                      "cases": {m: {n: r.as_dict() for n, r in rs.items()} for m, rs in reports.items()}})
    panel_dir = out / "panels"
    panel_dir.mkdir(exist_ok=True)
    ldcts = methods.get("ldct", {})
    for n in names[: args.panels]:
        _panels(panel_dir / f"{n}.png", refs[n], ldcts.get(n), preds[n], window,
                f"{n}  PSNR {reports['ours'][n].psnr:.2f} dB")
    print(f"report -> {out / 'metrics.json'}")
    return 0


def cmd_sweep_dose(args, cfg: ExperimentConfig, run: Run) -> int:
    run.require(run.data, "simulate", "simulated dataset")
    proj, ref_ck = _load_proj(run), _load_refiner(run)
    train_dose = args.train_dose or cfg.dose.train_dose
    test_dose = args.test_dose or train_dose
    shifts = sorted(set(args.shifts) | {0.0, dose_shift_policy(train_dose, test_dose)})
    seeds = cfg.data.test_seeds
    sinos = _sinos(run, test_dose, seeds)
    refs = [load_image(run.data / "ndct" / _case(s))[0] for s in seeds]
    net, refiner = proj.build(), ref_ck.build()
    window = tuple(args.window or cfg.metrics.window)
    table, rows = {}, {}
    for b in shifts:
        reps = []
        for s, y, r in zip(seeds, sinos, refs):
            res = infer(y, proj, ref_ck, fusion_cfg=cfg.fusion.build(b), seed=cfg.seed, proj_net=net, refiner=refiner)
            reps.append(evaluate(res.image, r, window))
        label = f"b={b:+.3f}" + (" (policy)" if b == dose_shift_policy(train_dose, test_dose) else "")
        table[label] = aggregate(reps)
        rows[f"{b:+.3f}"] = table[label]
    text = format_table(table)
    print(f"train dose {train_dose:g}, test dose {test_dose:g}")
    print(text)
    out = run.results / f"sweep_{_dose_dir(test_dose)}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.txt").write_text(text + "\n")
    write_json(out / "sweep.json", {"config_hash": run.cfg.hash, "train_dose": train_dose, "test_dose": test_dose,
                                    "projection_checkpoint": proj.manifest()["config_hash"],
                                    "refiner_checkpoint": ref_ck.manifest()["config_hash"], "shifts": rows})
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldct", description="Dual-domain low-dose CT denoising on synthetic data")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment file (defaults built in)")
    common.add_argument("--root", help="run root (overrides $LDCT_OUTPUT_ROOT and paths.root)")
    common.add_argument("--seed", type=int, help="root seed override")
    common.add_argument("--force", action="store_true", help="overwrite existing stage output")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="rasterize one phantom")
    s.add_argument("--kind", default="shepp-logan", choices=["shepp-logan", "random-ellipses"])
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--out", required=True, help="output stem (writes .f32 and .meta.json)")

    sub.add_parser("simulate", parents=[common], help="phantoms, clean and low-dose sinograms")
    sub.add_parser("train-proj", parents=[common], help="train the projection-domain denoiser")
    sub.add_parser("train-latent", parents=[common], help="train the latent diffusion refiner")

    s = sub.add_parser("infer", parents=[common], help="run the full cascade on the test split")
    s.add_argument("--test-dose", type=float)
    s.add_argument("--train-dose", type=float)
    s.add_argument("--dose-shift", help="fusion shift b, or 'auto' for the dose policy")
    s.add_argument("--sinogram", help="infer a single sinogram stem instead of the test split")
    s.add_argument("--filter", default="ram-lak", help="FBP apodization window")
    s.add_argument("--tag", help="results subdirectory name")

    s = sub.add_parser("evaluate", parents=[common], help="metrics table, report and PNG panels")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--ref-dir")
    s.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--out")
    s.add_argument("--panels", type=int, default=4, help="number of PNG panels to draw")

    s = sub.add_parser("sweep-dose", parents=[common], help="infer across dose shifts and tabulate")
    s.add_argument("--train-dose", type=float)
    s.add_argument("--test-dose", type=float)
    s.add_argument("--shifts", type=float, nargs="*", default=[-0.5, -0.25, 0.0, 0.25, 0.5])
    s.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"))
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "train-proj": cmd_train_proj,
    "train-latent": cmd_train_latent,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "sweep-dose": cmd_sweep_dose,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "phantom":
            args.seed = cfg.seed
            return cmd_phantom(args, cfg)
        root = Path(args.root) if args.root else cfg.paths.resolve()
        return COMMANDS[args.command](args, cfg, Run(root, cfg))
    except LDCTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
