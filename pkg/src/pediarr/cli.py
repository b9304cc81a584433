"""Command-line entry point: one subcommand per pipeline stage.

Every subcommand takes ``--out DIR``, an optional ``--config FILE`` of flat
``key=value`` lines, and per-key flags that override the file.  The resolved
settings are written to ``DIR/config.txt`` before any work starts.

Exit codes: 0 success, 1 validation error, 2 numeric abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import agcacl as L
from . import autodiff as ad
from .container import ContainerError
from .dsp import (AugmentationSpec, FilterSpec, WaveletSpec, balance_upsample, downsample2,
                  load_samples, preprocess_window, save_samples, slice_windows)
from .evaluation import (class_compactness, confusion, export_heatmap, export_similarity_series,
                         macro_metrics, write_compactness, write_report)
from .ingest import (DatasetManifest, ManifestEntry, extract_labeled_segments, load_record,
                     read_annotations, read_manifest, stratified_split, write_manifest)
from .model import ZERO_GRAD_PARAMS, FusionNet, ModelConfig, focal_loss
from .synth import HARD_PAIR, SynthSpec, long_tail_counts, write_synth_records
from .train import (NumericAbort, TrainConfig, embed, load_checkpoint, load_coeffs, train)

log = logging.getLogger("pediarr")


class ValidationError(ValueError):
    pass


# Documented config keys per subcommand, with defaults.  Types follow the default.
KEYS: dict[str, dict[str, object]] = {
    "synth": {"seed": 0, "scale": 50.0, "minimum": 4, "noise": 0.05},
    "ingest": {"seed": 0},
    "split": {"seed": 0, "ratios": "0.7,0.1,0.2"},
    "preprocess": {"seed": 0, "notch_q": 30.0, "cheby_ripple": 0.5, "wavelet": "db6",
                   "levels": 5},
    "augment": {"seed": 0, "target": 5000, "shift_max": 0.2, "flip_prob": 0.5,
                "warp_low": 0.9, "warp_high": 1.1, "drift_amp_max": 0.1,
                "drift_freq_max": 0.3, "scale_low": 0.8, "scale_high": 1.2},
    "train": {"seed": 0, "lr": 1e-4, "weight_decay": 1e-4, "batch_size": 48, "epochs": 30,
              "toy_scale_factor": 1, "gamma": 1.0, "loss": "agcacl", "batches_per_epoch": 0,
              "tau": 0.1, "tau_phi": 0.01, "tau_psi": 0.1, "tau_alpha": 0.1,
              "momentum": 0.9, "prior_pairs": "6-3"},
    "eval": {"seed": 0, "epoch": 0},
    "gradcheck": {"seed": 0, "toy_scale_factor": 16, "length": 64, "batch": 4, "h": 1e-5,
                  "tol": 1e-4, "max_entries": 3, "retries": 2},
    "export-coeffs": {"seed": 0},
}

PATH_ARGS: dict[str, list[tuple[str, bool, str]]] = {
    # (flag, required, help)
    "synth": [],
    "ingest": [("records", True, "directory of .sigc records with .ann annotations")],
    "split": [("manifest", True, "window manifest from ingest")],
    "preprocess": [("manifest", True, "manifest with a split column"),
                   ("records", True, "directory of .sigc records")],
    "augment": [("input", True, "training samples file")],
    "train": [("train", True, "training samples file"), ("val", False, "validation samples")],
    "eval": [("run", True, "training output directory"), ("data", True, "samples to score")],
    "gradcheck": [],
    "export-coeffs": [("run", True, "training output directory")],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _convert(key: str, raw: str, default: object) -> object:
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValidationError(f"bad value for {key}: {raw!r}") from None
    return raw


def read_config(path: str | Path, keys: dict[str, object]) -> dict[str, object]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        if key not in keys:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value.strip(), keys[key])
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pediarr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in KEYS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="key=value settings file")
        for flag, required, help_ in PATH_ARGS[name]:
            sp.add_argument(f"--{flag}", required=required, help=help_)
        for key, default in keys.items():
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                            type=type(default), help=f"default {default}")
    return p


def resolve(args: argparse.Namespace) -> dict[str, object]:
    keys = KEYS[args.command]
    cfg = dict(keys)
    if args.config:
        cfg.update(read_config(args.config, keys))
    for key in keys:
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    return cfg


def write_resolved(out: Path, command: str, cfg: dict[str, object], paths: dict[str, str]) -> None:
    lines = [f"command={command}"]
    lines += [f"{k}={v}" for k, v in sorted(paths.items()) if v is not None]
    lines += [f"{k}={cfg[k]}" for k in sorted(cfg)]
    (out / "config.txt").write_text("\n".join(lines) + "\n")


def read_resolved(run_dir: Path) -> dict[str, str]:
    path = run_dir / "config.txt"
    if not path.exists():
        raise ValidationError(f"{run_dir} has no config.txt")
    return dict(line.split("=", 1) for line in path.read_text().splitlines() if "=" in line)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg, paths, out: Path) -> None:
    spec = SynthSpec(counts=long_tail_counts(cfg["scale"], cfg["minimum"]), noise=cfg["noise"])
    recs = write_synth_records(spec, out / "records", seed=cfg["seed"])
    print(f"wrote {len(recs)} records to {out / 'records'}")


def _record_paths(records: str) -> list[Path]:
    found = sorted(Path(records).glob("*.sigc"))
    if not found:
        raise ValidationError(f"no .sigc records in {records}")
    return found


def _windows(records: str):
    for path in _record_paths(records):
        rec = load_record(path)
        for seg in extract_labeled_segments(rec, read_annotations(path.with_suffix(".ann"))):
            for w in slice_windows(seg, rec.fs):
                yield w, seg.aux_label


def cmd_ingest(cfg, paths, out: Path) -> None:
    entries = [ManifestEntry(w.window_id, w.source[0], w.source[1], w.source[2], w.label, aux)
               for w, aux in _windows(paths["records"])]
    manifest = DatasetManifest(entries)
    write_manifest(manifest, None, out / "manifest.tsv")
    print("windows per class:", " ".join(map(str, manifest.class_counts)))


def cmd_split(cfg, paths, out: Path) -> None:
    manifest, _ = read_manifest(paths["manifest"])
    try:
        ratios = tuple(float(r) for r in str(cfg["ratios"]).split(","))
    except ValueError:
        raise ValidationError(f"bad ratios {cfg['ratios']!r}") from None
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValidationError("ratios must be three non-negative numbers summing to 1")
    assignment = stratified_split(manifest, ratios, seed=cfg["seed"])
    write_manifest(manifest, assignment, out / "manifest.tsv")
    for split in ("train", "val", "test"):
        ids = {w for w, s in assignment.items() if s == split}
        counts = np.bincount([e.major_class - 1 for e in manifest.entries if e.window_id in ids],
                             minlength=6)
        print(split, " ".join(map(str, counts)))


def cmd_preprocess(cfg, paths, out: Path) -> None:
    manifest, assignment = read_manifest(paths["manifest"])
    if not assignment:
        raise ValidationError("manifest has no split column; run split first")
    fspec = FilterSpec(notch_q=cfg["notch_q"], cheby_ripple=cfg["cheby_ripple"])
    wspec = WaveletSpec(family=cfg["wavelet"], levels=cfg["levels"])
    wanted = {e.window_id for e in manifest.entries}
    by_split: dict[str, list] = {"train": [], "val": [], "test": []}
    for w, _ in _windows(paths["records"]):
        if w.window_id in wanted:
            by_split[assignment[w.window_id]].append(
                preprocess_window(downsample2(w), fspec, wspec))
    for split, samples in by_split.items():
        if samples:
            save_samples(samples, out / f"{split}.samples")
        print(split, len(samples))


def cmd_augment(cfg, paths, out: Path) -> None:
    spec = AugmentationSpec(shift_max=cfg["shift_max"], flip_prob=cfg["flip_prob"],
                            warp_range=(cfg["warp_low"], cfg["warp_high"]),
                            drift_amp_max=cfg["drift_amp_max"],
                            drift_freq_max=cfg["drift_freq_max"],
                            scale_range=(cfg["scale_low"], cfg["scale_high"]))
    samples = balance_upsample(load_samples(paths["input"]), cfg["target"], spec,
                               seed=cfg["seed"])
    save_samples(samples, out / "train.samples")
    print("samples", len(samples))


def parse_pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for item in filter(None, (t.strip() for t in str(text).split(","))):
        a, sep, b = item.partition("-")
        if not sep:
            raise ValidationError(f"bad prior pair {item!r}; expected A-B")
        pairs.append((int(a), int(b)))
    return pairs


def _model_config(factor: int) -> ModelConfig:
    if factor < 1:
        raise ValidationError("toy_scale_factor must be >= 1")
    return ModelConfig().scaled(factor)


def cmd_train(cfg, paths, out: Path) -> None:
    try:
        tcfg = TrainConfig(lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                           batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
                           toy_scale_factor=cfg["toy_scale_factor"], gamma=cfg["gamma"],
                           loss=cfg["loss"], batches_per_epoch=cfg["batches_per_epoch"] or None)
        lcfg = L.LossConfig(tau=cfg["tau"], tau_phi=cfg["tau_phi"], tau_psi=cfg["tau_psi"],
                            tau_alpha=cfg["tau_alpha"], momentum=cfg["momentum"])
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    train_set = load_samples(paths["train"])
    val_set = load_samples(paths["val"]) if paths.get("val") else None
    mcfg = _model_config(tcfg.toy_scale_factor)
    prior = L.PriorSpec.pairs(mcfg.n_classes, parse_pairs(cfg["prior_pairs"]))
    model = FusionNet(mcfg, seed=tcfg.seed)
    result = train(model, train_set, val_set, tcfg, lcfg, prior, out_dir=out)
    export_similarity_series([result.initial_S] + [e.S for e in result.logs],
                             out / "similarity_series.csv")
    for e in result.logs:
        print(f"epoch {e.epoch:02d} focal {e.focal:.4f} agcacl {e.agcacl:.4f}")


def _checkpoint(run: Path, epoch: int) -> Path:
    if epoch:
        ckpt = run / f"epoch_{epoch:02d}"
    else:
        found = sorted(run.glob("epoch_*"))
        if not found:
            raise ValidationError(f"no checkpoints in {run}")
        ckpt = found[-1]
    if not ckpt.is_dir():
        raise ValidationError(f"missing checkpoint {ckpt}")
    return ckpt


def cmd_eval(cfg, paths, out: Path) -> None:
    run = Path(paths["run"])
    settings = read_resolved(run)
    model = FusionNet(_model_config(int(settings.get("toy_scale_factor", 1))))
    load_checkpoint(_checkpoint(run, cfg["epoch"]), model)
    samples = load_samples(paths["data"])
    z, logits = embed(model, samples)
    labels = np.array([s.label for s in samples])
    cm = confusion(logits.argmax(axis=1) + 1, labels, model.cfg.n_classes)
    report = macro_metrics(cm)
    write_report(report, cm, out / "report.txt")
    write_compactness(class_compactness(z, labels), out / "compactness.csv")
    print(report.to_text(), end="")


def cmd_gradcheck(cfg, paths, out: Path) -> None:
    mcfg = _model_config(cfg["toy_scale_factor"])
    model = FusionNet(mcfg, seed=cfg["seed"])
    rng = np.random.default_rng(cfg["seed"])
    b, n = cfg["batch"], cfg["length"]
    xe = rng.standard_normal((b, mcfg.ecg_channels, n))
    xm = rng.standard_normal((b, mcfg.iegm_channels, n))
    labels = np.arange(b) % mcfg.n_classes + 1
    protos = L.init_prototypes(mcfg.n_classes, mcfg.fusion_dim, seed=cfg["seed"])
    c = mcfg.n_classes
    alpha = np.full(c, 1.0 / c)
    phi = np.full((c, c), 1.0 / (c - 1)) - np.eye(c) / (c - 1)
    psi = np.full(c, 1.0 / c)

    def objective():
        z, logits = model(xe, xm, training=True, rng=np.random.default_rng(cfg["seed"]))
        con = L.agcacl_total(z, labels, protos, alpha, phi, psi).loss
        return L.combined_objective(focal_loss(logits, labels), con)

    params = {k: v for k, v in model.params.items() if k not in ZERO_GRAD_PARAMS}
    params["prototypes"] = protos
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    report = ad.gradcheck(objective, params, h=cfg["h"], tol=cfg["tol"],
                          max_entries=cfg["max_entries"], retries=cfg["retries"],
                          seed=cfg["seed"])
    model.buffers.update(buffers)
    (out / "gradcheck.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    if not report.passed:
        raise NumericAbort(f"gradient check failed: max relative error {report.worst:.3e}")


def cmd_export_coeffs(cfg, paths, out: Path) -> None:
    run = Path(paths["run"])
    ckpts = sorted(run.glob("epoch_*"))
    if not ckpts:
        raise ValidationError(f"no checkpoints in {run}")
    snapshots = [load_coeffs(c)["S"] for c in ckpts]
    export_similarity_series(snapshots, out / "similarity_series.csv")
    export_heatmap(snapshots[-1], out / "heatmap.csv")
    last = load_coeffs(ckpts[-1])
    for name in ("phi", "psi", "alpha"):
        np.savetxt(out / f"{name}.csv", np.atleast_2d(last[name]), delimiter=",", fmt="%.17g")
    a, b = HARD_PAIR
    print(f"final S[{a},{b}] = {snapshots[-1][a - 1, b - 1]:.6f}")


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "split": cmd_split, "preprocess": cmd_preprocess,
    "augment": cmd_augment, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
    "export-coeffs": cmd_export_coeffs,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args)
        paths = {flag: getattr(args, flag) for flag, _, _ in PATH_ARGS[args.command]}
        for flag, value in paths.items():
            if value is not None and not Path(value).exists():
                raise ValidationError(f"--{flag}: {value} does not exist")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(out, args.command, cfg, paths)
        COMMANDS[args.command](cfg, paths, out)
    except (NumericAbort, FloatingPointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ContainerError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
