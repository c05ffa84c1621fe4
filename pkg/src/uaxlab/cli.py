"""Command-line surface: dataset, training, crafting, evaluation, transfer.

Each invocation owns one output location and writes a manifest listing
every produced file with its sha256, the effective config, and wall-clock
timings. All randomness flows from explicit --seed flags, so reruns are
byte-identical except for the timings inside the manifest.

Exit codes: 0 success, 1 usage error, 2 runtime/data error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, pngio
from .attack import (
    AttackError,
    CraftConfig,
    PerturbationBudget,
    craft_uax,
    load_artifact,
    save_artifact,
)
from .dataset import (
    DatasetError,
    SynthParams,
    generate_synthetic,
    load_directory,
    preprocess,
    split_disjoint,
)
from .extractor import (
    ARCH_IDS,
    ExtractorSpec,
    ModelFormatError,
    TrainConfig,
    init_model,
    load_model,
    save_model,
    train_classifier,
)
from .metrics import (
    MetricsError,
    build_scores,
    compute_eer,
    evaluate_uax,
    gallery_embeddings,
    histogram_csv,
    transfer_matrix,
)
from . import numerics as nm

__all__ = ["run", "main"]

_RUNTIME_ERRORS = (
    DatasetError,
    AttackError,
    MetricsError,
    ModelFormatError,
    pngio.PngError,
    nm.ShapeError,
    nm.GraphError,
    nm.NonFiniteError,
    ValueError,
    OSError,
)


# ---------------------------------------------------------------------------
# manifest plumbing
# ---------------------------------------------------------------------------

class _Run:
    """Collects written files and timings for the closing manifest."""

    def __init__(self, out_dir: str, command: str, config: dict):
        self.out_dir = out_dir
        self.command = command
        self.config = config
        self.files: list[str] = []
        self.t0 = time.monotonic()
        self.wall_start = time.time()
        os.makedirs(out_dir, exist_ok=True)

    def path(self, rel: str) -> str:
        full = os.path.join(self.out_dir, rel)
        os.makedirs(os.path.dirname(full) or ".", exist_ok=True)
        return full

    def note(self, full_path: str) -> str:
        self.files.append(full_path)
        return full_path

    def write_bytes(self, rel: str, blob: bytes) -> str:
        full = self.path(rel)
        with open(full, "wb") as fh:
            fh.write(blob)
        return self.note(full)

    def write_text(self, rel: str, text: str) -> str:
        return self.write_bytes(rel, text.encode())

    def write_json(self, rel: str, payload: dict) -> str:
        return self.write_text(rel, json.dumps(payload, sort_keys=True, indent=2) + "\n")

    def finish(self, manifest_path: str | None = None) -> str:
        checksums = {}
        for full in sorted(set(self.files)):
            with open(full, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            checksums[os.path.relpath(full, self.out_dir)] = digest
        manifest = {
            "command": self.command,
            "tool_version": __version__,
            "config": self.config,
            "files": checksums,
            "timings": {
                "started_unix": self.wall_start,
                "wall_seconds": time.monotonic() - self.t0,
            },
        }
        path = manifest_path or os.path.join(self.out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)
            fh.write("\n")
        return path


def _quantize16(img: np.ndarray) -> np.ndarray:
    q = np.round(np.asarray(img, dtype=np.float64) * 65535.0).astype(np.uint16)
    return q[:, :, 0] if q.ndim == 3 and q.shape[2] == 1 else q


def _write_gallery(run: _Run, rel_root: str, gallery) -> None:
    for label in gallery.labels:
        for i, img in enumerate(gallery.entries[label]):
            rel = os.path.join(rel_root, label, f"img{i:04d}.png")
            full = run.path(rel)
            pngio.write_png(full, _quantize16(img), bit_depth=16)
            run.note(full)


def _load_gallery(path: str, role: str):
    data, _report = load_directory(path)
    data.role = role
    return data


def _read_seed_image(path: str) -> np.ndarray:
    img = pngio.read_png(path)
    return preprocess(img)


# ---------------------------------------------------------------------------
# config merge
# ---------------------------------------------------------------------------

def _merged(args: argparse.Namespace, defaults: dict) -> dict:
    """Effective settings: flag > config-file value > built-in default."""
    file_cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise ValueError(f"config file {args.config} must hold a JSON object")
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, default in defaults.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            out[key] = flag_val
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    return out


def _norm_p(text: str) -> float:
    if text in ("inf", "Inf", "INF"):
        return float("inf")
    if text == "2":
        return 2.0
    raise ValueError(f"norm order must be '2' or 'inf', got {text!r}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

# renderer knobs default to the dataset module's own defaults; benchmark
# overrides stay in the experiments module
_GEN_DEFAULTS = {
    "identities": 150,
    "images": 5,
    "split": 2.0 / 3.0,
    "seed": 0,
    "size": 112,
    "channels": 1,
    "prototype_dim": 40,
    "feature_scale": 0.5,
    "shift_px": 2,
    "brightness_delta": 0.06,
    "noise_sigma": 0.02,
}


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _merged(args, _GEN_DEFAULTS)
    params = SynthParams(
        identity_count=cfg["identities"],
        images_per_identity=cfg["images"],
        prototype_dim=cfg["prototype_dim"],
        feature_scale=cfg["feature_scale"],
        shift_px=cfg["shift_px"],
        brightness_delta=cfg["brightness_delta"],
        noise_sigma=cfg["noise_sigma"],
        rng_seed=cfg["seed"],
        image_size=cfg["size"],
        channels=cfg["channels"],
    )
    full = generate_synthetic(params)
    # split gets its own stream so generation and partition stay independent
    train, test = split_disjoint(full, cfg["split"], seed=cfg["seed"] + 7)
    run = _Run(args.out, "gen-data", cfg)
    _write_gallery(run, "train", train)
    _write_gallery(run, "test", test)
    run.write_json(
        "summary.json",
        {
            "train_identities": train.identity_count,
            "test_identities": test.identity_count,
            "images_per_identity": cfg["images"],
            "image_shape": list(train.image_shape),
        },
    )
    run.finish()
    print(f"wrote {train.identity_count} train / {test.identity_count} test identities to {args.out}")
    return 0


_INGEST_DEFAULTS = {"split": None, "seed": 0}


def cmd_ingest(args: argparse.Namespace) -> int:
    cfg = _merged(args, _INGEST_DEFAULTS)
    data, report = load_directory(args.src)
    run = _Run(args.out, "ingest", {**cfg, "src": args.src})
    if cfg["split"] is not None:
        train, test = split_disjoint(data, float(cfg["split"]), seed=cfg["seed"])
        _write_gallery(run, "train", train)
        _write_gallery(run, "test", test)
    else:
        _write_gallery(run, "all", data)
    run.write_json(
        "ingest_report.json",
        {
            "identities_loaded": report.identities_loaded,
            "images_loaded": report.images_loaded,
            "empty_dirs_skipped": report.empty_dirs_skipped,
            "subdirs_ignored": report.subdirs_ignored,
            "files_ignored": report.files_ignored,
            "warnings": report.warnings,
        },
    )
    run.finish()
    print(f"ingested {report.images_loaded} images across {report.identities_loaded} identities")
    return 0


_TRAIN_DEFAULTS = {
    "arch": "tiny_cnn",
    "epochs": 30,
    "batch": 32,
    "lr": 0.05,
    "weight_decay": 1e-4,
    "warmup_epochs": 0,
    "embedding_dim": 64,
    "seed": 0,
}


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _merged(args, _TRAIN_DEFAULTS)
    if cfg["arch"] not in ARCH_IDS:
        raise ValueError(f"unknown arch {cfg['arch']!r}; valid: {', '.join(ARCH_IDS)}")
    data = _load_gallery(args.data, "train")
    spec = ExtractorSpec(
        arch_id=cfg["arch"],
        input_shape=data.image_shape,
        class_count=data.identity_count,
        embedding_dim=cfg["embedding_dim"],
    )
    model = init_model(spec, seed=cfg["seed"])
    train_cfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch"],
        learning_rate=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        warmup_epochs=cfg["warmup_epochs"],
        rng_seed=cfg["seed"],
    )
    model = train_classifier(model, data, train_cfg)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    run = _Run(out_dir, "train", {**cfg, "data": args.data})
    save_model(model, args.out)
    run.note(os.path.abspath(args.out))
    run.finish(manifest_path=args.out + ".manifest.json")
    print(
        f"trained {cfg['arch']} on {data.identity_count} identities: "
        f"train accuracy {model.train_meta.final_train_accuracy:.3f} -> {args.out}"
    )
    return 0


_CRAFT_DEFAULTS = {
    "xi": 10.0 / 255.0,
    "p": "inf",
    "iters": 500,
    "batch": 32,
    "lr": 0.01,
    "seed": 0,
    "metric": "euclidean",
    "stratified": False,
    "final_only_projection": False,
    "seed_image": None,
}


def cmd_craft(args: argparse.Namespace) -> int:
    cfg = _merged(args, _CRAFT_DEFAULTS)
    model = load_model(args.model)
    gallery = _load_gallery(args.train, "train")
    if cfg["seed_image"]:
        x_a = _read_seed_image(cfg["seed_image"])
    else:
        first = gallery.labels[0]
        x_a = gallery.entries[first][0]
    craft_cfg = CraftConfig(
        budget=PerturbationBudget(p=_norm_p(str(cfg["p"])), xi=float(cfg["xi"])),
        iterations=cfg["iters"],
        batch_size=cfg["batch"],
        learning_rate=cfg["lr"],
        rng_seed=cfg["seed"],
        metric=cfg["metric"],
        stratified=bool(cfg["stratified"]),
        project_every_step=not bool(cfg["final_only_projection"]),
    )
    artifact = craft_uax(model, x_a, gallery, craft_cfg)
    run = _Run(args.out, "craft", {**cfg, "model": args.model, "train": args.train})
    paths = save_artifact(artifact, args.out, stem="uax")
    for p in paths.values():
        run.note(p)
    run.finish()
    print(
        f"crafted perturbation: final loss {artifact.final_loss:.4f}, "
        f"max|nu| {np.max(np.abs(artifact.nu)):.6f} -> {args.out}"
    )
    return 0


_EVAL_DEFAULTS = {"pair_budget": 5000, "scores_seed": 0, "hist_bins": 40, "metric": "euclidean"}


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _merged(args, _EVAL_DEFAULTS)
    model = load_model(args.model)
    artifact = load_artifact(args.artifact)
    train_g = _load_gallery(args.train_gallery, "train")
    test_g = _load_gallery(args.test_gallery, "test")
    scores = build_scores(model, train_g, cfg["pair_budget"], seed=cfg["scores_seed"], metric=cfg["metric"])
    eer, tau = compute_eer(scores)
    rep_train, rep_test = evaluate_uax(model, artifact, train_g, test_g, tau, eer, cfg["metric"])

    run = _Run(args.out, "eval", {**cfg, "model": args.model, "artifact": args.artifact})
    for rep in (rep_train, rep_test):
        run.write_json(
            f"eval_{rep.gallery_role}.json",
            {
                "gallery_role": rep.gallery_role,
                "threshold": rep.threshold,
                "eer": rep.eer,
                "baseline_fmr": rep.baseline_fmr,
                "uax_fmr": rep.uax_fmr,
                "baseline_identity_rate": rep.baseline_identity_rate,
                "uax_identity_rate": rep.uax_identity_rate,
            },
        )
    embs, _y = gallery_embeddings(model, train_g)
    uax_emb = model.embed(artifact.adversarial_image)
    diffs = embs - uax_emb
    uax_scores = np.sqrt(np.sum(diffs * diffs, axis=1))
    run.write_text("hist_train.csv", histogram_csv(scores, uax_scores, bins=cfg["hist_bins"]))
    run.finish()
    print(
        f"eval at tau {tau:.4f} (EER {eer:.4f}): "
        f"train baseline {rep_train.baseline_fmr:.4f} vs uax {rep_train.uax_fmr:.4f}; "
        f"test baseline {rep_test.baseline_fmr:.4f} vs uax {rep_test.uax_fmr:.4f}"
    )
    return 0


_TRANSFER_DEFAULTS = {"pair_budget": 5000, "scores_seed": 0, "metric": "euclidean"}


def cmd_transfer(args: argparse.Namespace) -> int:
    cfg = _merged(args, _TRANSFER_DEFAULTS)
    if len(args.models) < 2:
        raise ValueError("transfer needs at least two --models")
    if len(args.artifacts) != len(args.models):
        missing = args.models[len(args.artifacts):] or args.models
        raise ValueError(
            f"need one --artifacts entry per model; missing for {', '.join(os.path.basename(m) for m in missing)}"
        )
    models, artifacts, taus = {}, {}, {}
    train_g = _load_gallery(args.train_gallery, "train")
    gallery = _load_gallery(args.gallery, "test")
    for path, art_path in zip(args.models, args.artifacts):
        mid = os.path.splitext(os.path.basename(path))[0]
        if mid in models:
            raise ValueError(f"duplicate model id {mid!r}")
        models[mid] = load_model(path)
        artifacts[mid] = [load_artifact(art_path)]
        scores = build_scores(
            models[mid], train_g, cfg["pair_budget"], seed=cfg["scores_seed"], metric=cfg["metric"]
        )
        _eer, taus[mid] = compute_eer(scores)
    grid = transfer_matrix(models, artifacts, gallery, taus, cfg["metric"])
    run = _Run(args.out, "transfer", {**cfg, "models": args.models, "artifacts": args.artifacts})
    run.write_text("transfer.csv", grid.to_csv())
    run.write_json(
        "transfer.json",
        {
            "source_ids": grid.source_ids,
            "target_ids": grid.target_ids,
            "values": grid.values.tolist(),
            "thresholds": taus,
        },
    )
    run.finish()
    print("transfer grid:\n" + grid.to_csv().rstrip())
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uaxlab",
        description="craft and score universal face-spoofing perturbations",
    )
    parser.add_argument("--version", action="version", version=f"uaxlab {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate a synthetic identity dataset")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--identities", type=int, help="total identity count before splitting")
    p.add_argument("--images", type=int, help="images per identity")
    p.add_argument("--split", type=float, help="train fraction of identities")
    p.add_argument("--seed", type=int, help="rng seed; the identity split uses seed+7")
    p.add_argument("--size", type=int, help="image side length")
    p.add_argument("--channels", type=int, choices=(1, 3), help="1 grayscale, 3 rgb")
    p.add_argument("--prototype-dim", dest="prototype_dim", type=int)
    p.add_argument("--feature-scale", dest="feature_scale", type=float,
                   help="identity feature contrast; smaller packs identities closer")
    p.add_argument("--shift-px", dest="shift_px", type=int)
    p.add_argument("--brightness-delta", dest="brightness_delta", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("ingest", help="ingest a <root>/<label>/*.png tree")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--src", required=True, help="source directory")
    p.add_argument("--split", type=float, help="optional train fraction; omits split when absent")
    p.add_argument("--seed", type=int, help="rng seed for the split")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_ingest)

    p = subs.add_parser("train", help="train an embedding extractor")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--arch", choices=ARCH_IDS, help="architecture id")
    p.add_argument("--data", required=True, help="training gallery directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int,
                   help="epochs of linear learning-rate ramp before the constant phase")
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output model file (.uaxm)")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("craft", help="craft a universal perturbation")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--train", required=True, help="training gallery directory")
    p.add_argument("--xi", type=float, help="budget radius on the [0,1] scale")
    p.add_argument("--p", choices=("2", "inf"), help="norm order")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--metric", choices=("euclidean", "cosine"))
    p.add_argument("--stratified", action="store_const", const=True, default=None,
                   help="sample one image per sampled identity")
    p.add_argument("--final-only-projection", dest="final_only_projection",
                   action="store_const", const=True, default=None,
                   help="project only after the last iteration")
    p.add_argument("--seed-image", dest="seed_image", help="PNG to perturb (default: first train image)")
    p.add_argument("--out", required=True, help="output artifact directory")
    p.set_defaults(func=cmd_craft)

    p = subs.add_parser("eval", help="score an artifact on train/test galleries")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--model", required=True, help="trained model file")
    p.add_argument("--artifact", required=True, help="artifact sidecar JSON")
    p.add_argument("--train-gallery", dest="train_gallery", required=True)
    p.add_argument("--test-gallery", dest="test_gallery", required=True)
    p.add_argument("--pair-budget", dest="pair_budget", type=int)
    p.add_argument("--scores-seed", dest="scores_seed", type=int)
    p.add_argument("--hist-bins", dest="hist_bins", type=int)
    p.add_argument("--metric", choices=("euclidean", "cosine"))
    p.add_argument("--out", required=True, help="output report directory")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("transfer", help="cross-model transfer grid")
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--models", nargs="+", required=True, help="model files, one per source")
    p.add_argument("--artifacts", nargs="+", required=True, help="artifact sidecars, aligned with --models")
    p.add_argument("--train-gallery", dest="train_gallery", required=True, help="gallery that sets thresholds")
    p.add_argument("--gallery", required=True, help="gallery to score on")
    p.add_argument("--pair-budget", dest="pair_budget", type=int)
    p.add_argument("--scores-seed", dest="scores_seed", type=int)
    p.add_argument("--metric", choices=("euclidean", "cosine"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_transfer)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage problems; this tool reserves
        # 2 for runtime errors and reports usage errors as 1
        if exc.code in (None, 0):
            return 0
        return 1
    try:
        return args.func(args)
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def run() -> int:
    return main(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(run())
