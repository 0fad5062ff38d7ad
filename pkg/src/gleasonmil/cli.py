"""Command-line pipeline driver.

Every subcommand exits 0 on success and nonzero with a single
``error: <detail>`` line on stderr otherwise, and accepts ``--seed`` to
override the configured seeds. Relative ``--out`` paths resolve under
``$GLEASONMIL_OUT_ROOT`` when that variable is set.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from gleasonmil import __version__
from gleasonmil.config import PipelineConfig, load_pipeline_config
from gleasonmil.data import (
    ManifestRow,
    Slide,
    load_png,
    load_slides,
    read_manifest,
    save_png,
    write_manifest,
)
from gleasonmil.grading import (
    SCORE_CLASS_NAMES,
    GleasonGrade,
    GleasonScore,
    score_to_grade_group,
    score_to_score_class,
)
from gleasonmil.heatmap import ProbGrid, class_overlay, probability_map
from gleasonmil.metrics import EvaluationReport, confusion, evaluate_labels, \
    per_class_f1, accuracy as cm_accuracy, quadratic_kappa, UndefinedMetricError
from gleasonmil.model import load_checkpoint, network_forward, save_checkpoint
from gleasonmil.preprocess import patch_filename, tile_slide, tissue_mask
from gleasonmil.selflearn import (
    global_assignment_dataset,
    predict_slides,
    read_pseudo_labels,
    refine_labels,
    train_on_patches,
    train_student,
    train_teacher,
    write_loss_history,
    write_pseudo_labels,
)
from gleasonmil.slidescore import KNNClassifier, MLPClassifier, grade_percentages, \
    slide_embedding
from gleasonmil.stain import ReferenceProfile, build_reference, histogram_match
from gleasonmil.synth import SynthConfig, generate_dataset

OUT_ROOT_ENV = "GLEASONMIL_OUT_ROOT"


def _out_path(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _write_report(report_rows: list[tuple[str, str]], text: str, out: Path) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["metric", "value"])
        writer.writerows(report_rows)
    out.with_suffix(out.suffix + ".txt").write_text(text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_gen(args, config: PipelineConfig) -> None:
    out = _out_path(args.out)
    manifest = generate_dataset(config.synth, out)
    print(manifest)


def cmd_tile(args, config: PipelineConfig) -> None:
    rows = read_manifest(args.manifest)
    base = Path(args.manifest).parent
    out = _out_path(args.out)
    patches_root = out / "patches"
    patches_root.mkdir(parents=True, exist_ok=True)
    tiling = config.tiling
    new_rows = []
    for row in rows:
        src = Path(row.path)
        if not src.is_absolute():
            src = base / row.path
        if src.is_dir():
            # already a patch directory: reference it unchanged
            new_rows.append(ManifestRow(row.slide_id, str(src.resolve()), row.primary,
                                        row.secondary, row.split))
            continue
        pixels = load_png(src)
        mask = tissue_mask(pixels)
        patches = tile_slide(pixels, window=tiling.window, stride=tiling.stride,
                             min_tissue=tiling.min_tissue, mask=mask)
        slide_dir = patches_root / row.slide_id
        slide_dir.mkdir(exist_ok=True)
        with open(slide_dir / f"{row.slide_id}_index.csv", "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["patch", "x_offset", "y_offset", "tissue_fraction"])
            for patch in patches:
                name = patch_filename(row.slide_id, patch.grid_col, patch.grid_row)
                save_png(patch.pixels, slide_dir / name)
                x_off, y_off = patch.offsets(tiling.stride)
                writer.writerow([name, x_off, y_off, repr(patch.tissue_fraction)])
        new_rows.append(ManifestRow(row.slide_id, f"patches/{row.slide_id}",
                                    row.primary, row.secondary, row.split))
    write_manifest(new_rows, out / "manifest.csv")
    print(out / "manifest.csv")


def cmd_normalize(args, config: PipelineConfig) -> None:
    reference = build_reference(load_png(args.reference))
    out = _out_path(args.out)
    patches_root = out / "patches"
    patches_root.mkdir(parents=True, exist_ok=True)
    reference.save(out / "reference_profile.txt")
    rows = read_manifest(args.manifest)
    slides = load_slides(args.manifest)
    new_rows = []
    for row, slide in zip(rows, slides):
        slide_dir = patches_root / slide.slide_id
        slide_dir.mkdir(exist_ok=True)
        for i, patch_id in enumerate(slide.patch_ids):
            matched = histogram_match(slide.pixels[i], reference)
            save_png(matched, slide_dir / f"{patch_id}.png")
        new_rows.append(ManifestRow(row.slide_id, f"patches/{row.slide_id}",
                                    row.primary, row.secondary, row.split))
    write_manifest(new_rows, out / "manifest.csv")
    print(out / "manifest.csv")


def cmd_train_teacher(args, config: PipelineConfig) -> None:
    slides = load_slides(args.manifest, split="train")
    model, losses = train_teacher(slides, config.teacher, config.model, agg=args.agg)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    write_loss_history(out.with_suffix(out.suffix + ".loss.csv"), losses, config.teacher)
    print(out)


def cmd_pseudo_label(args, config: PipelineConfig) -> None:
    model = load_checkpoint(args.ckpt)
    split = None if args.split == "all" else args.split
    slides = load_slides(args.manifest, split=split)
    if not slides:
        raise ValueError(f"no slides in split {args.split!r}")
    labels = {s.slide_id: s.label for s in slides}
    records = refine_labels(predict_slides(slides, model), labels)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pseudo_labels(records, out)
    print(out)


def cmd_train_student(args, config: PipelineConfig) -> None:
    records = read_pseudo_labels(args.pseudo)
    slides = load_slides(args.manifest)
    patches = {(s.slide_id, pid): s.pixels[i]
               for s in slides for i, pid in enumerate(s.patch_ids)}
    model, losses = train_student(records, patches, config.student, config.model)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    write_loss_history(out.with_suffix(out.suffix + ".loss.csv"), losses, config.student)
    print(out)


def cmd_baseline_global(args, config: PipelineConfig) -> None:
    slides = load_slides(args.manifest, split="train")
    dataset = global_assignment_dataset(slides)
    if not dataset:
        raise ValueError("global-assignment dataset is empty "
                         "(no benign or single-grade slides in the train split)")
    pixels = np.stack([entry[2] for entry in dataset])
    targets = np.asarray([entry[3].value for entry in dataset])
    # Plain (unweighted) cross entropy: the baseline replicates the student's
    # architecture, optimizer and schedule, not its class-weighted loss.
    model, losses = train_on_patches(pixels, targets, config.student, config.model,
                                     weights=np.full(4, 4.0))
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    write_loss_history(out.with_suffix(out.suffix + ".loss.csv"), losses, config.student)
    print(out)


def _slide_descriptors(slides: list[Slide], model, method: str, config: PipelineConfig):
    vectors = []
    for slide in slides:
        features = []
        hard = []
        soft = []
        for start in range(0, slide.n_instances, 256):
            z, probs, _ = network_forward(slide.pixels[start:start + 256], model)
            features.append(z)
            soft.append(probs)
            hard.extend(np.argmax(probs, axis=1).tolist())
        if method.startswith("ggpct"):
            if config.scoring.soft_percentages:
                vectors.append(grade_percentages(None, soft_probs=np.vstack(soft)))
            else:
                vectors.append(grade_percentages(hard))
        else:
            vectors.append(slide_embedding(np.vstack(features)))
    return np.stack(vectors)


def cmd_score(args, config: PipelineConfig) -> None:
    model = load_checkpoint(args.ckpt)
    slides = load_slides(args.manifest)
    train = [s for s in slides if s.split == "train"]
    held_out = [s for s in slides if s.split in ("val", "test")]
    if not train:
        raise ValueError("no train split slides to fit on")
    if not held_out:
        raise ValueError("no val/test slides to score")

    x_train = _slide_descriptors(train, model, args.method, config)
    x_eval = _slide_descriptors(held_out, model, args.method, config)
    gg_train = [score_to_grade_group(s.score).value for s in train]
    sc_train = [score_to_score_class(s.score) for s in train]

    if args.method.endswith("knn"):
        gg_model = KNNClassifier(k=config.scoring.knn_k).fit(x_train, gg_train)
        sc_model = KNNClassifier(k=config.scoring.knn_k).fit(x_train, sc_train)
        gg_pred = gg_model.predict_many(x_eval)
        sc_pred = sc_model.predict_many(x_eval)
    else:
        gg_pred = MLPClassifier(config.scoring.mlp_config()).fit(x_train, gg_train).predict(x_eval)
        sc_pred = MLPClassifier(config.scoring.mlp_config()).fit(x_train, sc_train).predict(x_eval)

    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["slide_id", "true_score", "pred_score", "true_gg", "pred_gg"])
        for slide, sc, gg in zip(held_out, sc_pred, gg_pred):
            writer.writerow([slide.slide_id,
                             SCORE_CLASS_NAMES[score_to_score_class(slide.score)],
                             SCORE_CLASS_NAMES[int(sc)],
                             score_to_grade_group(slide.score).value, int(gg)])
    print(out)


# --- evaluate ---------------------------------------------------------------

def _read_patch_labels(path: Path) -> dict[tuple[str, str], int]:
    """Patch labels from any patch-level CSV: prefers pred_grade, then
    teacher probability columns (argmax), then true_grade/grade."""
    out: dict[tuple[str, str], int] = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        names = reader.fieldnames or []
        prob_cols = [c for c in ("p_nc", "p_gg3", "p_gg4", "p_gg5") if c in names]
        label_col = next((c for c in ("pred_grade", "true_grade", "grade") if c in names), None)
        if len(prob_cols) != 4 and label_col is None:
            raise ValueError(f"{path}: need pred_grade/true_grade/grade or p_* columns")
        for row in reader:
            key = (row["slide_id"], row["patch_id"])
            if label_col is not None:
                out[key] = GleasonGrade.parse(row[label_col]).value
            else:
                probs = [float(row[c]) for c in ("p_nc", "p_gg3", "p_gg4", "p_gg5")]
                out[key] = int(np.argmax(probs))
    return out


def _read_slide_labels(path: Path, prefer_pred: bool) -> dict[str, tuple[int, int]]:
    """(grade group, score class) per slide from a score report or manifest."""
    out: dict[str, tuple[int, int]] = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        names = reader.fieldnames or []
        for row in reader:
            if prefer_pred and "pred_gg" in names:
                gg = int(row["pred_gg"])
                sc = SCORE_CLASS_NAMES.index(row["pred_score"])
            elif "true_gg" in names:
                gg = int(row["true_gg"])
                sc = SCORE_CLASS_NAMES.index(row["true_score"])
            elif "gleason_primary" in names:
                if row["gleason_primary"] == "NC":
                    score = GleasonScore.benign()
                else:
                    score = GleasonScore(int(row["gleason_primary"]),
                                         int(row["gleason_secondary"]))
                gg = score_to_grade_group(score).value
                sc = score_to_score_class(score)
            else:
                raise ValueError(f"{path}: need pred_gg/true_gg or manifest columns")
            out[row["slide_id"]] = (gg, sc)
    return out


def cmd_evaluate(args, config: PipelineConfig) -> None:
    out = _out_path(args.out)
    if args.level == "patch":
        pred = _read_patch_labels(Path(args.pred))
        truth = _read_patch_labels(Path(args.truth))
        keys = sorted(set(pred) & set(truth))
        if not keys:
            raise ValueError("no overlapping (slide_id, patch_id) pairs")
        report = evaluate_labels([truth[k] for k in keys], [pred[k] for k in keys])
        _write_report(report.to_csv_rows(), report.to_text(), out)
    else:
        pred = _read_slide_labels(Path(args.pred), prefer_pred=True)
        truth = _read_slide_labels(Path(args.truth), prefer_pred=False)
        keys = sorted(set(pred) & set(truth))
        if not keys:
            raise ValueError("no overlapping slide_ids")
        gg_true = [truth[k][0] for k in keys]
        gg_pred = [pred[k][0] for k in keys]
        sc_true = [truth[k][1] for k in keys]
        sc_pred = [pred[k][1] for k in keys]
        gg_cm = confusion(gg_true, gg_pred, 6, [f"GG{i}" for i in range(6)])
        report = EvaluationReport(gg_cm, cm_accuracy(gg_cm), *per_class_f1(gg_cm),
                                  kappa=_kappa_or_none(gg_cm),
                                  cancer_precision=None, cancer_sensitivity=None)
        sc_cm = confusion(sc_true, sc_pred, 6, SCORE_CLASS_NAMES)
        report.extra["score_kappa"] = _kappa_or_none(sc_cm)
        report.extra["score_accuracy"] = cm_accuracy(sc_cm)
        _write_report(report.to_csv_rows(), report.to_text(), out)
    print(out)


def _kappa_or_none(cm):
    try:
        return quadratic_kappa(cm)
    except UndefinedMetricError:
        return None


def cmd_heatmap(args, config: PipelineConfig) -> None:
    model = load_checkpoint(args.ckpt)
    slides = [s for s in load_slides(args.manifest) if s.slide_id == args.slide]
    if not slides:
        raise ValueError(f"slide {args.slide!r} not found in manifest")
    slide = slides[0]
    side = slide.pixels.shape[1]
    # The patch side is the window; the configured stride applies only when
    # its window matches the data (otherwise the grid is non-overlapping).
    window = side
    stride = config.tiling.stride if config.tiling.window == side else side

    entries = []
    for start in range(0, slide.n_instances, 256):
        _, probs, _ = network_forward(slide.pixels[start:start + 256], model)
        for offset in range(probs.shape[0]):
            i = start + offset
            entries.append((int(slide.grids[i, 0]), int(slide.grids[i, 1]), probs[offset]))
    grid = ProbGrid.from_patches(entries, stride=stride, window=window)
    out_h = stride * (grid.probs.shape[0] - 1) + window
    out_w = stride * (grid.probs.shape[1] - 1) + window
    prob_map = probability_map(grid, out_h, out_w)

    # reassemble a mosaic to mask background pixels
    mosaic = np.full((out_h, out_w, 3), 255, dtype=np.uint8)
    for i in range(slide.n_instances):
        x = int(slide.grids[i, 0]) * stride
        y = int(slide.grids[i, 1]) * stride
        mosaic[y:y + side, x:x + side] = slide.pixels[i]
    mask = tissue_mask(mosaic)

    overlay = class_overlay(prob_map, mask)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from PIL import Image
    Image.fromarray(overlay, mode="RGBA").save(out, format="PNG")
    np.save(out.with_suffix(out.suffix + ".npy"), prob_map)
    print(out)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gleasonmil",
        description="Weakly-supervised Gleason grading pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(func=func)
        p.add_argument("--config", help="pipeline config file (INI sections per stage)")
        p.add_argument("--seed", type=int, help="override every configured seed")
        return p

    p = add("synth-gen", cmd_synth_gen, help="generate a synthetic dataset")
    p.add_argument("--out", required=True)

    p = add("tile", cmd_tile, help="tile slide images into patch directories")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("normalize", cmd_normalize, help="histogram-match patches to a reference image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)

    p = add("train-teacher", cmd_train_teacher, help="train the bag-supervised teacher")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--agg", choices=["max", "attention"], default="max")

    p = add("pseudo-label", cmd_pseudo_label,
            help="teacher inference plus label refinement")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="train")

    p = add("train-student", cmd_train_student, help="train the student on pseudo-labels")
    p.add_argument("--pseudo", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("baseline-global", cmd_baseline_global,
            help="train the global-assignment baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("score", cmd_score, help="slide-level Grade Group / score prediction")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=["knn", "mlp", "ggpct-knn", "ggpct-mlp"],
                   required=True)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, help="metrics report from prediction files")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--level", choices=["patch", "slide"], required=True)
    p.add_argument("--out", required=True)

    p = add("heatmap", cmd_heatmap, help="grade overlay PNG for one slide")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_pipeline_config(args.config, seed=args.seed)
        args.func(args, config)
    except Exception as exc:  # every failure becomes one parsable line
        message = str(exc).replace("\n", " ") or exc.__class__.__name__
        print(f"error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
