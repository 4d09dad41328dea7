"""
Experiment orchestration: config -> (seed, group) jobs -> report rows + artifacts.

Artifacts under <output_dir>/<name>/:
    config.json              echo of the validated config (re-loadable)
    report.csv               one row per job, then `mean` and `std` lines
    summary.json             aggregates
    seed{S}_group{G}.pgm|ppm ground truth (top row) and reconstruction (bottom row)
"""

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator
from tqdm import tqdm

from gradleak.attack import match_by_label, run_attack
from gradleak.config import DATA_ROOT, OUTPUT_ROOT, AttackConfig, FedConfig
from gradleak.datasets import (
    CIFAR10_CLASSES,
    CIFAR10_SHAPE,
    CIFAR10_VALIDATION_FILE,
    Dataset,
    load_cifar10,
    make_synthetic,
)
from gradleak.errors import EmptyDatasetError, GradLeakError
from gradleak.fedsim import compute_update, flip_class_rows
from gradleak.imageio import save_image_grid
from gradleak.netzoo import INIT_SCHEMES, ModelSpec, build_model, train_steps

logger = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "experiment", "seed", "group", "image_indices", "labels", "psnr",
    "psnr_mean", "psnr_max", "final_objective", "grad_norm", "runtime_s",
]
AGGREGATED_COLUMNS = ["psnr_mean", "psnr_max", "final_objective", "grad_norm", "runtime_s"]
SCIENTIFIC_COLUMNS = ("final_objective", "grad_norm")

# total_variation sums over pixels: at 3x16x16 this bounds the prior by 0.0144,
# under 1% of the cosine term's [0, 2] range
DESK_TV_WEIGHT = 1e-5


class DatasetSource(BaseModel):
    """Where attacked (and training) images come from."""

    kind: Literal["cifar10", "synthetic"] = "synthetic"
    path: str = Field(default_factory=lambda: DATA_ROOT)
    limit: Optional[int] = Field(default=None, ge=1)
    # synthetic only
    count: int = Field(default=64, ge=1)
    shape: Tuple[int, int, int] = (3, 16, 16)
    num_classes: int = Field(default=10, ge=2)
    seed: int = 0

    def missing_batch(self) -> Optional[str]:
        """The CIFAR-10 batch file that `path` should provide but does not, if any."""
        if self.kind != "cifar10":
            return None
        target = os.path.join(self.path, CIFAR10_VALIDATION_FILE) if os.path.isdir(self.path) else self.path
        return None if os.path.exists(target) else target

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return CIFAR10_SHAPE if self.kind == "cifar10" else tuple(self.shape)

    @property
    def classes(self) -> int:
        return CIFAR10_CLASSES if self.kind == "cifar10" else self.num_classes

    def load(self) -> Dataset:
        if self.kind == "cifar10":
            return load_cifar10(self.path, self.limit)
        return make_synthetic(self.seed, self.count, tuple(self.shape), self.num_classes)


class ExperimentConfig(BaseModel):
    """Everything needed to rerun an experiment; `config.json` is a dump of this."""

    name: str = "experiment"
    model: ModelSpec = Field(default_factory=lambda: ModelSpec.convnet(width=16))
    init_scheme: str = "kaiming_uniform"
    dataset: DatasetSource = Field(default_factory=DatasetSource)
    image_indices: Optional[List[int]] = None
    groups: int = Field(default=1, ge=1, description="image groups per seed when no indices are given")
    distinct_labels: bool = True
    attack: AttackConfig = Field(default_factory=AttackConfig)
    fed: FedConfig = Field(default_factory=FedConfig)
    fed_sweep: List[FedConfig] = Field(default_factory=list)
    trained: bool = False
    train_steps: int = Field(default=200, ge=0)
    train_lr: float = Field(default=0.01, gt=0.0)
    train_batch: int = Field(default=8, ge=1)
    train_pool: int = Field(default=32, ge=1)
    flip: Optional[Tuple[int, int]] = None
    # swap the head rows of the first attacked label and (label + offset) mod K, per job
    flip_offset: Optional[int] = Field(default=None, ge=1)
    output_dir: str = Field(default_factory=lambda: OUTPUT_ROOT)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    jobs: int = Field(default=1, ge=1)

    @field_validator("init_scheme")
    @classmethod
    def _check_scheme(cls, value: str) -> str:
        if value not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme '{value}'")
        return value

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        errors = []
        missing = self.dataset.missing_batch()
        if missing is not None:
            errors.append(f"dataset.path: CIFAR-10 batch not found at {missing}")
        if tuple(self.model.input_shape) != tuple(self.dataset.image_shape):
            errors.append(f"model.input_shape {tuple(self.model.input_shape)} does not match "
                          f"dataset images {tuple(self.dataset.image_shape)}")
        try:
            self.model.layer_shapes()
        except GradLeakError as e:
            errors.append(f"model: {e}")
        if self.model.num_classes < self.dataset.classes:
            errors.append(f"model.num_classes {self.model.num_classes} is below the "
                          f"dataset's {self.dataset.classes} classes")
        channels = self.dataset.image_shape[0]
        if len(self.attack.box_lo) not in (1, channels):
            errors.append(f"attack.box_lo: {len(self.attack.box_lo)} entries for {channels} channels")
        if self.flip is not None and not all(0 <= c < self.model.num_classes for c in self.flip):
            errors.append(f"flip: class indices {self.flip} out of range")
        if self.flip_offset is not None:
            if self.flip is not None:
                errors.append("flip_offset: cannot be combined with a fixed flip")
            if self.flip_offset % self.model.num_classes == 0:
                errors.append(f"flip_offset: {self.flip_offset} maps every class onto itself")
        if errors:
            raise ValueError("; ".join(errors))
        return self


class ReportRow(BaseModel):
    experiment: str
    seed: int
    group: int
    image_indices: List[int]
    labels: List[int]
    psnr: List[float]
    psnr_mean: float
    psnr_max: float
    final_objective: float
    # norm of the gradient-shaped quantity the server observed
    grad_norm: float
    runtime_s: float

    def csv_cells(self) -> List[str]:
        return [
            self.experiment, str(self.seed), str(self.group),
            " ".join(map(str, self.image_indices)), " ".join(map(str, self.labels)),
            " ".join(f"{p:.4f}" for p in self.psnr),
            f"{self.psnr_mean:.4f}", f"{self.psnr_max:.4f}", f"{self.final_objective:.6e}",
            f"{self.grad_norm:.6e}", f"{self.runtime_s:.2f}",
        ]


def select_groups(dataset: Dataset, n: int, groups: int, distinct: bool = True,
                  start: int = 0) -> List[List[int]]:
    """
    Consecutive groups of n image indices in dataset order.

    With `distinct`, an image whose label already occurs in the group being
    filled is skipped.

    Raises:
        EmptyDatasetError: the dataset runs out before all groups are filled.
    """
    result, cursor = [], start
    for _ in range(groups):
        group: List[int] = []
        seen = set()
        while len(group) < n:
            if cursor >= len(dataset):
                raise EmptyDatasetError(f"dataset has too few images for {groups} groups of {n}")
            label = int(dataset.labels[cursor])
            if not distinct or label not in seen:
                group.append(cursor)
                seen.add(label)
            cursor += 1
        result.append(group)
    return result


def _groups_for(cfg: ExperimentConfig, dataset: Dataset) -> List[List[int]]:
    n = cfg.fed.n
    if cfg.image_indices is not None:
        if len(cfg.image_indices) % n != 0:
            raise EmptyDatasetError(f"{len(cfg.image_indices)} image indices do not split into groups of {n}")
        if any(i < 0 or i >= len(dataset) for i in cfg.image_indices):
            raise EmptyDatasetError("image index outside the dataset")
        return [cfg.image_indices[k:k + n] for k in range(0, len(cfg.image_indices), n)]
    return select_groups(dataset, n, cfg.groups, distinct=cfg.distinct_labels and n > 1)


def _training_pool(cfg: ExperimentConfig, dataset: Dataset, groups: Sequence[Sequence[int]]) -> Dataset:
    attacked = {i for g in groups for i in g}
    pool = [i for i in range(len(dataset)) if i not in attacked][:cfg.train_pool]
    if not pool:
        raise EmptyDatasetError("no images left for training the model")
    return dataset.subset(pool)


def run_job(cfg: ExperimentConfig, dataset: Dataset, seed: int, group: int, indices: Sequence[int],
            train_data: Optional[Dataset], out_dir: Optional[str]) -> ReportRow:
    """One (seed, group) job: build/train model, observe an update, attack it, score, persist."""
    model = build_model(cfg.model, seed, cfg.init_scheme)
    if cfg.trained:
        model = train_steps(model, train_data, cfg.train_steps, cfg.train_lr, cfg.train_batch, seed)
    local = dataset.subset(indices)
    if cfg.flip is not None:
        model = flip_class_rows(model, *cfg.flip)
    elif cfg.flip_offset is not None:
        label = int(local.labels[0])
        model = flip_class_rows(model, label, (label + cfg.flip_offset) % cfg.model.num_classes)

    obs = compute_update(model, list(local), cfg.fed)
    logger.debug("Job seed=%d group=%d: observed gradient norm %.4e", seed, group, obs.target_norm())
    attack_cfg = cfg.attack.model_copy(update={"seed": seed})
    report = run_attack(obs, model, attack_cfg, truth=local.images)

    if out_dir is not None:
        matched = match_by_label(report.images, obs.labels, local.images, local.labels)
        ext = "pgm" if local.images.shape[1] == 1 else "ppm"
        save_image_grid(np.concatenate([local.images, matched]),
                        os.path.join(out_dir, f"seed{seed}_group{group}.{ext}"), columns=len(indices))

    return ReportRow(
        experiment=cfg.name, seed=seed, group=group, image_indices=list(map(int, indices)),
        labels=[int(y) for y in local.labels], psnr=report.psnr,
        psnr_mean=report.psnr_mean, psnr_max=report.psnr_max,
        final_objective=report.final_objective, grad_norm=obs.target_norm(), runtime_s=report.runtime_s,
    )


def aggregates(rows: Sequence[ReportRow]) -> Dict[str, Dict[str, float]]:
    """Mean and (population) std of the numeric row columns."""
    out: Dict[str, Dict[str, float]] = {"mean": {}, "std": {}}
    for column in AGGREGATED_COLUMNS:
        values = np.array([getattr(r, column) for r in rows], dtype=np.float64)
        out["mean"][column] = float(values.mean()) if values.size else float("nan")
        out["std"][column] = float(values.std()) if values.size else float("nan")
    return out


def write_report(rows: Sequence[ReportRow], path: str) -> None:
    stats = aggregates(rows)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(row.csv_cells())
        for label in ("mean", "std"):
            cells = [label] + [""] * 5
            cells += [f"{stats[label][c]:.6e}" if c in SCIENTIFIC_COLUMNS else f"{stats[label][c]:.4f}"
                      for c in AGGREGATED_COLUMNS]
            writer.writerow(cells)


def read_report(path: str) -> List[ReportRow]:
    """Parse the per-job rows of a report.csv (aggregate lines are skipped)."""
    rows = []
    with open(path, newline="") as f:
        for record in csv.DictReader(f):
            if record["experiment"] in ("mean", "std") and not record["seed"]:
                continue
            rows.append(ReportRow(
                experiment=record["experiment"], seed=int(record["seed"]), group=int(record["group"]),
                image_indices=[int(v) for v in record["image_indices"].split()],
                labels=[int(v) for v in record["labels"].split()],
                psnr=[float(v) for v in record["psnr"].split()],
                psnr_mean=float(record["psnr_mean"]), psnr_max=float(record["psnr_max"]),
                final_objective=float(record["final_objective"]), grad_norm=float(record["grad_norm"]),
                runtime_s=float(record["runtime_s"]),
            ))
    return rows


def run_experiment(cfg: ExperimentConfig, jobs: Optional[int] = None, progress: bool = False,
                   persist: bool = True) -> List[ReportRow]:
    """
    Run every (seed, group) job and write artifacts.

    Rows come back ordered by (seed, group) regardless of completion order.
    """
    dataset = cfg.dataset.load()
    groups = _groups_for(cfg, dataset)
    train_data = _training_pool(cfg, dataset, groups) if cfg.trained else None
    out_dir = os.path.join(cfg.output_dir, cfg.name) if persist else None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as f:
            f.write(cfg.model_dump_json(indent=2))

    plan = [(seed, g, indices) for seed in cfg.seeds for g, indices in enumerate(groups)]
    logger.info("Experiment '%s': %d jobs (%d seeds x %d groups of %d)",
                cfg.name, len(plan), len(cfg.seeds), len(groups), cfg.fed.n)

    def job(item):
        seed, g, indices = item
        return run_job(cfg, dataset, seed, g, indices, train_data, out_dir)

    workers = jobs or cfg.jobs
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(tqdm(pool.map(job, plan), total=len(plan), desc=cfg.name, disable=not progress))

    if out_dir is not None:
        write_report(rows, os.path.join(out_dir, "report.csv"))
        stats = aggregates(rows)
        summary = {
            "experiment": cfg.name,
            "jobs": len(rows),
            "psnr_median": float(np.median([r.psnr_mean for r in rows])),
            **{f"{k}_{stat}": v for stat, values in stats.items() for k, v in values.items()},
        }
        with open(os.path.join(out_dir, "summary.json"), "w") as f:
            json.dump(summary, f, indent=2)
        logger.info("Wrote %d rows to %s", len(rows), out_dir)
    return rows


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a JSON experiment config."""
    with open(path) as f:
        return ExperimentConfig.model_validate_json(f.read())


def variant(base: ExperimentConfig, suffix: str, **update) -> ExperimentConfig:
    """A validated copy of `base` named `<base>_<suffix>` with `update` applied."""
    values = {**base.model_dump(), **update, "name": f"{base.name}_{suffix}"}
    return ExperimentConfig.model_validate(values)


def desk_config(name: str = "desk") -> ExperimentConfig:
    """Desk-scale defaults: 16x16 synthetic images, ConvNet D=16, 2000 iterations, 5 seeds."""
    return ExperimentConfig(name=name, attack=AttackConfig(tv_weight=DESK_TV_WEIGHT), seeds=[0, 1, 2, 3, 4])


def bench_configs(base: ExperimentConfig) -> List[ExperimentConfig]:
    """Untrained/trained x (cosine + signed Adam, euclidean + L-BFGS)."""
    variants = []
    for trained in (False, True):
        for objective, optimizer in (("cosine", "signed_adam"), ("euclidean", "lbfgs")):
            attack = base.attack.model_copy(update={"objective": objective, "optimizer": optimizer})
            tag = f"{'trained' if trained else 'untrained'}_{objective}_{optimizer}"
            variants.append(variant(base, tag, trained=trained, attack=attack.model_dump()))
    return variants


def ablation_configs(base: ExperimentConfig) -> List[ExperimentConfig]:
    """
    Full grid over {signed Adam, Adam} x {cosine, euclidean} x {TV on, TV off}.

    "TV on" keeps the base weight, or DESK_TV_WEIGHT when the base has none.
    """
    tv_on = base.attack.tv_weight or DESK_TV_WEIGHT
    variants = []
    for optimizer in ("signed_adam", "adam"):
        for objective in ("cosine", "euclidean"):
            for tv_weight in (tv_on, 0.0):
                attack = base.attack.model_copy(update={
                    "optimizer": optimizer, "objective": objective, "tv_weight": tv_weight,
                })
                tag = f"{optimizer}_{objective}_tv{'on' if tv_weight else 'off'}"
                variants.append(variant(base, tag, attack=attack.model_dump()))
    return variants


def architecture_configs(base: ExperimentConfig, widths: Sequence[int] = (8, 16, 32),
                         depths: Sequence[int] = (0, 2, 4)) -> List[ExperimentConfig]:
    """
    ConvNet sweeps around the base model, one factor at a time: width D, extra
    residual blocks, and zero vs circular padding. Variants repeated by several
    sweeps are run once.
    """
    spec = base.model
    width = spec.width if spec.kind == "convnet" else 16
    normalize = bool(spec.layers) and spec.layers[0].kind == "normalize"

    def convnet(**kwargs) -> dict:
        options = dict(width=width, depth=0, padding_mode="zero")
        options.update(kwargs)
        return ModelSpec.convnet(input_shape=spec.input_shape, num_classes=spec.num_classes,
                                 skips=options["depth"] > 0, normalize=normalize, **options).model_dump()

    grid = [(f"D{w}_depth0_zero", convnet(width=w)) for w in widths]
    grid += [(f"D{width}_depth{d}_zero", convnet(depth=d)) for d in depths]
    grid += [(f"D{width}_depth0_{mode}", convnet(padding_mode=mode)) for mode in ("zero", "circular")]
    seen, variants = set(), []
    for tag, model in grid:
        if tag not in seen:
            seen.add(tag)
            variants.append(variant(base, tag, model=model))
    return variants


def flip_configs(base: ExperimentConfig, offset: int = 1) -> List[ExperimentConfig]:
    """Trained model attacked as is and with the attacked label's head row swapped away."""
    return [
        variant(base, "trained", trained=True, flip=None, flip_offset=None),
        variant(base, "trained_flipped", trained=True, flip=None, flip_offset=offset),
    ]


def default_fed_sweep() -> List[FedConfig]:
    """One local step, 100 local steps and a few divergent steps, single image each."""
    return [
        FedConfig(n=1, epochs=1, batch_size=1, lr=1e-4, raw_gradient=False),
        FedConfig(n=1, epochs=100, batch_size=1, lr=1e-4, raw_gradient=False),
        FedConfig(n=1, epochs=5, batch_size=1, lr=1e-1, raw_gradient=False),
    ]


def fedsim_configs(base: ExperimentConfig) -> List[ExperimentConfig]:
    """One experiment per FedConfig of the sweep (or the default sweep)."""
    sweep = base.fed_sweep or default_fed_sweep()
    return [variant(base, f"n{fc.n}_E{fc.epochs}_B{fc.batch_size}_lr{fc.lr:g}", fed=fc.model_dump())
            for fc in sweep]
