"""End-to-end experiment pipelines: data, training, protection, attack, eval.

A run is described by an :class:`ExperimentPlan` (INI file, one section per
stage) and materialized under one output directory:

    data/                originals as P6 pixmaps plus manifest.jsonl
    models/              extractor weights and training log
    protected/<p>/<s>/   protected images per protector and split
    traces/<p>/          per-image protection traces (JSON lines)
    protect_records/     per-image summary (loss, chaos score) per protector
    attack/<p>/          recovery net, its log, recovered images, metrics
    reports/             machine-readable and human-readable reports

Every randomized stage draws its seed as a hash of the master seed and the
stage name, so any stage can be deleted and reproduced bit-identically.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import protect as P
from .metrics import ImagePair, RankedRetrieval, ad_statistic, cmc_rank_k, m_inp, mean_ap, psnr, ssim
from .nets import FeatureExtractor, RecoveryNet, embed_batch, recover, train_extractor, train_recovery
from .protect import ProtectConfig, ProtectionResult
from .synthdata import derive_seed, gen_dataset, read_image, read_manifest, write_image, write_manifest
from .tensor import Tensor

SETTINGS = ("P2P", "O2P", "P2O", "O2O")
SPLITS = ("train", "query", "gallery")

PROTECTORS = (
    "none",
    "pixelfade",
    "gaussian_blur",
    "mosaic",
    "random_perturb",
    "joint_l1",
    "noise_weight",
    "objective_zero",
    "objective_other",
    "objective_contrastive",
)


class PlanError(ValueError):
    """Malformed experiment plan."""


class StageError(RuntimeError):
    """A pipeline stage cannot run (missing prerequisites or results)."""


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything one reproducible run needs, grouped by stage."""

    # run
    out_dir: str = "run"
    master_seed: int = 7
    protectors: tuple[str, ...] = ("pixelfade", "gaussian_blur", "mosaic")
    settings: tuple[str, ...] = SETTINGS
    # dataset
    n_ids: int = 32
    views_per_id: int = 8
    image_h: int = 32
    image_w: int = 16
    ids_disjoint: bool = False
    # extractor
    extractor_epochs: int = 90
    extractor_lr: float = 3e-3
    extractor_optimizer: str = "adam"
    extractor_batch: int = 32
    embed_dim: int = 64
    # protect
    protect: ProtectConfig = field(default_factory=ProtectConfig)
    # baselines
    blur_radius: int = 3
    mosaic_block: int = 4
    perturb_amplitude: float = 0.25
    joint_l1_weight: float = 1.0
    joint_l1_steps: int = 100
    noise_weight: float = 1.0
    # attack
    attack_epochs: int = 30
    attack_lr: float = 1e-3
    attack_optimizer: str = "adam"
    attack_batch: int = 16
    # eval
    ad_pooled: bool = False

    def validate(self) -> None:
        for name in self.protectors:
            if name not in PROTECTORS:
                raise PlanError(f"unknown protector {name!r}, registered: {', '.join(PROTECTORS)}")
        for setting in self.settings:
            if setting not in SETTINGS:
                raise PlanError(f"unknown setting {setting!r}, valid: {', '.join(SETTINGS)}")
        if len(set(self.protectors)) != len(self.protectors):
            raise PlanError("duplicate protector names in plan")
        self.protect.validate()

    # -- flat key=value view ------------------------------------------------

    _SECTIONS = {
        "run": ("out_dir", "master_seed", "protectors", "settings"),
        "dataset": ("n_ids", "views_per_id", "image_h", "image_w", "ids_disjoint"),
        "extractor": ("extractor_epochs", "extractor_lr", "extractor_optimizer", "extractor_batch", "embed_dim"),
        "baselines": (
            "blur_radius", "mosaic_block", "perturb_amplitude",
            "joint_l1_weight", "joint_l1_steps", "noise_weight",
        ),
        "attack": ("attack_epochs", "attack_lr", "attack_optimizer", "attack_batch"),
        "eval": ("ad_pooled",),
    }

    def to_file(self, path) -> None:
        cp = configparser.ConfigParser()
        for section, names in self._SECTIONS.items():
            cp[section] = {}
            for name in names:
                value = getattr(self, name)
                if isinstance(value, tuple):
                    value = ", ".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = "true" if value else "false"
                cp[section][name] = str(value)
        cp["protect"] = {}
        for f in fields(ProtectConfig):
            value = getattr(self.protect, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            cp["protect"][f.name] = str(value)
        with open(path, "w", encoding="utf-8") as fh:
            cp.write(fh)

    @classmethod
    def from_file(cls, path) -> "ExperimentPlan":
        if not Path(path).exists():
            raise PlanError(f"plan file {path} does not exist")
        cp = configparser.ConfigParser()
        cp.read(path)
        kwargs: dict = {}
        defaults = cls()
        for section, names in cls._SECTIONS.items():
            if not cp.has_section(section):
                continue
            for key in cp[section]:
                if key not in names:
                    raise PlanError(f"{path}: unknown key {key!r} in section [{section}]")
                kwargs[key] = _coerce_plan_value(key, cp[section][key], getattr(defaults, key))
        if cp.has_section("protect"):
            pc_kwargs = {}
            known = {f.name for f in fields(ProtectConfig)}
            for key in cp["protect"]:
                if key not in known:
                    raise PlanError(f"{path}: unknown key {key!r} in section [protect]")
                pc_kwargs[key] = P._parse_field(key, cp["protect"][key])
            kwargs["protect"] = ProtectConfig(**pc_kwargs)
        plan = cls(**kwargs)
        plan.validate()
        return plan


def _coerce_plan_value(key: str, raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise PlanError(f"key {key!r}: expected boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def config_hash(plan: ExperimentPlan) -> str:
    """Order-independent hash over every plan field (protect included)."""
    record = asdict(plan)
    canonical = json.dumps(record, sort_keys=True, default=list)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def stage_seed(plan: ExperimentPlan, *parts) -> int:
    return derive_seed(plan.master_seed, *parts)


# -- stage: data ---------------------------------------------------------------------


def _image_stem(identity: int, camera: int) -> str:
    return f"id{identity:04d}_cam{camera:02d}"


def run_gen_data(plan: ExperimentPlan, out: Path, log: Callable[[str], None] = lambda s: None) -> None:
    plan.validate()
    out = Path(out)
    splits = gen_dataset(
        plan.n_ids,
        plan.views_per_id,
        (plan.image_h, plan.image_w),
        seed=stage_seed(plan, "data"),
        ids_disjoint=plan.ids_disjoint,
    )
    entries = []
    for split in SPLITS:
        split_dir = out / "data" / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for render in getattr(splits, split):
            rel = f"data/{split}/{_image_stem(render.identity_id, render.camera_id)}.ppm"
            write_image(out / rel, render.image)
            entries.append(
                {"split": split, "identity": render.identity_id, "camera": render.camera_id, "path": rel}
            )
    write_manifest(out / "data" / "manifest.jsonl", entries)
    log(f"gen-data: wrote {len(entries)} images under {out / 'data'}")


@dataclass(frozen=True)
class SplitImage:
    identity: int
    camera: int
    path: str
    image: Tensor


def load_split(out: Path, split: str, root: Optional[str] = None) -> list[SplitImage]:
    """Images of one split, ordered by the manifest.

    ``root`` redirects image paths into another tree with the same layout
    (e.g. a protected copy of the data directory).
    """
    out = Path(out)
    manifest = out / "data" / "manifest.jsonl"
    if not manifest.exists():
        raise StageError(f"missing manifest {manifest}; run gen-data first")
    rows = [row for row in read_manifest(manifest) if row["split"] == split]
    images = []
    for row in rows:
        rel = row["path"] if root is None else row["path"].replace("data/", f"{root}/", 1)
        path = out / rel
        if not path.exists():
            raise StageError(f"missing image {path}")
        images.append(SplitImage(row["identity"], row["camera"], rel, read_image(path)))
    return images


# -- stage: extractor ---------------------------------------------------------------


def extractor_path(out: Path) -> Path:
    return Path(out) / "models" / "extractor.fadekit"


def run_train_extractor(plan: ExperimentPlan, out: Path, log: Callable[[str], None] = lambda s: None) -> None:
    out = Path(out)
    train_split = load_split(out, "train")
    renders = _as_renders(train_split)
    model, train_log = train_extractor(
        renders,
        epochs=plan.extractor_epochs,
        optimizer=plan.extractor_optimizer,
        seed=stage_seed(plan, "extractor"),
        lr=plan.extractor_lr,
        batch_size=plan.extractor_batch,
        embed_dim=plan.embed_dim,
    )
    (out / "models").mkdir(parents=True, exist_ok=True)
    model.save(extractor_path(out))
    with open(out / "models" / "extractor_log.jsonl", "w", encoding="utf-8") as fh:
        for row in train_log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    log(f"train-extractor: final accuracy {train_log[-1]['accuracy']:.3f}")


def _as_renders(split_images: Sequence[SplitImage]):
    from .synthdata import JitterRecord, ViewRender

    return [
        ViewRender(s.identity, s.camera, s.image, JitterRecord(0.0, (0, 0), 0.0)) for s in split_images
    ]


def load_extractor(out: Path) -> FeatureExtractor:
    path = extractor_path(out)
    if not path.exists():
        raise StageError(f"missing model weights {path}; run train-extractor first")
    return FeatureExtractor.load(path)


# -- stage: protect -----------------------------------------------------------------


def _protect_one(args) -> tuple[int, ProtectionResult]:
    index, protector, plan, model, item, split, other = args
    image = item.image
    key = (protector, split, item.identity, item.camera)
    if protector == "none":
        return index, ProtectionResult(image.detach(), (), None, None)
    if protector == "gaussian_blur":
        return index, P.gaussian_blur(image, plan.blur_radius)
    if protector == "mosaic":
        return index, P.mosaic(image, plan.mosaic_block)
    if protector == "random_perturb":
        return index, P.random_perturb(image, plan.perturb_amplitude, seed=stage_seed(plan, *key, "perturb"))
    cfg = replace(
        plan.protect,
        noise_seed=stage_seed(plan, *key, "noise"),
        mask_seed=stage_seed(plan, *key, "mask"),
    )
    if protector == "pixelfade":
        return index, P.pixelfade_protect(image, model, cfg)
    if protector == "joint_l1":
        return index, P.joint_l1_opt(
            image, model, plan.joint_l1_weight, plan.joint_l1_steps,
            alpha=cfg.alpha, beta=cfg.beta, noise_seed=cfg.noise_seed,
            grad_norm_exponent=cfg.grad_norm_exponent, normalized_features=cfg.normalized_features,
        )
    if protector == "noise_weight":
        return index, P.noise_weight_protect(image, model, plan.noise_weight, cfg)
    if protector == "objective_zero":
        return index, P.objective_variant_protect(image, model, "zero", cfg)
    if protector == "objective_contrastive":
        return index, P.objective_variant_protect(image, model, "contrastive", cfg)
    if protector == "objective_other":
        return index, P.objective_variant_protect(image, model, "other_identity", cfg, other_image=other)
    raise StageError(f"unregistered protector {protector!r}")


def run_protect(
    plan: ExperimentPlan,
    out: Path,
    protector: str,
    workers: int = 1,
    log: Callable[[str], None] = lambda s: None,
) -> None:
    """Protect every split with one protector; persist images, traces, records."""
    out = Path(out)
    if protector not in PROTECTORS:
        raise StageError(f"unregistered protector {protector!r}")
    model = load_extractor(out) if protector not in ("none", "gaussian_blur", "mosaic", "random_perturb") else None
    if protector not in ("none", "gaussian_blur", "mosaic", "random_perturb") and model is None:
        raise StageError("missing model weights")
    records = []
    for split in SPLITS:
        items = load_split(out, split)
        split_dir = out / "protected" / protector / split
        split_dir.mkdir(parents=True, exist_ok=True)
        trace_dir = out / "traces" / protector
        trace_dir.mkdir(parents=True, exist_ok=True)
        tasks = []
        for i, item in enumerate(items):
            # partner image for the other-identity objective: previous entry
            # of a different identity, wrapping around the split
            other = None
            if protector == "objective_other":
                j = (i - 1) % len(items)
                while items[j].identity == item.identity and j != i:
                    j = (j - 1) % len(items)
                other = items[j].image
            tasks.append((i, protector, plan, model, item, split, other))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(_protect_one, tasks, chunksize=4))
        else:
            outcomes = [_protect_one(t) for t in tasks]
        outcomes.sort(key=lambda pair: pair[0])
        for (i, result), item in zip(outcomes, items):
            stem = _image_stem(item.identity, item.camera)
            write_image(split_dir / f"{stem}.ppm", result.protected)
            with open(trace_dir / f"{split}_{stem}.jsonl", "w", encoding="utf-8") as fh:
                for entry in result.trace:
                    fh.write(
                        json.dumps(
                            {
                                "step": entry.step,
                                "op": entry.op,
                                "loss": entry.feature_loss,
                                "coverage": entry.coverage,
                                "stalled": entry.stalled,
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )
            records.append(
                {
                    "split": split,
                    "identity": item.identity,
                    "camera": item.camera,
                    "path": f"protected/{protector}/{split}/{stem}.ppm",
                    "final_loss": result.final_feature_loss,
                    "constraint_met": result.constraint_met_at_end,
                    "ad": ad_statistic(result.protected.data),
                }
            )
        log(f"protect[{protector}]: {split} done ({len(items)} images)")
    rec_dir = out / "protect_records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    with open(rec_dir / f"{protector}.jsonl", "w", encoding="utf-8") as fh:
        for row in records:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_protect_records(out: Path, protector: str) -> list[dict]:
    path = Path(out) / "protect_records" / f"{protector}.jsonl"
    if not path.exists():
        raise StageError(f"missing protection records {path}; run protect first")
    return read_manifest(path)


# -- stage: attack ------------------------------------------------------------------


def run_attack(
    plan: ExperimentPlan, out: Path, protector: str, log: Callable[[str], None] = lambda s: None
) -> dict:
    """Train the recovery adversary on protected train pairs, score on gallery."""
    out = Path(out)
    protected_root = f"protected/{protector}"
    try:
        protected_train = load_split(out, "train", root=protected_root)
    except StageError as exc:
        raise StageError(f"missing protected train split for {protector!r}: {exc}") from exc
    original_train = load_split(out, "train")
    pairs = [(p.image, o.image) for p, o in zip(protected_train, original_train)]
    net, attack_log = train_recovery(
        pairs,
        epochs=plan.attack_epochs,
        optimizer=plan.attack_optimizer,
        seed=stage_seed(plan, "attack", protector),
        lr=plan.attack_lr,
        batch_size=plan.attack_batch,
    )
    attack_dir = out / "attack" / protector
    (attack_dir / "recovered").mkdir(parents=True, exist_ok=True)
    net.save(attack_dir / "recovery.fadekit")
    with open(attack_dir / "log.jsonl", "w", encoding="utf-8") as fh:
        for row in attack_log:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    protected_gallery = load_split(out, "gallery", root=protected_root)
    original_gallery = load_split(out, "gallery")
    psnrs, ssims = [], []
    for prot, orig in zip(protected_gallery, original_gallery):
        recovered = recover(net, prot.image)
        stem = _image_stem(prot.identity, prot.camera)
        write_image(attack_dir / "recovered" / f"{stem}.ppm", recovered)
        pair = ImagePair(orig.image.data, recovered.data)
        psnrs.append(psnr(pair))
        ssims.append(ssim(pair))
    ad_values = [row["ad"] for row in load_protect_records(out, protector) if row["split"] == "gallery"]
    metrics = {
        "protector": protector,
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
        "ad": float(np.mean(ad_values)),
    }
    with open(attack_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, sort_keys=True)
        fh.write("\n")
    log(f"attack[{protector}]: recovered SSIM {metrics['ssim']:.3f}, PSNR {metrics['psnr']:.2f}")
    return metrics


# -- stage: retrieval eval ----------------------------------------------------------


def _ranked_retrieval(model: FeatureExtractor, queries: list[SplitImage], gallery: list[SplitImage]) -> RankedRetrieval:
    emb_q = embed_batch(model, np.stack([s.image.data for s in queries]))
    emb_g = embed_batch(model, np.stack([s.image.data for s in gallery]))
    similarity = emb_q @ emb_g.T
    rankings = np.argsort(-similarity, axis=1, kind="stable")
    relevant = [
        frozenset(j for j, g in enumerate(gallery) if g.identity == q.identity) for q in queries
    ]
    return RankedRetrieval(rankings.tolist(), relevant)


def run_eval(
    plan: ExperimentPlan, out: Path, protector: str, setting: str, log: Callable[[str], None] = lambda s: None
) -> dict:
    """Rank-1/mAP/mINP for one protector under one query/gallery setting."""
    if setting not in SETTINGS:
        raise StageError(f"unknown setting {setting!r}, valid: {', '.join(SETTINGS)}")
    out = Path(out)
    model = load_extractor(out)
    protected_root = f"protected/{protector}"
    q_root = protected_root if setting[0] == "P" else None
    g_root = protected_root if setting[2] == "P" else None
    queries = load_split(out, "query", root=q_root)
    gallery = load_split(out, "gallery", root=g_root)
    retrieval = _ranked_retrieval(model, queries, gallery)
    result = {
        "protector": protector,
        "setting": setting,
        "rank1": cmc_rank_k(retrieval, 1),
        "map": mean_ap(retrieval),
        "minp": m_inp(retrieval),
    }
    log(f"eval[{protector}/{setting}]: rank1 {result['rank1']:.3f}")
    return result


# -- report -------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """All computed cells of one run plus provenance."""

    retrieval: dict[tuple[str, str], dict]
    attack: dict[str, dict]
    config_hash: str
    master_seed: int
    created_at: Optional[str] = None  # in-memory only, never serialized


def emit_report(plan: ExperimentPlan, out: Path, report: EvalReport) -> None:
    """Write reports/report.jsonl and an aligned human-readable table.

    Raises listing every missing (protector, setting) or attack cell.
    """
    missing = []
    for protector in plan.protectors:
        for setting in plan.settings:
            if (protector, setting) not in report.retrieval:
                missing.append(f"retrieval:{protector}/{setting}")
        if protector not in report.attack:
            missing.append(f"attack:{protector}")
    if missing:
        raise StageError("cannot emit report, missing cells: " + ", ".join(missing))

    out = Path(out)
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    with open(reports / "report.jsonl", "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {"kind": "provenance", "config_hash": report.config_hash, "master_seed": report.master_seed},
                sort_keys=True,
            )
            + "\n"
        )
        for protector in plan.protectors:
            for setting in plan.settings:
                row = report.retrieval[(protector, setting)]
                fh.write(json.dumps({"kind": "retrieval", **row}, sort_keys=True) + "\n")
        for protector in plan.protectors:
            fh.write(json.dumps({"kind": "attack", **report.attack[protector]}, sort_keys=True) + "\n")

    lines = [
        f"config_hash: {report.config_hash}",
        f"master_seed: {report.master_seed}",
        "",
        f"{'protector':<22} {'setting':<8} {'rank1':>7} {'mAP':>7} {'mINP':>7}",
    ]
    for protector in plan.protectors:
        for setting in plan.settings:
            row = report.retrieval[(protector, setting)]
            lines.append(
                f"{protector:<22} {setting:<8} {row['rank1']:>7.3f} {row['map']:>7.3f} {row['minp']:>7.3f}"
            )
    lines.append("")
    lines.append(f"{'protector':<22} {'PSNR':>8} {'SSIM':>7} {'AD':>9}")
    for protector in plan.protectors:
        row = report.attack[protector]
        lines.append(f"{protector:<22} {row['psnr']:>8.2f} {row['ssim']:>7.3f} {row['ad']:>9.2f}")
    (reports / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_report(out: Path) -> EvalReport:
    path = Path(out) / "reports" / "report.jsonl"
    if not path.exists():
        raise StageError(f"missing report {path}")
    retrieval: dict[tuple[str, str], dict] = {}
    attack: dict[str, dict] = {}
    config = {"config_hash": "", "master_seed": -1}
    for row in read_manifest(path):
        kind = row.pop("kind")
        if kind == "provenance":
            config = row
        elif kind == "retrieval":
            retrieval[(row["protector"], row["setting"])] = row
        elif kind == "attack":
            attack[row["protector"]] = row
    return EvalReport(
        retrieval=retrieval,
        attack=attack,
        config_hash=config["config_hash"],
        master_seed=config["master_seed"],
    )


def run_all(
    plan: ExperimentPlan, out: Path, workers: int = 1, log: Callable[[str], None] = lambda s: None
) -> EvalReport:
    """Run every stage for every protector in the plan and emit the report."""
    plan.validate()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    plan.to_file(out / "plan.resolved.cfg")
    t0 = time.time()
    run_gen_data(plan, out, log)
    run_train_extractor(plan, out, log)
    retrieval: dict[tuple[str, str], dict] = {}
    attack: dict[str, dict] = {}
    for protector in plan.protectors:
        run_protect(plan, out, protector, workers=workers, log=log)
        attack[protector] = run_attack(plan, out, protector, log)
        for setting in plan.settings:
            row = run_eval(plan, out, protector, setting, log)
            retrieval[(protector, setting)] = row
    report = EvalReport(
        retrieval=retrieval,
        attack=attack,
        config_hash=config_hash(plan),
        master_seed=plan.master_seed,
        created_at=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    )
    emit_report(plan, out, report)
    log(f"all: finished in {time.time() - t0:.1f}s")
    return report


def default_workers() -> int:
    return os.cpu_count() or 1
