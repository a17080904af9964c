"""
Run-directory artifacts: snapshots, teacher caches, histories, evaluation
tables, latency reports and expert assignment exports.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import ExperimentConfig
from models import ModelConfig, Recommender, build_model
from services.dataset import InteractionDataset, dataset_checksum
from services.distill_experts import ExpertBank, export_expert_assignments
from services.evaluation import EvalReport, LatencyReport, eval_report_frame
from services.ranking_distill import TeacherSnapshot
from services.snapshot import SnapshotError, load_snapshot, save_snapshot

logger = logging.getLogger(__name__)

SNAPSHOT_FILE = "snapshot.bin"
EXPERTS_FILE = "experts.bin"
TEACHER_CACHE_FILE = "teacher_cache.npz"
CONFIG_FILE = "config.txt"
HISTORY_FILE = "history.csv"
LATENCY_FILE = "latency.json"


def run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / cfg.run_name


def teacher_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.teacher_dir) if cfg.teacher_dir else Path(cfg.output_dir) / cfg.teacher_run_name


def snapshot_header(cfg: ExperimentConfig, model: Recommender, checksum: str, best_epoch: int,
                    role: str) -> Dict[str, object]:
    return {
        "role": role,
        "method": "none" if role == "teacher" else cfg.method_label,
        "base_model": model.base_model,
        "dims": {
            "dim": model.dim,
            "teacher_dim": cfg.resolved_teacher_dim,
            "neumf_layers": cfg.neumf_layers,
            "neumf_tap": cfg.neumf_tap,
        },
        "phi": 1.0 if role == "teacher" else cfg.phi,
        "num_users": model.num_users,
        "num_items": model.num_items,
        "checksum": checksum,
        "seed": cfg.seed,
        "best_epoch": best_epoch,
    }


def save_run(directory: Path, cfg: ExperimentConfig, result, checksum: str, role: str = "student") -> Path:
    """Write config, best-epoch snapshot, history and (if any) trained expert banks."""
    directory.mkdir(parents=True, exist_ok=True)
    (directory / CONFIG_FILE).write_text(cfg.to_text(), encoding="utf-8")
    header = snapshot_header(cfg, result.model, checksum, result.best_epoch, role)
    save_snapshot(directory / SNAPSHOT_FILE, result.params, header, result.model.tensor_names)
    result.history.to_csv(directory / HISTORY_FILE, index=False)
    if result.banks:
        bank_header = dict(header)
        bank_header["banks"] = [
            {"side": side, "prefix": bank.prefix, "num_experts": bank.num_experts,
             "student_dim": bank.student_dim, "teacher_dim": bank.teacher_dim, "mode": bank.mode}
            for side, bank in result.banks.items()
        ]
        names = [n for bank in result.banks.values() for n in bank.tensor_names]
        save_snapshot(directory / EXPERTS_FILE, result.params, bank_header, names)
    return directory


def save_teacher_cache(directory: Path, snapshot: TeacherSnapshot) -> Path:
    path = directory / TEACHER_CACHE_FILE
    np.savez(path, top_items=snapshot.top_items, top_scores=snapshot.top_scores)
    return path


def load_model(path: Path, dataset: Optional[InteractionDataset] = None,
               neumf_tap: Optional[str] = None) -> Tuple[Dict[str, object], Recommender]:
    """
    Rebuild a recommender from a snapshot; with ``dataset`` the checksum must match.
    """
    checksum = dataset_checksum(dataset) if dataset is not None else None
    header, params = load_snapshot(path, expected_checksum=checksum)
    dims = header["dims"]
    cfg = ModelConfig(base_model=header["base_model"], neumf_layers=dims["neumf_layers"],
                      neumf_tap=neumf_tap or dims["neumf_tap"])
    model = build_model(cfg, params, header["num_users"], header["num_items"], dim=dims["dim"])
    return header, model


def load_teacher(cfg: ExperimentConfig, dataset: InteractionDataset) -> TeacherSnapshot:
    """Load the teacher snapshot and its cache for ``cfg``, refusing a dataset mismatch."""
    directory = teacher_dir(cfg)
    header, model = load_model(directory / SNAPSHOT_FILE, dataset, neumf_tap=cfg.neumf_tap)
    if header["base_model"] != cfg.base_model:
        raise SnapshotError(f"teacher in {directory} is {header['base_model']}, config asks for {cfg.base_model}")
    cache_path = directory / TEACHER_CACHE_FILE
    if not cache_path.exists():
        raise SnapshotError(f"teacher cache missing: {cache_path}")
    with np.load(cache_path) as cache:
        top_items = cache["top_items"]
        top_scores = cache["top_scores"]
    return TeacherSnapshot(model=model, top_items=top_items, top_scores=top_scores,
                           base_model=header["base_model"], teacher_dim=model.dim,
                           checksum=header["checksum"])


def load_banks(directory: Path) -> Dict[str, ExpertBank]:
    path = directory / EXPERTS_FILE
    header, params = load_snapshot(path)
    banks = {}
    for spec in header.get("banks", []):
        banks[spec["side"]] = ExpertBank(params, spec["prefix"], spec["num_experts"], spec["student_dim"],
                                         spec["teacher_dim"], side=spec["side"], mode=spec["mode"])
    return banks


def write_eval(directory: Path, report: EvalReport, method: str, phi: float) -> Path:
    path = directory / f"eval_{report.phase}.csv"
    eval_report_frame(report, method, phi).to_csv(path, index=False)
    report.hits_frame().to_csv(directory / f"hits_{report.phase}.csv", index=False)
    return path


def write_latency(directory: Path, report: LatencyReport) -> Path:
    path = directory / LATENCY_FILE
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, default=str)
    return path


def _side_entities(side: str, dataset: InteractionDataset):
    if side == "user":
        ids = np.arange(dataset.num_users)
        return ids, np.arange(dataset.num_items), ids
    if side == "item":
        ids = np.arange(dataset.num_items)
        return np.arange(dataset.num_users), ids, ids
    users, items = dataset.train_users, dataset.train_items
    return users, items, np.array([f"{u}-{i}" for u, i in zip(users, items)])


def export_experts(directory: Path, banks: Dict[str, ExpertBank], teacher: TeacherSnapshot,
                   dataset: InteractionDataset) -> List[Path]:
    """Write experts_<side>.csv with each entity's argmax expert and alpha vector."""
    paths = []
    for side, bank in banks.items():
        users, items, labels = _side_entities(side, dataset)
        tap = next(t for t in teacher.taps(users, items) if t.side == side)
        if side != "joint":
            labels = tap.keys
        frame = export_expert_assignments(bank, labels, tap.values, entity_type=side)
        path = directory / f"experts_{side}.csv"
        frame.to_csv(path, index=False)
        paths.append(path)
        logger.info(f"Exported {len(frame)} {side} expert assignments to {path}")
    return paths

