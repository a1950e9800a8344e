"""Pipeline stages, artifact layout, and staleness tracking.

Each stage writes its artifacts under the config's out_dir and records the
artifact hash plus the config's stage hash in ``run_manifest.json``. A stage
refuses to run when a prerequisite is missing, was built under a different
config, or no longer matches its recorded hash, so stale artifact mixes are
caught instead of silently mispredicting. The stage hash skips keys no
training stage reads (decode mode, destination snapping, output location,
val/test manifests), so trained artifacts stay usable when only those change.

Stage artifacts:
  features/     five nets + manifest.json
  bank/         bank.mtbk
  addresser/    two nets + manifest.json
  fulfillment/  five nets + manifest.json
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .addresser import AddresserNets, fixed_cosine_nets, init_addresser_nets, train_addresser
from .config import Config
from .datasets import (
    Scene,
    SynthMode,
    load_manifest,
    save_tsv,
    scenes_to_tracks,
    synth_generate,
)
from .errors import ConfigError, DependencyError
from .evalkit import MetricReport, evaluate
from .features import FeatureNets, train_features
from .fulfillment import FulfillNets, init_fulfill_nets, train_fulfillment
from .inference import ModelBundle, destination_error, predict_scene, scene_seed, worker_count
from .membank import MemoryBankPair, bank_filter, bank_init, bank_load, bank_save
from .numkit import load_mlp, save_mlp

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"

STAGE_FEATURES = "features"
STAGE_BANK = "bank"
STAGE_ADDRESSER = "addresser"
STAGE_FULFILLMENT = "fulfillment"

_FEATURE_NET_NAMES = ("ego_embed", "neighbor_embed", "social_fuse", "intention_enc", "joint_dec")
_FULFILL_NET_NAMES = ("ego_embed", "neighbor_embed", "social_fuse", "dest_embed", "full_dec")


@dataclass
class StageRecord:
    path: str
    sha256: str
    config_hash: str
    created: str


@dataclass
class RunManifest:
    stages: dict[str, StageRecord] = field(default_factory=dict)

    @classmethod
    def load(cls, out_dir) -> "RunManifest":
        path = Path(out_dir) / MANIFEST_NAME
        if not path.exists():
            return cls()
        data = json.loads(path.read_text(encoding="utf-8"))
        return cls(stages={name: StageRecord(**rec) for name, rec in data.get("stages", {}).items()})

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        data = {"stages": {name: vars(rec) for name, rec in self.stages.items()}}
        (out_dir / MANIFEST_NAME).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def artifact_hash(path: Path) -> str:
    """SHA-256 over a file, or over a directory's files in sorted order."""
    digest = hashlib.sha256()
    if path.is_dir():
        for sub in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(sub.relative_to(path).as_posix().encode("utf-8"))
            digest.update(sub.read_bytes())
    else:
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _record_stage(config: Config, name: str, artifact: Path) -> None:
    out_dir = Path(config.out_dir)
    manifest = RunManifest.load(out_dir)
    manifest.stages[name] = StageRecord(
        path=artifact.relative_to(out_dir).as_posix(),
        sha256=artifact_hash(artifact),
        config_hash=config.stage_hash(),
        created=datetime.now(timezone.utc).isoformat(),
    )
    manifest.save(out_dir)


def _require_stage(config: Config, name: str) -> Path:
    out_dir = Path(config.out_dir)
    manifest = RunManifest.load(out_dir)
    record = manifest.stages.get(name)
    if record is None:
        raise DependencyError(f"stage '{name}' has not been run in {out_dir}")
    if record.config_hash != config.stage_hash():
        raise DependencyError(f"stage '{name}' artifacts were built under a different config; rerun it")
    artifact = out_dir / record.path
    if not artifact.exists():
        raise DependencyError(f"stage '{name}' artifact {artifact} is missing")
    if artifact_hash(artifact) != record.sha256:
        raise DependencyError(f"stage '{name}' artifact {artifact} does not match its recorded hash")
    return artifact


def _load_scenes(config: Config, which: str) -> list[Scene]:
    manifest_path = getattr(config, which)
    if not manifest_path:
        raise ConfigError("no manifest path configured", key=which)
    return load_manifest(
        manifest_path,
        past_len=config.past_len,
        future_len=config.future_len,
        stride=config.window_stride,
        max_neighbors=config.max_neighbors,
    )


def _save_nets_dir(stage_dir: Path, nets_by_name: dict, meta: dict) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    for name, net in nets_by_name.items():
        save_mlp(net, stage_dir / f"{name}.mtnn")
    (stage_dir / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_train_features(config: Config, scenes: Sequence[Scene] | None = None) -> Path:
    scenes = list(scenes) if scenes is not None else _load_scenes(config, "train_manifest")
    nets = train_features(scenes, config)
    stage_dir = Path(config.out_dir) / STAGE_FEATURES
    _save_nets_dir(
        stage_dir,
        {name: getattr(nets, name) for name in _FEATURE_NET_NAMES},
        {"past_dim": nets.past_dim, "intent_dim": nets.intent_dim, "past_len": nets.past_len},
    )
    _record_stage(config, STAGE_FEATURES, stage_dir)
    return stage_dir


def load_feature_nets(stage_dir: Path) -> FeatureNets:
    meta = json.loads((stage_dir / "manifest.json").read_text(encoding="utf-8"))
    nets = {name: load_mlp(stage_dir / f"{name}.mtnn") for name in _FEATURE_NET_NAMES}
    return FeatureNets(past_len=meta["past_len"], **nets)


def stage_build_memory(config: Config, scenes: Sequence[Scene] | None = None) -> Path:
    features_dir = _require_stage(config, STAGE_FEATURES)
    nets = load_feature_nets(features_dir)
    scenes = list(scenes) if scenes is not None else _load_scenes(config, "train_manifest")
    bank = bank_init(nets, scenes)
    bank = bank_filter(bank, config.theta_past, config.theta_int, config.seed_for("bank-filter"))
    stage_dir = Path(config.out_dir) / STAGE_BANK
    stage_dir.mkdir(parents=True, exist_ok=True)
    bank_save(bank, stage_dir / "bank.mtbk")
    _record_stage(config, STAGE_BANK, stage_dir)
    return stage_dir


SELECTION_SEGMENTS = 8
SELECTION_HOLDOUT_FRACTION = 0.1
SELECTION_HOLDOUT_CAP = 200


def _segment_epochs(total: int, segments: int) -> list[int]:
    """Split ``total`` epochs into at most ``segments`` nonempty chunks."""
    if total <= 0:
        return []
    segments = min(segments, total)
    base, extra = divmod(total, segments)
    return [base + (1 if i < extra else 0) for i in range(segments)]


def train_addresser_selected(
    nets: AddresserNets,
    bank: MemoryBankPair,
    feature_nets: FeatureNets,
    dataset: Sequence[Scene],
    config: Config,
) -> tuple[AddresserNets, dict]:
    """Train in segments and keep the snapshot with the lowest held-out destination error.

    The last tenth of the dataset (capped at SELECTION_HOLDOUT_CAP scenes) is
    held out; after each training segment the current nets are scored by
    ``destination_error`` on it, and the best snapshot wins. The untrained
    start competes too, so when the pseudo-labels carry no ranking signal the
    addresser keeps its starting point instead of degrading retrieval. Ties
    resolve toward the earlier snapshot. Returns the winning nets plus a
    report dict with the per-snapshot errors.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    n_hold = min(SELECTION_HOLDOUT_CAP, max(1, int(len(dataset) * SELECTION_HOLDOUT_FRACTION)))
    holdout = dataset[-n_hold:]
    train_slice = dataset[:-n_hold] or dataset
    n_retrieve = min(config.n_retrieve, len(bank))
    n_predict = min(config.n_predict, n_retrieve)
    seed = config.seed_for("addresser-selection")

    def score(candidate: AddresserNets) -> float:
        return destination_error(feature_nets, candidate, bank, holdout, n_retrieve, n_predict, seed)

    phases = [(config.epochs_addresser, config.lr_addresser)]
    if config.finetune and config.epochs_finetune > 0:
        phases.append((config.epochs_finetune, config.lr_finetune))
    best = nets.copy()
    best_error = score(nets)
    errors = [(0, best_error)]
    best_epoch = 0
    current = nets
    epoch_no = 0
    for phase_epochs, lr in phases:
        for chunk in _segment_epochs(phase_epochs, SELECTION_SEGMENTS):
            chunk_config = replace(config, epochs_addresser=chunk, lr_addresser=lr, finetune=False)
            current = train_addresser(current, bank, feature_nets, train_slice, chunk_config)
            epoch_no += chunk
            error = score(current)
            errors.append((epoch_no, error))
            if error < best_error:
                best, best_error, best_epoch = current.copy(), error, epoch_no
    report = {"selected_epoch": best_epoch, "holdout_error": best_error, "errors": errors}
    logger.info(
        "addresser selection: kept epoch %d (holdout destination error %.6f) of %s",
        best_epoch,
        best_error,
        [f"{e}:{v:.6f}" for e, v in errors],
    )
    return best, report


def stage_train_addresser(config: Config, scenes: Sequence[Scene] | None = None) -> Path:
    features_dir = _require_stage(config, STAGE_FEATURES)
    bank_dir = _require_stage(config, STAGE_BANK)
    feature_nets = load_feature_nets(features_dir)
    bank = bank_load(bank_dir / "bank.mtbk")
    scenes = list(scenes) if scenes is not None else _load_scenes(config, "train_manifest")
    nets = init_addresser_nets(past_dim=config.past_dim, addr_dim=config.addr_dim)
    nets, report = train_addresser_selected(nets, bank, feature_nets, scenes, config)
    stage_dir = Path(config.out_dir) / STAGE_ADDRESSER
    _save_nets_dir(
        stage_dir,
        {"query_proj": nets.query_proj, "key_proj": nets.key_proj},
        {
            "addr_dim": config.addr_dim,
            "bank_sha256": artifact_hash(bank_dir / "bank.mtbk"),
            "selected_epoch": report["selected_epoch"],
            "holdout_error": report["holdout_error"],
        },
    )
    _record_stage(config, STAGE_ADDRESSER, stage_dir)
    return stage_dir


def load_addresser_nets(stage_dir: Path) -> tuple[AddresserNets, str]:
    meta = json.loads((stage_dir / "manifest.json").read_text(encoding="utf-8"))
    nets = AddresserNets(
        query_proj=load_mlp(stage_dir / "query_proj.mtnn"),
        key_proj=load_mlp(stage_dir / "key_proj.mtnn"),
    )
    return nets, meta.get("bank_sha256", "")


def stage_train_fulfillment(config: Config, scenes: Sequence[Scene] | None = None) -> Path:
    _require_stage(config, STAGE_FEATURES)
    _require_stage(config, STAGE_BANK)
    _require_stage(config, STAGE_ADDRESSER)
    scenes = list(scenes) if scenes is not None else _load_scenes(config, "train_manifest")
    nets = init_fulfill_nets(
        config.seed_for("fulfillment"),
        past_len=config.past_len,
        future_len=config.future_len,
        feat_dim=config.past_dim,
    )
    nets = train_fulfillment(nets, scenes, config)
    stage_dir = Path(config.out_dir) / STAGE_FULFILLMENT
    _save_nets_dir(
        stage_dir,
        {name: getattr(nets, name) for name in _FULFILL_NET_NAMES},
        {"past_len": nets.past_len, "future_len": nets.future_len},
    )
    _record_stage(config, STAGE_FULFILLMENT, stage_dir)
    return stage_dir


def load_fulfill_nets(stage_dir: Path) -> FulfillNets:
    meta = json.loads((stage_dir / "manifest.json").read_text(encoding="utf-8"))
    nets = {name: load_mlp(stage_dir / f"{name}.mtnn") for name in _FULFILL_NET_NAMES}
    return FulfillNets(past_len=meta["past_len"], future_len=meta["future_len"], **nets)


def load_model_bundle(config: Config, fixed_cosine: bool = False) -> ModelBundle:
    """Load all four stage artifacts into a ready-to-predict bundle."""
    features_dir = _require_stage(config, STAGE_FEATURES)
    bank_dir = _require_stage(config, STAGE_BANK)
    addresser_dir = _require_stage(config, STAGE_ADDRESSER)
    fulfillment_dir = _require_stage(config, STAGE_FULFILLMENT)
    feature_nets = load_feature_nets(features_dir)
    bank = bank_load(bank_dir / "bank.mtbk")
    addresser_nets, trained_against = load_addresser_nets(addresser_dir)
    actual_bank_hash = artifact_hash(bank_dir / "bank.mtbk")
    if trained_against and trained_against != actual_bank_hash:
        logger.warning(
            "addresser was trained against bank %s but the loaded bank is %s",
            trained_against[:12],
            actual_bank_hash[:12],
        )
    if fixed_cosine:
        addresser_nets = fixed_cosine_nets(bank.meta.past_dim)
    fulfill_nets = load_fulfill_nets(fulfillment_dir)
    return ModelBundle(
        feature_nets=feature_nets, bank=bank, addresser_nets=addresser_nets, fulfill_nets=fulfill_nets
    )


# ---------------------------------------------------------------------------
# Prediction / evaluation / synthesis entry points
# ---------------------------------------------------------------------------


def run_predict(
    config: Config,
    scenes: Sequence[Scene] | None = None,
    fixed_cosine: bool = False,
    trace: bool = False,
) -> Path:
    """Predict every test scene; write predictions.csv (and trace.csv).

    predictions.csv rows are scene_id,k,t,x,y in world coordinates, t being
    the 1-based future step. destinations.csv carries the clustered
    destination proposals with their anchor member counts.
    """
    scenes = list(scenes) if scenes is not None else _load_scenes(config, "test_manifest")
    bundle = load_model_bundle(config, fixed_cosine=fixed_cosine)
    preds = _predict_all(bundle, scenes, config)
    out_dir = Path(config.out_dir)
    out_path = out_dir / "predictions.csv"
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("scene_id,k,t,x,y\n")
        for pred in preds:
            for k in range(pred.trajectories.shape[0]):
                for t in range(pred.trajectories.shape[1]):
                    x, y = pred.trajectories[k, t]
                    fh.write("%s,%d,%d,%r,%r\n" % (pred.scene_id, k, t + 1, float(x), float(y)))
    with open(out_dir / "destinations.csv", "w", encoding="utf-8") as fh:
        fh.write("scene_id,cluster_index,x,y,member_count\n")
        for pred in preds:
            counts = np.bincount(pred.intention_set.anchor_assignment, minlength=pred.intention_set.k)
            for c in range(pred.intention_set.k):
                fh.write(
                    "%s,%d,%r,%r,%d\n"
                    % (pred.scene_id, c, float(pred.destinations[c, 0]), float(pred.destinations[c, 1]), int(counts[c]))
                )
    if trace:
        with open(out_dir / "trace.csv", "w", encoding="utf-8") as fh:
            fh.write("scene_id,rank,address,sample_id,score\n")
            for pred in preds:
                for rank, (addr, sid, s) in enumerate(zip(pred.addresses, pred.sample_ids, pred.scores)):
                    fh.write("%s,%d,%d,%d,%r\n" % (pred.scene_id, rank, addr, sid, float(s)))
    logger.info("wrote predictions for %d scenes to %s", len(preds), out_path)
    return out_path


def _predict_all(bundle: ModelBundle, scenes: Sequence[Scene], config: Config):
    def one(item):
        index, scene = item
        return predict_scene(
            bundle,
            scene,
            n_retrieve=config.n_retrieve,
            n_predict=config.n_predict,
            seed=scene_seed(config.seed, index),
            decode_mode=config.decode_mode,
            snap_destination=config.snap_destination,
        )

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, enumerate(scenes)))
    return [one(item) for item in enumerate(scenes)]


def run_eval(
    config: Config,
    scenes: Sequence[Scene] | None = None,
    fixed_cosine: bool = False,
) -> MetricReport:
    """Evaluate on the test split; write per-scene CSV and key=value summary."""
    scenes = list(scenes) if scenes is not None else _load_scenes(config, "test_manifest")
    bundle = load_model_bundle(config, fixed_cosine=fixed_cosine)
    units = {"pixel": "pixels", "meter": "meters"}[config.scale]
    report = evaluate(
        bundle,
        scenes,
        n_predict=config.n_predict,
        n_retrieve=config.n_retrieve,
        seed=config.seed,
        decode_mode=config.decode_mode,
        snap_destination=config.snap_destination,
        units=units,
    )
    out_dir = Path(config.out_dir)
    report.to_csv(out_dir / "eval_scenes.csv")
    (out_dir / "eval_summary.txt").write_text("\n".join(report.summary_lines()) + "\n", encoding="utf-8")
    for line in report.summary_lines():
        print(line)
    return report


def _parse_mode_spec(text: str) -> list[SynthMode] | None:
    if not text:
        return None
    modes = []
    for part in text.split(","):
        angle_text, _, prob_text = part.strip().partition(":")
        if not prob_text:
            raise ConfigError(f"mode entry {part!r} is not 'degrees:prob'", key="synth_modes")
        modes.append(SynthMode(turn=float(angle_text) * np.pi / 180.0, prob=float(prob_text)))
    return modes


def run_synth(config: Config) -> Path:
    """Generate a synthetic split: TSV, manifest, and a mode-label sidecar."""
    scenes = synth_generate(
        config.seed_for("synth"),
        config.synth_scenes,
        mode_spec=_parse_mode_spec(config.synth_modes),
        past_len=config.past_len,
        future_len=config.future_len,
        jitter=config.synth_jitter,
        speed=config.synth_speed,
        n_neighbors=config.synth_neighbors,
    )
    synth_dir = Path(config.out_dir) / "synth"
    synth_dir.mkdir(parents=True, exist_ok=True)
    save_tsv(scenes_to_tracks(scenes), synth_dir / "scenes.tsv")
    (synth_dir / "manifest.txt").write_text("scenes.tsv\n", encoding="utf-8")
    # Map each exported window back to the generator metadata hiding in the
    # original scene_id (agent ids are assigned ego-first per scene).
    with open(synth_dir / "labels.csv", "w", encoding="utf-8") as fh:
        fh.write("window_scene_id,synth_scene_id\n")
        agent = 0
        for i, scene in enumerate(scenes):
            last_frame = i * 1000 + config.past_len - 1
            fh.write("scenes:%d:%d,%s\n" % (agent, last_frame, scene.scene_id))
            agent += 1 + scene.n_neighbors
    logger.info("wrote %d synthetic scenes to %s", len(scenes), synth_dir)
    return synth_dir
