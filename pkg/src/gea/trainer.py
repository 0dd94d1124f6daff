"""Training loop, learning-rate schedule, checkpoints and ablation switches."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import BatchError, GEAError, NumericError, ValidationError
from .feature_store import DatasetManifest
from .model import GENERATED_POLICIES, GEAModel, ModelConfig, batch_similarity, manifest_tensors
from .retrieval_eval import RetrievalReport, digest, evaluate
from .tal_loss import TALConfig, tal
from .tgte import MixSchedule, omega_at

log = logging.getLogger(__name__)

ABLATIONS = ("baseline", "tgte_only", "gif_only", "full")
# ablation -> (uses TGTE mixing, uses GIF fusion loss)
ABLATION_SWITCHES = {
    "baseline": (False, False),
    "tgte_only": (True, False),
    "gif_only": (False, True),
    "full": (True, True),
}
GROUPS = ("backbone", "fusion")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 60
    lr_backbone: float = 1e-5
    lr_fusion: float = 1e-4
    warmup_epochs: int = 5
    warmup_start_lr: float = 1e-6
    tal: TALConfig = field(default_factory=TALConfig)
    mix: MixSchedule = field(default_factory=MixSchedule)
    ablation: str = "full"
    seed: int = 0
    # Everything below is not named by the method description and is a desk choice.
    samples_per_identity: int = 2
    lr_decay: str = "cosine"
    lr_min_ratio: float = 0.1
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    heads: int = 8
    fusion_layers: int = 6
    encoder_layers: int = 2
    vocab_size: int = 1000
    generated_policy: str = "zero"
    eval_omega: Optional[float] = None
    rerank_fused: bool = False
    fused_tal: Optional[TALConfig] = None
    deterministic: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError("batch_size and epochs must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValidationError("warmup_epochs must be in [0, epochs)")
        if min(self.lr_backbone, self.lr_fusion, self.warmup_start_lr) < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"ablation must be one of {ABLATIONS}")
        if self.lr_decay not in ("cosine", "constant"):
            raise ValidationError("lr_decay must be 'cosine' or 'constant'")
        if self.samples_per_identity < 1 or self.samples_per_identity > self.batch_size:
            raise ValidationError("samples_per_identity must lie in [1, batch_size]")
        if self.generated_policy not in GENERATED_POLICIES:
            raise ValidationError(f"generated_policy must be one of {GENERATED_POLICIES}")
        if self.mix.total_epochs != self.epochs:
            # The mix ramp always spans the whole run.
            object.__setattr__(self, "mix", replace(self.mix, total_epochs=self.epochs))

    @property
    def uses_mixing(self) -> bool:
        return ABLATION_SWITCHES[self.ablation][0]

    @property
    def uses_fusion(self) -> bool:
        return ABLATION_SWITCHES[self.ablation][1]

    @property
    def test_omega(self) -> float:
        if not self.uses_mixing:
            return 0.0
        return self.mix.omega_end if self.eval_omega is None else self.eval_omega

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        raw = dict(raw)
        try:
            if "tal" in raw:
                raw["tal"] = TALConfig(**raw["tal"])
            if raw.get("fused_tal") is not None:
                raw["fused_tal"] = TALConfig(**raw["fused_tal"])
            if "mix" in raw:
                raw["mix"] = MixSchedule(**{"total_epochs": raw.get("epochs", cls.epochs), **raw["mix"]})
            if "betas" in raw:
                raw["betas"] = tuple(raw["betas"])
            return cls(**raw)
        except TypeError as exc:
            raise ValidationError(f"bad config: {exc}") from None

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
        raw = {k: v for k, v in raw.items() if k not in ("train_manifest", "val_manifest", "schema_version")}
        return cls.from_dict(raw)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def digest(self) -> str:
        return digest(self.to_dict())


def lr_at(config: TrainConfig, epoch: int, group: str) -> float:
    """Linear warm-up from ``warmup_start_lr`` to the group's base rate, then decay.

    After warm-up the rate is either constant or follows a half cosine from
    the base rate down to ``lr_min_ratio * base`` at the last epoch.
    """
    if not 0 <= epoch < config.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.epochs})")
    if group not in GROUPS:
        raise ValidationError(f"unknown parameter group {group!r}")
    base = config.lr_backbone if group == "backbone" else config.lr_fusion
    w = config.warmup_epochs
    if epoch < w:
        return config.warmup_start_lr + (base - config.warmup_start_lr) * epoch / w
    if config.lr_decay == "constant":
        return base
    span = config.epochs - 1 - w
    progress = (epoch - w) / span if span > 0 else 0.0
    return base * (config.lr_min_ratio + (1 - config.lr_min_ratio) * 0.5 * (1 + math.cos(math.pi * progress)))


def identity_batches(ids, batch_size: int, per_identity: int, rng: np.random.Generator):
    """P x Q identity-aware batches covering every sample once.

    Each identity's samples are shuffled and cut into chunks of at most
    ``per_identity``; chunks are shuffled and packed greedily into batches.
    """
    ids = np.asarray(ids)
    chunks = []
    for ident in np.unique(ids):
        members = rng.permutation(np.nonzero(ids == ident)[0])
        chunks.extend(members[i:i + per_identity] for i in range(0, len(members), per_identity))
    order = rng.permutation(len(chunks))
    batches, current = [], []
    for c in order:
        chunk = chunks[c]
        if current and len(current) + len(chunk) > batch_size:
            batches.append(np.array(current))
            current = []
        current.extend(chunk.tolist())
    if current:
        batches.append(np.array(current))
    return batches


@dataclass
class TrainState:
    model: GEAModel
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    best_map: float = -1.0


def model_config_for(manifest: DatasetManifest, config: TrainConfig) -> ModelConfig:
    return ModelConfig(embed_dim=manifest.embedding_dim, heads=config.heads,
                       fusion_layers=config.fusion_layers,
                       text_mode="features" if manifest.has_text_features else "encoder",
                       encoder_layers=config.encoder_layers, vocab_size=config.vocab_size)


def init_state(model_config: ModelConfig, config: TrainConfig, dtype=torch.float32) -> TrainState:
    torch.manual_seed(config.seed)
    model = GEAModel(model_config).to(dtype)
    groups = model.param_groups()
    optimizer = torch.optim.Adam(
        [{"params": groups[g], "lr": lr_at(config, 0, g), "name": g} for g in GROUPS],
        betas=config.betas, eps=config.eps)
    return TrainState(model, optimizer)


def compute_loss(model: GEAModel, batch, config: TrainConfig, omega: float):
    mixing, fusion = config.uses_mixing, config.uses_fusion
    out = model(batch, omega=omega if mixing else 0.0, with_fusion=fusion)
    loss = tal(batch_similarity(out, batch.ids), config.tal)
    if fusion:
        loss = loss + tal(batch_similarity(out, batch.ids, fused=True), config.fused_tal or config.tal)
    return loss, out


def train_step(batch, state: TrainState, config: TrainConfig, epoch: int = 0) -> float:
    """One optimizer step on ``batch``; learning rates follow ``lr_at(epoch)``."""
    if not len(batch):
        raise BatchError("empty batch")
    for group in state.optimizer.param_groups:
        group["lr"] = lr_at(config, epoch, group["name"])
    state.model.train()
    omega = omega_at(config.mix, epoch)
    loss, _ = compute_loss(state.model, batch, config, omega)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at epoch {epoch}, step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(loss.detach())


def _configure_determinism(config: TrainConfig):
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


class Trainer:
    """Owns the data tensors, model and optimizer of one training run."""

    def __init__(self, manifest: DatasetManifest, config: TrainConfig,
                 val_manifest: Optional[DatasetManifest] = None, dtype=torch.float32):
        if not len(manifest):
            raise ValidationError("training manifest is empty")
        _configure_determinism(config)
        self.config = config
        self.manifest = manifest
        self.val_manifest = val_manifest
        self.dtype = dtype
        self.data = manifest_tensors(manifest, dtype, config.generated_policy)
        self.val_data = (manifest_tensors(val_manifest, dtype, config.generated_policy)
                         if val_manifest is not None else None)
        self.model_config = model_config_for(manifest, config)
        self.state = init_state(self.model_config, config, dtype)

    def batches(self, epoch: int):
        rng = np.random.default_rng([self.config.seed, epoch])
        return identity_batches(self.data.ids.numpy(), self.config.batch_size,
                                self.config.samples_per_identity, rng)

    def run_epoch(self, epoch: int, max_batches: Optional[int] = None) -> float:
        losses = []
        for i, idx in enumerate(self.batches(epoch)):
            if max_batches is not None and i >= max_batches:
                break
            losses.append(train_step(self.data.subset(idx), self.state, self.config, epoch))
        self.state.epoch = epoch + 1
        return float(np.mean(losses))

    def evaluate(self, manifest=None, omega=None, rerank=None) -> RetrievalReport:
        if manifest is None:
            manifest, tensors = (self.val_manifest, self.val_data) if self.val_manifest is not None else (None, None)
        else:
            tensors = None
        if manifest is None:
            raise ValidationError("no evaluation manifest")
        return evaluate(manifest, self.state.model, self.config.test_omega if omega is None else omega,
                        self.config.rerank_fused if rerank is None else rerank,
                        self.config.digest(), self.config.generated_policy, tensors)

    def fit(self, out_dir=None, max_batches: Optional[int] = None, stop_after: Optional[int] = None):
        """Train until ``config.epochs`` (or ``stop_after`` epochs total), evaluating every epoch.

        Writes ``last.geac`` every epoch and ``best.geac`` whenever validation
        mAP improves.  Returns the metric history.
        """
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        end = self.config.epochs if stop_after is None else min(stop_after, self.config.epochs)
        for epoch in range(self.state.epoch, end):
            loss = self.run_epoch(epoch, max_batches)
            entry = {"epoch": epoch, "loss": loss, "omega": omega_at(self.config.mix, epoch),
                     "lr_backbone": lr_at(self.config, epoch, "backbone"),
                     "lr_fusion": lr_at(self.config, epoch, "fusion")}
            if self.val_manifest is not None:
                rep = self.evaluate()
                entry.update(rank1=rep.rank1, rank5=rep.rank5, rank10=rep.rank10, map=rep.map)
            self.state.history.append(entry)
            log.info("epoch %d loss %.4f %s", epoch, loss,
                     f"R-1 {entry['rank1']:.2f} mAP {100 * entry['map']:.2f}" if "map" in entry else "")
            improved = entry.get("map", -1.0) > self.state.best_map
            if improved:
                self.state.best_map = entry.get("map", -1.0)
            if out is not None:
                save_checkpoint(out / "last.geac", self)
                if improved or not (out / "best.geac").exists():
                    save_checkpoint(out / "best.geac", self)
        return self.state.history

    @classmethod
    def resume(cls, path, manifest: DatasetManifest, val_manifest=None) -> "Trainer":
        ckpt = load_checkpoint(path)
        config = TrainConfig.from_dict(ckpt["meta"]["config"])
        trainer = cls(manifest, config, val_manifest, dtype=ckpt["dtype"])
        restore(trainer, ckpt)
        return trainer


def fit(manifest: DatasetManifest, config: TrainConfig, val_manifest=None, out_dir=None, **kwargs):
    trainer = Trainer(manifest, config, val_manifest)
    history = trainer.fit(out_dir, **kwargs)
    return trainer, history


# ---------------------------------------------------------------------------
# Checkpoints: b"GEAC" | version u32 | header_len u64 | JSON header | tensor blobs
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"GEAC"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


class CheckpointError(GEAError, OSError):
    code = "E_CHECKPOINT"


def _tensor_entries(trainer_state: TrainState):
    tensors = {}
    for name, t in trainer_state.model.state_dict().items():
        tensors[f"model/{name}"] = t
    opt = trainer_state.optimizer.state_dict()
    for pid, st in opt["state"].items():
        for key, value in st.items():
            tensors[f"optim/{pid}/{key}"] = torch.as_tensor(value)
    tensors["rng/torch"] = torch.get_rng_state()
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in opt["param_groups"]]
    return tensors, groups


def save_checkpoint(path, trainer: Trainer) -> None:
    state = trainer.state
    tensors, groups = _tensor_entries(state)
    index, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().contiguous().cpu()
        raw = t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.view(torch.int16).numpy().tobytes()
        index.append({"name": name, "dtype": str(t.dtype).replace("torch.", ""),
                      "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    meta = {"epoch": state.epoch, "step": state.step, "history": state.history,
            "best_map": state.best_map, "config": trainer.config.to_dict(),
            "config_digest": trainer.config.digest(), "model_config": trainer.model_config.to_dict(),
            "param_groups": groups, "dtype": str(trainer.dtype).replace("torch.", "")}
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[_CKPT_HEAD.size:_CKPT_HEAD.size + hlen])
    base = _CKPT_HEAD.size + hlen
    tensors = {}
    for e in header["tensors"]:
        dtype = getattr(torch, e["dtype"])
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        np_dtype = torch.empty(0, dtype=dtype).numpy().dtype
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    meta = header["meta"]
    return {"meta": meta, "tensors": tensors, "dtype": getattr(torch, meta["dtype"])}


def restore(trainer: Trainer, ckpt: dict) -> None:
    tensors, meta = ckpt["tensors"], ckpt["meta"]
    model_state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    trainer.state.model.load_state_dict(model_state)
    opt_state = {}
    for k, v in tensors.items():
        if k.startswith("optim/"):
            _, pid, key = k.split("/")
            opt_state.setdefault(int(pid), {})[key] = v
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in meta["param_groups"]]
    trainer.state.optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    torch.set_rng_state(tensors["rng/torch"])
    trainer.state.epoch = meta["epoch"]
    trainer.state.step = meta["step"]
    trainer.state.history = list(meta["history"])
    trainer.state.best_map = meta["best_map"]


def load_model(path) -> tuple:
    """Rebuild the model stored in a checkpoint; returns ``(model, TrainConfig)``."""
    ckpt = load_checkpoint(path)
    model = GEAModel(ModelConfig(**ckpt["meta"]["model_config"])).to(ckpt["dtype"])
    model.load_state_dict({k[len("model/"):]: v for k, v in ckpt["tensors"].items() if k.startswith("model/")})
    return model, TrainConfig.from_dict(ckpt["meta"]["config"])
