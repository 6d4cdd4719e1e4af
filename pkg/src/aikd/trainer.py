"""Round training with the composite continual-learning loss and the multi-seed experiment driver."""

from __future__ import annotations

import copy
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .augmentation import build_mixed_batch, crop_flip, soft_targets
from .config import ExperimentConfig, config_hash, dump_config
from .distillation import aikd_loss, block_distill_loss, feature_distill_loss, init_aims
from .evaluation import MetricsReport, RoundMetrics, aggregate, emit_report, top_k_accuracy
from .memory import ExemplarMemory, update_memory
from .model import BackboneSpec, IncrementalNet, freeze, load_checkpoint, save_checkpoint
from .protocol import LabeledDataset, ProtocolSpec, RoundSpec, load_dataset, make_class_splits, round_training_set
from .uncertainty import prediction_uncertainty, soft_cross_entropy, uncertainty_regularized_loss

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 0.5
    lambda_u: float = 1.0
    lambda_f: float = 0.5


@dataclass(frozen=True)
class OptimSchedule:
    epochs: int = 160
    batch_size: int = 128
    weight_decay: float = 5e-4
    momentum: float = 0.9
    lr: float = 0.01
    warmup_epochs: int = 10
    milestones: tuple[int, ...] = (100, 120)
    gamma: float = 0.1

    def lr_at(self, epoch: int) -> float:
        """Linear warmup reaching ``lr`` at the end of the warmup, then step decay."""
        if epoch < self.warmup_epochs:
            return self.lr * (epoch + 1) / self.warmup_epochs
        return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)


@dataclass(frozen=True)
class LossSettings:
    aikd: bool = True
    uct: bool = True
    feature_distill: bool = True
    distill_kind: str = "pod"
    distill_mode: str = "integrated"
    aim_count: int | None = None
    stop_gradient_target: bool = False
    uncertainty_kind: str = "kl"
    temperature: float = 1.0

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "LossSettings":
        return cls(
            aikd=cfg.components.aikd,
            uct=cfg.components.uct,
            feature_distill=cfg.components.feature_distill,
            distill_kind=cfg.distill.kind,
            distill_mode=cfg.distill.mode,
            aim_count=cfg.aim.count_k,
            stop_gradient_target=cfg.aim.stop_gradient_target,
            uncertainty_kind=cfg.uncertainty.kind,
            temperature=cfg.uncertainty.temperature,
        )


@dataclass
class LossBreakdown:
    total: torch.Tensor
    a: float
    u: float
    f: float
    ce: float
    mean_uncertainty: float


def total_loss(images: torch.Tensor, targets: torch.Tensor, new_model: IncrementalNet,
               old_model: IncrementalNet | None, aims=None, weights: LossWeights = LossWeights(),
               settings: LossSettings = LossSettings()) -> LossBreakdown:
    """Weighted sum of distillation, uncertainty-regularized and embedding losses.

    ``targets`` are label distributions over the new head's columns. Without
    an old model only the classification term remains (u = 1).
    """
    if len(images) == 0:
        raise ValueError("empty batch")
    out = new_model.forward_full(images)
    ce = soft_cross_entropy(out.logits, targets)
    zero = ce.new_zeros(())
    if old_model is None:
        term_a, term_u, term_f, u = zero, ce.mean(), zero, torch.ones_like(ce)
    else:
        with torch.no_grad():
            old = old_model.forward_full(images)
        if settings.aikd and weights.lambda_a > 0:
            if settings.distill_mode == "layer_to_layer":
                term_a = block_distill_loss(out.pyramid, old.pyramid, settings.distill_kind)
            else:
                term_a = aikd_loss(out.pyramid, old.pyramid, aims, settings.distill_kind,
                                   settings.aim_count, settings.stop_gradient_target)
        else:
            term_a = zero
        if settings.uct:
            cols = new_model.column_index(old_model.class_ids)
            u = prediction_uncertainty(old.logits, out.logits[:, cols], settings.uncertainty_kind,
                                       settings.temperature)
            term_u = uncertainty_regularized_loss(ce, u)
        else:
            u = torch.ones_like(ce)
            term_u = ce.mean()
        if settings.feature_distill and weights.lambda_f > 0:
            term_f = feature_distill_loss(out.embedding, old.embedding)
        else:
            term_f = zero
    total = weights.lambda_a * term_a + weights.lambda_u * term_u + weights.lambda_f * term_f
    parts = {"a": term_a, "u": term_u, "f": term_f}
    for name, v in parts.items():
        if not torch.isfinite(v):
            raise TrainingDiverged(f"loss term {name} is {v.item()}")
    return LossBreakdown(total, term_a.item(), term_u.item(), term_f.item(), ce.mean().item(),
                         u.mean().item())


# -- state and helpers ---------------------------------------------------------

@dataclass
class RunState:
    seed: int
    round_index: int = -1  # last completed round
    model: IncrementalNet | None = None
    memory: ExemplarMemory | None = None
    history: list[RoundMetrics] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)


def round_seed(seed: int, round_index: int) -> int:
    return int(np.random.SeedSequence([seed, round_index]).generate_state(1)[0])


def backbone_spec(cfg: ExperimentConfig) -> BackboneSpec:
    channels = cfg.dataset.synthetic.channels if cfg.dataset.kind == "synthetic" else 3
    return BackboneSpec(tuple(cfg.backbone.channels), cfg.backbone.embed_dim, cfg.dataset.image_size,
                        channels, cfg.backbone.head, cfg.backbone.arch)


def schedule_of(cfg: ExperimentConfig) -> OptimSchedule:
    s = cfg.schedule
    return OptimSchedule(s.epochs, s.batch_size, s.weight_decay, s.momentum, s.lr, s.warmup_epochs,
                         tuple(s.milestones), s.gamma)


def weights_of(cfg: ExperimentConfig) -> LossWeights:
    return LossWeights(cfg.weights.lambda_a, cfg.weights.lambda_u, cfg.weights.lambda_f)


def protocol_of(cfg: ExperimentConfig, seed: int) -> ProtocolSpec:
    p = cfg.protocol
    order_seed = seed if p.class_order_seed is None else p.class_order_seed
    return ProtocolSpec(p.total_classes, p.initial_classes, p.num_incremental_rounds, order_seed)


def new_memory(cfg: ExperimentConfig) -> ExemplarMemory:
    m = cfg.memory
    return ExemplarMemory(m.policy, m.budget, m.per_class)


def onehot_targets(model: IncrementalNet, labels: torch.Tensor) -> torch.Tensor:
    return F.one_hot(model.column_index(labels.tolist()), len(model.class_ids)).float()


@torch.no_grad()
def embed(model: IncrementalNet, images: torch.Tensor, batch: int = 512) -> torch.Tensor:
    model.eval()
    dev = next(model.parameters()).device
    return torch.cat([model.forward_full(images[i:i + batch].to(dev)).embedding.cpu()
                      for i in range(0, len(images), batch)])


@torch.no_grad()
def predict(model: IncrementalNet, images: torch.Tensor, batch: int = 512) -> torch.Tensor:
    model.eval()
    dev = next(model.parameters()).device
    return torch.cat([model.forward_full(images[i:i + batch].to(dev)).logits.cpu()
                      for i in range(0, len(images), batch)])


def evaluate(model: IncrementalNet, test: LabeledDataset, round_index: int) -> RoundMetrics:
    """Top-1/top-5 over the test samples of every class the head knows."""
    sub = test.subset(model.class_ids)
    logits = predict(model, torch.from_numpy(sub.images)).numpy()
    n = len(model.class_ids)
    return RoundMetrics(
        round=round_index,
        classes_seen=n,
        top1=top_k_accuracy(logits, sub.labels, model.class_ids, 1),
        top5=top_k_accuracy(logits, sub.labels, model.class_ids, min(5, n)),
    )


def _attention_ok(aims) -> bool:
    for aim in aims:
        att = aim.last_attention
        if att is not None and not torch.allclose(att.sum(1), torch.ones_like(att.sum(1)), atol=1e-5):
            return False
    return True


def finetune_head(model: IncrementalNet, memory: ExemplarMemory, epochs: int, lr: float,
                  batch_size: int, generator: torch.Generator):
    """Class-balanced head-only fine-tuning on the exemplar memory."""
    x, y = memory.as_arrays()
    dev = next(model.parameters()).device
    feats = embed(model, torch.from_numpy(x)).to(dev)
    targets = onehot_targets(model, torch.from_numpy(y)).to(dev)
    opt = torch.optim.SGD(model.head.parameters(), lr=lr, momentum=0.9)
    for _ in range(epochs):
        perm = torch.randperm(len(feats), generator=generator)
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            loss = soft_cross_entropy(model.head(feats[idx]), targets[idx]).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()


# -- one round -------------------------------------------------------------------

def train_round(state: RunState, round_spec: RoundSpec, cfg: ExperimentConfig,
                train: LabeledDataset, test: LabeledDataset) -> RunState:
    """Train one round and return the next state; the input state is not modified."""
    t = round_spec.round_index
    rs = round_seed(state.seed, t)
    gen = torch.Generator().manual_seed(rs)
    np_rng = np.random.default_rng(rs)
    schedule, weights, settings = schedule_of(cfg), weights_of(cfg), LossSettings.from_config(cfg)
    memory = state.memory if state.memory is not None else new_memory(cfg)

    learned = set() if state.model is None else set(state.model.class_ids)
    if learned & set(round_spec.class_ids):
        raise ValueError(f"round {t} re-introduces learned classes {sorted(learned & set(round_spec.class_ids))}")

    if state.model is None:
        torch.manual_seed(rs)
        model, old = IncrementalNet(backbone_spec(cfg)), None
    else:
        old = freeze(state.model)
        model = copy.deepcopy(state.model)
    device = torch.device(cfg.trainer.device)
    model.to(device)
    if old is not None:
        old.to(device)
    model.expand_head(round_spec.class_ids, generator=gen)

    aims = torch.nn.ModuleList()
    if old is not None and settings.aikd and settings.distill_mode == "integrated":
        shapes = model.spec.block_shapes()
        aims = init_aims(old.spec.block_shapes(), shapes, cfg.aim.variant, generator=gen).to(device)

    data = round_training_set(round_spec, train, memory)
    xs, ys = torch.from_numpy(data.images), torch.from_numpy(data.labels)
    new_ids = torch.tensor(round_spec.class_ids)
    use_cutmix = cfg.cutmix.enabled and old is not None and memory.total > 0
    if use_cutmix:
        mx, my = memory.as_arrays()
        mem_x, mem_y = torch.from_numpy(mx), torch.from_numpy(my)
    col = {c: i for i, c in enumerate(model.class_ids)}

    params = list(model.parameters()) + list(aims.parameters())
    opt = torch.optim.SGD(params, lr=schedule.lr_at(0), momentum=schedule.momentum,
                          weight_decay=schedule.weight_decay)
    diag = {"round": t, "attention_ok": True, "epochs": [], "aim_parameters": [a.num_parameters for a in aims]}
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        model.train()
        aims.train()
        perm = torch.randperm(len(xs), generator=gen)
        sums = np.zeros(5)
        n_batches = 0
        for i in range(0, len(perm), schedule.batch_size):
            idx = perm[i:i + schedule.batch_size]
            x, y = xs[idx], ys[idx]
            if cfg.dataset.augment == "crop_flip":
                x = crop_flip(x, gen)
            targets = onehot_targets(model, y)
            if use_cutmix:
                is_new = torch.isin(y, new_ids)
                mixed, y_old, y_new, lam = build_mixed_batch(mem_x, mem_y, x[is_new], y[is_new], np_rng,
                                                             cfg.cutmix.alpha, cfg.cutmix.tau)
                if len(mixed):
                    x = torch.cat([x, mixed])
                    targets = torch.cat([targets, soft_targets(col, len(col), y_old, y_new, lam)])
            br = total_loss(x.to(device), targets.to(device), model, old, aims, weights, settings)
            opt.zero_grad()
            br.total.backward()
            opt.step()
            if len(aims) and not _attention_ok(aims):
                diag["attention_ok"] = False
            sums += (br.total.item(), br.a, br.u, br.f, br.mean_uncertainty)
            n_batches += 1
        means = sums / max(n_batches, 1)
        diag["epochs"].append({"lr": lr, "loss": means[0], "a": means[1], "u": means[2], "f": means[3],
                               "mean_uncertainty": means[4]})
        if cfg.trainer.log_every and (epoch + 1) % cfg.trainer.log_every == 0:
            log.info("seed %d round %d epoch %d lr %.4g loss %.4f", state.seed, t, epoch + 1, lr, means[0])

    new_data = train.subset(round_spec.class_ids)
    feats = embed(model, torch.from_numpy(new_data.images)).numpy()
    per_class = {
        int(c): (new_data.images[new_data.labels == c], feats[new_data.labels == c])
        for c in round_spec.class_ids
    }
    memory = update_memory(memory, per_class, model.class_ids)

    if cfg.components.finetune and not cfg.cutmix.enabled and old is not None:
        finetune_head(model, memory, cfg.finetune.epochs, cfg.finetune.lr, cfg.finetune.batch_size, gen)

    metrics = evaluate(model, test, t)
    log.info("seed %d round %d: %d classes, top1 %.2f", state.seed, t, metrics.classes_seen, metrics.top1)
    return RunState(state.seed, t, model, memory, state.history + [metrics], state.diagnostics + [diag])


# -- persistence ---------------------------------------------------------------

def round_dir(out_dir: Path, seed: int, t: int) -> Path:
    return Path(out_dir) / f"seed_{seed}" / f"round_{t}"


def save_state(state: RunState, out_dir: Path):
    d = round_dir(out_dir, state.seed, state.round_index)
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.model, d / "model.pt", state.round_index)
    state.memory.save(d / "memory.npz")
    payload = {"seed": state.seed, "round": state.round_index,
               "history": [vars(r) for r in state.history], "diagnostics": state.diagnostics}
    (d / "state.json").write_text(json.dumps(payload, indent=1))


def load_state(out_dir: Path, seed: int, t: int) -> RunState:
    d = round_dir(out_dir, seed, t)
    for name in ("model.pt", "memory.npz", "state.json"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing {name} for seed {seed} round {t} in {d}")
    model, payload = load_checkpoint(d / "model.pt")
    if payload["round"] != t:
        raise ValueError(f"checkpoint in {d} is for round {payload['round']}")
    try:
        memory = ExemplarMemory.load(d / "memory.npz")
        info = json.loads((d / "state.json").read_text())
    except Exception as err:  # noqa: BLE001
        raise ValueError(f"corrupt round snapshot in {d}: {err}") from err
    return RunState(seed, t, model, memory, [RoundMetrics(**r) for r in info["history"]], info["diagnostics"])


def write_manifest(cfg: ExperimentConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    manifest = {
        "config_hash": config_hash(cfg),
        "versions": {"aikd": __version__, "torch": torch.__version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "seeds": list(cfg.trainer.seeds),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))


# -- experiment driver -----------------------------------------------------------

def run_seed(cfg: ExperimentConfig, seed: int, train: LabeledDataset, test: LabeledDataset,
             out_dir: Path | None, state: RunState | None = None) -> RunState:
    rounds = make_class_splits(protocol_of(cfg, seed))
    state = state or RunState(seed, memory=new_memory(cfg))
    for spec in rounds[state.round_index + 1:]:
        state = train_round(state, spec, cfg, train, test)
        if out_dir is not None:
            save_state(state, out_dir)
    return state


def _finish(cfg: ExperimentConfig, states: Sequence[RunState], out_dir: Path | None) -> MetricsReport:
    report = aggregate({s.seed: s.history for s in states}, config_hash(cfg))
    report.extra["attention_ok"] = all(d["attention_ok"] for s in states for d in s.diagnostics)
    if out_dir is not None:
        emit_report(report, out_dir)
    return report


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   data: tuple[LabeledDataset, LabeledDataset] | None = None,
                   data_root: str | Path | None = None) -> MetricsReport:
    """Run every seed through all rounds; persist checkpoints and reports under ``out_dir``."""
    torch.set_num_threads(cfg.trainer.num_threads)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        write_manifest(cfg, out)
    train, test = data or load_dataset(cfg.dataset.model_dump(), data_root)
    states = [run_seed(cfg, seed, train, test, out) for seed in cfg.trainer.seeds]
    return _finish(cfg, states, out)


def resume_experiment(cfg: ExperimentConfig, out_dir: str | Path, from_round: int,
                      data: tuple[LabeledDataset, LabeledDataset] | None = None,
                      data_root: str | Path | None = None) -> MetricsReport:
    """Continue every seed from its saved round ``from_round`` to the end."""
    torch.set_num_threads(cfg.trainer.num_threads)
    out = Path(out_dir)
    train, test = data or load_dataset(cfg.dataset.model_dump(), data_root)
    states = [run_seed(cfg, seed, train, test, out, load_state(out, seed, from_round))
              for seed in cfg.trainer.seeds]
    return _finish(cfg, states, out)


def collect_report(cfg: ExperimentConfig, out_dir: str | Path) -> MetricsReport:
    """Rebuild the report from the last saved round of every seed."""
    out = Path(out_dir)
    states = []
    for seed in cfg.trainer.seeds:
        rounds = sorted(int(p.name.split("_")[1]) for p in (out / f"seed_{seed}").glob("round_*"))
        if not rounds:
            raise FileNotFoundError(f"no saved rounds for seed {seed} in {out}")
        states.append(load_state(out, seed, rounds[-1]))
    return _finish(cfg, states, out)
