"""Training loop: balanced batches, Adam, per-epoch coefficient refresh, checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import agcacl as L
from . import autodiff as ad
from .container import load_tensors, save_tensors
from .dsp import Sample, stack
from .evaluation import MetricReport, confusion, macro_metrics
from .model import FusionNet, focal_loss

log = logging.getLogger(__name__)


class NumericAbort(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 48
    epochs: int = 30
    seed: int = 0
    toy_scale_factor: int = 1
    gamma: float = 1.0
    loss: str = "agcacl"  # or "focal"
    batches_per_epoch: int | None = None
    include_augmented_in_S: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2: the inter-class term needs pairs")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.loss not in ("agcacl", "focal"):
            raise ValueError(f"unknown loss {self.loss!r}")


# ---------------------------------------------------------------------------
# sampling and optimisation


def balanced_batches(labels, batch_size: int, seed: int = 0, n_batches: int | None = None,
                     n_classes: int | None = None) -> list[np.ndarray]:
    """Index batches holding floor or ceil(batch_size / C) samples of every class.

    Each class is drawn without replacement from a shuffled pool that is
    reshuffled only once exhausted.  Which classes get the extra slots
    rotates from batch to batch.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size == 0:
        raise ValueError("empty label set")
    if n_classes is not None:
        empty = sorted(set(range(1, n_classes + 1)) - set(classes.tolist()))
        if empty:
            raise ValueError(f"classes without samples: {empty}")
    c = classes.size
    if n_batches is None:
        n_batches = int(np.ceil(labels.size / batch_size))
    rng = np.random.default_rng(seed)
    members = [np.flatnonzero(labels == k) for k in classes]
    pools = [m[rng.permutation(m.size)] for m in members]
    cursor = [0] * c
    base, extra = divmod(batch_size, c)
    batches = []
    for b in range(n_batches):
        lucky = {(b * extra + r) % c for r in range(extra)}
        picked = []
        for k in range(c):
            need = base + (k in lucky)
            take = []
            while need:
                if cursor[k] == pools[k].size:
                    pools[k] = members[k][rng.permutation(members[k].size)]
                    cursor[k] = 0
                step = min(need, pools[k].size - cursor[k])
                take.append(pools[k][cursor[k]:cursor[k] + step])
                cursor[k] += step
                need -= step
            picked.extend(take)
        batch = np.concatenate(picked)
        batches.append(batch[rng.permutation(batch.size)])
    return batches


@dataclass
class Adam:
    """Adam with decoupled weight decay (theta *= 1 - lr * wd before the step)."""

    lr: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, ad.Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericAbort(f"non-finite gradient for {name}")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# loss state


@dataclass
class LossState:
    alpha: np.ndarray
    coeffs: L.ModCoeffs = field(default_factory=L.ModCoeffs)
    S: np.ndarray | None = None

    @property
    def phi(self) -> np.ndarray:
        return self.coeffs.phi

    @property
    def psi(self) -> np.ndarray:
        return self.coeffs.psi


def class_frequencies(samples: list[Sample], n_classes: int) -> np.ndarray:
    """Counts of non-augmented samples per class 1..C."""
    labels = np.array([s.label for s in samples if not s.augmented])
    return np.bincount(labels - 1, minlength=n_classes).astype(np.float64)


def embed(model: FusionNet, samples: list[Sample], batch_size: int = 64):
    """Eval-mode (z, logits) for every sample, as numpy arrays."""
    zs, ls = [], []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            xe, xm, _ = stack(samples[i:i + batch_size])
            z, logits = model(xe, xm, training=False)
            zs.append(z.data)
            ls.append(logits.data)
    return np.concatenate(zs), np.concatenate(ls)


def refresh_coefficients(model: FusionNet, train_set: list[Sample], state: LossState,
                         loss_cfg: L.LossConfig, prior: L.PriorSpec | None,
                         include_augmented: bool = True) -> LossState:
    """Eval pass -> S -> psi/phi -> priors -> EMA.  alpha is left untouched."""
    pool = train_set if include_augmented else [s for s in train_set if not s.augmented]
    z, _ = embed(model, pool)
    labels = np.array([s.label for s in pool])
    S = L.compute_S(z, labels, model.cfg.n_classes)
    psi = L.compute_psi(S, loss_cfg.tau_psi, loss_cfg.eps)
    phi = L.compute_phi(S, loss_cfg.tau_phi)
    phi_t, psi_t = L.apply_priors(phi, psi, prior)
    coeffs = L.momentum_update(state.coeffs, phi_t, psi_t, loss_cfg.momentum)
    return LossState(state.alpha, coeffs, S)


def evaluate(model: FusionNet, samples: list[Sample]) -> tuple[MetricReport, np.ndarray]:
    _, logits = embed(model, samples)
    preds = logits.argmax(axis=1) + 1
    cm = confusion(preds, np.array([s.label for s in samples]), model.cfg.n_classes)
    return macro_metrics(cm), cm


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(out_dir: Path, epoch: int, model: FusionNet, protos: ad.Tensor,
                    state: LossState) -> Path:
    d = Path(out_dir) / f"epoch_{epoch:02d}"
    (d / "coeffs").mkdir(parents=True, exist_ok=True)
    tensors = model.state_dict()
    tensors["prototypes"] = protos.data.copy()
    save_tensors(d / "params", tensors)
    for name, arr in (("S", state.S), ("phi", state.phi), ("psi", state.psi),
                      ("alpha", state.alpha)):
        np.savetxt(d / "coeffs" / f"{name}.txt", np.atleast_1d(arr), fmt="%.17g")
    return d


def load_checkpoint(ckpt_dir: str | Path, model: FusionNet) -> ad.Tensor:
    """Restore model weights in place; returns the prototypes tensor."""
    tensors = load_tensors(Path(ckpt_dir) / "params")
    model.load_state_dict(tensors)
    return ad.Tensor(tensors["prototypes"], requires_grad=True, name="prototypes")


def load_coeffs(ckpt_dir: str | Path) -> dict[str, np.ndarray]:
    d = Path(ckpt_dir) / "coeffs"
    return {n: np.loadtxt(d / f"{n}.txt", ndmin=2 if n in ("S", "phi") else 1)
            for n in ("S", "phi", "psi", "alpha")}


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochLog:
    epoch: int
    focal: float
    agcacl: float
    skipped: int
    S: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    alpha: np.ndarray
    val: MetricReport | None = None

    @property
    def total(self) -> float:
        return self.focal + self.agcacl

    def to_json(self) -> str:
        rec = {"epoch": self.epoch, "focal": self.focal, "agcacl": self.agcacl,
               "total": self.total, "skipped_anchors": self.skipped,
               "S": self.S.tolist(), "phi": self.phi.tolist(), "psi": self.psi.tolist(),
               "alpha": self.alpha.tolist(),
               "val": self.val.as_dict() if self.val else None}
        return json.dumps(rec, sort_keys=True)


@dataclass
class TrainResult:
    model: FusionNet
    prototypes: ad.Tensor
    logs: list[EpochLog]
    state: LossState
    initial_S: np.ndarray


def train(model: FusionNet, train_set: list[Sample], val_set: list[Sample] | None,
          cfg: TrainConfig, loss_cfg: L.LossConfig = L.LossConfig(),
          prior: L.PriorSpec | None = None, out_dir: str | Path | None = None,
          class_freqs=None) -> TrainResult:
    """Focal (+ AGCACL) training with a coefficient refresh after every epoch."""
    n_classes = model.cfg.n_classes
    labels = np.array([s.label for s in train_set])
    if np.unique(labels).size != n_classes:
        raise ValueError("every class needs at least one training sample")
    freqs = class_frequencies(train_set, n_classes) if class_freqs is None \
        else np.asarray(class_freqs, dtype=np.float64)
    protos = L.init_prototypes(n_classes, model.cfg.fusion_dim, seed=cfg.seed + 1)
    state = LossState(L.compute_alpha(freqs, loss_cfg.tau_alpha, loss_cfg.eps))
    # t = 0: coefficients from the untrained network
    state = refresh_coefficients(model, train_set, state, loss_cfg, prior,
                                 cfg.include_augmented_in_S)
    initial_S = state.S
    params = dict(model.params)
    params["prototypes"] = protos
    opt = Adam(cfg.lr, cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    logs: list[EpochLog] = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            batches = balanced_batches(labels, cfg.batch_size, seed=cfg.seed * 1000 + epoch,
                                       n_batches=cfg.batches_per_epoch, n_classes=n_classes)
            focal_sum = con_sum = 0.0
            skipped = 0
            for b, idx in enumerate(batches):
                xe, xm, y = stack([train_set[i] for i in idx])
                rng = np.random.default_rng([cfg.seed, epoch, b])
                z, logits = model(xe, xm, training=True, rng=rng)
                focal = focal_loss(logits, y, cfg.gamma)
                if cfg.loss == "agcacl":
                    res = L.agcacl_total(z, y, protos, state.alpha, state.phi, state.psi,
                                         loss_cfg.tau)
                    contrast = res.loss
                    skipped += res.skipped
                else:
                    contrast = ad.Tensor(0.0)
                try:
                    loss = L.combined_objective(focal, contrast)
                except FloatingPointError as exc:
                    raise NumericAbort(f"epoch {epoch} batch {b}: {exc}") from None
                for p in params.values():
                    p.grad = None
                grads = ad.backward(loss, list(params.values()))
                opt.step(params, dict(zip(params, grads)))
                L.renormalize_degenerate(protos, seed=cfg.seed + epoch)
                focal_sum += focal.item()
                con_sum += contrast.item()
            state = refresh_coefficients(model, train_set, state, loss_cfg, prior,
                                         cfg.include_augmented_in_S)
            val = evaluate(model, val_set)[0] if val_set else None
            entry = EpochLog(epoch, focal_sum / len(batches), con_sum / len(batches), skipped,
                             state.S, state.phi, state.psi, state.alpha, val)
            logs.append(entry)
            log.info("epoch %d focal %.4f agcacl %.4f", epoch, entry.focal, entry.agcacl)
            if out is not None:
                save_checkpoint(out, epoch, model, protos, state)
                log_fh.write(entry.to_json() + "\n")
                log_fh.flush()
    finally:
        if out is not None:
            log_fh.close()
    return TrainResult(model, protos, logs, state, initial_S)


def config_dict(cfg) -> dict:
    return asdict(cfg)
