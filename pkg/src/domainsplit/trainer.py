"""Alternating descent-ascent training of encoder + SSL head against a domain critic.

One ``Trainer`` owns every piece of mutable state (parameters, optimizers, counters,
named random streams, pseudo-domain clusters). Per step the critic takes
``critic_steps`` ascent steps on ``l_d_invar - gp_weight * gp`` using detached
encoder outputs, then the encoder takes one descent step on the combined objective.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import clustering
from .config import ExperimentConfig, from_dict, stream_seed
from .datagen import MultiDomainDataset, augment_views
from .ddm import (
    LabelPrior,
    build_critic,
    critic_features,
    combined_encoder_objective,
    cosine_annealed_lr,
    critic_objective,
    gradient_penalty,
    loss_domain_invariant,
    loss_domain_variant,
)
from .encoder import build_encoder, encode, encode_dataset, load_checkpoint, param_checksum, save_checkpoint, slice_features
from .errors import BatchCompositionWarning, ConfigError, NonFiniteLossError
from .ssl_losses import BASELINES, build_head

log = logging.getLogger(__name__)

METRICS_FORMAT = "domainsplit-metrics"
METRICS_VERSION = 1
LOSS_KEYS = ("ssl", "d_var", "d_invar", "gp", "total_encoder", "total_critic")


@dataclass
class ViewBatch:
    view_a: torch.Tensor
    view_b: torch.Tensor
    sample_ids: np.ndarray
    domain_labels: np.ndarray | None = None
    ddm_mask: np.ndarray | None = None  # rows taking part in the domain terms
    ssl_mask: np.ndarray | None = None  # rows taking part in the SSL term


class MetricsLog:
    """JSON-lines log; kept in memory and mirrored to ``path`` when given."""

    def __init__(self, path: str | Path | None = None, append: bool = False):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None and not append:
            self.path.write_text("")

    def write(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True, allow_nan=False) + "\n")

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r.get("kind") == kind]


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


@contextmanager
def run_lock(out_dir: Path):
    """Exclusive claim on an output directory for the duration of a run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"{out_dir} is in use by another run (remove {lock} if stale)") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def make_optimizer(params, spec: dict) -> torch.optim.Optimizer:
    if spec["name"] == "adam":
        return torch.optim.Adam(params, lr=spec["lr"], weight_decay=spec.get("weight_decay", 0.0))
    if spec["name"] == "sgd":
        return torch.optim.SGD(
            params, lr=spec["lr"], momentum=spec.get("momentum", 0.9), weight_decay=spec.get("weight_decay", 0.0)
        )
    raise ConfigError(f"unknown optimizer {spec['name']!r}")


def encoder_optimizer_spec(cfg: ExperimentConfig) -> dict:
    if cfg.train.optimizer is not None:
        return dataclasses.asdict(cfg.train.optimizer)
    return dict(BASELINES[cfg.baseline].optimizer)


def _set_lr(opt: torch.optim.Optimizer, lr: float):
    for group in opt.param_groups:
        group["lr"] = lr


def ssl_input_width(cfg: ExperimentConfig) -> int:
    r, k = cfg.encoder.r, cfg.encoder.k
    return {"full": r, "prefix": k, "remainder": r - k}[cfg.ssl_slice]


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    """One epoch of index batches; incomplete trailing batch dropped (a single short batch if n < batch_size)."""
    perm = rng.permutation(n)
    if n < batch_size:
        yield perm
        return
    for b in range(n // batch_size):
        yield perm[b * batch_size : (b + 1) * batch_size]


class Trainer:
    def __init__(self, cfg: ExperimentConfig, dataset: MultiDomainDataset, out_dir: str | Path | None = None):
        if cfg.method == "ddm" and cfg.mode == "labeled" and dataset.domain_labels is None:
            raise ConfigError("labeled mode needs domain labels in the dataset")
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        root = cfg.seed
        self.spec = dataclasses.replace(cfg.encoder, seed=stream_seed(root, "init"))
        self.encoder = build_encoder(self.spec)
        self.head = build_head(cfg.baseline, ssl_input_width(cfg), seed=stream_seed(root, "head"))
        self.M = cfg.num_domains
        self.critic = None
        self.critic_opt = None
        if cfg.method == "ddm":
            self.critic = build_critic(self.spec.r - self.spec.k, self.M, cfg.ddm, stream_seed(root, "critic"))
            # beta1 = 0.5, beta2 = 0.9 as usual for gradient-penalty critics
            self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=cfg.ddm.critic_lr, betas=(0.5, 0.9))
        self.enc_opt_spec = encoder_optimizer_spec(cfg)
        self.enc_opt = make_optimizer(list(self.encoder.parameters()) + list(self.head.parameters()), self.enc_opt_spec)

        self.data_rng = np.random.default_rng(stream_seed(root, "data"))
        self.aug_seed = stream_seed(root, "aug")
        self.y_rand_gen = torch.Generator().manual_seed(stream_seed(root, "y_rand"))
        self.gp_gen = torch.Generator().manual_seed(stream_seed(root, "gp"))
        self.cluster_seed = stream_seed(root, "cluster")

        n = len(dataset)
        self.steps_per_epoch = max(1, n // cfg.train.batch_size)
        self.total_steps = cfg.train.epochs * self.steps_per_epoch
        self.warmup_steps = round(cfg.clustering.warmup_fraction * self.total_steps) if cfg.mode == "pseudo" else 0
        self.step = 0
        self.epoch = 0
        self.cluster_state: clustering.ClusterState | None = None
        self.last_recluster_epoch = -1
        self.prior: LabelPrior | None = None
        if cfg.method == "ddm" and cfg.mode == "labeled":
            self.prior = LabelPrior.from_labels(dataset.domain_labels, self.M)
        self.metrics = MetricsLog()
        self.header_extra: dict = {}  # e.g. command-line overrides, recorded in the log header
        self.best_probe = -math.inf
        self._warm_iter = None

    # -- bookkeeping ---------------------------------------------------------

    @property
    def is_ddm(self) -> bool:
        return self.cfg.method == "ddm"

    def header(self) -> dict:
        return {
            "kind": "header",
            "format": METRICS_FORMAT,
            "version": METRICS_VERSION,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "dataset_hash": self.dataset.recipe_hash(),
            **self.header_extra,
        }

    def encoder_lr(self) -> float:
        base = self.enc_opt_spec["lr"]
        if self.cfg.train.schedule == "cosine":
            return cosine_annealed_lr(base, self.step, self.total_steps)
        return base

    def critic_lr(self) -> float:
        return cosine_annealed_lr(self.cfg.ddm.critic_lr, self.step, self.total_steps)

    def checksum(self) -> str:
        mods = [self.encoder, self.head] + ([self.critic] if self.critic is not None else [])
        return param_checksum(*mods)

    # -- batches ----------------------------------------------------------------

    def make_batch(self, idx: np.ndarray, epoch: int) -> ViewBatch:
        view_a, view_b = augment_views(self.dataset.images[idx], idx, self.cfg.data.augment, self.aug_seed, epoch)
        labels = ddm_mask = ssl_mask = None
        if self.cfg.mode == "labeled" and self.dataset.domain_labels is not None:
            labels = self.dataset.domain_labels[idx]
        elif self.cluster_state is not None:
            labels = self.cluster_state.assignments[idx]
            ddm_mask = self.cluster_state.inliers[idx]
            if self.cfg.clustering.exclude_outliers_from_ssl:
                ssl_mask = ddm_mask
        return ViewBatch(view_a, view_b, np.asarray(idx), labels, ddm_mask, ssl_mask)

    # -- one step -------------------------------------------------------------

    def train_step(self, batch: ViewBatch, phase: str = "main") -> dict:
        """Critic ascent step(s) then one encoder descent step. Returns the loss record."""
        cfg, k = self.cfg, self.spec.k
        self.encoder.train()
        self.head.train()
        B = len(batch.sample_ids)
        h = encode(self.encoder, torch.cat([batch.view_a, batch.view_b]))
        feats = slice_features(h, k, cfg.ssl_slice)
        if batch.ssl_mask is not None and int(batch.ssl_mask.sum()) >= 2:
            rows = torch.as_tensor(np.flatnonzero(batch.ssl_mask))
            l_ssl = self.head(feats[:B][rows], feats[B:][rows])
        else:
            l_ssl = self.head(feats[:B], feats[B:])

        record: dict = {"ssl": l_ssl}
        domain_terms = self.is_ddm and phase == "main" and batch.domain_labels is not None
        l_dvar = l_dinv = None
        if domain_terms:
            y = np.concatenate([batch.domain_labels, batch.domain_labels])
            keep = np.ones(2 * B, dtype=bool) if batch.ddm_mask is None else np.concatenate([batch.ddm_mask] * 2)
            present = np.unique(y[keep])
            if len(present) < 2:
                warnings.warn(f"step {self.step}: fewer than two domains in batch; domain terms skipped", BatchCompositionWarning)
                record.update(d_var=None, d_invar=None, gp=None, total_critic=None)
            else:
                rows = torch.as_tensor(np.flatnonzero(keep))
                y_t = torch.as_tensor(y[keep], dtype=torch.long)
                prefix, remainder = h[rows, :k], h[rows, k:]
                critic_in = critic_features(remainder, cfg.ddm.critic_input)
                l_dinv_c, gp, obj_c = self._critic_update(critic_in.detach(), y_t)
                record.update(gp=gp, total_critic=obj_c)
                self.critic.requires_grad_(False)
                l_dvar = loss_domain_variant(prefix, y_t, cfg.ddm.tau, reduction="mean")
                l_dinv = loss_domain_invariant(self.critic, critic_in, y_t, self.prior, self.y_rand_gen)
                self.critic.requires_grad_(True)
                record.update(d_var=l_dvar, d_invar=l_dinv)
        if domain_terms and l_dvar is not None:
            total = combined_encoder_objective(l_ssl, l_dvar, l_dinv, cfg.ddm)
        else:
            total = l_ssl
        record["total_encoder"] = total
        self._check_finite(record, batch)

        _set_lr(self.enc_opt, self.encoder_lr())
        self.enc_opt.zero_grad(set_to_none=True)
        total.backward()
        self.enc_opt.step()

        if phase == "warmup":
            return {"ssl": l_ssl.item()}
        if not self.is_ddm:
            return {"ssl": l_ssl.item(), "total_encoder": total.item()}
        return {key: (None if record.get(key) is None else record[key].item()) for key in LOSS_KEYS}

    def _critic_update(self, h_p: torch.Tensor, y: torch.Tensor):
        cfg = self.cfg.ddm
        self.critic.requires_grad_(True)
        _set_lr(self.critic_opt, self.critic_lr())
        for _ in range(cfg.critic_steps):
            l_inv = loss_domain_invariant(self.critic, h_p, y, self.prior, self.y_rand_gen)
            gp = gradient_penalty(self.critic, h_p, y, self.gp_gen)
            obj = critic_objective(l_inv, gp, cfg)
            self.critic_opt.zero_grad(set_to_none=True)
            (-obj).backward()
            self.critic_opt.step()
        return l_inv.detach(), gp.detach(), obj.detach()

    def _check_finite(self, record: dict, batch: ViewBatch):
        bad = {k: v.item() for k, v in record.items() if v is not None and not math.isfinite(v.item())}
        if bad:
            dump = {
                "step": self.step,
                "epoch": self.epoch,
                "sample_ids": batch.sample_ids.tolist(),
                "losses": {k: (None if v is None else v.item()) for k, v in record.items()},
            }
            if self.out_dir is not None:
                (self.out_dir / f"nonfinite_step{self.step}.json").write_text(json.dumps(dump, allow_nan=True))
            raise NonFiniteLossError(f"non-finite loss at step {self.step}: {bad}", dump)

    # -- pseudo domains -----------------------------------------------------

    def representations(self) -> np.ndarray:
        return encode_dataset(self.encoder, self.dataset.images).double().numpy()

    def recluster(self) -> dict:
        state = clustering.recluster(
            self.representations(),
            self.cluster_state,
            self.cfg.clustering,
            seed=self.cluster_seed,
            true_labels=self.dataset.domain_labels,
        )
        self.cluster_state = state
        self.prior = LabelPrior.from_labels(state.assignments, self.M, mask=state.inliers)
        self.last_recluster_epoch = self.epoch
        report = dict(state.history[-1])
        record = {"kind": "cluster", "epoch": self.epoch, "step": self.step, **report}
        self.metrics.write(record)
        return record

    def warmup(self, warmup_steps: int) -> None:
        """SSL-only steps treating the data as one domain; no critic, no domain terms."""
        for _ in range(warmup_steps):
            idx = next(self._warm_iter, None) if self._warm_iter is not None else None
            if idx is None:
                self._warm_iter = iter_batches(len(self.dataset), self.cfg.train.batch_size, self.data_rng)
                idx = next(self._warm_iter)
            rec = self.train_step(self.make_batch(idx, self.epoch), phase="warmup")
            self.metrics.write({"kind": "step", "phase": "warmup", "epoch": self.epoch, "step": self.step, **rec})
            self.step += 1

    # -- epochs -----------------------------------------------------------------

    def run_epoch(self, probe_fn=None, on_step=None) -> dict:
        """One pass over the data. ``on_step(trainer, record)`` is called after every step."""
        cfg = self.cfg
        pseudo = cfg.mode == "pseudo"
        if pseudo and self.cluster_state is not None and self.epoch - self.last_recluster_epoch >= cfg.clustering.recluster_every:
            self.recluster()
        sums: dict[str, list[float]] = {}
        for idx in iter_batches(len(self.dataset), cfg.train.batch_size, self.data_rng):
            phase = "warmup" if pseudo and self.step < self.warmup_steps else "main"
            if pseudo and phase == "main" and self.cluster_state is None:
                self.recluster()
            rec = self.train_step(self.make_batch(idx, self.epoch), phase=phase)
            self.metrics.write({"kind": "step", "phase": phase, "epoch": self.epoch, "step": self.step, **rec})
            for key, v in rec.items():
                if v is not None:
                    sums.setdefault(key, []).append(v)
            self.step += 1
            if on_step is not None:
                on_step(self, rec)
        record = {"kind": "epoch", "epoch": self.epoch, "step": self.step}
        record.update({f"mean_{k}": float(np.mean(v)) for k, v in sums.items()})
        if self.cluster_state is not None:
            record["epsilon"] = self.cluster_state.epsilon
            record["inlier_fraction"] = self.cluster_state.inlier_fraction
        self.epoch += 1
        if probe_fn is not None and cfg.train.probe_every and self.epoch % cfg.train.probe_every == 0:
            results = probe_fn(self)
            record["probes"] = {f"{r.target}/{r.slice}": r.top1 for r in results}
        self.metrics.write(record)
        if self.out_dir is not None and self.epoch % cfg.train.checkpoint_every == 0:
            self.save(self.out_dir / "last.pt")
            score = record.get("probes", {}).get("class/" + ("remainder" if self.is_ddm else "full"))
            if score is not None and score > self.best_probe:
                self.best_probe = score
                self.save(self.out_dir / "best.pt")
        return record

    # -- checkpoints ----------------------------------------------------------

    def state_payload(self) -> dict:
        cs = self.cluster_state
        cluster = None
        if cs is not None:
            cluster = {
                "centroids": torch.from_numpy(cs.centroids.copy()),
                "assignments": torch.from_numpy(cs.assignments.copy()),
                "inliers": torch.from_numpy(cs.inliers.copy()),
                "epsilon": cs.epsilon,
                "round": cs.round,
                "history": json.dumps(cs.history),
            }
        return {
            "config": json.dumps(self.cfg.to_dict(), sort_keys=True),
            "config_hash": self.cfg.hash(),
            "method": self.cfg.method,
            "baseline": self.cfg.baseline,
            "dataset": json.dumps(self.dataset.provenance, sort_keys=True),
            "head": self.head.state_dict(),
            "critic": None if self.critic is None else self.critic.state_dict(),
            "encoder_optimizer": self.enc_opt.state_dict(),
            "critic_optimizer": None if self.critic_opt is None else self.critic_opt.state_dict(),
            "counters": {
                "step": self.step,
                "epoch": self.epoch,
                "last_recluster_epoch": self.last_recluster_epoch,
                "best_probe": self.best_probe if math.isfinite(self.best_probe) else None,
            },
            "rng": {
                "data": json.dumps(self.data_rng.bit_generator.state),
                "y_rand": self.y_rand_gen.get_state(),
                "gp": self.gp_gen.get_state(),
            },
            "cluster": cluster,
        }

    def save(self, path: str | Path) -> Path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        return save_checkpoint(path, self.spec, self.encoder, **self.state_payload())

    @classmethod
    def from_checkpoint(cls, path, dataset: MultiDomainDataset, out_dir=None) -> "Trainer":
        payload = load_checkpoint(path)
        cfg = from_dict(json.loads(payload["config"]))
        if json.loads(payload["dataset"]) != dataset.provenance:
            raise ConfigError("checkpoint was trained on a different dataset")
        tr = cls(cfg, dataset, out_dir)
        tr.encoder.load_state_dict(payload["encoder"])
        tr.head.load_state_dict(payload["head"])
        tr.enc_opt.load_state_dict(payload["encoder_optimizer"])
        if tr.critic is not None:
            tr.critic.load_state_dict(payload["critic"])
            tr.critic_opt.load_state_dict(payload["critic_optimizer"])
        c = payload["counters"]
        tr.step, tr.epoch, tr.last_recluster_epoch = c["step"], c["epoch"], c["last_recluster_epoch"]
        tr.best_probe = -math.inf if c["best_probe"] is None else c["best_probe"]
        tr.data_rng.bit_generator.state = json.loads(payload["rng"]["data"])
        tr.y_rand_gen.set_state(payload["rng"]["y_rand"])
        tr.gp_gen.set_state(payload["rng"]["gp"])
        cl = payload["cluster"]
        if cl is not None:
            tr.cluster_state = clustering.ClusterState(
                cl["centroids"].numpy(),
                cl["epsilon"],
                cl["round"],
                cl["assignments"].numpy(),
                cl["inliers"].numpy(),
                json.loads(cl["history"]),
            )
            tr.prior = LabelPrior.from_labels(tr.cluster_state.assignments, tr.M, mask=tr.cluster_state.inliers)
        return tr

    # -- whole run ------------------------------------------------------------

    def fit(self, probe_fn=None, resume: bool = False) -> "Trainer":
        """Train until ``cfg.train.epochs``; writes metrics.jsonl and checkpoints if ``out_dir`` is set."""
        if self.out_dir is None:
            while self.epoch < self.cfg.train.epochs:
                self.run_epoch(probe_fn)
            return self
        with run_lock(self.out_dir):
            log_path = self.out_dir / "metrics.jsonl"
            records = self.metrics.records
            self.metrics = MetricsLog(log_path, append=resume)
            if resume:
                self.metrics.records = read_metrics(log_path) if log_path.exists() else []
            else:
                self.metrics.write(self.header())
                for r in records:
                    self.metrics.write(r)
            while self.epoch < self.cfg.train.epochs:
                self.run_epoch(probe_fn)
            self.save(self.out_dir / "final.pt")
        return self


def fit(cfg: ExperimentConfig, dataset: MultiDomainDataset, out_dir=None, probe_fn=None) -> Trainer:
    """Build a trainer and run it to completion."""
    trainer = Trainer(cfg, dataset, out_dir)
    if trainer.out_dir is None:
        trainer.metrics.write(trainer.header())
    return trainer.fit(probe_fn)


def train_step(trainer: Trainer, batch: ViewBatch) -> dict:
    return trainer.train_step(batch)


def plain_ssl_checksums(cfg: ExperimentConfig, dataset: MultiDomainDataset, steps: int) -> list[str]:
    """Reference loop for the unmodified SSL baseline: encoder + head + SSL loss, nothing else.

    Uses the same named seed streams as ``Trainer`` so trajectories can be compared
    bit for bit. Returns the encoder+head parameter checksum after every step.
    """
    root = cfg.seed
    spec = dataclasses.replace(cfg.encoder, seed=stream_seed(root, "init"))
    encoder = build_encoder(spec)
    head = build_head(cfg.baseline, ssl_input_width(cfg), seed=stream_seed(root, "head"))
    opt_spec = encoder_optimizer_spec(cfg)
    opt = make_optimizer(list(encoder.parameters()) + list(head.parameters()), opt_spec)
    rng = np.random.default_rng(stream_seed(root, "data"))
    aug_seed = stream_seed(root, "aug")
    total = cfg.train.epochs * max(1, len(dataset) // cfg.train.batch_size)
    out: list[str] = []
    step = epoch = 0
    while step < steps:
        for idx in iter_batches(len(dataset), cfg.train.batch_size, rng):
            if step >= steps:
                break
            a, b = augment_views(dataset.images[idx], idx, cfg.data.augment, aug_seed, epoch)
            encoder.train()
            head.train()
            h = slice_features(encode(encoder, torch.cat([a, b])), spec.k, cfg.ssl_slice)
            loss = head(h[: len(idx)], h[len(idx) :])
            lr = opt_spec["lr"] if cfg.train.schedule != "cosine" else cosine_annealed_lr(opt_spec["lr"], step, total)
            _set_lr(opt, lr)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            out.append(param_checksum(encoder, head))
        epoch += 1
    return out
