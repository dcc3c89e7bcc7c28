"""Cascaded training: VRNN pretraining, deep clustering, end-to-end fine-tuning."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .clustering import ClusterModel, TrainingError, cluster_loss, dec_train, kmeans_init, target_distribution
from .evaluation import evaluate
from .geometry import geometric_features
from .graphs import build_spatial, build_temporal, endpoint_velocity
from .predictor import GoalRepository, Predictor, nll_terms
from .pseudolabel import gumbel_softmax_st, onehot, sample_gumbel
from .softdtw import SoftDtwConfig, vrnn_softdtw_loss
from .vrnn import VRNN, elbo_loss

log = logging.getLogger(__name__)

ABLATIONS = ("none", "no-deep-clustering", "no-gumbel", "no-end-to-end")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    k: int = 3
    gamma: float = 0.1
    tau: float = 1.0
    lam: float = 0.5
    lr_a: float = 1e-3
    lr_b: float = 3e-3
    lr_c: float = 1e-4
    lr_predictor: float = 3e-3
    epochs_a: int = 40
    epochs_b: int = 100
    epochs_c: int = 60
    batch_size: int = 64
    windows_per_step: int = 1
    refresh_interval: int = 1
    patience: int = 10
    seed: int = 0
    scale: float = 1.0
    t_obs: int = 8
    t_pred: int = 12
    hidden: int = 64
    latent: int = 32
    pred_hidden: int = 16
    n_goals: int = 5
    n_samples: int = 20
    squared_distance: bool = True
    spatial_attention: bool = True
    temporal_attention: bool = True
    ablation: str = "none"

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        for name in ("gamma", "tau", "lr_a", "lr_b", "lr_c", "lr_predictor", "scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("batch_size", "windows_per_step", "refresh_interval", "hidden", "latent",
                     "pred_hidden", "n_goals", "n_samples", "t_pred"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("epochs_a", "epochs_b", "epochs_c", "patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.t_obs < 4:
            raise ConfigError("t_obs must be >= 4 (behaviour features need two velocity differences)")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values = {}
        for name, value in raw.items():
            kind = type(getattr(cls(), name))
            try:
                if kind is bool and isinstance(value, str):
                    value = value.lower() in ("1", "true", "yes", "on")
                values[name] = kind(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {name}: {value!r}") from exc
        return cls(**values).validate()

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a flat key-value object")
        return cls.from_dict(raw)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def agent_features(windows, scale=1.0):
    """Stack behaviour features of every agent in every window: ``(sum N, t_obs - 2, 2)``."""
    feats = [geometric_features(w.observed * scale) for w in windows]
    return torch.as_tensor(np.concatenate(feats), dtype=torch.float64)


def feature_stats(features):
    """Per-dimension mean and std over agents and steps; std is floored at 1e-8."""
    flat = features.reshape(-1, features.shape[-1])
    return flat.mean(dim=0), flat.std(dim=0).clamp_min(1e-8)


def future_targets(observed, future, goal):
    """Goal-relative future displacements ``(N, t_fut, 2)``."""
    path = np.concatenate([observed[:, -1:], future], axis=1)
    return np.diff(path, axis=1) - goal[:, None, :]


# ---------------------------------------------------------------- stage A


def stage_a_pretrain(features, cfg: TrainConfig, vrnn=None, history=None, on_epoch=None):
    """Minimise soft-DTW reconstruction plus negative ELBO over behaviour features."""
    if features.shape[0] == 0:
        raise ValueError("no training sequences")
    if vrnn is None:
        torch.manual_seed(cfg.seed)
        vrnn = VRNN(features.shape[-1], cfg.hidden, cfg.latent).double()
    if cfg.epochs_a == 0:
        return vrnn
    sdtw = SoftDtwConfig(cfg.gamma)
    optim = torch.optim.Adam(vrnn.parameters(), lr=cfg.lr_a)
    gen = torch.Generator().manual_seed(cfg.seed)
    good = copy.deepcopy(vrnn.state_dict())
    n = features.shape[0]
    for epoch in range(cfg.epochs_a):
        order = torch.randperm(n, generator=gen)
        totals = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            g = features[order[start:start + cfg.batch_size]]
            noise = torch.randn(g.shape[0], g.shape[1], vrnn.latent_size, generator=gen, dtype=g.dtype)
            _, dists = vrnn(g, noise=noise)
            l_dtw = vrnn_softdtw_loss(dists.mu_g, g, sdtw)
            l_elbo = elbo_loss(dists, g)
            loss = l_dtw + l_elbo
            if not torch.isfinite(loss):
                vrnn.load_state_dict(good)
                raise TrainingError(f"stage A loss diverged at epoch {epoch}", good)
            optim.zero_grad()
            loss.backward()
            optim.step()
            totals += np.array([loss.item(), l_dtw.item(), l_elbo.item()]) * len(g)
        totals /= n
        good = copy.deepcopy(vrnn.state_dict())
        row = {"stage": "a", "epoch": epoch, "loss": float(totals[0]), "softdtw": float(totals[1]), "elbo": float(totals[2])}
        if history is not None:
            history.append(row)
        if on_epoch is not None:
            on_epoch(row, vrnn)
    return vrnn


# ---------------------------------------------------------------- stage B


def stage_b_cluster(features, vrnn: VRNN, cfg: TrainConfig, history=None):
    """k-means on VRNN latents, then (unless ablated) joint DEC refinement."""
    with torch.no_grad():
        z = vrnn.embed(features).numpy()
    centers, _, _ = kmeans_init(z, cfg.k, seed=cfg.seed)
    clusters = ClusterModel(centers, alpha=1.0, squared=cfg.squared_distance)
    if cfg.ablation == "no-deep-clustering" or cfg.epochs_b == 0:
        return vrnn, clusters
    losses = []
    dec_train(vrnn.embed, vrnn.encoder_parameters(), features, clusters, epochs=cfg.epochs_b,
              refresh_interval=cfg.refresh_interval, lr=cfg.lr_b, batch_size=cfg.batch_size,
              seed=cfg.seed, history=losses)
    if history is not None:
        history.extend({"stage": "b", "epoch": i, "loss": v, "cluster": v} for i, v in enumerate(losses))
    return vrnn, clusters


# ---------------------------------------------------------------- bundle


class BPSGCN:
    """Trained components plus the goal repository; the unit that is saved and evaluated."""

    def __init__(self, cfg: TrainConfig, vrnn: VRNN, clusters: ClusterModel, predictor: Predictor | None = None,
                 repo: GoalRepository | None = None, feat_mean=None, feat_std=None):
        self.cfg = cfg
        self.vrnn = vrnn
        self.clusters = clusters
        self.predictor = predictor
        self.repo = repo or GoalRepository()
        self.feat_mean = torch.zeros(2, dtype=torch.float64) if feat_mean is None else torch.as_tensor(feat_mean)
        self.feat_std = torch.ones(2, dtype=torch.float64) if feat_std is None else torch.as_tensor(feat_std)

    def features(self, windows):
        """Standardised behaviour features of every agent in ``windows``."""
        return (agent_features(windows, self.cfg.scale) - self.feat_mean) / self.feat_std

    # labels ---------------------------------------------------------------
    def soft_assignment(self, observed_scaled):
        g = torch.as_tensor(geometric_features(observed_scaled), dtype=torch.float64)
        g = (g - self.feat_mean) / self.feat_std
        return self.clusters(self.vrnn.embed(g))

    def labels(self, q, train=False, generator=None):
        mode = self.cfg.ablation
        if mode == "no-gumbel":
            return q
        if train and mode == "none":
            noise = None if generator is None else sample_gumbel(q.shape, generator, q.dtype)
            return gumbel_softmax_st(torch.log(q), self.cfg.tau, noise=noise).onehot
        return onehot(q.detach().argmax(dim=1), q.shape[1])

    # prediction -----------------------------------------------------------
    def distributions(self, window):
        """``(pred, goal)`` pairs for each retrieved goal, in the scaled frame."""
        obs = window.observed * self.cfg.scale
        goals = self.repo.retrieve(obs, self.cfg.n_goals)
        with torch.no_grad():
            labels = self.labels(self.soft_assignment(obs))
            out = []
            for j in range(goals.shape[1]):
                goal = goals[:, j]
                pred = self.predictor(build_spatial(obs, labels, goal), build_temporal(obs, labels, goal))
                out.append((pred, goal))
        return out

    def hard_labels(self, windows):
        labs = []
        with torch.no_grad():
            for w in windows:
                labs.append(self.soft_assignment(w.observed * self.cfg.scale).argmax(dim=1).numpy())
        return np.concatenate(labs) if labs else np.zeros(0, dtype=np.int64)

    def latents(self, windows):
        with torch.no_grad():
            return self.vrnn.embed(self.features(windows)).numpy()

    # persistence ----------------------------------------------------------
    def save(self, path):
        arrays = {}
        arrays.update(checkpoint.state_arrays(self.vrnn, "vrnn"))
        arrays["clusters.centers"] = self.clusters.centers.detach().numpy()
        if self.predictor is not None:
            arrays.update(checkpoint.state_arrays(self.predictor, "predictor"))
        arrays["repo.descriptors"] = self.repo.descriptors
        arrays["repo.endpoints"] = self.repo.endpoints
        arrays["features.mean"] = self.feat_mean.numpy()
        arrays["features.std"] = self.feat_std.numpy()
        meta = {"config": self.cfg.to_dict(), "alpha": self.clusters.alpha, "k": self.clusters.k,
                "has_predictor": self.predictor is not None}
        return checkpoint.save_archive(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = checkpoint.load_archive(path)
        cfg = TrainConfig.from_dict(meta["config"])
        vrnn = VRNN(2, cfg.hidden, cfg.latent).double()
        checkpoint.load_state(vrnn, arrays, "vrnn")
        clusters = ClusterModel(arrays["clusters.centers"], alpha=meta["alpha"], squared=cfg.squared_distance)
        predictor = None
        if meta["has_predictor"]:
            predictor = make_predictor(cfg, clusters.k)
            checkpoint.load_state(predictor, arrays, "predictor")
        repo = GoalRepository(arrays["repo.descriptors"], arrays["repo.endpoints"])
        return cls(cfg, vrnn, clusters, predictor, repo, arrays["features.mean"], arrays["features.std"])


def make_predictor(cfg: TrainConfig, k):
    return Predictor(2 + k, cfg.pred_hidden, cfg.t_obs, cfg.t_pred,
                     spatial_attention=cfg.spatial_attention, temporal_attention=cfg.temporal_attention).double()


def build_repository(windows, scale=1.0):
    obs = [w.observed * scale for w in windows]
    ends = [endpoint_velocity(w.future * scale).numpy() for w in windows]
    return GoalRepository.from_windows(obs, ends)


# ---------------------------------------------------------------- stage C


def _window_offsets(windows):
    sizes = [w.n_agents for w in windows]
    return np.concatenate([[0], np.cumsum(sizes)]).astype(int)


def prediction_loss(bundle: BPSGCN, window, labels):
    """Mean over agents of the summed future-step NLL, using the ground-truth goal."""
    scale = bundle.cfg.scale
    obs, fut = window.observed * scale, window.future * scale
    goal = endpoint_velocity(fut).numpy()
    target = future_targets(obs, fut, goal)
    pred = bundle.predictor(build_spatial(obs, labels, goal), build_temporal(obs, labels, goal))
    return nll_terms(pred, target).sum() / window.n_agents


def stage_c_finetune(train_windows, bundle: BPSGCN, cfg: TrainConfig, val_windows=None, history=None):
    """End-to-end fine-tuning on ``2 * (lam * L_pred + (1 - lam) * L_cluster)``.

    The factor 2 makes ``lam = 0.5`` the unweighted sum. Cluster-side
    parameters are frozen for the ablations that disable end-to-end training
    and, when ``lam == 1``, the centres are frozen too.
    """
    if not train_windows:
        raise ValueError("no training windows")
    if bundle.predictor is None:
        torch.manual_seed(cfg.seed + 1)
        bundle.predictor = make_predictor(cfg, bundle.clusters.k)
    if not len(bundle.repo):
        bundle.repo = build_repository(train_windows, cfg.scale)
    if cfg.epochs_c == 0:
        return bundle
    end_to_end = cfg.ablation in ("none", "no-gumbel")
    groups = [{"params": list(bundle.predictor.parameters()), "lr": cfg.lr_predictor}]
    cluster_weight = 2.0 * (1.0 - cfg.lam) if end_to_end else 0.0
    pred_weight = 2.0 * cfg.lam if end_to_end else 1.0
    if end_to_end:
        groups.append({"params": list(bundle.vrnn.encoder_parameters()), "lr": cfg.lr_c})
        if cfg.lam < 1.0:
            groups.append({"params": [bundle.clusters.centers], "lr": cfg.lr_c})
    trainable = {id(p) for g in groups for p in g["params"]}
    frozen = [p for p in list(bundle.vrnn.parameters()) + [bundle.clusters.centers] if id(p) not in trainable]
    for p in frozen:
        p.requires_grad_(False)
    try:
        _finetune_loop(train_windows, bundle, cfg, val_windows, history, groups, pred_weight, cluster_weight)
    finally:
        for p in frozen:
            p.requires_grad_(True)
    return bundle


def _state(bundle):
    return (copy.deepcopy(bundle.vrnn.state_dict()), bundle.clusters.centers.detach().clone(),
            copy.deepcopy(bundle.predictor.state_dict()))


def _load(bundle, state):
    bundle.vrnn.load_state_dict(state[0])
    with torch.no_grad():
        bundle.clusters.centers.copy_(state[1])
    bundle.predictor.load_state_dict(state[2])


def _finetune_loop(train_windows, bundle, cfg, val_windows, history, groups, pred_weight, cluster_weight):
    optim = torch.optim.Adam(groups)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    features = bundle.features(train_windows)
    offsets = _window_offsets(train_windows)
    good = _state(bundle)
    best, best_ade, stale = good, float("inf"), 0
    for epoch in range(cfg.epochs_c):
        with torch.no_grad():
            p_full, _ = target_distribution(bundle.clusters(bundle.vrnn.embed(features)))
        order = torch.randperm(len(train_windows), generator=gen).tolist()
        sums = np.zeros(3)
        optim.zero_grad()
        for step, w_idx in enumerate(order, start=1):
            window = train_windows[w_idx]
            lo, hi = offsets[w_idx], offsets[w_idx + 1]
            q = bundle.clusters(bundle.vrnn.embed(features[lo:hi]))
            labels = bundle.labels(q, train=True, generator=gen)
            l_pred = prediction_loss(bundle, window, labels)
            l_clu = cluster_loss(q, p_full[lo:hi], reduction="mean")
            loss = pred_weight * l_pred + cluster_weight * l_clu
            if not torch.isfinite(loss):
                _load(bundle, good)
                raise TrainingError(f"stage C loss diverged at epoch {epoch}", good)
            (loss / cfg.windows_per_step).backward()
            if step % cfg.windows_per_step == 0 or step == len(order):
                optim.step()
                optim.zero_grad()
            sums += np.array([loss.item(), l_pred.item(), l_clu.item()])
        sums /= len(order)
        good = _state(bundle)
        row = {"stage": "c", "epoch": epoch, "loss": float(sums[0]), "prediction": float(sums[1]), "cluster": float(sums[2])}
        if val_windows:
            report = evaluate(bundle, val_windows, cfg.n_samples, seed=cfg.seed, scale=cfg.scale)
            row.update(ade=report.ade, fde=report.fde)
            if report.ade < best_ade - 1e-12:
                best, best_ade, stale = good, report.ade, 0
            else:
                stale += 1
        if history is not None:
            history.append(row)
        log.info("stage C epoch %d: %s", epoch, row)
        if val_windows and cfg.patience and stale >= cfg.patience:
            break
    if val_windows:
        _load(bundle, best)


# ---------------------------------------------------------------- driver


def new_bundle(train_windows, cfg: TrainConfig):
    """Untrained components; feature statistics come from ``train_windows``."""
    if not train_windows:
        raise ValueError("no training windows")
    torch.manual_seed(cfg.seed)
    vrnn = VRNN(2, cfg.hidden, cfg.latent).double()
    mean, std = feature_stats(agent_features(train_windows, cfg.scale))
    clusters = ClusterModel(np.zeros((cfg.k, cfg.latent)), squared=cfg.squared_distance)
    return BPSGCN(cfg, vrnn, clusters, feat_mean=mean, feat_std=std)


def train(train_windows, cfg: TrainConfig, val_windows=None, stages="abc", history=None, bundle=None, on_epoch=None):
    """Run the requested stages in order; returns a :class:`BPSGCN`.

    ``on_epoch(row, vrnn)`` is called after every Stage A epoch.
    """
    cfg.validate()
    seed_everything(cfg.seed)
    if bundle is None:
        bundle = new_bundle(train_windows, cfg)
    bundle.cfg = cfg
    features = bundle.features(train_windows)
    if "a" in stages:
        stage_a_pretrain(features, cfg, bundle.vrnn, history, on_epoch)
    if "b" in stages:
        _, bundle.clusters = stage_b_cluster(features, bundle.vrnn, cfg, history)
    if "c" in stages:
        stage_c_finetune(train_windows, bundle, cfg, val_windows, history)
    return bundle
