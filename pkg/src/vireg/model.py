"""Model variants, the training loop, checkpoints, and evaluation.

Five variants share one MLP backbone: a plain least-squares head, the
unweighted four-parameter evidential head, the full pipeline (probabilistic
encoder, feature smoothing, reweighted evidential head, decoder), and the
two ablations that keep only the encoder or only the predictor side.
Training is single-threaded and bit-deterministic for a given seed.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import evidential as ev
from . import metrics as mx
from .data import TRAIN, VAL
from .encoder import DivergenceError
from .evidential import NIGPrior
from .labelspace import Kernel, LabelSpace
from .optim import Adam

VARIANTS = ("vanilla", "der", "vir", "vir-encoder-only", "vir-predictor-only")
EVIDENTIAL_VARIANTS = ("der", "vir", "vir-predictor-only")
ENCODER_VARIANTS = ("vir", "vir-encoder-only")

LOG_COLUMNS = ("epoch", "train_loss", "val_mae_all", "val_mae_few", "val_nll_all", "lr")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "vir"
    hidden: tuple = (64, 64)
    latent_dim: int = 16
    lambda_reg: float = 0.1
    recon_weight: float = 1.0
    kernel: Kernel = field(default_factory=Kernel)
    prior: NIGPrior = field(default_factory=NIGPrior)
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay_epochs: tuple = (60, 90)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    mc_samples: int = 1
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.lambda_reg < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lambda_reg}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if list(self.lr_decay_epochs) != sorted(set(self.lr_decay_epochs)):
            raise ValueError(f"decay epochs must be strictly increasing, "
                             f"got {self.lr_decay_epochs}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    def to_dict(self):
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        doc["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "hidden" in doc:
            doc["hidden"] = tuple(doc["hidden"])
        if "lr_decay_epochs" in doc:
            doc["lr_decay_epochs"] = tuple(doc["lr_decay_epochs"])
        if isinstance(doc.get("kernel"), dict):
            doc["kernel"] = Kernel(**doc["kernel"])
        if isinstance(doc.get("prior"), dict):
            doc["prior"] = NIGPrior(**doc["prior"])
        return cls(**doc)

    def hash(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _init_affine(rng, fan_in, fan_out, name):
    bound = 1.0 / math.sqrt(fan_in)
    w = ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=f"{name}.weight")
    b = ad.parameter(rng.uniform(-bound, bound, size=fan_out), name=f"{name}.bias")
    return w, b


class Mlp:
    """Plain ReLU multilayer perceptron over graph nodes."""

    def __init__(self, rng, sizes, name):
        self.layers = [_init_affine(rng, sizes[i], sizes[i + 1], f"{name}.{i}")
                       for i in range(len(sizes) - 1)]

    def forward(self, x):
        for i, (w, b) in enumerate(self.layers):
            x = ad.matmul(x, w) + b
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def parameters(self):
        return [p for pair in self.layers for p in pair]


@dataclass
class Scaler:
    """Per-column standardization fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values):
        values = np.asarray(values, dtype=np.float64)
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean=mean, std=std)

    @classmethod
    def identity(cls, dim):
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def transform(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


class Model:
    """One trainable variant: parameters plus the variant's forward passes."""

    def __init__(self, config, input_dim):
        self.config = config
        self.input_dim = input_dim
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11]))
        hidden = list(config.hidden)
        D = config.latent_dim
        self.backbone = Mlp(rng, [input_dim] + hidden, "backbone")
        feat = hidden[-1]
        self.running = None
        self.decoder = None
        variant = config.variant
        if variant == "vanilla":
            self.head = _init_affine(rng, feat, 1, "head")
        elif variant == "der":
            self.head = _init_affine(rng, feat, 4, "head")
        elif variant == "vir-predictor-only":
            self.feature_layer = _init_affine(rng, feat, D, "features")
            self.head = _init_affine(rng, D, 3, "head")
        else:  # vir, vir-encoder-only
            self.enc_layer = _init_affine(rng, feat, 2 * D, "encoder")
            self.decoder = Mlp(rng, [D] + hidden[::-1] + [input_dim], "decoder")
            if variant == "vir":
                self.head = _init_affine(rng, D, 3, "head")
            else:
                self.head = _init_affine(rng, D, 1, "head")
        self.x_scaler = Scaler.identity(input_dim)
        self.y_scaler = Scaler.identity(1)

    # -- parameter plumbing ------------------------------------------------

    def parameters(self):
        params = self.backbone.parameters()
        if hasattr(self, "enc_layer"):
            params += list(self.enc_layer)
        if hasattr(self, "feature_layer"):
            params += list(self.feature_layer)
        params += list(self.head)
        if self.decoder is not None:
            params += self.decoder.parameters()
        return params

    def parameter_count(self):
        return sum(p.value.size for p in self.parameters())

    # -- variant forward passes ---------------------------------------------

    def _encode(self, x):
        h = self.backbone.forward(x)
        return enc.encode(h, *self.enc_layer, self.config.latent_dim)

    def _latent(self, x, bins, noise):
        """Encoder path: probabilistic representation -> smoothed -> sample."""
        mu, var = self._encode(x)
        raw_mu, raw_var = mu, var
        if self.running is not None and self.running.initialized and bins is not None:
            mu, var = enc.whiten_recolor(mu, var, bins, self.running.stats,
                                         self.running.smoothed)
        z = enc.reparameterize(mu, var, noise)
        return z, mu, var, raw_mu, raw_var

    def loss_terms(self, x_std, y_std, weights, bins, noise):
        """Per-batch mean loss terms on the standardized scale.

        Returns (terms dict, stat arrays or None). The stat arrays are the
        pre-smoothing representation moments used for the epoch accumulator.
        """
        cfg = self.config
        x = ad.constant(x_std)
        y = np.asarray(y_std, dtype=np.float64)
        terms = {}
        stats_arrays = None
        if cfg.variant == "vanilla":
            pred = ad.reshape(ad.matmul(self.backbone.forward(x), self.head[0])
                              + self.head[1], (-1,))
            terms["mse"] = ad.reduce_mean(ad.square(pred - ad.constant(y)))
        elif cfg.variant == "der":
            post = ev.der_head_forward(self.backbone.forward(x), *self.head)
            terms["nll"] = ad.reduce_mean(ev.der_nll(post.gamma, post.nu,
                                                     post.alpha, post.beta, y))
            terms["reg"] = ad.reduce_mean(ev.evidential_regularizer(post, y))
        elif cfg.variant == "vir-predictor-only":
            feats = ad.matmul(self.backbone.forward(x), self.feature_layer[0]) \
                + self.feature_layer[1]
            out = ev.head_forward(feats, *self.head)
            post = ev.nig_posterior(out, cfg.prior, weights)
            terms["nll"] = ad.reduce_mean(ev.vir_nll(post, y))
            terms["reg"] = ad.reduce_mean(ev.evidential_regularizer(post, y))
        else:
            z, mu, var, raw_mu, raw_var = self._latent(x, bins, noise)
            stats_arrays = (raw_mu.value.copy(), raw_var.value.copy())
            terms["kl"] = ad.reduce_mean(enc.kl_to_standard_normal(mu, var))
            recon = self.decoder.forward(z)
            terms["recon"] = ad.reduce_mean(
                ad.reduce_sum(ad.square(recon - x), axis=1)) * 0.5
            if cfg.variant == "vir":
                out = ev.head_forward(z, *self.head)
                post = ev.nig_posterior(out, cfg.prior, weights)
                terms["nll"] = ad.reduce_mean(ev.vir_nll(post, y))
                terms["reg"] = ad.reduce_mean(ev.evidential_regularizer(post, y))
            else:  # vir-encoder-only
                pred = ad.reshape(ad.matmul(z, self.head[0]) + self.head[1], (-1,))
                terms["mse"] = ad.reduce_mean(ad.square(pred - ad.constant(y)))
        return terms, stats_arrays

    def total_loss(self, terms):
        cfg = self.config
        total = None
        for key, node in terms.items():
            scale = {"reg": cfg.lambda_reg, "recon": cfg.recon_weight}.get(key, 1.0)
            piece = node * scale if scale != 1.0 else node
            total = piece if total is None else total + piece
        if not np.all(np.isfinite(total.value)):
            detail = {k: v.item() for k, v in terms.items()}
            raise DivergenceError(f"non-finite loss from terms {detail}")
        return total

    def predict(self, features, labels=None, label_space=None):
        """Original-unit predictions for a feature matrix.

        Returns a dict with ``y_hat`` always, plus ``s_hat`` and the
        standardized posterior parameter arrays for evidential variants.
        Encoder variants apply the frozen smoothing statistics, which needs
        the samples' label bins (the transductive evaluation protocol).
        """
        cfg = self.config
        x_std = self.x_scaler.transform(features)
        x = ad.constant(x_std)
        y_scale = float(self.y_scaler.std[0])
        out = {}
        if cfg.variant == "vanilla":
            pred = ad.reshape(ad.matmul(self.backbone.forward(x), self.head[0])
                              + self.head[1], (-1,))
            out["y_hat"] = self.y_scaler.inverse(pred.value)
            return out
        if cfg.variant == "der":
            post = ev.der_head_forward(self.backbone.forward(x), *self.head)
        elif cfg.variant == "vir-predictor-only":
            feats = ad.matmul(self.backbone.forward(x), self.feature_layer[0]) \
                + self.feature_layer[1]
            weights = self._eval_weights(labels, label_space, features.shape[0])
            post = ev.nig_posterior(ev.head_forward(feats, *self.head), cfg.prior, weights)
        else:
            bins = None
            if labels is not None and label_space is not None:
                bins = label_space.bins_of(labels)
            noise = np.zeros((features.shape[0], cfg.latent_dim))
            z, mu, var, _, _ = self._latent(x, bins, noise)
            if cfg.variant == "vir-encoder-only":
                pred = ad.reshape(ad.matmul(z, self.head[0]) + self.head[1], (-1,))
                out["y_hat"] = self.y_scaler.inverse(pred.value)
                return out
            weights = self._eval_weights(labels, label_space, features.shape[0])
            post = ev.nig_posterior(ev.head_forward(z, *self.head), cfg.prior, weights)
        y_hat_std, s_hat_std = ev.predict(post)
        out["y_hat"] = self.y_scaler.inverse(y_hat_std)
        out["s_hat"] = s_hat_std * y_scale ** 2
        out["posterior"] = (post.gamma.value, post.nu.value,
                            post.alpha.value, post.beta.value)
        out["nll_offset"] = math.log(y_scale)
        return out

    def _eval_weights(self, labels, label_space, n):
        if labels is not None and label_space is not None:
            return label_space.weights_of(labels)
        return np.ones(n)

    # -- checkpoint plumbing --------------------------------------------------

    def state_dict(self):
        return {
            "params": {p.name: p.value.tolist() for p in self.parameters()},
            "x_scaler": {"mean": self.x_scaler.mean.tolist(),
                         "std": self.x_scaler.std.tolist()},
            "y_scaler": {"mean": self.y_scaler.mean.tolist(),
                         "std": self.y_scaler.std.tolist()},
            "running": self.running.state_dict() if self.running else None,
        }

    def load_state_dict(self, state):
        by_name = {p.name: p for p in self.parameters()}
        if set(by_name) != set(state["params"]):
            raise ValueError("checkpoint parameters do not match the model")
        for name, values in state["params"].items():
            node = by_name[name]
            node.value = np.asarray(values, dtype=np.float64).reshape(node.value.shape)
        self.x_scaler = Scaler(mean=np.asarray(state["x_scaler"]["mean"]),
                               std=np.asarray(state["x_scaler"]["std"]))
        self.y_scaler = Scaler(mean=np.asarray(state["y_scaler"]["mean"]),
                               std=np.asarray(state["y_scaler"]["std"]))
        if state["running"] is not None:
            self.running = enc.RunningStats.from_state_dict(state["running"],
                                                            self.config.kernel)


def build_model(config, input_dim):
    return Model(config, input_dim)


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict
    adam_state: dict
    epoch: int
    best_epoch: int
    diverged: bool = False

    def to_json(self):
        return json.dumps({
            "config": self.config.to_dict(),
            "config_hash": self.config.hash(),
            "state": self.state,
            "adam_state": self.adam_state,
            "epoch": self.epoch,
            "best_epoch": self.best_epoch,
            "diverged": self.diverged,
        })

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        config = ModelConfig.from_dict(doc["config"])
        if config.hash() != doc["config_hash"]:
            raise ValueError("checkpoint config hash mismatch")
        return cls(config=config, state=doc["state"], adam_state=doc["adam_state"],
                   epoch=doc["epoch"], best_epoch=doc["best_epoch"],
                   diverged=doc["diverged"])

    def restore(self, input_dim):
        model = build_model(self.config, input_dim)
        model.load_state_dict(self.state)
        return model


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_rows: list
    model: Model


def lr_at_epoch(config, epoch):
    drops = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.lr * config.lr_decay_factor ** drops


def train(dataset, config, label_space):
    """Full training loop; returns the best-validation checkpoint and log.

    The epoch loop is: seeded shuffle, Adam minibatch steps, epoch-level
    statistic accumulation, running-statistics update, then validation.
    The first epoch trains with the smoothing bypassed (no statistics exist
    yet). On divergence the last-good checkpoint is returned with a flag.
    """
    x_train, y_train = dataset.subset(TRAIN)
    x_val, y_val = dataset.subset(VAL)
    if x_train.shape[0] == 0 or x_val.shape[0] == 0:
        raise ValueError("training requires non-empty train and val splits")
    model = build_model(config, x_train.shape[1])
    if config.standardize:
        model.x_scaler = Scaler.fit(x_train)
        model.y_scaler = Scaler.fit(y_train[:, None])
    if config.variant in ENCODER_VARIANTS:
        model.running = enc.RunningStats(label_space.num_bins, config.latent_dim,
                                         config.kernel, momentum=config.momentum)
    x_std = model.x_scaler.transform(x_train)
    y_std = model.y_scaler.transform(y_train[:, None])[:, 0]
    bins = label_space.bins_of(y_train)
    weights = label_space.weights_of(y_train)
    opt = Adam(model.parameters(), lr=config.lr)
    ss = np.random.SeedSequence([config.seed, 0x5EED])
    shuffle_rng, noise_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    n = x_std.shape[0]
    D = config.latent_dim
    log_rows = []
    best = None
    best_val = math.inf
    last_good = None
    diverged = False
    for epoch in range(config.epochs):
        opt.lr = lr_at_epoch(config, epoch)
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        epoch_mu, epoch_var, epoch_bins = [], [], []
        try:
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                noise = noise_rng.normal(size=(idx.size, D))
                terms, stat_arrays = model.loss_terms(
                    x_std[idx], y_std[idx], weights[idx], bins[idx], noise)
                total = model.total_loss(terms)
                for _ in range(config.mc_samples - 1):
                    extra_terms, _ = model.loss_terms(
                        x_std[idx], y_std[idx], weights[idx], bins[idx],
                        noise_rng.normal(size=(idx.size, D)))
                    total = total + model.total_loss(extra_terms)
                if config.mc_samples > 1:
                    total = total * (1.0 / config.mc_samples)
                opt.zero_grad()
                ad.backward(total)
                opt.step()
                epoch_loss += total.item() * idx.size
                if stat_arrays is not None:
                    epoch_mu.append(stat_arrays[0])
                    epoch_var.append(stat_arrays[1])
                    epoch_bins.append(bins[idx])
        except (DivergenceError, FloatingPointError):
            diverged = True
            break
        if model.running is not None and epoch_mu:
            all_mu = np.concatenate(epoch_mu)
            all_var = np.concatenate(epoch_var)
            all_bins = np.concatenate(epoch_bins)
            epoch_stats = enc.bin_statistics(all_mu, all_var, all_bins,
                                             label_space.num_bins)
            global_stats = None
            if not model.running.initialized:
                global_stats = enc.global_statistics(all_mu, all_var)
            model.running.update(epoch_stats, global_stats)
        val_report = evaluate(model, x_val, y_val, label_space)
        val_mae = val_report.regions["all"]["mae"]
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / n,
            "val_mae_all": val_mae,
            "val_mae_few": val_report.regions.get("few", {}).get("mae", float("nan")),
            "val_nll_all": val_report.regions["all"].get("nll", float("nan")),
            "lr": opt.lr,
        }
        log_rows.append(row)
        snapshot = Checkpoint(config=config, state=model.state_dict(),
                              adam_state=opt.state_dict(), epoch=epoch,
                              best_epoch=epoch)
        last_good = snapshot
        if val_mae < best_val:
            best_val = val_mae
            best = snapshot
    if best is None:
        if last_good is None:
            raise DivergenceError("training diverged before completing one epoch")
        best = last_good
    best = Checkpoint(config=best.config, state=best.state, adam_state=best.adam_state,
                      epoch=last_good.epoch, best_epoch=best.best_epoch,
                      diverged=diverged)
    final_model = best.restore(x_train.shape[1])
    return TrainResult(checkpoint=best, log_rows=log_rows, model=final_model)


def evaluate(model, features, labels, label_space):
    """Shot-region MetricReport for a split, in original label units."""
    pred = model.predict(features, labels=labels, label_space=label_space)
    region_names = label_space.region_names(labels)
    return mx.report(labels, pred["y_hat"], region_names,
                     uncertainties=pred.get("s_hat"),
                     posterior=pred.get("posterior"),
                     nll_offset=pred.get("nll_offset", 0.0))
