"""scikit-learn style classifier wrapping the equivariant model and the DP-SGD loop."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .data import augment as default_augment
from .metrics import SparsityTrace, brier_score, top1_accuracy
from .model import DEFAULT_WIDTHS, build_eq_resnet9
from .privacy.accountant import AccountantState, account_steps, calibrate_sigma, to_epsilon
from .privacy.optimizer import draw_noise, ema_update, flatten, grads_with_aug_multiplicity, poisson_sample, \
    privatize, unflatten

FIXED_MEAN, FIXED_STD = 0.5, 0.25
PRECISIONS = {"float64": np.float64, "float32": np.float32}


class BudgetExceeded(RuntimeError):
    """Another step would push epsilon past the configured target."""


def validate_images(x, channels: int | None = None) -> np.ndarray:
    x = check_array(x, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if x.ndim != 4:
        raise ValueError(f"expected images shaped (n, C, H, W), got {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {x.shape[1]}")
    if x.shape[2] != x.shape[3]:
        raise ValueError("images must be square")
    return x


def validate_labels(y, n: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    if y.min() < 0 or (num_classes is not None and y.max() >= num_classes):
        raise ValueError("labels out of range")
    return y.astype(np.int64)


class EquivariantDPClassifier(ClassifierMixin, BaseEstimator):
    """Equivariant ResNet-9 trained with DP-SGD.

    Exactly one of ``noise_multiplier`` and ``target_epsilon`` is used: with
    a target, the noise is calibrated so ``num_updates`` steps spend it.
    Predictions use the exponential moving average of the parameters.
    """

    def __init__(self, group="D4", reference_widths=DEFAULT_WIDTHS, num_classes=None, restrict_last_block=True,
                 padding_mode="zero", activation="mish", learning_rate=2.0, batch_expected=256, clip_norm=1.0,
                 noise_multiplier=None, target_epsilon=None, delta=1e-5, num_updates=100, aug_multiplicity=1,
                 ema_decay=0.999, precision="float64", normalization="train", micro_batch=None,
                 conversion="improved", log_every=0, sparsity_eps=1e-5, random_state=0):
        self.group = group
        self.reference_widths = reference_widths
        self.num_classes = num_classes
        self.restrict_last_block = restrict_last_block
        self.padding_mode = padding_mode
        self.activation = activation
        self.learning_rate = learning_rate
        self.batch_expected = batch_expected
        self.clip_norm = clip_norm
        self.noise_multiplier = noise_multiplier
        self.target_epsilon = target_epsilon
        self.delta = delta
        self.num_updates = num_updates
        self.aug_multiplicity = aug_multiplicity
        self.ema_decay = ema_decay
        self.precision = precision
        self.normalization = normalization
        self.micro_batch = micro_batch
        self.conversion = conversion
        self.log_every = log_every
        self.sparsity_eps = sparsity_eps
        self.random_state = random_state

    # -- setup
    def _check_params(self, n: int):
        if (self.noise_multiplier is None) == (self.target_epsilon is None):
            raise ValueError("set exactly one of noise_multiplier and target_epsilon")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")
        if self.normalization not in ("fixed", "train", "none"):
            raise ValueError("normalization must be 'fixed', 'train' or 'none'")
        if not 0 < self.batch_expected <= n:
            raise ValueError(f"batch_expected must lie in (0, {n}]")
        if self.num_updates < 0 or self.aug_multiplicity < 1:
            raise ValueError("num_updates must be >= 0 and aug_multiplicity >= 1")
        if self.clip_norm <= 0 or self.learning_rate < 0:
            raise ValueError("clip_norm must be positive and learning_rate non-negative")

    def _streams(self):
        seq = np.random.SeedSequence(self.random_state)
        init, sample, aug, noise = seq.spawn(4)
        return (int(init.generate_state(1)[0]), np.random.default_rng(sample), np.random.default_rng(aug),
                np.random.default_rng(noise))

    def _normalize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.norm_mean_[None, :, None, None]) / self.norm_std_[None, :, None, None]).astype(self.dtype_)

    def build_model(self, channels: int, num_classes: int, seed: int = 0):
        return build_eq_resnet9(self.group, self.reference_widths, num_classes, in_channels=channels,
                                padding_mode=self.padding_mode, restrict_last_block=self.restrict_last_block,
                                activation=self.activation, seed=seed, dtype=PRECISIONS[self.precision])

    def _init(self, x: np.ndarray, y: np.ndarray):
        n, c = x.shape[:2]
        self._check_params(n)
        k = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        self.classes_ = np.arange(k)
        self.n_features_in_ = int(np.prod(x.shape[1:]))
        self.dtype_ = PRECISIONS[self.precision]
        if self.normalization == "fixed":
            self.norm_mean_, self.norm_std_ = np.full(c, FIXED_MEAN), np.full(c, FIXED_STD)
        elif self.normalization == "train":
            self.norm_mean_, self.norm_std_ = x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3)) + 1e-8
        else:
            self.norm_mean_, self.norm_std_ = np.zeros(c), np.ones(c)
        init_seed, self.sample_rng_, self.aug_rng_, self.noise_rng_ = self._streams()
        self.model_ = self.build_model(c, k, init_seed)
        self.sample_rate_ = self.batch_expected / n
        if self.target_epsilon is not None:
            self.sigma_ = calibrate_sigma(self.target_epsilon, self.delta, self.sample_rate_,
                                          max(1, self.num_updates), conversion=self.conversion)
        else:
            self.sigma_ = float(self.noise_multiplier)
        self.accountant_ = AccountantState(self.sample_rate_, self.sigma_)
        self._step_curve = self.accountant_.step_curve()
        self.ema_ = self.model_.get_state()
        self.steps_ = 0
        self.log_ = []
        self.sparsity_ = SparsityTrace(self.sparsity_eps)

    # -- training
    def fit(self, X, y):
        x = validate_images(X)
        y = validate_labels(y, len(x), self.num_classes)
        self._init(x, y)
        self._train(self._normalize(x), y, self.num_updates)
        return self

    def partial_fit_steps(self, X, y, steps: int):
        """Run more DP-SGD steps on an already fitted estimator."""
        check_is_fitted(self, "model_")
        x = validate_images(X, self.model_.input_type.total_channels)
        y = validate_labels(y, len(x), len(self.classes_))
        self._train(self._normalize(x), y, steps)
        return self

    def epsilon(self) -> float:
        check_is_fitted(self, "accountant_")
        if self.steps_ == 0:
            return to_epsilon(self.accountant_, self.delta, self.conversion)[0]
        if self.sigma_ == 0:
            return math.inf
        return to_epsilon(self.accountant_, self.delta, self.conversion)[0]

    def _epsilon_after(self, steps: int) -> float:
        if self.sigma_ == 0:
            return math.inf
        state = account_steps(AccountantState(self.sample_rate_, self.sigma_), steps)
        return to_epsilon(state, self.delta, self.conversion)[0]

    def _train(self, x: np.ndarray, y: np.ndarray, steps: int):
        model = self.model_
        params = model.parameters()
        shapes = [p.shape for p in params]
        dim = sum(p.data.size for p in params)
        n = len(x)
        lot = self.sample_rate_ * n
        aug = default_augment if self.aug_multiplicity > 1 else None
        for _ in range(steps):
            if self.target_epsilon is not None and self._epsilon_after(self.steps_ + 1) > self.target_epsilon + 1e-9:
                raise BudgetExceeded(f"step {self.steps_ + 1} would exceed epsilon={self.target_epsilon}")
            # noise is drawn before any data is touched
            noise = draw_noise(dim, self.sigma_, self.clip_norm, self.noise_rng_, self.dtype_)
            idx = poisson_sample(n, self.sample_rate_, self.sample_rng_)
            if len(idx):
                grads, losses = grads_with_aug_multiplicity(model, x[idx], y[idx], self.aug_multiplicity,
                                                            self.aug_rng_, aug, self.micro_batch)
            else:
                grads, losses = np.zeros((0, dim), dtype=self.dtype_), np.zeros(0)
            update = privatize(grads, self.clip_norm, self.sigma_, lot, noise=noise)
            flat = flatten([p.data for p in params]) - self.learning_rate * update
            for p, v in zip(params, unflatten(flat.astype(self.dtype_, copy=False), shapes)):
                p.data = v.copy()
            self.ema_ = ema_update(self.ema_, [p.data for p in params], self.ema_decay)
            self.steps_ += 1
            self.accountant_ = AccountantState(self.sample_rate_, self.sigma_, self.accountant_.orders,
                                               tuple(np.asarray(self.accountant_.rho) + self._step_curve),
                                               self.steps_)
            if self.log_every and (self.steps_ % self.log_every == 0 or self.steps_ == 1):
                clipped_mean = privatize(grads, self.clip_norm, 0.0, lot, noise=np.zeros(dim, dtype=self.dtype_))
                _, pl0, gl0 = self.sparsity_.record(self.steps_, flat, clipped_mean)
                self.log_.append({"step": self.steps_, "loss": float(losses.mean()) if len(losses) else float("nan"),
                                  "lot": int(len(idx)), "epsilon": self.epsilon(), "param_l0": pl0, "grad_l0": gl0})

    # -- inference
    def _swap(self, arrays):
        old = self.model_.get_state()
        self.model_.set_state(arrays)
        return old

    def decision_function(self, X, use_ema: bool = True, batch_size: int = 256) -> np.ndarray:
        check_is_fitted(self, "model_")
        x = self._normalize(validate_images(X, self.model_.input_type.total_channels))
        old = self._swap(self.ema_) if use_ema else None
        try:
            outs = [self.model_.forward(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        finally:
            if old is not None:
                self.model_.set_state(old)
        return np.concatenate(outs).astype(np.float64)

    def predict_proba(self, X, use_ema: bool = True) -> np.ndarray:
        return ad.softmax(self.decision_function(X, use_ema))

    def predict(self, X, use_ema: bool = True) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X, use_ema), axis=1)]

    def score(self, X, y, sample_weight=None) -> float:
        return top1_accuracy(self.predict_proba(X), validate_labels(y, len(X)))

    def evaluate(self, X, y, use_ema: bool = True) -> dict:
        y = validate_labels(y, len(X), len(self.classes_))
        logits = self.decision_function(X, use_ema)
        probs = ad.softmax(logits)
        loss = float(ad.softmax_cross_entropy(ad.batch(logits), y).data.mean())
        return {"accuracy": top1_accuracy(probs, y), "brier": brier_score(probs, y), "loss": loss}
