from .accountant import (DEFAULT_ORDERS, AccountantState, EmptyOrderGrid, InvalidRate, account_steps,
                         calibrate_sigma, epsilon_for, rdp_gaussian, rdp_subsampled_gaussian, to_epsilon)
from .optimizer import (PrivacyParams, clip_gradient, ema_update, grads_with_aug_multiplicity, poisson_sample,
                        privatize, sgd_step)

__all__ = [
    "DEFAULT_ORDERS", "AccountantState", "EmptyOrderGrid", "InvalidRate", "account_steps", "calibrate_sigma",
    "epsilon_for", "rdp_gaussian", "rdp_subsampled_gaussian", "to_epsilon", "PrivacyParams", "clip_gradient",
    "ema_update", "grads_with_aug_multiplicity", "poisson_sample", "privatize", "sgd_step",
]
