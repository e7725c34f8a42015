"""scikit-learn style wrappers around the functional API.

The estimators hold settings as constructor arguments (so ``get_params`` /
``set_params`` / ``clone`` work) and learned state in trailing-underscore
attributes.  "Samples" here are whole volumes, so ``transform`` takes a 3D
map rather than a 2D design matrix.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import grf, infer, perm, sim
from ._validation import check_mask, check_stack, check_volume
from .enhance import TfceParams, tfce_exact, tfce_riemann


def _check_fitted(est, attr):
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class SmoothnessEstimator(BaseEstimator):
    """Per-axis FWHM of a residual stack.

    Attributes
    ----------
    params_ : GrfParams
    fwhm_ : ndarray of shape (3,)
    """

    def __init__(self, estimator="autocorr"):
        self.estimator = estimator

    def fit(self, X, y=None, mask=None):
        self.params_ = grf.estimate_smoothness(X, mask, estimator=self.estimator)
        self.fwhm_ = np.asarray(self.params_.fwhm_vox)
        return self


class TFCE(TransformerMixin, BaseEstimator):
    """TFCE scores of a Z map, grid-free (``method="exact"``) or by Riemann sum."""

    def __init__(self, E=0.5, H=2.0, h0=0.0, dh=0.1, method="exact", fsl_bug_compat=False):
        self.E = E
        self.H = H
        self.h0 = h0
        self.dh = dh
        self.method = method
        self.fsl_bug_compat = fsl_bug_compat

    def fit(self, X=None, y=None, mask=None):
        self.params_ = TfceParams(self.E, self.H, self.h0, self.dh, None, self.fsl_bug_compat)
        self.mask_ = None if mask is None else check_mask(mask, check_volume(X).shape)
        return self

    def transform(self, X, mask=None):
        _check_fitted(self, "params_")
        mask = self.mask_ if mask is None else mask
        if self.method == "exact":
            return tfce_exact(X, mask, self.params_)
        if self.method == "riemann":
            return tfce_riemann(X, mask, self.params_)
        raise ValueError(f"unknown method {self.method!r}; expected 'exact' or 'riemann'")

    def fit_transform(self, X, y=None, mask=None):
        return self.fit(X, mask=mask).transform(X)


class PTFCE(TransformerMixin, BaseEstimator):
    """Analytical GRF enhancement with Bonferroni significance.

    ``fit`` takes either a residual stack (smoothness is estimated from it)
    or uses the ``fwhm`` argument; ``transform`` returns the enhanced Z map
    (signed when ``two_sided``) and ``predict`` the significance mask.

    Attributes
    ----------
    grf_params_ : GrfParams
    mask_ : ndarray of bool
    enhanced_ : EnhancedMap from the last ``transform`` / ``predict``
    """

    def __init__(self, method="hybrid", n_levels=None, alpha=0.05, fwhm=None,
                 two_sided=False, cache_dir=None):
        self.method = method
        self.n_levels = n_levels
        self.alpha = alpha
        self.fwhm = fwhm
        self.two_sided = two_sided
        self.cache_dir = cache_dir

    def fit(self, X=None, y=None, mask=None):
        if X is not None:
            data = check_stack(X, "residuals")
            self.mask_ = check_mask(mask, data.shape[1:])
            self.grf_params_ = grf.estimate_smoothness(data, self.mask_)
        elif self.fwhm is not None:
            if mask is None:
                raise ValueError("fitting from fwhm needs a mask to count voxels")
            self.mask_ = np.asarray(mask.included if hasattr(mask, "included") else mask, bool)
            self.grf_params_ = grf.GrfParams(int(self.mask_.sum()), self.fwhm)
        else:
            raise ValueError("pass a residual stack or set fwhm")
        return self

    def _levels(self):
        if self.n_levels is not None:
            return int(self.n_levels)
        return 100 if self.method == "baseline" else 500

    def _enhance(self, X):
        _check_fitted(self, "grf_params_")
        kw = {"n_levels": self._levels(), "cache_dir": self.cache_dir}
        if self.two_sided:
            em = infer.two_sided_enhance(X, self.mask_, self.grf_params_, self.method, **kw)
        else:
            em = infer.PIPELINES[self.method](X, self.mask_, self.grf_params_, **kw)
        self.enhanced_ = em
        return em

    def transform(self, X):
        return self._enhance(X).signed_z

    def predict(self, X):
        return self._enhance(X).significant(self.alpha)

    def fit_transform(self, X, y=None, mask=None, zmap=None):
        self.fit(X, mask=mask)
        if zmap is None:
            zmap = sim.one_sample_t_to_z(X, self.mask_)
        return self.transform(zmap)


class SignFlipTFCE(BaseEstimator):
    """Sign-flip permutation FWER for TFCE-type scores of a one-sample design.

    Attributes
    ----------
    zmap_ : observed one-sample Z map
    scores_ : observed enhanced scores
    null_ : NullMaxDistribution
    p_values_ : FWER-corrected p map
    """

    def __init__(self, enhancer="etfce", B=200, seed=0, alpha=0.05, n_jobs=1):
        self.enhancer = enhancer
        self.B = B
        self.seed = seed
        self.alpha = alpha
        self.n_jobs = n_jobs

    def fit(self, X, y=None, mask=None):
        data = check_stack(X)
        self.mask_ = check_mask(mask, data.shape[1:])
        self.zmap_ = sim.one_sample_t_to_z(data, self.mask_).data
        self.scores_ = perm.enhance_scores(self.zmap_, self.mask_, self.enhancer)
        self.null_ = perm.sign_flip_null(data, self.mask_, self.enhancer, self.B, self.seed,
                                         n_jobs=self.n_jobs)
        p = perm.perm_fwer_p(self.scores_, self.null_)
        p[~self.mask_] = 1.0
        self.p_values_ = p
        return self

    def predict(self, X=None):
        _check_fitted(self, "p_values_")
        return self.mask_ & (self.p_values_ <= self.alpha)
