"""Distribution-shift diagnostics built from a fixed predictor and a score field.

The package couples the input sensitivity of a deployed model with a score
(gradient of log density) of its training distribution.  The central quantity
is the residual ``lap(f)(x) + s(x)^T grad(f)(x)``, which has mean zero under
the training distribution and responds selectively to shifts that matter for
the predictor.  Submodules:

- ``numkit``       seeded counter-based RNG and small statistics helpers
- ``nets``         minimal dense networks with manual backprop (internal)
- ``predictors``   feed-forward predictors with exact input derivatives
- ``score_models`` exact and learned score fields
- ``stein_core``   operator evaluation, batched adjusted residuals
- ``shift_lab``    shift families and numerical identity checks
- ``detector``     calibrated thresholding and ranking metrics
- ``cli``          command-line experiment runner
"""

__version__ = "0.1.0"
