"""Deep regression under covariate shift with repeated measurements."""

__version__ = "0.1.0"
