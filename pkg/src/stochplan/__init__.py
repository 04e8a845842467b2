"""Motion planning under uncertainty: Gaussian VI and covariance steering planners."""
