"""CoSwin: shifted-window attention fused with a gamma-weighted convolution branch."""

__version__ = "0.1.0"


def __getattr__(name):
    # sklearn is only needed for the estimator; keep `import coswin` light.
    if name == "CoSwinClassifier":
        from .estimator import CoSwinClassifier
        return CoSwinClassifier
    raise AttributeError(f"module 'coswin' has no attribute {name!r}")


__all__ = ["CoSwinClassifier", "__version__"]
