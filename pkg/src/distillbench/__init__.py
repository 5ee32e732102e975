"""distillbench: dataset distillation with privacy, robustness, and fairness audits."""

__version__ = "0.1.0"
