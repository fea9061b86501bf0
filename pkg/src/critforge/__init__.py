"""Desk-scale BWR criticality surrogate: LPRM interpolation, a three-branch CNN
regressor on a small numpy autodiff core, synthetic plant data and evaluation."""

__version__ = "0.1.0"
