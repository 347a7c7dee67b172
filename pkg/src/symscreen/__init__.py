"""symscreen: depressive-symptom extraction, evaluation, and screening
bench for pediatric clinical notes."""

__version__ = "0.1.0"
