//! Staged trainer, parameter averaging, metrics, visualizers.
