//! Experiment configs and runner (in progress).
