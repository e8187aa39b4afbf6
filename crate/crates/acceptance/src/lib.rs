//! Acceptance checks for the extraction pipeline; see `tests/acceptance.rs`.
