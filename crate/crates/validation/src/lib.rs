//! Acceptance checks for `slr-core` live in `tests/acceptance.rs`; run them
//! with `cargo test -p slr-validation`.
