//! Acceptance checks for the forge workspace live in `tests/acceptance.rs`;
//! run them with `cargo test -p forge-criteria --test acceptance`.
