//! Host crate for the `acceptance` test target, which prints one pass/fail
//! line per acceptance criterion. Run it with `cargo test -p bine-validation`.
