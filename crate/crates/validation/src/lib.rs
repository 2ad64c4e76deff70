//! Holds the `acceptance` test target; run it with
//! `cargo test -p mplnfa-validation --test acceptance`.
