//! Holds the `acceptance` integration target, which runs every acceptance
//! criterion against the default configuration.
