//! Placeholder: benchmark fixtures live in benches/.
