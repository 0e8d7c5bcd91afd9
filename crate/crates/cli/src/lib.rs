//! Manifest-driven experiment runner for `cooldown-lab`.

pub mod artifacts;
pub mod export;
pub mod manifest;
pub mod pipeline;
pub mod tables;
