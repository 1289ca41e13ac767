//! Placeholder; presets land here.
