//! Executable efficiency and frequency analyses: a closed-form KV-memory
//! model, a per-scale latency profiler, and radial Fourier spectra of
//! per-scale contributions.

mod latency;
mod memory;
mod spectrum;

pub use latency::{profile_latency, LatencyReport};
pub use memory::{kv_memory_model, MemoryReport};
pub use spectrum::{
    radial_spectrum, radial_spectrum_plane, scale_contribution, spectral_energy, SpectrumReport,
};
