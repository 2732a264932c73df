//! Compartmental Hodgkin-Huxley cable simulation with seven time-stepping
//! schemes, Von Neumann stability tools and spike waveform analysis.

pub mod analysis;
pub mod channels;
pub mod integrators;
pub mod morphology;
pub mod stability;

pub use channels::{ChannelSet, ChannelSpec, GateKinetics, GateRule};
pub use integrators::{run_simulation, Model, SchemeKind, SimOptions, SimState, SimTrace};
pub use morphology::{build_tree, Compartment, MorphologyTree};

// The guide's code listings run as doctests, one module per chapter so a
// failure names its chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/config.md")]
    mod config {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/stability.md")]
    mod stability {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
}
