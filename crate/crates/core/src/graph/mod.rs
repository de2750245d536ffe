//! Layer graph, parameter storage and execution backends.

mod exec;
mod ir;
mod params;

pub use exec::{
    execute, update_running_stats, Backend, BnMode, BnObservation, Eager, Taped, BN_EPS,
    BN_MOMENTUM,
};
pub use ir::{
    GraphBuilder, LayerKind, LayerSpec, ModelGraph, NodeId, Section, SlotEntry, SlotInit,
};
pub use params::{ParamStore, StorageDtype};
