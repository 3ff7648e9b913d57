//! Synthetic multi-domain benchmark and the leave-one-domain-out protocol.

mod domains;
mod protocol;

pub use domains::{
    generate_domains, leave_one_out_splits, DomainSpec, DomainTransform, MultiDomainDataset, Split,
    TransformKind,
};
pub use protocol::{
    run_protocol, select_trial, BenchCell, BenchResult, CellAudit, HParams, ModelSpec, ProtocolConfig,
    SearchSpace, Selection, TrialOutcome,
};
