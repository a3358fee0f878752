//! Summary-exchange protocol: message schemas, transports, per-site
//! computations, fusion, and both single-process and multi-process drivers.

pub mod messages;
pub mod node;
pub mod orchestrate;
pub mod protocol;
pub mod transport;

pub use messages::{
    BroadcastPackage, Manifest, Message, Round1Summary, Round2Diagnostics, Round2Summary,
    SourceModels, TargetExtras, SCHEMA,
};
pub use node::{poll_manifest, run_source_node, run_target_node};
pub use orchestrate::{orchestrate, SourceInput};
pub use protocol::{
    assemble_report, fuse_summaries, order_by_slot, round2_from_context, site_round2,
    source_round1, target_estimate_and_broadcast, target_fuse, target_side_fit, FailurePolicy,
    FuseWeighting, FusionOutput, ProtocolConfig, TargetSideFit,
};
pub use transport::{
    init_run_dir, message_path, poll_message, read_manifest, read_message, write_message, Channel,
    FileChannel, InMemoryChannel, TranscriptEntry,
};
