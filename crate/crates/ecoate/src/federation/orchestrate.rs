//! Single-process driver for the full two-round exchange.
//!
//! Every payload passes through the supplied [`Channel`] and the *returned*
//! (relayed) value is what downstream computation consumes — the target
//! included. A transport that corrupts or rounds a payload therefore shows
//! up as a different result, not as a silently ignored defect.

use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::estimators::EstimateReport;
use crate::expr::BasisVector;

use super::messages::Message;
use super::protocol::{site_round2, source_round1, target_estimate_and_broadcast, target_fuse, ProtocolConfig};
use super::transport::Channel;

/// One participating source: its private records and (optionally) the
/// outcome-tilt basis it declares.
#[derive(Clone, Copy)]
pub struct SourceInput<'a> {
    pub data: &'a SiteDataset,
    pub xi: Option<&'a BasisVector>,
}

/// Run the whole exchange over `channel` and return the fused report.
///
/// The report's `messages` diagnostic counts relayed payloads: one
/// round-1 summary per source, one broadcast, and one round-2 summary per
/// participating site (target included).
pub fn orchestrate<C: Channel>(
    channel: &mut C,
    target: &SiteDataset,
    sources: &[SourceInput<'_>],
    cfg: &ProtocolConfig,
) -> Result<EstimateReport> {
    // Round 1 uplink.
    let mut round1 = Vec::with_capacity(sources.len());
    for src in sources {
        let r1 = source_round1(src.data, src.xi)?;
        match channel.relay(Message::Round1(r1))? {
            Message::Round1(r1) => round1.push(r1),
            other => return Err(wrong_kind("round-1 summary", &other)),
        }
    }

    // Target fits and broadcasts.
    let pkg = target_estimate_and_broadcast(target, &round1, cfg)?;
    let pkg = match channel.relay(Message::Broadcast(pkg))? {
        Message::Broadcast(p) => p,
        other => return Err(wrong_kind("broadcast package", &other)),
    };

    // Round 2 uplink: target plus every source still in the package.
    let mut round2 = Vec::with_capacity(pkg.k() + 1);
    let r2 = site_round2(target, &pkg)?;
    match channel.relay(Message::Round2(r2))? {
        Message::Round2(r2) => round2.push(r2),
        other => return Err(wrong_kind("round-2 summary", &other)),
    }
    for src in sources {
        if pkg.slot_of(src.data.site).is_none() {
            continue; // excluded during the target-side fits
        }
        let r2 = site_round2(src.data, &pkg)?;
        match channel.relay(Message::Round2(r2))? {
            Message::Round2(r2) => round2.push(r2),
            other => return Err(wrong_kind("round-2 summary", &other)),
        }
    }

    let mut report = target_fuse(&pkg, &round2, cfg)?;
    report.diagnostics.messages = channel.transcript().len();
    Ok(report)
}

fn wrong_kind(expected: &str, got: &Message) -> Error {
    Error::Protocol(format!(
        "relay returned a {} message where a {expected} was sent",
        match got {
            Message::Round1(_) => "round-1",
            Message::Broadcast(_) => "broadcast",
            Message::Round2(_) => "round-2",
        }
    ))
}
