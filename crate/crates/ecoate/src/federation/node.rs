//! Long-running node loops for a file-coordinated multi-process run.
//!
//! One process per site, all pointed at a shared run directory. The target
//! writes the manifest, waits for round-1 files, broadcasts, waits for
//! round-2 files, and fuses; each source waits for the manifest, uploads its
//! round-1 summary, waits for the broadcast, and uploads its round-2
//! summary. Coordination is purely through file existence — no sockets.

use std::path::Path;
use std::thread::sleep;
use std::time::{Duration, Instant};

use crate::data::{SiteDataset, SiteId};
use crate::error::{Error, Result};
use crate::estimators::{EstimateReport, ExcludedSource};
use crate::expr::BasisVector;

use super::messages::{Manifest, Message};
use super::protocol::{
    site_round2, source_round1, target_estimate_and_broadcast, target_fuse, FailurePolicy,
    ProtocolConfig,
};
use super::transport::{
    init_run_dir, message_path, poll_message, read_manifest, write_message,
};

const POLL_INTERVAL: Duration = Duration::from_millis(25);

/// Wait for the manifest to appear, then read it.
pub fn poll_manifest(dir: &Path, timeout: Duration) -> Result<Manifest> {
    let start = Instant::now();
    loop {
        if dir.join("manifest.json").exists() {
            return read_manifest(dir);
        }
        if start.elapsed() >= timeout {
            return Err(Error::Timeout {
                seconds: timeout.as_secs(),
                what: format!("manifest in {}", dir.display()),
            });
        }
        sleep(POLL_INTERVAL);
    }
}

/// Run one source site against a shared run directory.
///
/// Returns once the site's part is done: after uploading its round-2
/// summary, or immediately after the broadcast if the target excluded it.
pub fn run_source_node(
    dir: &Path,
    data: &SiteDataset,
    xi: Option<&BasisVector>,
    timeout: Duration,
) -> Result<()> {
    let manifest = poll_manifest(dir, timeout)?;
    if !manifest.source_sites.contains(&data.site) {
        return Err(Error::Protocol(format!(
            "site {} is not listed in the run manifest",
            data.site
        )));
    }

    let r1 = source_round1(data, xi)?;
    write_message(&message_path(dir, "round1", data.site), &Message::Round1(r1))?;

    let broadcast_path = message_path(dir, "broadcast", manifest.target_site);
    let pkg = match poll_message(&broadcast_path, timeout)? {
        Message::Broadcast(pkg) => pkg,
        other => {
            return Err(Error::Protocol(format!(
                "expected a broadcast package at {}, found a {} message",
                broadcast_path.display(),
                other.round()
            )))
        }
    };

    if pkg.slot_of(data.site).is_none() {
        // The target dropped this site during its fits; nothing to upload.
        return Ok(());
    }
    let r2 = site_round2(data, &pkg)?;
    write_message(&message_path(dir, "round2", data.site), &Message::Round2(r2))?;
    Ok(())
}

/// Run the target site against a shared run directory.
///
/// Writes the manifest, collects round-1 summaries from `expect_sources`
/// (a source that never uploads within `timeout` is excluded or aborts the
/// run, per the configured policy), broadcasts, uploads its own round-2
/// summary, collects round-2 summaries from every site kept in the
/// broadcast, and fuses. A kept site that goes silent in round 2 is a hard
/// error: it already holds the broadcast, and the fusion cannot be rebuilt
/// without a fresh exchange.
pub fn run_target_node(
    dir: &Path,
    data: &SiteDataset,
    expect_sources: &[SiteId],
    cfg: &ProtocolConfig,
    timeout: Duration,
) -> Result<EstimateReport> {
    init_run_dir(dir, data.site, expect_sources)?;

    let mut round1 = Vec::new();
    let mut timed_out = Vec::new();
    for &site in expect_sources {
        let path = message_path(dir, "round1", site);
        match poll_message(&path, timeout) {
            Ok(Message::Round1(r1)) => {
                if r1.site != site {
                    return Err(Error::Protocol(format!(
                        "round-1 file for site {site} carries site id {}",
                        r1.site
                    )));
                }
                round1.push(r1);
            }
            Ok(other) => {
                return Err(Error::Protocol(format!(
                    "expected a round-1 summary at {}, found a {} message",
                    path.display(),
                    other.round()
                )))
            }
            Err(e @ Error::Timeout { .. }) => match cfg.on_source_failure {
                FailurePolicy::Exclude => timed_out.push(ExcludedSource {
                    site,
                    reason: e.to_string(),
                }),
                FailurePolicy::Abort => return Err(e),
            },
            Err(e) => return Err(e),
        }
    }

    let mut pkg = target_estimate_and_broadcast(data, &round1, cfg)?;
    pkg.excluded.extend(timed_out);
    write_message(
        &message_path(dir, "broadcast", data.site),
        &Message::Broadcast(pkg.clone()),
    )?;

    let mut round2 = Vec::with_capacity(pkg.k() + 1);
    let r2 = site_round2(data, &pkg)?;
    write_message(&message_path(dir, "round2", data.site), &Message::Round2(r2.clone()))?;
    round2.push(r2);

    for src in &pkg.sources {
        let path = message_path(dir, "round2", src.id);
        match poll_message(&path, timeout)? {
            Message::Round2(r2) => {
                if r2.site != src.id {
                    return Err(Error::Protocol(format!(
                        "round-2 file for site {} carries site id {}",
                        src.id, r2.site
                    )));
                }
                round2.push(r2);
            }
            other => {
                return Err(Error::Protocol(format!(
                    "expected a round-2 summary at {}, found a {} message",
                    path.display(),
                    other.round()
                )))
            }
        }
    }

    let mut report = target_fuse(&pkg, &round2, cfg)?;
    report.diagnostics.messages = round1.len() + 1 + round2.len();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::BasisVector;
    use crate::federation::orchestrate::{orchestrate, SourceInput};
    use crate::federation::transport::InMemoryChannel;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Beta, Gamma};

    fn synth_site(site: u32, n: usize, eps: f64, seed: u64) -> SiteDataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let xb = Beta::new(4.0, 5.0).unwrap();
        let mut d = SiteDataset::new(site, 1);
        for _ in 0..n {
            let x = 1.0 + xb.sample(&mut rng);
            let a = f64::from(rng.gen_bool(0.5));
            let shape = x * (1.0 + a) - eps * a;
            let y = Gamma::new(shape, 1.0 / (2.0 * x)).unwrap().sample(&mut rng);
            d.push(&[x], a, y);
        }
        d
    }

    #[test]
    fn concurrent_nodes_match_single_process_run() {
        let target = synth_site(0, 180, 0.0, 41);
        let s1 = synth_site(1, 180, 0.5, 42);
        let s2 = synth_site(2, 180, 0.2, 43);
        let xi = BasisVector::from_strings(&["a*log(y)".to_string()], 1).unwrap();
        let cfg = ProtocolConfig::default();

        let inputs = [
            SourceInput { data: &s1, xi: Some(&xi) },
            SourceInput { data: &s2, xi: Some(&xi) },
        ];
        let mut ch = InMemoryChannel::new();
        let single = orchestrate(&mut ch, &target, &inputs, &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let timeout = Duration::from_secs(30);
        let multi = std::thread::scope(|scope| {
            let d1 = dir.path().to_path_buf();
            let d2 = dir.path().to_path_buf();
            let (s1, s2, xi1, xi2) = (&s1, &s2, &xi, &xi);
            let h1 = scope.spawn(move || run_source_node(&d1, s1, Some(xi1), timeout));
            let h2 = scope.spawn(move || run_source_node(&d2, s2, Some(xi2), timeout));
            let report = run_target_node(dir.path(), &target, &[1, 2], &cfg, timeout);
            h1.join().unwrap().unwrap();
            h2.join().unwrap().unwrap();
            report
        })
        .unwrap();

        assert_eq!(
            serde_json::to_string(&single).unwrap(),
            serde_json::to_string(&multi).unwrap(),
            "file-coordinated run differs from the single-process run"
        );
    }

    #[test]
    fn silent_source_is_excluded_after_timeout() {
        let target = synth_site(0, 150, 0.0, 51);
        let s1 = synth_site(1, 150, 0.4, 52);
        let xi = BasisVector::from_strings(&["a*log(y)".to_string()], 1).unwrap();
        let cfg = ProtocolConfig::default();

        let dir = tempfile::tempdir().unwrap();
        let report = std::thread::scope(|scope| {
            let d1 = dir.path().to_path_buf();
            let (s1, xi1) = (&s1, &xi);
            let h1 = scope.spawn(move || {
                run_source_node(&d1, s1, Some(xi1), Duration::from_secs(30))
            });
            // Site 2 never shows up; a short wait excludes it.
            let report = run_target_node(
                dir.path(),
                &target,
                &[1, 2],
                &cfg,
                Duration::from_millis(400),
            );
            h1.join().unwrap().unwrap();
            report
        })
        .unwrap();

        assert_eq!(report.sources_used, vec![1]);
        assert_eq!(report.excluded.len(), 1);
        assert_eq!(report.excluded[0].site, 2);
        assert!(report.excluded[0].reason.contains("timed out"));
    }
}
