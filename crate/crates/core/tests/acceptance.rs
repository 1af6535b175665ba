//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! verdict. Lines go straight to stderr so they show without
//! `--nocapture`.

mod common;

use std::io::Write;
use std::time::Instant;

use common::Check;

fn line(text: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

/// Runs `parts` in order; the criterion passes when all of them do and the
/// whole run stays under `budget_s` seconds.
fn criterion(n: usize, title: &str, budget_s: Option<f64>, parts: &[fn() -> Check]) -> bool {
    let start = Instant::now();
    let mut details = Vec::new();
    let mut failure = None;
    for part in parts {
        match part() {
            Ok(d) => details.push(d),
            Err(why) => {
                failure = Some(why);
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if failure.is_none() {
        if let Some(b) = budget_s {
            if secs > b {
                failure = Some(format!("took {secs:.1}s, budget {b}s"));
            }
        }
    }
    match failure {
        None => {
            line(&format!("acceptance {n:>2} PASS {title} ({secs:.1}s): {}", details.join("; ")));
            true
        }
        Some(why) => {
            line(&format!("acceptance {n:>2} FAIL {title} ({secs:.1}s): {why}"));
            false
        }
    }
}

#[test]
fn acceptance_suite() {
    let results = [
        criterion(1, "schedule goldens", Some(1.0), &[common::schedule_goldens]),
        criterion(2, "lossless round trip", Some(60.0), &[|| common::fuzz_round_trips(1000)]),
        criterion(3, "uniform-rate anchor", None, &[common::uniform_anchor]),
        criterion(4, "savings arithmetic", None, &[common::savings_anchors]),
        criterion(5, "desk-scale rate trend", Some(900.0), &[common::desk_bench]),
        criterion(6, "causality fuzz", None, &[|| common::mim_causality(500), || common::var_causality(500)]),
        criterion(7, "gradient checks", None, &[common::mim_gradients, common::var_gradients, common::flow_gradients]),
        criterion(
            8,
            "flow identities",
            Some(300.0),
            &[common::path_identities, common::guidance_identities, common::euler_order, common::toy_decoder_modes],
        ),
        criterion(9, "hybrid monotonicity", None, &[common::hybrid_monotone]),
        criterion(10, "bitstream stability", None, &[common::golden_fixtures]),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    line(&format!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len()));
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
