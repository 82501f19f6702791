//! Statistical invariants of the session generator: snr monotone in gain,
//! and the four classes separable on coarse traffic statistics.

use bilcnet::record::{read_session_from, Direction, GainLevel, TrafficLabel};
use bilcnet::synth::generate_session;

#[test]
fn mean_snr_strictly_increasing_in_gain() {
    for label in TrafficLabel::ALL {
        let mut prev = f64::NEG_INFINITY;
        for gain in GainLevel::all() {
            let content = generate_session(label, gain, 500, 90);
            let (_, recs, _) = read_session_from(content.as_bytes()).unwrap();
            let snrs: Vec<f64> = recs.iter().filter_map(|r| r.snr).collect();
            assert!(
                snrs.len() >= 1000,
                "{label} at {gain}: only {} snr records",
                snrs.len()
            );
            let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
            assert!(
                mean > prev,
                "{label}: mean snr {mean:.2} at {gain} not above previous {prev:.2}"
            );
            prev = mean;
        }
    }
}

/// Per-session summary used for the separability check.
#[derive(Debug, Clone, Copy)]
struct TrafficStats {
    ul_tb_sum: f64,
    dl_tb_sum: f64,
    ul_rate: f64,
    dl_rate: f64,
}

fn session_stats(label: TrafficLabel, seed: u64) -> TrafficStats {
    let frames = 200u64;
    let gain = GainLevel::new(74).unwrap();
    let content = generate_session(label, gain, frames, seed);
    let (_, recs, _) = read_session_from(content.as_bytes()).unwrap();
    let mut ul_tb = 0u64;
    let mut dl_tb = 0u64;
    let mut ul_subframes = std::collections::HashSet::new();
    let mut dl_subframes = std::collections::HashSet::new();
    for r in &recs {
        let Some(tb) = r.tb_len else { continue };
        let key = r.frame * 10 + r.subframe as u64;
        match r.dir {
            Direction::Ul => {
                ul_tb += tb;
                ul_subframes.insert(key);
            }
            Direction::Dl => {
                dl_tb += tb;
                dl_subframes.insert(key);
            }
        }
    }
    let total = (frames * 10) as f64;
    TrafficStats {
        ul_tb_sum: ul_tb as f64,
        dl_tb_sum: dl_tb as f64,
        ul_rate: ul_subframes.len() as f64 / total,
        dl_rate: dl_subframes.len() as f64 / total,
    }
}

#[test]
fn classes_separable_at_three_sigma() {
    const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
    let mut means = Vec::new();
    let mut sds = Vec::new();
    for label in TrafficLabel::ALL {
        let stats: Vec<TrafficStats> = SEEDS.iter().map(|&s| session_stats(label, s)).collect();
        let coords: Vec<[f64; 4]> = stats
            .iter()
            .map(|s| [s.ul_tb_sum, s.dl_tb_sum, s.ul_rate, s.dl_rate])
            .collect();
        let mut mean = [0.0f64; 4];
        let mut sd = [0.0f64; 4];
        for k in 0..4 {
            let vals: Vec<f64> = coords.iter().map(|c| c[k]).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var =
                vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
            mean[k] = m;
            sd[k] = var.sqrt();
        }
        means.push(mean);
        sds.push(sd);
    }
    for i in 0..4 {
        for j in i + 1..4 {
            let separated = (0..4).any(|k| {
                let gap = (means[i][k] - means[j][k]).abs();
                gap >= 3.0 * sds[i][k].max(sds[j][k])
            });
            assert!(
                separated,
                "{} vs {}: no coordinate separates at 3 sigma\nmeans {:?} / {:?}\nsds {:?} / {:?}",
                TrafficLabel::ALL[i],
                TrafficLabel::ALL[j],
                means[i],
                means[j],
                sds[i],
                sds[j]
            );
        }
    }
}
