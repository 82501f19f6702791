//! Class- and gain-conditioned synthetic session generator.
//!
//! Each (label, gain) pair yields one deterministic session: a two-state
//! burst process modulates per-subframe Bernoulli activity, data channels
//! carry log-normal transport blocks, and link quality (snr, mcs, bler,
//! epre) is an affine function of the access-network gain plus noise.

use crate::num::splitmix64;
use crate::record::{
    serialize_header, serialize_record, ChannelKind, GainLevel, PhysicalChannelRecord,
    SessionHeader, TrafficLabel, SCHEMA_VERSION,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Behavioral parameters of one traffic class.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficProfile {
    pub label: TrafficLabel,
    /// Probability a subframe carries uplink data (before burst modulation).
    pub ul_activity: f64,
    pub dl_activity: f64,
    pub tb_len_log_mean_ul: f64,
    pub tb_len_log_mean_dl: f64,
    pub tb_len_log_sd_ul: f64,
    pub tb_len_log_sd_dl: f64,
    pub prb_mean_ul: f64,
    pub prb_mean_dl: f64,
    /// Burst persistence in [0, 1]; 0 disables the burst process.
    pub burstiness: f64,
    /// Fixed packet cadence in milliseconds (voice codec behavior).
    pub periodicity_ms: Option<u32>,
}

impl TrafficProfile {
    pub fn for_label(label: TrafficLabel) -> Self {
        let ln = |x: f64| x.ln();
        match label {
            // Sparse, periodic, symmetric, tiny packets.
            TrafficLabel::Call => TrafficProfile {
                label,
                ul_activity: 0.02,
                dl_activity: 0.02,
                tb_len_log_mean_ul: ln(160.0),
                tb_len_log_mean_dl: ln(160.0),
                tb_len_log_sd_ul: 0.25,
                tb_len_log_sd_dl: 0.25,
                prb_mean_ul: 2.0,
                prb_mean_dl: 2.0,
                burstiness: 0.0,
                periodicity_ms: Some(20),
            },
            // Moderate, bursty, roughly symmetric video.
            TrafficLabel::Meeting => TrafficProfile {
                label,
                ul_activity: 0.45,
                dl_activity: 0.55,
                tb_len_log_mean_ul: ln(3000.0),
                tb_len_log_mean_dl: ln(5000.0),
                tb_len_log_sd_ul: 0.7,
                tb_len_log_sd_dl: 0.7,
                prb_mean_ul: 12.0,
                prb_mean_dl: 16.0,
                burstiness: 0.8,
                periodicity_ms: None,
            },
            // Saturated uplink, ack-sized downlink.
            TrafficLabel::Upload => TrafficProfile {
                label,
                ul_activity: 0.92,
                dl_activity: 0.10,
                tb_len_log_mean_ul: ln(60_000.0),
                tb_len_log_mean_dl: ln(120.0),
                tb_len_log_sd_ul: 0.3,
                tb_len_log_sd_dl: 0.4,
                prb_mean_ul: 48.0,
                prb_mean_dl: 2.0,
                burstiness: 0.15,
                periodicity_ms: None,
            },
            // Mirror of Upload.
            TrafficLabel::Download => TrafficProfile {
                label,
                ul_activity: 0.10,
                dl_activity: 0.92,
                tb_len_log_mean_ul: ln(120.0),
                tb_len_log_mean_dl: ln(60_000.0),
                tb_len_log_sd_ul: 0.4,
                tb_len_log_sd_dl: 0.3,
                prb_mean_ul: 2.0,
                prb_mean_dl: 48.0,
                burstiness: 0.15,
                periodicity_ms: None,
            },
        }
    }
}

/// Link-quality parameters as a function of gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelQualityModel {
    pub gain: GainLevel,
    pub snr_mean: f64,
    pub snr_sd: f64,
    pub bler_base: f64,
    pub epre_mean: f64,
}

impl ChannelQualityModel {
    pub fn for_gain(gain: GainLevel) -> Self {
        let g = (gain.db() - GainLevel::MIN_DB) as f64;
        ChannelQualityModel {
            gain,
            snr_mean: 0.9 * g + 3.0,
            snr_sd: 2.0,
            bler_base: 0.30 - 0.0125 * g,
            epre_mean: -96.0 + 0.8 * g,
        }
    }
}

/// mcs index → modulation order (QPSK / 16QAM / 64QAM / 256QAM).
pub fn mod_order_for_mcs(mcs: u8) -> u8 {
    match mcs {
        0..=9 => 2,
        10..=16 => 4,
        17..=27 => 6,
        _ => 8,
    }
}

/// Derive the per-session stream seed from the dataset root seed.
pub fn session_seed(root_seed: u64, label: TrafficLabel, gain: GainLevel) -> u64 {
    root_seed ^ splitmix64(((label.code() as u64) << 32) | gain.index() as u64)
}

struct SessionSim {
    rng: ChaCha8Rng,
    profile: TrafficProfile,
    quality: ChannelQualityModel,
    snr_dist: Normal<f64>,
    epre_dist: Normal<f64>,
    mcs_noise: Normal<f64>,
    tb_ul: LogNormal<f64>,
    tb_dl: LogNormal<f64>,
    burst_on_ul: bool,
    burst_on_dl: bool,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl SessionSim {
    fn new(label: TrafficLabel, gain: GainLevel, seed: u64) -> Self {
        let profile = TrafficProfile::for_label(label);
        let quality = ChannelQualityModel::for_gain(gain);
        SessionSim {
            rng: ChaCha8Rng::seed_from_u64(seed),
            snr_dist: Normal::new(quality.snr_mean, quality.snr_sd).unwrap(),
            epre_dist: Normal::new(quality.epre_mean, 1.5).unwrap(),
            mcs_noise: Normal::new(0.0, 1.2).unwrap(),
            tb_ul: LogNormal::new(profile.tb_len_log_mean_ul, profile.tb_len_log_sd_ul).unwrap(),
            tb_dl: LogNormal::new(profile.tb_len_log_mean_dl, profile.tb_len_log_sd_dl).unwrap(),
            profile,
            quality,
            burst_on_ul: true,
            burst_on_dl: true,
        }
    }

    /// Advance one direction's burst state and return the effective activity.
    fn effective_activity(&mut self, uplink: bool) -> f64 {
        let b = self.profile.burstiness;
        let base = if uplink {
            self.profile.ul_activity
        } else {
            self.profile.dl_activity
        };
        if b <= 0.0 {
            return base;
        }
        let stay = 0.5 + 0.45 * b.min(1.0);
        let state = if uplink {
            &mut self.burst_on_ul
        } else {
            &mut self.burst_on_dl
        };
        if self.rng.gen::<f64>() >= stay {
            *state = !*state;
        }
        let mult = if *state { 1.3 } else { 0.6 };
        (base * mult).min(1.0)
    }

    fn link_sample(&mut self) -> (f64, f64) {
        let snr = round2(self.snr_dist.sample(&mut self.rng));
        let epre = round2(self.epre_dist.sample(&mut self.rng));
        (snr, epre)
    }

    fn data_record(
        &mut self,
        frame: u64,
        subframe: u8,
        slot: u8,
        chan: ChannelKind,
    ) -> PhysicalChannelRecord {
        let uplink = chan == ChannelKind::Pusch;
        let (snr, epre) = self.link_sample();
        let mcs = (1.2 * snr + self.mcs_noise.sample(&mut self.rng))
            .round()
            .clamp(0.0, 28.0) as u8;
        let tb_dist = if uplink { &self.tb_ul } else { &self.tb_dl };
        let tb_len = tb_dist.sample(&mut self.rng).round().clamp(16.0, 10_000_000.0) as u64;
        let prb_mean = if uplink {
            self.profile.prb_mean_ul
        } else {
            self.profile.prb_mean_dl
        };
        let prb_noise: f64 = Normal::new(prb_mean, 0.15 * prb_mean + 0.5)
            .unwrap()
            .sample(&mut self.rng);
        let prb = prb_noise.round().clamp(1.0, 273.0) as u32;
        let harq_id = self.rng.gen_range(0..16u8);
        let bler = (self.quality.bler_base * (-0.2 * (snr - self.quality.snr_mean)).exp())
            .clamp(1e-3, 0.5);
        let crc_ok = self.rng.gen::<f64>() >= bler;

        let mut rec = PhysicalChannelRecord::bare(frame, subframe, slot, chan);
        rec.mcs = Some(mcs);
        rec.mod_order = Some(mod_order_for_mcs(mcs));
        rec.harq_id = Some(harq_id);
        rec.crc_ok = Some(crc_ok);
        rec.tb_len = Some(tb_len);
        rec.prb = Some(prb);
        rec.symb_start = Some(0);
        rec.symb_len = Some(if tb_len >= 1000 { 14 } else { 4 });
        rec.snr = Some(snr);
        rec.epre = Some(epre);
        rec
    }

    fn pdcch_record(&mut self, frame: u64, subframe: u8) -> PhysicalChannelRecord {
        let (snr, epre) = self.link_sample();
        // Worse link, more aggregation.
        let agg: u8 = if snr < 6.0 {
            16
        } else if snr < 10.0 {
            8
        } else if snr < 14.0 {
            4
        } else if snr < 18.0 {
            2
        } else {
            1
        };
        let cce = self.rng.gen_range(0..81u32);
        let mut rec = PhysicalChannelRecord::bare(frame, subframe, 0, ChannelKind::Pdcch);
        rec.snr = Some(snr);
        rec.epre = Some(epre);
        rec.cce_index = Some(cce);
        rec.aggregation_level = Some(agg);
        rec.symb_start = Some(0);
        rec.symb_len = Some(if agg >= 8 { 2 } else { 1 });
        rec
    }

    fn pucch_record(&mut self, frame: u64, subframe: u8, slot: u8, format: u8) -> PhysicalChannelRecord {
        let (snr, epre) = self.link_sample();
        let mut rec = PhysicalChannelRecord::bare(frame, subframe, slot, ChannelKind::Pucch);
        rec.pucch_format = Some(format);
        rec.prb = Some(1);
        rec.snr = Some(snr);
        rec.epre = Some(epre);
        if format == 2 {
            rec.symb_start = Some(10);
            rec.symb_len = Some(4);
        } else {
            rec.symb_start = Some(12);
            rec.symb_len = Some(2);
        }
        rec
    }
}

/// Deterministically generate one session's full file content.
pub fn generate_session(label: TrafficLabel, gain: GainLevel, frames: u64, seed: u64) -> String {
    assert!(frames >= 1, "frames must be positive");
    let mut sim = SessionSim::new(label, gain, seed);
    let mut out = String::new();
    out.push_str(&serialize_header(&SessionHeader {
        label,
        gain,
        seed,
        schema_version: SCHEMA_VERSION,
    }));
    out.push('\n');

    let push = |rec: &PhysicalChannelRecord, out: &mut String| {
        out.push_str(&serialize_record(rec));
        out.push('\n');
    };

    for frame in 0..frames {
        for subframe in 0..10u8 {
            let abs_sf = frame * 10 + subframe as u64;
            let mut subframe_recs: Vec<PhysicalChannelRecord> = Vec::new();

            if frame % 2 == 0 && subframe == 0 {
                let (snr, epre) = sim.link_sample();
                let mut pbch = PhysicalChannelRecord::bare(frame, 0, 0, ChannelKind::Pbch);
                pbch.snr = Some(snr);
                pbch.epre = Some(epre);
                pbch.symb_start = Some(1);
                pbch.symb_len = Some(4);
                subframe_recs.push(pbch);
            }
            if frame == 0 && subframe == 1 {
                let mut prach = PhysicalChannelRecord::bare(0, 1, 0, ChannelKind::Prach);
                prach.prb = Some(6);
                prach.symb_start = Some(0);
                prach.symb_len = Some(14);
                subframe_recs.push(prach);
            }

            let p_ul = sim.effective_activity(true);
            let p_dl = sim.effective_activity(false);
            let forced_ul = sim
                .profile
                .periodicity_ms
                .map_or(false, |p| abs_sf % p as u64 == 0);
            let forced_dl = sim
                .profile
                .periodicity_ms
                .map_or(false, |p| abs_sf % p as u64 == p as u64 / 2);

            let ul0 = sim.rng.gen::<f64>() < p_ul || forced_ul;
            let dl0 = sim.rng.gen::<f64>() < p_dl || forced_dl;
            let ul1 = sim.rng.gen::<f64>() < p_ul * 0.5;
            let dl1 = sim.rng.gen::<f64>() < p_dl * 0.5;

            let mut data: Vec<PhysicalChannelRecord> = Vec::new();
            if dl0 {
                data.push(sim.data_record(frame, subframe, 0, ChannelKind::Pdsch));
            }
            if ul0 {
                data.push(sim.data_record(frame, subframe, 0, ChannelKind::Pusch));
            }
            if dl1 {
                data.push(sim.data_record(frame, subframe, 1, ChannelKind::Pdsch));
            }
            if ul1 {
                data.push(sim.data_record(frame, subframe, 1, ChannelKind::Pusch));
            }

            // Control precedes the data it schedules.
            if !data.is_empty() {
                subframe_recs.push(sim.pdcch_record(frame, subframe));
            }
            let had_pdsch = data.iter().any(|r| r.chan == ChannelKind::Pdsch);
            subframe_recs.extend(data);

            // Periodic channel-quality report keeps every frame populated.
            if subframe == 0 {
                subframe_recs.push(sim.pucch_record(frame, subframe, 0, 2));
            }
            if had_pdsch {
                subframe_recs.push(sim.pucch_record(frame, subframe, 1, 1));
            }

            for rec in &subframe_recs {
                push(rec, &mut out);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub label: String,
    pub gain_db: u16,
    pub records: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Manifest {
    pub root_seed: u64,
    pub sessions: Vec<ManifestEntry>,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}

/// Generate the full 4×11 grid into `out_dir` and write `manifest.json`.
pub fn generate_dataset(
    out_dir: &Path,
    frames_per_session: u64,
    seed: u64,
) -> Result<Manifest, SynthError> {
    std::fs::create_dir_all(out_dir)?;
    let mut sessions = Vec::with_capacity(44);
    for label in TrafficLabel::ALL {
        for gain in GainLevel::all() {
            let content = generate_session(label, gain, frames_per_session, session_seed(seed, label, gain));
            let file = format!("{}_{}.jsonl", label.as_str(), gain.db());
            std::fs::write(out_dir.join(&file), &content)?;
            let records = content.lines().count() - 1;
            sessions.push(ManifestEntry {
                file,
                label: label.as_str().to_string(),
                gain_db: gain.db(),
                records,
            });
        }
    }
    let manifest = Manifest {
        root_seed: seed,
        sessions,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization is infallible");
    std::fs::write(manifest_path(out_dir), text + "\n")?;
    Ok(manifest)
}
