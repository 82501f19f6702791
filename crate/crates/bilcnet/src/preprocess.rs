//! Frame-structured feature extraction.
//!
//! Records of one radio frame become a 10x61 matrix: one row per subframe,
//! each row a fixed-width feature vector with zero-padding for absent
//! channels, plus frame-level derived descriptors (HARQ error rate, PDSCH
//! spectral efficiency, modulation variability) broadcast to every row.
//! Matrices stream into a [`SampleSet`] which serializes to a compact binary
//! dataset file with a JSON stats sidecar.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;
use crate::record::{
    self, ChannelKind, Direction, GainLevel, PhysicalChannelRecord, SessionHeader, TrafficLabel,
};
use crate::tensor::Tensor;

/// Rows per matrix: the 10 subframes of one 10 ms frame.
pub const FRAME_ROWS: usize = 10;
/// Feature vector width for schema version 1.
pub const FEATURE_DIM: usize = 61;
/// Version of the slot layout below. Bump when slots move.
pub const FEATURE_SCHEMA_VERSION: u32 = 1;
/// Standard deviations below this are clamped before normalization divides.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Default trailing window length (frames) for rolling statistics.
pub const DEFAULT_ROLLING_WINDOW: usize = 10;

const BLCD_MAGIC: &[u8; 4] = b"BLCD";
const BLCD_VERSION: u32 = 1;

// Slot layout, schema version 1. Per-channel common block first, then
// channel-specific extras, then the derived block shared by all rows.
const COMMON_WIDTH: usize = 4;
const PUSCH_EXTRA: usize = 16;
const PDSCH_EXTRA: usize = 24;
const PDCCH_EXTRA: usize = 32;
const PUCCH_EXTRA: usize = 36;
const DERIVED: usize = 40;
const ROLLING: usize = 45;

#[derive(Debug, Error)]
pub enum PreprocessError {
    /// HARQ accounting produced more successes than attempts.
    #[error("harq invariant violated: {succ} successes out of {total} attempts")]
    InvariantViolation { succ: u32, total: u32 },
    #[error("negative input: {0}")]
    NegativeInput(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("bad dataset magic")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    Version(u32),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Session(#[from] record::SessionError),
}

/// Slot names in index order; doubles as the layout manifest persisted in
/// the stats sidecar.
pub fn feature_names() -> [&'static str; FEATURE_DIM] {
    [
        // 0..16: common block, one quadruple per channel
        "pusch.present",
        "pusch.count",
        "pusch.epre_mean",
        "pusch.snr_mean",
        "pdsch.present",
        "pdsch.count",
        "pdsch.epre_mean",
        "pdsch.snr_mean",
        "pdcch.present",
        "pdcch.count",
        "pdcch.epre_mean",
        "pdcch.snr_mean",
        "pucch.present",
        "pucch.count",
        "pucch.epre_mean",
        "pucch.snr_mean",
        // 16..24: PUSCH extras
        "pusch.mcs_mean",
        "pusch.mod_order_mean",
        "pusch.tb_len_sum",
        "pusch.prb_sum",
        "pusch.symb_start_first",
        "pusch.symb_len_mean",
        "pusch.crc_ok_mean",
        "pusch.harq_count",
        // 24..32: PDSCH extras
        "pdsch.mcs_mean",
        "pdsch.mod_order_mean",
        "pdsch.tb_len_sum",
        "pdsch.prb_sum",
        "pdsch.symb_start_first",
        "pdsch.symb_len_mean",
        "pdsch.crc_ok_mean",
        "pdsch.harq_count",
        // 32..36: PDCCH extras
        "pdcch.cce_index_mean",
        "pdcch.aggregation_level_mean",
        "pdcch.dci_count",
        "pdcch.reserved0",
        // 36..40: PUCCH extras
        "pucch.format_first",
        "pucch.uci_count",
        "pucch.reserved0",
        "pucch.reserved1",
        // 40..45: frame-level descriptors
        "derived.err_ul",
        "derived.err_dl",
        "derived.eff_pdsch",
        "derived.mvi_dl",
        "derived.mvi_ul",
        // 45..61: trailing-window statistics, UL then DL
        "roll.ul_tb_len_mean",
        "roll.ul_tb_len_sd",
        "roll.ul_prb_mean",
        "roll.ul_prb_sd",
        "roll.ul_snr_mean",
        "roll.ul_snr_sd",
        "roll.ul_mcs_mean",
        "roll.ul_mcs_sd",
        "roll.dl_tb_len_mean",
        "roll.dl_tb_len_sd",
        "roll.dl_prb_mean",
        "roll.dl_prb_sd",
        "roll.dl_snr_mean",
        "roll.dl_snr_sd",
        "roll.dl_mcs_mean",
        "roll.dl_mcs_sd",
    ]
}

/// Index of a named slot, for readers that should not hard-code the layout.
pub fn slot_index(name: &str) -> Option<usize> {
    feature_names().iter().position(|n| *n == name)
}

fn common_base(chan: ChannelKind) -> usize {
    match chan {
        ChannelKind::Pusch => 0,
        ChannelKind::Pdsch => COMMON_WIDTH,
        ChannelKind::Pdcch => 2 * COMMON_WIDTH,
        ChannelKind::Pucch => 3 * COMMON_WIDTH,
        // read_session never yields these
        ChannelKind::Pbch | ChannelKind::Prach => unreachable!("non-pipeline channel"),
    }
}

fn mean_of(recs: &[&PhysicalChannelRecord], f: impl Fn(&PhysicalChannelRecord) -> Option<f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in recs {
        if let Some(v) = f(r) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

fn sum_of(recs: &[&PhysicalChannelRecord], f: impl Fn(&PhysicalChannelRecord) -> Option<f64>) -> f64 {
    recs.iter().filter_map(|r| f(r)).sum()
}

/// "first" reduction: value from the lowest slot, ties broken by the lower
/// value, so the result does not depend on input record order.
fn first_of(recs: &[&PhysicalChannelRecord], f: impl Fn(&PhysicalChannelRecord) -> Option<f64>) -> f64 {
    recs.iter()
        .filter_map(|r| f(r).map(|v| (r.slot, v)))
        .min_by(|a, b| {
            a.0.cmp(&b.0)
                .then(a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        })
        .map(|(_, v)| v)
        .unwrap_or(0.0)
}

fn data_extras(v: &mut [f64; FEATURE_DIM], base: usize, recs: &[&PhysicalChannelRecord]) {
    v[base] = mean_of(recs, |r| r.mcs.map(f64::from));
    v[base + 1] = mean_of(recs, |r| r.mod_order.map(f64::from));
    v[base + 2] = sum_of(recs, |r| r.tb_len.map(|x| x as f64));
    v[base + 3] = sum_of(recs, |r| r.prb.map(f64::from));
    v[base + 4] = first_of(recs, |r| r.symb_start.map(f64::from));
    v[base + 5] = mean_of(recs, |r| r.symb_len.map(f64::from));
    v[base + 6] = mean_of(recs, |r| r.crc_ok.map(|ok| if ok { 1.0 } else { 0.0 }));
    v[base + 7] = recs.iter().filter(|r| r.harq_id.is_some()).count() as f64;
}

/// Reduce the records of one subframe to a fixed-width vector. Channels
/// without records leave all their slots at zero; derived slots stay zero
/// until [`augment_features`]. Callers must pass records of a single
/// (frame, subframe) pair.
pub fn build_subframe_vector(records: &[&PhysicalChannelRecord]) -> [f64; FEATURE_DIM] {
    debug_assert!(
        records
            .windows(2)
            .all(|w| w[0].frame == w[1].frame && w[0].subframe == w[1].subframe),
        "records span multiple subframes"
    );
    let mut v = [0.0; FEATURE_DIM];
    for chan in [
        ChannelKind::Pusch,
        ChannelKind::Pdsch,
        ChannelKind::Pdcch,
        ChannelKind::Pucch,
    ] {
        let recs: Vec<&PhysicalChannelRecord> =
            records.iter().copied().filter(|r| r.chan == chan).collect();
        if recs.is_empty() {
            continue;
        }
        let base = common_base(chan);
        v[base] = 1.0;
        v[base + 1] = recs.len() as f64;
        v[base + 2] = mean_of(&recs, |r| r.epre);
        v[base + 3] = mean_of(&recs, |r| r.snr);
        match chan {
            ChannelKind::Pusch => data_extras(&mut v, PUSCH_EXTRA, &recs),
            ChannelKind::Pdsch => data_extras(&mut v, PDSCH_EXTRA, &recs),
            ChannelKind::Pdcch => {
                v[PDCCH_EXTRA] = mean_of(&recs, |r| r.cce_index.map(f64::from));
                v[PDCCH_EXTRA + 1] = mean_of(&recs, |r| r.aggregation_level.map(f64::from));
                v[PDCCH_EXTRA + 2] = recs.len() as f64;
            }
            ChannelKind::Pucch => {
                v[PUCCH_EXTRA] = first_of(&recs, |r| r.pucch_format.map(f64::from));
                v[PUCCH_EXTRA + 1] = recs.len() as f64;
            }
            ChannelKind::Pbch | ChannelKind::Prach => unreachable!(),
        }
    }
    v
}

/// One frame's 10x61 feature matrix plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    pub label: TrafficLabel,
    pub gain: GainLevel,
    /// Frame index within the session trace.
    pub frame: u64,
    /// Position of this frame among the session's produced matrices.
    pub ordinal: u32,
    /// Row-major `FRAME_ROWS x FEATURE_DIM`.
    pub values: Vec<f64>,
}

impl FrameMatrix {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }
}

/// Stack the frame's subframe vectors into a matrix. Record order does not
/// matter; subframes without records become all-zero rows. Callers must pass
/// records of a single frame.
pub fn build_frame_matrix(
    records: &[PhysicalChannelRecord],
    label: TrafficLabel,
    gain: GainLevel,
    frame: u64,
) -> FrameMatrix {
    debug_assert!(records.iter().all(|r| r.frame == frame), "records span frames");
    let mut values = vec![0.0; FRAME_ROWS * FEATURE_DIM];
    for t in 0..FRAME_ROWS {
        let recs: Vec<&PhysicalChannelRecord> =
            records.iter().filter(|r| r.subframe as usize == t).collect();
        let row = build_subframe_vector(&recs);
        values[t * FEATURE_DIM..(t + 1) * FEATURE_DIM].copy_from_slice(&row);
    }
    FrameMatrix {
        label,
        gain,
        frame,
        ordinal: 0,
        values,
    }
}

/// HARQ outcome counts for one direction within an observation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HarqWindowStats {
    pub n_succ: u32,
    pub n_total: u32,
    pub direction: Direction,
}

/// Block error rate `1 - n_succ / n_total`; 0 when nothing was transmitted.
pub fn compute_err(stats: &HarqWindowStats) -> Result<f64, PreprocessError> {
    if stats.n_succ > stats.n_total {
        return Err(PreprocessError::InvariantViolation {
            succ: stats.n_succ,
            total: stats.n_total,
        });
    }
    if stats.n_total == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - f64::from(stats.n_succ) / f64::from(stats.n_total))
}

/// Transport bits per resource block: `tb_sum / prb_sum`; 0 for an idle window.
pub fn compute_pdsch_eff(tb_sum: f64, prb_sum: f64) -> Result<f64, PreprocessError> {
    if tb_sum < 0.0 {
        return Err(PreprocessError::NegativeInput(tb_sum));
    }
    if prb_sum < 0.0 {
        return Err(PreprocessError::NegativeInput(prb_sum));
    }
    if prb_sum == 0.0 {
        return Ok(0.0);
    }
    Ok(tb_sum / prb_sum)
}

/// Coefficient of variation of the modulation orders (population standard
/// deviation over mean); 0 for empty or constant sequences.
pub fn compute_mvi(mod_orders: &[u8]) -> f64 {
    if mod_orders.is_empty() {
        return 0.0;
    }
    let n = mod_orders.len() as f64;
    let mean = mod_orders.iter().map(|&m| f64::from(m)).sum::<f64>() / n;
    let var = mod_orders
        .iter()
        .map(|&m| {
            let d = f64::from(m) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var == 0.0 {
        return 0.0;
    }
    var.sqrt() / mean
}

#[derive(Debug, Default, Clone)]
struct FrameFieldObs {
    tb: Vec<f64>,
    prb: Vec<f64>,
    snr: Vec<f64>,
    mcs: Vec<f64>,
}

impl FrameFieldObs {
    fn collect(records: &[PhysicalChannelRecord], chan: ChannelKind) -> FrameFieldObs {
        let mut obs = FrameFieldObs::default();
        for r in records.iter().filter(|r| r.chan == chan) {
            if let Some(v) = r.tb_len {
                obs.tb.push(v as f64);
            }
            if let Some(v) = r.prb {
                obs.prb.push(f64::from(v));
            }
            if let Some(v) = r.snr {
                obs.snr.push(v);
            }
            if let Some(v) = r.mcs {
                obs.mcs.push(f64::from(v));
            }
        }
        obs
    }
}

/// Trailing per-direction record pools for rolling statistics. Push each
/// frame in session order; the window keeps the most recent `w` frames
/// including the current one, fewer at session start.
#[derive(Debug, Clone)]
pub struct SessionWindows {
    w: usize,
    ul: VecDeque<FrameFieldObs>,
    dl: VecDeque<FrameFieldObs>,
}

impl SessionWindows {
    pub fn new(w: usize) -> SessionWindows {
        assert!(w >= 1, "window must hold at least the current frame");
        SessionWindows {
            w,
            ul: VecDeque::new(),
            dl: VecDeque::new(),
        }
    }

    pub fn push_frame(&mut self, records: &[PhysicalChannelRecord]) {
        self.ul.push_back(FrameFieldObs::collect(records, ChannelKind::Pusch));
        self.dl.push_back(FrameFieldObs::collect(records, ChannelKind::Pdsch));
        if self.ul.len() > self.w {
            self.ul.pop_front();
            self.dl.pop_front();
        }
    }

    /// Mean and population standard deviation of each field over the pooled
    /// window records, UL then DL, in slot order. Empty pools yield (0, 0).
    pub fn rolling_stats(&self) -> [f64; 16] {
        fn pool_stats(frames: &VecDeque<FrameFieldObs>, field: impl Fn(&FrameFieldObs) -> &[f64]) -> (f64, f64) {
            let mut sum = 0.0;
            let mut n = 0usize;
            for f in frames {
                for &v in field(f) {
                    sum += v;
                    n += 1;
                }
            }
            if n == 0 {
                return (0.0, 0.0);
            }
            let mean = sum / n as f64;
            let mut var = 0.0;
            for f in frames {
                for &v in field(f) {
                    var += (v - mean) * (v - mean);
                }
            }
            (mean, (var / n as f64).sqrt())
        }

        let mut out = [0.0; 16];
        for (half, frames) in [(0, &self.ul), (8, &self.dl)] {
            let fields: [&dyn Fn(&FrameFieldObs) -> &[f64]; 4] = [
                &|f| &f.tb,
                &|f| &f.prb,
                &|f| &f.snr,
                &|f| &f.mcs,
            ];
            for (i, field) in fields.iter().enumerate() {
                let (mean, sd) = pool_stats(frames, field);
                out[half + 2 * i] = mean;
                out[half + 2 * i + 1] = sd;
            }
        }
        out
    }
}

fn harq_counts(records: &[PhysicalChannelRecord], chan: ChannelKind, dir: Direction) -> HarqWindowStats {
    let mut total = 0u32;
    let mut succ = 0u32;
    for r in records.iter().filter(|r| r.chan == chan) {
        if let Some(ok) = r.crc_ok {
            total += 1;
            if ok {
                succ += 1;
            }
        }
    }
    HarqWindowStats {
        n_succ: succ,
        n_total: total,
        direction: dir,
    }
}

/// Fill the derived slots of every row with frame-level descriptors plus the
/// rolling statistics. `windows` must already contain this frame.
pub fn augment_features(
    matrix: &mut FrameMatrix,
    records: &[PhysicalChannelRecord],
    windows: &SessionWindows,
) -> Result<(), PreprocessError> {
    let err_ul = compute_err(&harq_counts(records, ChannelKind::Pusch, Direction::Ul))?;
    let err_dl = compute_err(&harq_counts(records, ChannelKind::Pdsch, Direction::Dl))?;
    let pdsch: Vec<&PhysicalChannelRecord> =
        records.iter().filter(|r| r.chan == ChannelKind::Pdsch).collect();
    let tb_sum = sum_of(&pdsch, |r| r.tb_len.map(|x| x as f64));
    let prb_sum = sum_of(&pdsch, |r| r.prb.map(f64::from));
    let eff = compute_pdsch_eff(tb_sum, prb_sum)?;
    let mods = |chan: ChannelKind| -> Vec<u8> {
        records
            .iter()
            .filter(|r| r.chan == chan)
            .filter_map(|r| r.mod_order)
            .collect()
    };
    let mvi_dl = compute_mvi(&mods(ChannelKind::Pdsch));
    let mvi_ul = compute_mvi(&mods(ChannelKind::Pusch));
    let rolling = windows.rolling_stats();

    for t in 0..FRAME_ROWS {
        let row = &mut matrix.values[t * FEATURE_DIM..(t + 1) * FEATURE_DIM];
        row[DERIVED] = err_ul;
        row[DERIVED + 1] = err_dl;
        row[DERIVED + 2] = eff;
        row[DERIVED + 3] = mvi_dl;
        row[DERIVED + 4] = mvi_ul;
        row[ROLLING..ROLLING + 16].copy_from_slice(&rolling);
    }
    Ok(())
}

/// Turn one session's records into matrices, one per observed frame in
/// ascending frame order, with ordinals assigned 0..n.
pub fn preprocess_session(
    header: &SessionHeader,
    records: &[PhysicalChannelRecord],
    window: usize,
) -> Result<Vec<FrameMatrix>, PreprocessError> {
    let mut by_frame: BTreeMap<u64, Vec<PhysicalChannelRecord>> = BTreeMap::new();
    for r in records {
        by_frame.entry(r.frame).or_default().push(r.clone());
    }
    let mut windows = SessionWindows::new(window);
    let mut out = Vec::with_capacity(by_frame.len());
    for (ordinal, (frame, recs)) in by_frame.into_iter().enumerate() {
        let mut matrix = build_frame_matrix(&recs, header.label, header.gain, frame);
        matrix.ordinal = ordinal as u32;
        windows.push_frame(&recs);
        augment_features(&mut matrix, &recs, &windows)?;
        out.push(matrix);
    }
    Ok(out)
}

/// Flat in-memory dataset: n samples of `t x d` features with per-sample
/// label, gain index and session ordinal. Features are stored raw
/// (unnormalized); normalization constants live with the model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    pub t: usize,
    pub d: usize,
    /// Row-major `n * t * d`.
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
    /// Gain index 0..=10 (64 dB..84 dB in 2 dB steps).
    pub gains: Vec<u8>,
    pub ordinals: Vec<u32>,
}

impl SampleSet {
    pub fn new() -> SampleSet {
        SampleSet {
            t: FRAME_ROWS,
            d: FEATURE_DIM,
            ..SampleSet::default()
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, m: &FrameMatrix) {
        debug_assert_eq!(m.values.len(), self.t * self.d);
        self.features.extend(m.values.iter().map(|&v| v as f32));
        self.labels.push(m.label.code());
        self.gains.push(m.gain.index() as u8);
        self.ordinals.push(m.ordinal);
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.t * self.d..(i + 1) * self.t * self.d]
    }

    /// Sessions are identified by their (label, gain) pair; the generator
    /// emits one session per combination.
    pub fn session_key(&self, i: usize) -> (u8, u8) {
        (self.labels[i], self.gains[i])
    }

    /// Batch the selected samples into a `[len, t, d]` tensor plus class
    /// indices, in the order given.
    pub fn gather<S: Scalar>(&self, idx: &[usize]) -> (Tensor<S>, Vec<usize>) {
        let stride = self.t * self.d;
        let mut data = Vec::with_capacity(idx.len() * stride);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend(self.sample(i).iter().map(|&v| S::from_f64(f64::from(v))));
            labels.push(self.labels[i] as usize);
        }
        let x = Tensor::from_vec(&[idx.len(), self.t, self.d], data)
            .expect("gather shape is consistent by construction");
        (x, labels)
    }

    /// Serialize to the binary dataset format (little-endian): magic `BLCD`,
    /// version, sample count, t, d, then per sample a label byte, gain byte,
    /// two reserved bytes, the ordinal and the f32 feature block.
    pub fn write(&self, path: &Path) -> Result<(), PreprocessError> {
        let stride = self.t * self.d;
        let mut buf =
            Vec::with_capacity(20 + self.len() * (8 + 4 * stride));
        buf.extend_from_slice(BLCD_MAGIC);
        buf.extend_from_slice(&BLCD_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.t as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        for i in 0..self.len() {
            buf.push(self.labels[i]);
            buf.push(self.gains[i]);
            buf.extend_from_slice(&0u16.to_le_bytes());
            buf.extend_from_slice(&self.ordinals[i].to_le_bytes());
            for &v in self.sample(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<SampleSet, PreprocessError> {
        let bytes = std::fs::read(path)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(4)? != BLCD_MAGIC {
            return Err(PreprocessError::BadMagic);
        }
        let version = r.u32()?;
        if version != BLCD_VERSION {
            return Err(PreprocessError::Version(version));
        }
        let n = r.u32()? as usize;
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        if t != FRAME_ROWS || d != FEATURE_DIM {
            return Err(PreprocessError::SchemaMismatch(format!(
                "dataset is {t}x{d}, schema version {FEATURE_SCHEMA_VERSION} requires {FRAME_ROWS}x{FEATURE_DIM}"
            )));
        }
        let stride = t * d;
        let mut set = SampleSet::new();
        set.features.reserve(n * stride);
        for _ in 0..n {
            let label = r.u8()?;
            if TrafficLabel::from_code(label).is_none() {
                return Err(PreprocessError::Corrupt(format!("label code {label}")));
            }
            let gain = r.u8()?;
            if GainLevel::from_index(gain as usize).is_none() {
                return Err(PreprocessError::Corrupt(format!("gain index {gain}")));
            }
            r.take(2)?; // reserved
            let ordinal = r.u32()?;
            let block = r.take(4 * stride)?;
            set.features.extend(
                block
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
            set.labels.push(label);
            set.gains.push(gain);
            set.ordinals.push(ordinal);
        }
        if r.pos != bytes.len() {
            return Err(PreprocessError::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(set)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PreprocessError> {
        if self.pos + n > self.bytes.len() {
            return Err(PreprocessError::Corrupt("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PreprocessError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PreprocessError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Per-feature normalization constants plus the layout they apply to.
/// Sigmas are stored already floored, so applying is a plain `(x - m) / s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub schema_version: u32,
    pub feature_names: Vec<String>,
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

/// Mean and floored population standard deviation of each feature over the
/// rows of the selected samples only; pass the training split to keep
/// held-out data out of the statistics.
pub fn compute_stats(set: &SampleSet, samples: &[usize]) -> Result<FeatureStats, PreprocessError> {
    if samples.is_empty() || set.t == 0 {
        return Err(PreprocessError::EmptyInput);
    }
    let d = set.d;
    let n_rows = (samples.len() * set.t) as f64;
    let mut means = vec![0.0f64; d];
    for &i in samples {
        for row in set.sample(i).chunks_exact(d) {
            for (m, &v) in means.iter_mut().zip(row) {
                *m += f64::from(v);
            }
        }
    }
    for m in &mut means {
        *m /= n_rows;
    }
    let mut vars = vec![0.0f64; d];
    for &i in samples {
        for row in set.sample(i).chunks_exact(d) {
            for ((s, &m), &v) in vars.iter_mut().zip(&means).zip(row) {
                let diff = f64::from(v) - m;
                *s += diff * diff;
            }
        }
    }
    let sigmas = vars
        .iter()
        .map(|&s| (s / n_rows).sqrt().max(SIGMA_FLOOR))
        .collect();
    Ok(FeatureStats {
        schema_version: FEATURE_SCHEMA_VERSION,
        feature_names: feature_names().iter().map(|s| s.to_string()).collect(),
        means,
        sigmas,
    })
}

impl FeatureStats {
    /// Normalize rows in place. `data` must be a whole number of
    /// `feature_names.len()`-wide rows.
    pub fn apply(&self, data: &mut [f32]) -> Result<(), PreprocessError> {
        let d = self.means.len();
        if d != self.sigmas.len() || data.len() % d != 0 {
            return Err(PreprocessError::SchemaMismatch(format!(
                "{} values against width {d}",
                data.len()
            )));
        }
        for row in data.chunks_exact_mut(d) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.means).zip(&self.sigmas) {
                *v = ((f64::from(*v) - m) / s) as f32;
            }
        }
        Ok(())
    }
}

/// Session files (`*.jsonl`) under a directory, sorted by file name so a
/// directory always loads in the same order.
pub fn session_files(dir: &Path) -> Result<Vec<PathBuf>, PreprocessError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Read, preprocess and concatenate the given session files.
pub fn load_sessions(files: &[PathBuf], window: usize) -> Result<SampleSet, PreprocessError> {
    let mut set = SampleSet::new();
    for path in files {
        let (header, records, _) = record::read_session(path)?;
        for matrix in preprocess_session(&header, &records, window)? {
            set.push(&matrix);
        }
    }
    Ok(set)
}
