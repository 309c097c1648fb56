//! Spread-spectrum watermarking of model updates for lazy-client detection.
//!
//! Each client adds a low-power ±1 chip sequence, a window of a maximal-length
//! LFSR sequence, to the first `use_len` parameters it uploads. A client that
//! later finds its own chips correlating strongly with somebody else's upload
//! knows that upload was copied from it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mlcore::ParamVector;
use crate::rng::derive_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WatermarkError {
    #[error("LFSR seed state must be non-zero")]
    ZeroSeed,
    #[error("LFSR degree {0} unsupported (2..=31)")]
    Degree(u32),
    #[error("tap mask {taps:#x} must include the degree-{degree} term")]
    Taps { degree: u32, taps: u32 },
    #[error("taps {taps:#x} are not primitive for degree {degree}: period {period}")]
    NotMaximal { degree: u32, taps: u32, period: u64 },
    #[error("no shipped primitive polynomial for degree {0}")]
    NoTable(u32),
    #[error("use_len {use_len} exceeds available length {available}")]
    UseLen { use_len: usize, available: usize },
}

/// Builds a tap bitmask from 1-based tap positions (bit `t - 1` for tap `t`).
pub const fn taps_mask(taps: &[u32]) -> u32 {
    let mut mask = 0;
    let mut i = 0;
    while i < taps.len() {
        mask |= 1 << (taps[i] - 1);
        i += 1;
    }
    mask
}

/// Primitive feedback taps for degrees 10 through 20.
pub fn primitive_taps(degree: u32) -> Option<u32> {
    let taps: &[u32] = match degree {
        10 => &[10, 7],
        11 => &[11, 9],
        12 => &[12, 6, 4, 1],
        13 => &[13, 4, 3, 1],
        14 => &[14, 5, 3, 1],
        15 => &[15, 14],
        16 => &[16, 15, 13, 4],
        17 => &[17, 14],
        18 => &[18, 11],
        19 => &[19, 6, 2, 1],
        20 => &[20, 17],
        _ => return None,
    };
    Some(taps_mask(taps))
}

/// One full period of a maximal-length sequence, mapped bit 0 → +1, bit 1 → −1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PnSequence {
    chips: Vec<i8>,
    degree: u32,
    taps: u32,
    seed_state: u32,
}

/// Fibonacci LFSR: the output is bit 0; the feedback bit is the XOR of the
/// register bits at shift `degree - t` for each tap `t` and enters at the top.
pub fn gen_pn(degree: u32, taps: u32, seed_state: u32) -> Result<PnSequence, WatermarkError> {
    if !(2..=31).contains(&degree) {
        return Err(WatermarkError::Degree(degree));
    }
    let mask = (1u32 << degree) - 1;
    if taps & !mask != 0 || taps & (1 << (degree - 1)) == 0 {
        return Err(WatermarkError::Taps { degree, taps });
    }
    let start = seed_state & mask;
    if start == 0 {
        return Err(WatermarkError::ZeroSeed);
    }
    let full = (1u64 << degree) - 1;
    let shifts: Vec<u32> = (1..=degree).filter(|t| taps & (1 << (t - 1)) != 0).map(|t| degree - t).collect();
    let mut chips = Vec::with_capacity(full as usize);
    let mut state = start;
    loop {
        chips.push(if state & 1 == 0 { 1 } else { -1 });
        let bit = shifts.iter().fold(0, |acc, s| acc ^ ((state >> s) & 1));
        state = (state >> 1) | (bit << (degree - 1));
        if state == start || chips.len() as u64 > full {
            break;
        }
    }
    if chips.len() as u64 != full {
        return Err(WatermarkError::NotMaximal { degree, taps, period: chips.len() as u64 });
    }
    Ok(PnSequence { chips, degree, taps, seed_state: start })
}

/// Shipped-table sequence for `degree` starting from state 1.
pub fn default_pn(degree: u32) -> Result<PnSequence, WatermarkError> {
    let taps = primitive_taps(degree).ok_or(WatermarkError::NoTable(degree))?;
    gen_pn(degree, taps, 1)
}

impl PnSequence {
    pub fn chips(&self) -> &[i8] {
        &self.chips
    }

    pub fn period(&self) -> usize {
        self.chips.len()
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn taps(&self) -> u32 {
        self.taps
    }

    pub fn seed_state(&self) -> u32 {
        self.seed_state
    }

    /// `len` chips starting at `offset`, wrapping around the period.
    pub fn window(&self, offset: usize, len: usize) -> Result<Vec<i8>, WatermarkError> {
        if len > self.period() {
            return Err(WatermarkError::UseLen { use_len: len, available: self.period() });
        }
        let p = self.period();
        Ok((0..len).map(|i| self.chips[(offset + i) % p]).collect())
    }

    /// A client's private chips: the window starting at `client_id * use_len`.
    pub fn client_chips(&self, client_id: u32, use_len: usize) -> Result<Vec<i8>, WatermarkError> {
        let offset = ((client_id as u64 * use_len as u64) % self.period() as u64) as usize;
        self.window(offset, use_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkConfig {
    pub enabled: bool,
    /// Parameter power over watermark power, in dB.
    pub snr_db: f64,
    /// Chips embedded; 0 means `min(param_dim, period)`.
    pub use_len: usize,
    /// Detection threshold as a fraction of the expected amplitude.
    pub gamma: f64,
    pub degree: u32,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        Self { enabled: false, snr_db: 6.0, use_len: 0, gamma: 0.5, degree: 15 }
    }
}

impl WatermarkConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !self.snr_db.is_finite() {
            return Err("watermark.snr_db must be finite".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(format!("watermark.gamma {} outside (0, 1)", self.gamma));
        }
        if primitive_taps(self.degree).is_none() {
            return Err(format!("watermark.degree {} has no shipped polynomial (10..=20)", self.degree));
        }
        Ok(())
    }

    /// Effective embedded length for a parameter vector of `dim` entries.
    pub fn resolved_use_len(&self, dim: usize) -> Result<usize, WatermarkError> {
        let period = (1usize << self.degree) - 1;
        let available = dim.min(period);
        match self.use_len {
            0 => Ok(available),
            n if n <= available => Ok(n),
            n => Err(WatermarkError::UseLen { use_len: n, available }),
        }
    }
}

/// Linear power ratio for `snr_db`.
pub fn snr_linear(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0)
}

/// Amplitude α that puts the watermark `snr_db` below `signal_power`.
pub fn embed_amplitude(signal_power: f64, snr_db: f64) -> f64 {
    if signal_power <= 0.0 {
        return 0.0;
    }
    (signal_power / snr_linear(snr_db)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub params: ParamVector,
    pub alpha: f64,
}

/// Adds `α·chips[i]` to the first `use_len` parameters.
pub fn embed(params: &ParamVector, chips: &[i8], snr_db: f64, use_len: usize) -> Result<Embedded, WatermarkError> {
    if use_len > params.dim() || use_len > chips.len() {
        return Err(WatermarkError::UseLen { use_len, available: params.dim().min(chips.len()) });
    }
    let alpha = embed_amplitude(params.prefix_power(use_len), snr_db);
    let mut out = params.as_slice().to_vec();
    for (v, &c) in out.iter_mut().zip(&chips[..use_len]) {
        *v += alpha * f64::from(c);
    }
    Ok(Embedded { params: ParamVector::new(out).expect("finite"), alpha })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// `Σ params[i]·chips[i] / use_len`.
    pub statistic: f64,
    /// Mean square of the received prefix.
    pub received_power: f64,
    pub use_len: usize,
}

pub fn correlate(params: &ParamVector, chips: &[i8], use_len: usize) -> Result<Correlation, WatermarkError> {
    if use_len == 0 || use_len > params.dim() || use_len > chips.len() {
        return Err(WatermarkError::UseLen { use_len, available: params.dim().min(chips.len()) });
    }
    let x = &params.as_slice()[..use_len];
    let dot: f64 = x.iter().zip(chips).map(|(v, &c)| v * f64::from(c)).sum();
    Ok(Correlation { statistic: dot / use_len as f64, received_power: params.prefix_power(use_len), use_len })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Detected,
    Clean,
}

/// Amplitude a genuine watermark at `snr_db` would show in a vector whose
/// total power is `received_power` (signal plus watermark).
pub fn expected_amplitude(received_power: f64, snr_db: f64) -> f64 {
    (received_power.max(0.0) / (1.0 + snr_linear(snr_db))).sqrt()
}

/// Detected iff the correlation exceeds `gamma` times the expected amplitude.
pub fn decide(statistic: f64, received_power: f64, use_len: usize, snr_db: f64, gamma: f64) -> Decision {
    assert!(use_len > 0, "use_len must be positive");
    if statistic > gamma * expected_amplitude(received_power, snr_db) {
        Decision::Detected
    } else {
        Decision::Clean
    }
}

pub fn detect(params: &ParamVector, chips: &[i8], use_len: usize, snr_db: f64, gamma: f64) -> Result<Decision, WatermarkError> {
    let c = correlate(params, chips, use_len)?;
    Ok(decide(c.statistic, c.received_power, use_len, snr_db, gamma))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocRow {
    pub snr_db: f64,
    pub gamma: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Monte-Carlo detection and false-alarm rates on unit-variance Gaussian
/// parameter vectors. Trial `t` uses the chips of client `t`; the clean
/// vector of each trial is drawn independently of the marked one.
pub fn roc_curve(
    snrs_db: &[f64],
    gammas: &[f64],
    trials: usize,
    use_len: usize,
    degree: u32,
    seed: u64,
) -> Result<Vec<RocRow>, WatermarkError> {
    let pn = default_pn(degree)?;
    let mut rows = Vec::with_capacity(snrs_db.len() * gammas.len());
    for (si, &snr) in snrs_db.iter().enumerate() {
        let mut marked = Vec::with_capacity(trials);
        let mut clean = Vec::with_capacity(trials);
        for t in 0..trials {
            let chips = pn.client_chips(t as u32, use_len)?;
            let mut rng = derive_rng("roc-trial", &[seed, si as u64, t as u64]);
            let signal = gaussian_vector(use_len, &mut rng);
            let wm = embed(&signal, &chips, snr, use_len)?;
            marked.push(correlate(&wm.params, &chips, use_len)?);
            let other = gaussian_vector(use_len, &mut rng);
            clean.push(correlate(&other, &chips, use_len)?);
        }
        for &gamma in gammas {
            let rate = |cs: &[Correlation]| {
                cs.iter()
                    .filter(|c| decide(c.statistic, c.received_power, c.use_len, snr, gamma) == Decision::Detected)
                    .count() as f64
                    / trials.max(1) as f64
            };
            rows.push(RocRow { snr_db: snr, gamma, tpr: rate(&marked), fpr: rate(&clean) });
        }
    }
    Ok(rows)
}

fn gaussian_vector(n: usize, rng: &mut impl Rng) -> ParamVector {
    ParamVector::new((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree3_trace_matches_hand_walk() {
        // state b2b1b0: 001→100→010→101→110→111→011→001, output b0 each step
        let pn = gen_pn(3, taps_mask(&[3, 2]), 0b001).unwrap();
        assert_eq!(pn.chips(), &[-1, 1, 1, -1, 1, -1, -1]);
    }

    #[test]
    fn degree15_period_by_state_walk() {
        // brute-force: every non-zero state visited exactly once
        let taps = taps_mask(&[15, 14]);
        let mut seen = vec![false; 1 << 15];
        let mut state: u32 = 1;
        let mut steps = 0u32;
        loop {
            assert!(!seen[state as usize], "state repeated after {steps} steps");
            seen[state as usize] = true;
            let bit = (state ^ (state >> 1)) & 1;
            state = (state >> 1) | (bit << 14);
            steps += 1;
            if state == 1 {
                break;
            }
        }
        assert_eq!(steps, 32_767);
        assert_eq!(gen_pn(15, taps, 1).unwrap().period(), 32_767);
    }

    #[test]
    fn shipped_table_is_maximal_and_balanced() {
        for degree in 10..=20 {
            let pn = default_pn(degree).unwrap();
            assert_eq!(pn.period(), (1 << degree) - 1);
            let plus = pn.chips().iter().filter(|&&c| c == 1).count() as i64;
            let minus = pn.period() as i64 - plus;
            assert_eq!(minus - plus, 1, "degree {degree}");
        }
    }

    #[test]
    fn two_valued_autocorrelation() {
        for pn in [gen_pn(3, taps_mask(&[3, 2]), 5).unwrap(), default_pn(10).unwrap()] {
            let p = pn.period();
            for lag in 0..p {
                let r: i64 = (0..p).map(|i| i64::from(pn.chips()[i]) * i64::from(pn.chips()[(i + lag) % p])).sum();
                assert_eq!(r, if lag == 0 { p as i64 } else { -1 });
            }
        }
    }

    #[test]
    fn lfsr_errors() {
        assert_eq!(gen_pn(15, taps_mask(&[15, 14]), 0), Err(WatermarkError::ZeroSeed));
        assert!(matches!(gen_pn(15, taps_mask(&[14]), 1), Err(WatermarkError::Taps { .. })));
        // x^4 + x^2 + 1 is not primitive
        assert!(matches!(gen_pn(4, taps_mask(&[4, 2]), 1), Err(WatermarkError::NotMaximal { .. })));
    }

    fn random_params(n: usize, seed: u64) -> ParamVector {
        gaussian_vector(n, &mut derive_rng("wm-test", &[seed]))
    }

    #[test]
    fn embed_amplitudes() {
        let pn = default_pn(15).unwrap();
        let chips = pn.client_chips(0, 1000).unwrap();
        let p = random_params(1200, 1);
        let ps = p.prefix_power(1000);
        let hi = embed(&p, &chips, 120.0, 1000).unwrap();
        // α = 10^-6·sqrt(P_s) exactly at 120 dB
        assert!(hi.alpha <= 1e-6 * ps.sqrt() * (1.0 + 1e-12));
        assert!(embed(&p, &chips, 121.0, 1000).unwrap().alpha < 1e-6 * ps.sqrt());
        let zero_db = embed(&p, &chips, 0.0, 1000).unwrap();
        assert!((zero_db.alpha.powi(2) - ps).abs() < 1e-12 * ps);
        let three = embed(&p, &chips, 3.0, 1000).unwrap();
        let oracle = ps / 10f64.powf(0.3);
        assert!((three.alpha.powi(2) - oracle).abs() < 1e-12 * ps);
        assert!((three.alpha.powi(2) / ps - 0.501).abs() < 1e-3);
        // tail untouched
        assert_eq!(&three.params.as_slice()[1000..], &p.as_slice()[1000..]);
        let z = embed(&ParamVector::zeros(10), &chips, 3.0, 10).unwrap();
        assert_eq!(z.alpha, 0.0);
    }

    #[test]
    fn correlate_pure_chips() {
        let pn = default_pn(12).unwrap();
        let chips = pn.client_chips(2, 500).unwrap();
        let alpha = 0.37;
        let p = ParamVector::new(chips.iter().map(|&c| alpha * f64::from(c)).collect()).unwrap();
        let c = correlate(&p, &chips, 500).unwrap();
        assert!((c.statistic - alpha).abs() < 1e-12);
    }

    #[test]
    fn decide_examples() {
        let power = 2.0;
        let a = expected_amplitude(power, 6.0);
        assert_eq!(decide(a, power, 100, 6.0, 0.5), Decision::Detected);
        assert_eq!(decide(0.0, power, 100, 6.0, 0.5), Decision::Clean);
        assert_eq!(decide(0.0, 0.0, 100, 6.0, 0.5), Decision::Clean);
    }

    #[test]
    fn null_statistic_moments() {
        // H0: independent N(0, σ²) params; c ~ mean 0, std σ/sqrt(L)
        let pn = default_pn(15).unwrap();
        let l = 1000;
        let chips = pn.client_chips(1, l).unwrap();
        let sigma = 2.0;
        let trials = 10_000;
        let stats: Vec<f64> = (0..trials)
            .map(|t| {
                let p = random_params(l, 1000 + t).scale(sigma).unwrap();
                correlate(&p, &chips, l).unwrap().statistic
            })
            .collect();
        let mean = stats.iter().sum::<f64>() / trials as f64;
        let sd = (stats.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (trials as f64 - 1.0)).sqrt();
        let expected_sd = sigma / (l as f64).sqrt();
        assert!(mean.abs() < 4.0 * expected_sd / (trials as f64).sqrt());
        assert!((sd / expected_sd - 1.0).abs() < 0.05, "sd {sd} vs {expected_sd}");
    }

    #[test]
    fn foreign_sequence_stays_below_floor() {
        let pn = default_pn(15).unwrap();
        let l = 2000;
        let own = pn.client_chips(3, l).unwrap();
        let foreign = pn.client_chips(7, l).unwrap();
        let trials = 500;
        let mut inside = 0;
        for t in 0..trials {
            let p = random_params(l, 50_000 + t);
            let wm = embed(&p, &own, 3.0, l).unwrap();
            let c = correlate(&wm.params, &foreign, l).unwrap();
            let floor = (c.received_power / l as f64).sqrt();
            if c.statistic.abs() < 5.0 * floor {
                inside += 1;
            }
        }
        assert!(inside as f64 / trials as f64 >= 0.99);
    }

    #[test]
    fn self_detection_and_false_alarm() {
        let pn = default_pn(15).unwrap();
        for snr in [0.0, 3.0, 6.0, 9.0] {
            let l = 1000;
            let mut hits = 0;
            for t in 0..500u64 {
                let chips = pn.client_chips(t as u32, l).unwrap();
                let p = random_params(l, t * 31 + 5);
                let wm = embed(&p, &chips, snr, l).unwrap();
                if detect(&wm.params, &chips, l, snr, 0.5).unwrap() == Decision::Detected {
                    hits += 1;
                }
            }
            assert!(hits as f64 / 500.0 >= 0.93, "snr {snr}: {hits}");
        }
    }

    #[test]
    fn disguise_noise_shifts_variance_not_mean() {
        // copied vector plus disguise noise at the watermark power
        let pn = default_pn(15).unwrap();
        let l = 5000;
        let chips = pn.client_chips(0, l).unwrap();
        let mut detected = 0;
        let mut stat_sum = 0.0;
        let mut alpha_sum = 0.0;
        let trials = 300;
        for t in 0..trials {
            let p = random_params(l, 9000 + t);
            let wm = embed(&p, &chips, 6.0, l).unwrap();
            let noise = random_params(l, 19_000 + t).scale(wm.alpha).unwrap();
            let copied = wm.params.add(&noise).unwrap();
            let c = correlate(&copied, &chips, l).unwrap();
            stat_sum += c.statistic;
            alpha_sum += wm.alpha;
            if decide(c.statistic, c.received_power, l, 6.0, 0.5) == Decision::Detected {
                detected += 1;
            }
        }
        assert!((stat_sum / alpha_sum - 1.0).abs() < 0.02);
        assert_eq!(detected, trials);
    }

    #[test]
    fn roc_monotone_in_gamma() {
        let rows = roc_curve(&[6.0], &[0.2, 0.5, 0.9], 200, 800, 15, 3).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.windows(2).all(|w| w[0].tpr >= w[1].tpr && w[0].fpr >= w[1].fpr));
        assert!(rows[1].tpr >= 0.99 && rows[1].fpr <= 0.01);
    }
}
