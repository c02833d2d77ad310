//! Waveform-level Monte Carlo for one scalar channel: a rectangular linear
//! chirp, delayed and buried in complex Gaussian noise, then matched
//! filtered. Used to check the range-error variance law and the Marcum-Q
//! detection model empirically.
//!
//! SNR here is the integrated matched-filter SNR `A² E_s / sigma²`, which is
//! the quantity the link budget assigns to each beam.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Domain};
use crate::sensing::{detection_probability, detection_threshold, SensingConfig};

pub const MIN_TRIALS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PulseConfig {
    pub sample_rate: f64,
    /// Observation window in seconds.
    pub window: f64,
    pub pulse_duration: f64,
    pub chirp_span: f64,
    pub oversampling: usize,
    /// Complex noise variance per sample.
    pub noise_var: f64,
    /// Delay used by the Monte Carlo experiments, in samples.
    pub probe_delay_samples: f64,
}

impl Default for PulseConfig {
    fn default() -> Self {
        PulseConfig {
            sample_rate: 2e9,
            window: 128e-9,
            pulse_duration: 32e-9,
            chirp_span: 1e9,
            oversampling: 8,
            noise_var: 1.0,
            probe_delay_samples: 60.3,
        }
    }
}

impl PulseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.chirp_span > 0.0 && self.noise_var > 0.0) {
            return Err(Error::Config(
                "sample_rate, chirp_span and noise_var must be positive".into(),
            ));
        }
        if self.sample_rate < 2.0 * self.chirp_span {
            return Err(Error::Config(
                "sample_rate must be at least twice the chirp span".into(),
            ));
        }
        if self.oversampling == 0 {
            return Err(Error::Config("oversampling must be positive".into()));
        }
        if self.pulse_samples() == 0 || self.pulse_samples() >= self.window_samples() {
            return Err(Error::Config(
                "pulse must be non-empty and shorter than the window".into(),
            ));
        }
        Ok(())
    }

    pub fn ts(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn window_samples(&self) -> usize {
        (self.window * self.sample_rate).round() as usize
    }

    pub fn pulse_samples(&self) -> usize {
        (self.pulse_duration * self.sample_rate).round() as usize
    }

    /// Largest delay whose echo still fits in the window.
    pub fn max_delay(&self) -> f64 {
        (self.window_samples() - self.pulse_samples()) as f64 * self.ts()
    }

    /// Continuous-time pulse: unit-modulus chirp centered at zero frequency.
    pub fn pulse_at(&self, t: f64) -> Complex64 {
        self.pulse_at_sample(t * self.sample_rate)
    }

    /// The pulse at time `x` measured in samples. Positions within 1e-9 of
    /// an integer are snapped so sampling an integer-delayed echo reproduces
    /// the reference exactly.
    pub fn pulse_at_sample(&self, x: f64) -> Complex64 {
        let x = if (x - x.round()).abs() < 1e-9 { x.round() } else { x };
        let np = self.pulse_samples() as f64;
        if !(0.0..np).contains(&x) {
            return Complex64::new(0.0, 0.0);
        }
        let u = (x - 0.5 * np) * self.ts();
        let k = self.chirp_span / (np * self.ts());
        Complex64::from_polar(1.0, PI * k * u * u)
    }

    /// The pulse sampled at `n * Ts` over the whole window.
    pub fn reference(&self) -> Vec<Complex64> {
        (0..self.window_samples())
            .map(|n| self.pulse_at_sample(n as f64))
            .collect()
    }

    pub fn energy(&self) -> f64 {
        self.reference().iter().map(|s| s.norm_sqr()).sum()
    }

    /// RMS bandwidth of the sampled pulse spectrum, in Hz.
    pub fn rms_bandwidth(&self) -> f64 {
        let n = self.window_samples();
        let mut s = self.reference();
        FftPlanner::new().plan_fft_forward(n).process(&mut s);
        let freq = |k: usize| {
            let k = if k < n.div_ceil(2) { k as f64 } else { k as f64 - n as f64 };
            k * self.sample_rate / n as f64
        };
        let p: Vec<f64> = s.iter().map(|v| v.norm_sqr()).collect();
        let total: f64 = p.iter().sum();
        let mu: f64 = p.iter().enumerate().map(|(k, v)| freq(k) * v).sum::<f64>() / total;
        let var: f64 = p
            .iter()
            .enumerate()
            .map(|(k, v)| (freq(k) - mu).powi(2) * v)
            .sum::<f64>()
            / total;
        var.sqrt()
    }

    /// Effective bandwidth `2 * rms_bandwidth`, the value of B for which
    /// `c² / (8 pi² gamma B²)` is the exact range CRB of this pulse.
    pub fn effective_bandwidth(&self) -> f64 {
        2.0 * self.rms_bandwidth()
    }
}

/// `rx[n] = A s(n Ts - delay) + z[n]`, `z ~ CN(0, noise_var)`, with `A` set
/// so the matched-filter SNR equals `snr`. `snr = inf` gives the noiseless
/// unit-amplitude echo; `snr = 0` gives pure noise.
pub fn synth_echo(delay: f64, snr: f64, pulse: &PulseConfig, seed: u64) -> Result<Vec<Complex64>> {
    pulse.validate()?;
    if !(delay >= 0.0 && delay <= pulse.max_delay()) {
        return Err(Error::InvalidInput(format!(
            "delay {delay} s outside [0, {}] s",
            pulse.max_delay()
        )));
    }
    if !(snr >= 0.0) {
        return Err(Error::InvalidInput(format!("snr must be non-negative, got {snr}")));
    }
    let n = pulse.window_samples();
    let (amp, sigma) = if snr.is_infinite() {
        (1.0, 0.0)
    } else {
        ((snr * pulse.noise_var / pulse.energy()).sqrt(), (0.5 * pulse.noise_var).sqrt())
    };
    let shift = delay * pulse.sample_rate;
    let mut r = rng::stream(seed, Domain::Waveform, 0);
    Ok((0..n)
        .map(|k| {
            let s = pulse.pulse_at_sample(k as f64 - shift) * amp;
            if sigma == 0.0 {
                s
            } else {
                let re = rng::normal(&mut r);
                let im = rng::normal(&mut r);
                s + Complex64::new(re, im) * sigma
            }
        })
        .collect())
}

/// Matched filter with an oversampled delay grid.
pub struct MatchedFilter {
    pulse: PulseConfig,
    spectrum: Vec<Complex64>,
    energy: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl MatchedFilter {
    pub fn new(pulse: &PulseConfig) -> Result<Self> {
        pulse.validate()?;
        let n = pulse.window_samples();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n * pulse.oversampling);
        let mut spectrum = pulse.reference();
        let energy = spectrum.iter().map(|s| s.norm_sqr()).sum();
        fwd.process(&mut spectrum);
        Ok(MatchedFilter {
            pulse: pulse.clone(),
            spectrum,
            energy,
            fwd,
            inv,
        })
    }

    /// Delay estimate in seconds and the normalized peak statistic
    /// `|corr|² / (noise_var E_s)` at the best grid point.
    pub fn estimate(&self, rx: &[Complex64]) -> Result<(f64, f64)> {
        let n = self.pulse.window_samples();
        if rx.len() != n {
            return Err(Error::Shape {
                expected: (n, 1),
                got: (rx.len(), 1),
            });
        }
        if rx.iter().all(|v| v.norm_sqr() == 0.0) {
            return Err(Error::Degenerate("received sequence is all zeros".into()));
        }
        let osf = self.pulse.oversampling;
        let m = n * osf;
        let mut r = rx.to_vec();
        self.fwd.process(&mut r);
        let mut z = vec![Complex64::new(0.0, 0.0); m];
        let half = n / 2;
        for k in 0..n {
            let v = r[k] * self.spectrum[k].conj();
            if k < half {
                z[k] = v;
            } else if k > half || n % 2 == 1 {
                z[m - n + k] = v;
            } else {
                // split the Nyquist bin so the interpolant stays symmetric
                z[half] = v * 0.5;
                z[m - half] = v * 0.5;
            }
        }
        self.inv.process(&mut z);
        let scale = 1.0 / n as f64;
        let power: Vec<f64> = z.iter().map(|v| (v * scale).norm_sqr()).collect();
        let mut best = 0;
        for (k, p) in power.iter().enumerate() {
            if *p > power[best] {
                best = k;
            }
        }
        let y0 = power[(best + m - 1) % m];
        let y1 = power[best];
        let y2 = power[(best + 1) % m];
        let denom = y0 - 2.0 * y1 + y2;
        let frac = if denom < 0.0 { 0.5 * (y0 - y2) / denom } else { 0.0 };
        let delay = (best as f64 + frac) * self.pulse.ts() / osf as f64;
        Ok((delay, y1 / (self.pulse.noise_var * self.energy)))
    }

    /// Normalized statistic at one integer-sample delay. Its noise-only
    /// distribution is unit-mean exponential, and with an echo at exactly
    /// that delay it exceeds `lambda` with probability
    /// `Q1(sqrt(2 snr), sqrt(2 lambda))`.
    pub fn cell_statistic(&self, rx: &[Complex64], delay_samples: usize) -> Result<f64> {
        let n = self.pulse.window_samples();
        if rx.len() != n || delay_samples + self.pulse.pulse_samples() > n {
            return Err(Error::InvalidInput("cell outside the observation window".into()));
        }
        let reference = self.pulse.reference();
        let acc: Complex64 = (0..n - delay_samples)
            .map(|k| rx[k + delay_samples] * reference[k].conj())
            .sum();
        Ok(acc.norm_sqr() / (self.pulse.noise_var * self.energy))
    }
}

pub fn matched_filter_delay(rx: &[Complex64], pulse: &PulseConfig) -> Result<(f64, f64)> {
    MatchedFilter::new(pulse)?.estimate(rx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrbPoint {
    pub snr: f64,
    /// Range CRB with the pulse's effective (RMS) bandwidth, m².
    pub crb: f64,
    /// Range CRB with the occupied chirp span as B, m².
    pub crb_span: f64,
    pub empirical_var: f64,
    pub mean_error: f64,
    /// Range error of the noiseless echo: the deterministic offset from
    /// sampling an off-grid rectangular chirp.
    pub noiseless_error: f64,
    pub ratio: f64,
    pub ratio_span: f64,
    pub unbiased: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrbReport {
    pub trials: usize,
    pub insufficient_samples: bool,
    pub points: Vec<CrbPoint>,
    /// Ratio within [1, 2] at every point with `snr >= 100`.
    pub band_pass: bool,
    /// `var * snr` within ±20% of its value at the first point.
    pub slope_pass: bool,
    pub pass: bool,
}

fn trial_seed(seed: u64, point: usize, trial: usize) -> u64 {
    rng::mix(&[seed, point as u64, trial as u64])
}

/// Empirical range-error variance of the matched filter against the CRB,
/// at a fixed off-grid delay, for each SNR in `snrs`.
pub fn validate_crb(
    snrs: &[f64],
    pulse: &PulseConfig,
    trials: usize,
    cfg: &SensingConfig,
    seed: u64,
) -> Result<CrbReport> {
    let mf = MatchedFilter::new(pulse)?;
    let delay = pulse.probe_delay_samples * pulse.ts();
    let b_eff = pulse.effective_bandwidth();
    let noiseless_error = {
        let rx = synth_echo(delay, f64::INFINITY, pulse, 0)?;
        0.5 * cfg.c * (mf.estimate(&rx)?.0 - delay)
    };
    let mut points = Vec::with_capacity(snrs.len());
    for (p, &snr) in snrs.iter().enumerate() {
        if !(snr > 0.0 && snr.is_finite()) {
            return Err(Error::InvalidInput("CRB validation needs finite positive SNR".into()));
        }
        let errs: Vec<Result<f64>> = par::map_range(trials, |t| {
            let rx = synth_echo(delay, snr, pulse, trial_seed(seed, p, t))?;
            let (est, _) = mf.estimate(&rx)?;
            Ok(0.5 * cfg.c * (est - delay))
        });
        let errs = errs.into_iter().collect::<Result<Vec<f64>>>()?;
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        let var = if errs.len() > 1 {
            errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            f64::NAN
        };
        let k = cfg.c * cfg.c / (8.0 * PI * PI * snr);
        let crb = k / (b_eff * b_eff);
        let crb_span = k / (pulse.chirp_span * pulse.chirp_span);
        points.push(CrbPoint {
            snr,
            crb,
            crb_span,
            empirical_var: var,
            mean_error: mean,
            noiseless_error,
            ratio: var / crb,
            ratio_span: var / crb_span,
            unbiased: (mean - noiseless_error).abs() <= 3.0 * (var / n).sqrt(),
        });
    }
    let insufficient_samples = trials < MIN_TRIALS;
    let band_pass = points
        .iter()
        .filter(|p| p.snr >= 100.0)
        .all(|p| (1.0..=2.0).contains(&p.ratio));
    let slope_pass = match points.first() {
        Some(first) => points.iter().all(|p| {
            let r = (p.empirical_var * p.snr) / (first.empirical_var * first.snr);
            (0.8..=1.2).contains(&r)
        }),
        None => false,
    };
    Ok(CrbReport {
        trials,
        insufficient_samples,
        pass: !insufficient_samples && band_pass && slope_pass,
        points,
        band_pass,
        slope_pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionPoint {
    pub snr: f64,
    pub detp_pred: f64,
    pub detp_emp: f64,
    pub sigma: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub trials: usize,
    pub p_fa: f64,
    pub lambda: f64,
    pub insufficient_samples: bool,
    pub points: Vec<DetectionPoint>,
    pub pass: bool,
}

/// Empirical exceedance rate of the cell statistic at the true (integer)
/// delay against `Q1(sqrt(2 snr), sqrt(2 lambda))`, within 4 binomial sigma.
pub fn validate_detection(
    snrs: &[f64],
    p_fa: f64,
    trials: usize,
    pulse: &PulseConfig,
    seed: u64,
) -> Result<DetectionReport> {
    let lambda = detection_threshold(p_fa)?;
    let mf = MatchedFilter::new(pulse)?;
    let cell = pulse.probe_delay_samples.round() as usize;
    let delay = cell as f64 * pulse.ts();
    let mut points = Vec::with_capacity(snrs.len());
    for (p, &snr) in snrs.iter().enumerate() {
        if !(snr >= 0.0 && snr.is_finite()) {
            return Err(Error::InvalidInput("detection validation needs finite SNR".into()));
        }
        let hits: Vec<Result<bool>> = par::map_range(trials, |t| {
            let rx = synth_echo(delay, snr, pulse, trial_seed(seed ^ 0xd7, p, t))?;
            Ok(mf.cell_statistic(&rx, cell)? > lambda)
        });
        let hits = hits.into_iter().collect::<Result<Vec<bool>>>()?;
        let emp = hits.iter().filter(|h| **h).count() as f64 / trials.max(1) as f64;
        let pred = detection_probability(snr, lambda)?;
        let sigma = (pred * (1.0 - pred) / trials.max(1) as f64).sqrt();
        points.push(DetectionPoint {
            snr,
            detp_pred: pred,
            detp_emp: emp,
            sigma,
            pass: (emp - pred).abs() <= 4.0 * sigma.max(1.0 / trials.max(1) as f64),
        });
    }
    let insufficient_samples = trials < MIN_TRIALS;
    Ok(DetectionReport {
        trials,
        p_fa,
        lambda,
        insufficient_samples,
        pass: !insufficient_samples && points.iter().all(|p| p.pass),
        points,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

/// One CSV table `snr,crb,empirical_var,ratio,detp_pred,detp_emp` covering
/// the SNR points of both reports; columns a report does not cover are left
/// empty.
pub fn reports_csv(crb: &CrbReport, det: &DetectionReport) -> String {
    let mut snrs: Vec<f64> = crb
        .points
        .iter()
        .map(|p| p.snr)
        .chain(det.points.iter().map(|p| p.snr))
        .collect();
    snrs.sort_by(|a, b| a.total_cmp(b));
    snrs.dedup();
    let mut out = String::from("snr,crb,empirical_var,ratio,detp_pred,detp_emp\n");
    for s in snrs {
        let c = crb.points.iter().find(|p| p.snr == s);
        let d = det.points.iter().find(|p| p.snr == s);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            cell(Some(s)),
            cell(c.map(|p| p.crb)),
            cell(c.map(|p| p.empirical_var)),
            cell(c.map(|p| p.ratio)),
            cell(d.map(|p| p.detp_pred)),
            cell(d.map(|p| p.detp_emp)),
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub crb: CrbReport,
    pub detection: DetectionReport,
    pub pass: bool,
}
