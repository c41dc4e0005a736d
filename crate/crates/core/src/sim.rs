//! Parametric OTDR trace synthesis and noise injection.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::snr_db;

pub const SPEED_OF_LIGHT_M_PER_S: f64 = 299_792_458.0;
/// Converts a Gaussian FWHM to its standard deviation.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub fiber_length_km: f64,
    pub attenuation_db_per_km: f64,
    pub pulse_width_ns: f64,
    pub sampling_period_ns: f64,
    pub group_index: f64,
    pub launch_power_dbm: f64,
    /// Absolute level of the signal beyond a fiber cut.
    pub noise_floor_db: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            fiber_length_km: 2.0,
            attenuation_db_per_km: 0.3,
            pulse_width_ns: 50.0,
            sampling_period_ns: 8.0,
            group_index: 1.468,
            launch_power_dbm: 12.0,
            noise_floor_db: -48.0,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn sample_spacing_m(&self) -> f64 {
        SPEED_OF_LIGHT_M_PER_S * self.sampling_period_ns * 1e-9 / (2.0 * self.group_index)
    }

    /// Spatial extent of the probe pulse.
    pub fn pulse_width_m(&self) -> f64 {
        SPEED_OF_LIGHT_M_PER_S * self.pulse_width_ns * 1e-9 / (2.0 * self.group_index)
    }

    /// Standard deviation of a reflection peak, in samples.
    pub fn peak_sigma_samples(&self) -> f64 {
        self.pulse_width_m() / FWHM_PER_SIGMA / self.sample_spacing_m()
    }

    pub fn n_samples(&self) -> usize {
        (self.fiber_length_km * 1000.0 / self.sample_spacing_m()).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fiber_length_km", self.fiber_length_km),
            ("attenuation_db_per_km", self.attenuation_db_per_km),
            ("pulse_width_ns", self.pulse_width_ns),
            ("sampling_period_ns", self.sampling_period_ns),
            ("group_index", self.group_index),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.pulse_width_ns < self.sampling_period_ns {
            return Err(invalid("pulse width must span at least one sampling period"));
        }
        if !self.launch_power_dbm.is_finite() || !self.noise_floor_db.is_finite() {
            return Err(invalid("power levels must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventType {
    Reflective,
    NonReflective,
    Merged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub position_m: f64,
    pub event_type: EventType,
    pub loss_db: f64,
    pub reflect_height_db: f64,
    pub terminates_fiber: bool,
}

impl EventSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.loss_db >= 0.0
            && self.reflect_height_db >= 0.0
            && self.position_m >= 0.0
            && match self.event_type {
                EventType::Reflective => self.reflect_height_db > 0.0,
                EventType::NonReflective => self.reflect_height_db == 0.0,
                EventType::Merged => self.loss_db > 0.0 && self.reflect_height_db > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("inconsistent event {self:?}")))
        }
    }

    pub fn sample_index(&self, spacing_m: f64) -> usize {
        (self.position_m / spacing_m).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub samples: Vec<f64>,
    pub sample_spacing_m: f64,
    pub events: Vec<EventSpec>,
    pub is_clean: bool,
    pub snr_db: Option<f64>,
}

/// Renders the backscatter profile of a fiber with the given events.
pub fn synthesize_clean_trace(cfg: &SimConfig, events: &[EventSpec]) -> Result<Trace> {
    cfg.validate()?;
    let dz = cfg.sample_spacing_m();
    let n = cfg.n_samples();
    let length_m = cfg.fiber_length_km * 1000.0;
    let min_gap = cfg.pulse_width_m();
    for (i, e) in events.iter().enumerate() {
        e.validate()?;
        if e.position_m > length_m {
            return Err(invalid(format!("event at {} m lies beyond the fiber", e.position_m)));
        }
        if e.terminates_fiber && i + 1 != events.len() {
            return Err(invalid("only the last event may terminate the fiber"));
        }
        if let Some(next) = events.get(i + 1) {
            if next.position_m < e.position_m {
                return Err(invalid("events must be sorted by position"));
            }
            if next.position_m - e.position_m < min_gap {
                return Err(invalid(format!(
                    "events at {} m and {} m are closer than one pulse width",
                    e.position_m, next.position_m
                )));
            }
        }
    }

    let mut db: Vec<f64> = (0..n)
        .map(|i| cfg.launch_power_dbm - 2.0 * cfg.attenuation_db_per_km * (i as f64 * dz) / 1000.0)
        .collect();
    let sigma = cfg.peak_sigma_samples();
    let mut peaks = vec![0.0; n];
    let mut cut = None;
    for e in events {
        let p = e.sample_index(dz).min(n - 1);
        if e.reflect_height_db > 0.0 {
            // Fresnel peak sits on the level just ahead of the event
            let base = 10f64.powf(db[p.saturating_sub(1)] / 10.0);
            let amp = base * (10f64.powf(e.reflect_height_db / 10.0) - 1.0);
            let reach = (8.0 * sigma).ceil() as usize;
            for (i, v) in peaks.iter_mut().enumerate().take((p + reach + 1).min(n)).skip(p.saturating_sub(reach)) {
                let d = (i as f64 - p as f64) / sigma;
                *v += amp * (-0.5 * d * d).exp();
            }
        }
        if e.terminates_fiber {
            cut = Some(p);
        } else {
            for v in &mut db[p..] {
                *v -= 2.0 * e.loss_db;
            }
        }
    }
    let floor = 10f64.powf(cfg.noise_floor_db / 10.0);
    let mut lin: Vec<f64> = db.iter().map(|v| 10f64.powf(v / 10.0)).collect();
    if let Some(p) = cut {
        for v in &mut lin[p + 1..] {
            *v = floor;
        }
    }
    for (v, pk) in lin.iter_mut().zip(&peaks) {
        *v += pk;
    }
    let max = lin.iter().copied().fold(f64::MIN, f64::max);
    for v in &mut lin {
        *v /= max;
    }
    Ok(Trace {
        samples: lin,
        sample_spacing_m: dz,
        events: events.to_vec(),
        is_clean: true,
        snr_db: None,
    })
}

/// Adds white Gaussian noise scaled so the whole-trace SNR equals the target.
pub fn inject_noise(trace: &Trace, target_snr_db: f64, seed: u64) -> Result<Trace> {
    if !trace.is_clean {
        return Err(invalid("noise can only be added to a clean trace"));
    }
    if !target_snr_db.is_finite() {
        return Err(invalid("target SNR must be finite"));
    }
    let energy: f64 = trace.samples.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(invalid("all-zero trace has no defined SNR"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise: Vec<f64> = (0..trace.samples.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let realized: f64 = noise.iter().map(|v| v * v).sum();
    let wanted = energy / 10f64.powf(target_snr_db / 10.0);
    let k = (wanted / realized).sqrt();
    let samples: Vec<f64> = trace
        .samples
        .iter()
        .zip(&mut noise)
        .map(|(x, w)| x + k * *w)
        .collect();
    let snr = snr_db(&trace.samples, &samples)?;
    Ok(Trace {
        samples,
        snr_db: Some(snr),
        is_clean: false,
        ..trace.clone()
    })
}

/// Distribution of randomly generated fiber layouts: one terminating cut
/// preceded by a few non-reflective or merged events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    /// Cut position as a fraction of the fiber length.
    pub cut_fraction: (f64, f64),
    /// Inclusive range of events ahead of the cut.
    pub mid_events: (usize, usize),
    /// Minimum spacing between events, in samples.
    pub min_gap_samples: usize,
    /// Events are kept at least this many samples from the launch end.
    pub start_margin_samples: usize,
    pub loss_db: (f64, f64),
    pub reflective_height_db: (f64, f64),
    pub merged_height_db: (f64, f64),
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            cut_fraction: (0.5, 0.95),
            mid_events: (1, 3),
            min_gap_samples: 200,
            start_margin_samples: 50,
            loss_db: (0.5, 5.0),
            reflective_height_db: (6.0, 20.0),
            merged_height_db: (3.0, 12.0),
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("cut_fraction", self.cut_fraction),
            ("loss_db", self.loss_db),
            ("reflective_height_db", self.reflective_height_db),
            ("merged_height_db", self.merged_height_db),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi && lo >= 0.0 && hi.is_finite()) {
                return Err(invalid(format!("{name} range ({lo}, {hi}) is empty or negative")));
            }
        }
        if self.cut_fraction.1 > 1.0 || self.reflective_height_db.0 <= 0.0 || self.merged_height_db.0 <= 0.0 {
            return Err(invalid("cut must lie on the fiber and peaks must be positive"));
        }
        if self.mid_events.0 > self.mid_events.1 {
            return Err(invalid("mid_events range is empty"));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws a random event layout. Mid events that cannot be placed after a
/// bounded number of attempts are dropped.
pub fn random_layout<R: Rng + ?Sized>(cfg: &SimConfig, layout: &LayoutConfig, rng: &mut R) -> Vec<EventSpec> {
    let dz = cfg.sample_spacing_m();
    let n = cfg.n_samples();
    let cut = ((uniform(rng, layout.cut_fraction) * n as f64) as usize).min(n - 1);
    let wanted = rng.random_range(layout.mid_events.0..=layout.mid_events.1);
    let lo = layout.start_margin_samples;
    let mut mids: Vec<usize> = Vec::new();
    let mut events = Vec::new();
    for _ in 0..50 {
        if mids.len() >= wanted || cut < lo + layout.start_margin_samples + 1 {
            break;
        }
        let p = rng.random_range(lo..cut - layout.start_margin_samples);
        let far = |q: usize| p.abs_diff(q) >= layout.min_gap_samples;
        if !(mids.iter().all(|&q| far(q)) && far(cut)) {
            continue;
        }
        mids.push(p);
        let merged = rng.random_bool(0.5);
        events.push(EventSpec {
            position_m: p as f64 * dz,
            event_type: if merged { EventType::Merged } else { EventType::NonReflective },
            loss_db: uniform(rng, layout.loss_db),
            reflect_height_db: if merged { uniform(rng, layout.merged_height_db) } else { 0.0 },
            terminates_fiber: false,
        });
    }
    events.push(EventSpec {
        position_m: cut as f64 * dz,
        event_type: EventType::Reflective,
        loss_db: 0.0,
        reflect_height_db: uniform(rng, layout.reflective_height_db),
        terminates_fiber: true,
    });
    events.sort_by(|a, b| a.position_m.total_cmp(&b.position_m));
    events
}
