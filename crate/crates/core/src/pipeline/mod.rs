//! Run configuration, stage orchestration and evaluation reports.
//!
//! Every stage reads and writes artifacts in the run's output directory.
//! Artifacts carry the configuration hash, and loading one produced under a
//! different configuration is refused.

mod config;
mod report;
mod traceio;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

pub use config::{
    BaselineSection, DcaeSection, EvalSection, FaultNetSection, RunConfig, Stage, SweepSection, TrainSection,
};
pub use report::{
    emit_report, write_confusion_csv, write_denoising_csv, write_detection_csv, write_sweep_csv, ConfusionEntry,
    DenoiseRow, DetectionRow, EvalReport, Provenance, ResolutionCheck, SweepReport, SweepRow,
};
pub use traceio::{read_trace_csv, write_trace_csv};

use crate::baselines::reference::{ReferenceDenoiser, ReferenceKind};
use crate::baselines::{tune_baseline, ClassicalMethod, TunedBaselines, TunedEntry};
use crate::checkpoint::{read_checkpoint, save_checkpoint, CheckpointMeta};
use crate::dataset::{
    build_datasets, corrupted_inputs, read_dataset, write_dataset, Cause, Dataset, DatasetConfig, EventClass,
    LabeledSequence,
};
use crate::dcae::{Dcae, DcaeArch};
use crate::denoiser::{predict, DenoiseObjective, Denoiser, PairSet, Windows};
use crate::error::{invalid, io_err, CoreError, Result};
use crate::faultnet::{FaultLabel, FaultNet, FaultNetArch, FaultObjective, FaultPrediction};
use crate::inference::{analyze_trace, denoise_trace, WindowReport};
use crate::metrics::{
    classification_report, denoise_metrics, fwhm_resolution, localization_error_m, reconstruction_mse,
    DenoiseSummary, Summary,
};
use crate::sim::{synthesize_clean_trace, EventSpec, EventType, Trace};
use crate::train::{fit, Network, TrainLog, TrainOpts};

const NORMALIZATION: &str = "each window divided by the maximum of its clean samples";

/// Which fault network: trained on zero-corrupted clean windows (used after
/// the autoencoder) or directly on noisy windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultVariant {
    Clean,
    Noisy,
}

impl FaultVariant {
    pub const ALL: [FaultVariant; 2] = [Self::Clean, Self::Noisy];

    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Noisy => "noisy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Name of the detection pipeline that uses this network.
    pub fn pipeline(self) -> &'static str {
        match self {
            Self::Clean => "combined",
            Self::Noisy => "noisy_trained",
        }
    }
}

/// A denoising method as named in reports and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dcae,
    Classical(ClassicalMethod),
    Reference(ReferenceKind),
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Dcae,
        Method::Classical(ClassicalMethod::Butterworth),
        Method::Classical(ClassicalMethod::Wavelet),
        Method::Reference(ReferenceKind::Dae),
        Method::Reference(ReferenceKind::Cnn),
        Method::Reference(ReferenceKind::Lstm),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dcae => "dcae",
            Method::Classical(m) => m.name(),
            Method::Reference(k) => k.name(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.otdrds")
    }

    pub fn dcae(&self) -> PathBuf {
        self.dir.join("dcae.otdrck")
    }

    pub fn faultnet(&self, v: FaultVariant) -> PathBuf {
        self.dir.join(format!("faultnet_{}.otdrck", v.name()))
    }

    pub fn reference(&self, k: ReferenceKind) -> PathBuf {
        self.dir.join(format!("reference_{}.otdrck", k.name()))
    }

    pub fn baselines(&self) -> PathBuf {
        self.dir.join("baselines.json")
    }

    pub fn sweep(&self) -> PathBuf {
        self.dir.join("sweep.json")
    }

    pub fn eval(&self) -> PathBuf {
        self.dir.join("eval.json")
    }
}

/// Restricts which buckets and methods `eval` reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalFilter {
    pub snr: Option<Vec<f64>>,
    pub methods: Option<Vec<Method>>,
}

fn check_hash(what: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(CoreError::Config(format!(
            "{} was produced under configuration {found}, current configuration is {expected}",
            what.display()
        )));
    }
    Ok(())
}

fn flatten(seqs: &[&LabeledSequence], f: fn(&LabeledSequence) -> &[f64]) -> Vec<f64> {
    seqs.iter().flat_map(|s| f(s).iter().copied()).collect()
}

fn noisy_of(s: &LabeledSequence) -> &[f64] {
    &s.noisy
}

fn clean_of(s: &LabeledSequence) -> &[f64] {
    &s.clean
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).map_err(io_err(path))
}

fn clamp_unit(v: &mut [f64]) {
    for x in v {
        *x = x.clamp(0.0, 1.0);
    }
}

struct Models {
    dcae: Dcae,
    references: Vec<(ReferenceKind, ReferenceDenoiser)>,
    tuned: Option<TunedBaselines>,
}

/// One configured run: its configuration, hash and output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub hash: String,
    pub paths: Artifacts,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash()?;
        let paths = Artifacts {
            dir: cfg.out_dir.clone(),
        };
        Ok(Run { cfg, hash, paths })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            seed: self.cfg.seed,
            config_hash: self.hash.clone(),
        }
    }

    fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.paths.dir).map_err(io_err(&self.paths.dir))
    }

    fn checkpoint_meta(&self, model: &str, arch: serde_json::Value, opts: &TrainOpts, log: &TrainLog) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            format_version: 0,
            model: model.to_string(),
            arch,
            config_hash: self.hash.clone(),
            seed: opts.seed,
            normalization: NORMALIZATION.to_string(),
            training: serde_json::json!({ "opts": opts, "log": log }),
            metrics: serde_json::json!({ "best_val_loss": log.best_val_loss, "best_epoch": log.best_epoch }),
            blocks: Vec::new(),
        })
    }

    /// Simulates traces and writes the labeled dataset.
    pub fn generate(&self) -> Result<Dataset> {
        self.ensure_dir()?;
        let ds = build_datasets(
            &self.cfg.sim,
            &self.cfg.layout,
            &self.cfg.dataset,
            self.cfg.stage_seed(Stage::Dataset),
            &self.hash,
        )?;
        write_dataset(&self.paths.dataset(), &ds)?;
        Ok(ds)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let path = self.paths.dataset();
        let ds = read_dataset(&path)?;
        check_hash(&path, &ds.meta.config_hash, &self.hash)?;
        Ok(ds)
    }

    fn train_denoiser<M: Denoiser>(&self, model: &mut M, ds: &Dataset, opts: &TrainOpts) -> Result<TrainLog> {
        let len = ds.meta.window_len;
        let train: Vec<&LabeledSequence> = ds.train.iter().collect();
        let val: Vec<&LabeledSequence> = ds.val.iter().collect();
        let (tn, tc) = (flatten(&train, noisy_of), flatten(&train, clean_of));
        let (vn, vc) = (flatten(&val, noisy_of), flatten(&val, clean_of));
        let objective = DenoiseObjective {
            train: PairSet::new(&tn, &tc, len)?,
            val: PairSet::new(&vn, &vc, len)?,
        };
        fit(model, &objective, opts)
    }

    pub fn train_dcae(&self) -> Result<TrainLog> {
        let ds = self.load_dataset()?;
        let seed = self.cfg.stage_seed(Stage::Dcae);
        let mut model = Dcae::new(self.cfg.dcae.arch.clone(), seed)?;
        let opts = self.cfg.dcae.train.opts(seed);
        let log = self.train_denoiser(&mut model, &ds, &opts)?;
        let meta = self.checkpoint_meta("dcae", serde_json::to_value(model.arch())?, &opts, &log)?;
        save_checkpoint(&self.paths.dcae(), &model, &meta)?;
        Ok(log)
    }

    pub fn train_faultnet(&self, variant: FaultVariant) -> Result<TrainLog> {
        let ds = self.load_dataset()?;
        let sec = &self.cfg.faultnet;
        let len = ds.meta.window_len;
        let stage = match variant {
            FaultVariant::Clean => Stage::FaultClean,
            FaultVariant::Noisy => Stage::FaultNoisy,
        };
        let seed = self.cfg.stage_seed(stage);
        let mask = self.cfg.dataset.mask_prob_range;
        let train_y: Vec<FaultLabel> = ds.train.iter().map(FaultLabel::from).collect();
        let val_y: Vec<FaultLabel> = ds.val.iter().map(FaultLabel::from).collect();
        let train: Vec<&LabeledSequence> = ds.train.iter().collect();
        let val: Vec<&LabeledSequence> = ds.val.iter().collect();
        let (train_x, val_x, remask) = match variant {
            FaultVariant::Clean if sec.remask => (flatten(&train, clean_of), corrupted_inputs(&ds.val, mask, seed ^ 1)?, Some(mask)),
            FaultVariant::Clean => (corrupted_inputs(&ds.train, mask, seed)?, corrupted_inputs(&ds.val, mask, seed ^ 1)?, None),
            FaultVariant::Noisy => (flatten(&train, noisy_of), flatten(&val, noisy_of), None),
        };
        let objective = FaultObjective {
            train_x: Windows::new(&train_x, len)?,
            train_y: &train_y,
            val_x: Windows::new(&val_x, len)?,
            val_y: &val_y,
            weights: sec.loss_weights,
            remask,
        };
        let mut model = FaultNet::new(sec.arch.clone(), seed)?;
        let opts = sec.train.opts(seed);
        let log = fit(&mut model, &objective, &opts)?;
        let name = format!("faultnet_{}", variant.name());
        let meta = self.checkpoint_meta(&name, serde_json::to_value(model.arch())?, &opts, &log)?;
        save_checkpoint(&self.paths.faultnet(variant), &model, &meta)?;
        Ok(log)
    }

    /// Tunes the classical filters per bucket on the validation split.
    pub fn tune_classical(&self, methods: &[ClassicalMethod]) -> Result<TunedBaselines> {
        let ds = self.load_dataset()?;
        let grid = self.cfg.tune_grid();
        let by_bucket = group_by_bucket(&ds, &ds.val);
        let mut entries = Vec::new();
        for &method in methods {
            for (b, seqs) in by_bucket.iter().enumerate() {
                if seqs.is_empty() {
                    continue;
                }
                let noisy: Vec<&[f64]> = seqs.iter().map(|s| s.noisy.as_slice()).collect();
                let clean: Vec<&[f64]> = seqs.iter().map(|s| s.clean.as_slice()).collect();
                let out = tune_baseline(method, &noisy, &clean, &grid)?;
                entries.push(TunedEntry {
                    method,
                    snr_bucket: ds.meta.snr_grid[b],
                    params: out.params,
                    validation_rmse: out.mean_rmse,
                });
            }
        }
        Ok(TunedBaselines {
            config_hash: self.hash.clone(),
            entries,
        })
    }

    pub fn train_reference(&self, kind: ReferenceKind) -> Result<TrainLog> {
        let ds = self.load_dataset()?;
        let idx = ReferenceKind::ALL.iter().position(|k| *k == kind).expect("listed");
        let seed = self.cfg.stage_seed(Stage::Reference(idx));
        let mut model = ReferenceDenoiser::new(kind, ds.meta.window_len, seed)?;
        let opts = self.cfg.baselines.reference_train.opts(seed);
        let log = self.train_denoiser(&mut model, &ds, &opts)?;
        let arch = serde_json::json!({ "kind": kind.name(), "window_len": ds.meta.window_len });
        let meta = self.checkpoint_meta(kind.name(), arch, &opts, &log)?;
        save_checkpoint(&self.paths.reference(kind), &model, &meta)?;
        Ok(log)
    }

    /// Tunes the classical filters and trains the selected reference
    /// denoisers; all of them when `only` is empty.
    pub fn train_baselines(&self, only: &[Method]) -> Result<()> {
        self.ensure_dir()?;
        let all = only.is_empty();
        let classical: Vec<ClassicalMethod> = [ClassicalMethod::Butterworth, ClassicalMethod::Wavelet]
            .into_iter()
            .filter(|m| all || only.contains(&Method::Classical(*m)))
            .collect();
        if !classical.is_empty() {
            let mut tuned = self.tune_classical(&classical)?;
            if !all && self.paths.baselines().exists() {
                let old = self.load_tuned()?;
                tuned
                    .entries
                    .extend(old.entries.into_iter().filter(|e| !classical.contains(&e.method)));
            }
            write_json(&self.paths.baselines(), &tuned)?;
        }
        for kind in ReferenceKind::ALL {
            if all || only.contains(&Method::Reference(kind)) {
                self.train_reference(kind)?;
            }
        }
        Ok(())
    }

    pub fn load_tuned(&self) -> Result<TunedBaselines> {
        let path = self.paths.baselines();
        let bytes = crate::dataset::read_all(&path)?;
        let tuned: TunedBaselines = serde_json::from_slice(&bytes)?;
        check_hash(&path, &tuned.config_hash, &self.hash)?;
        Ok(tuned)
    }

    fn restore<M: Network>(&self, path: &Path, mut model: M) -> Result<M> {
        let ck = read_checkpoint(path)?;
        check_hash(path, &ck.meta.config_hash, &self.hash)?;
        ck.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn load_dcae(&self) -> Result<Dcae> {
        let path = self.paths.dcae();
        let arch: DcaeArch = serde_json::from_value(read_checkpoint(&path)?.meta.arch)?;
        self.restore(&path, Dcae::new(arch, 0)?)
    }

    pub fn load_faultnet(&self, variant: FaultVariant) -> Result<FaultNet> {
        let path = self.paths.faultnet(variant);
        let arch: FaultNetArch = serde_json::from_value(read_checkpoint(&path)?.meta.arch)?;
        self.restore(&path, FaultNet::new(arch, 0)?)
    }

    pub fn load_reference(&self, kind: ReferenceKind) -> Result<ReferenceDenoiser> {
        let model = ReferenceDenoiser::new(kind, self.cfg.dataset.window_len, 0)?;
        self.restore(&self.paths.reference(kind), model)
    }

    /// Denoises test windows with `method`; outputs are clamped to `[0, 1]`.
    fn denoise_set(
        &self,
        method: Method,
        seqs: &[&LabeledSequence],
        bucket: f64,
        models: &Models,
    ) -> Result<Vec<f64>> {
        let len = models.dcae.arch().input_len;
        let noisy = flatten(seqs, noisy_of);
        let mut out = match method {
            Method::Dcae => predict(&models.dcae, Windows::new(&noisy, len)?)?,
            Method::Reference(k) => {
                let (_, m) = models.references.iter().find(|(rk, _)| *rk == k).expect("loaded up front");
                predict(m, Windows::new(&noisy, len)?)?
            }
            Method::Classical(m) => {
                let tuned = models.tuned.as_ref().ok_or_else(|| invalid("classical baselines have not been tuned"))?;
                let entry = tuned.get(m, bucket).ok_or_else(|| {
                    CoreError::Config(format!("no tuned {} parameters for the {bucket} dB bucket", m.name()))
                })?;
                let mut v = Vec::with_capacity(noisy.len());
                for s in seqs {
                    v.extend(entry.params.apply(&s.noisy)?);
                }
                v
            }
        };
        clamp_unit(&mut out);
        Ok(out)
    }

    /// Produces the full evaluation report and writes its JSON and CSV forms.
    pub fn evaluate(&self, filter: &EvalFilter) -> Result<EvalReport> {
        let ds = self.load_dataset()?;
        let len = ds.meta.window_len;
        let grid = &ds.meta.snr_grid;
        let selected: Vec<usize> = match &filter.snr {
            None => (0..grid.len()).collect(),
            Some(list) => list
                .iter()
                .map(|s| {
                    grid.iter()
                        .position(|g| (g - s).abs() < 1e-9)
                        .ok_or_else(|| invalid(format!("{s} dB is not on the SNR grid {grid:?}")))
                })
                .collect::<Result<_>>()?,
        };
        let methods = filter.methods.clone().unwrap_or_else(|| Method::ALL.to_vec());
        let by_bucket = group_by_bucket(&ds, &ds.test);
        let gaps: Vec<f64> = selected.iter().filter(|&&b| by_bucket[b].is_empty()).map(|&b| grid[b]).collect();

        let needs_tuned = methods.iter().any(|m| matches!(m, Method::Classical(_)));
        let mut references = Vec::new();
        for m in &methods {
            if let Method::Reference(k) = *m {
                references.push((k, self.load_reference(k)?));
            }
        }
        let models = Models {
            dcae: self.load_dcae()?,
            references,
            tuned: if needs_tuned { Some(self.load_tuned()?) } else { None },
        };
        let dcae = &models.dcae;
        let fault_clean = self.load_faultnet(FaultVariant::Clean)?;
        let fault_noisy = self.load_faultnet(FaultVariant::Noisy)?;
        let prov = self.provenance();

        let mut denoising = Vec::new();
        let mut detection = Vec::new();
        let mut confusion = Vec::new();
        for &b in &selected {
            let seqs = &by_bucket[b];
            if seqs.is_empty() {
                continue;
            }
            let snr = grid[b];
            for &m in &methods {
                let den = self.denoise_set(m, seqs, snr, &models)?;
                let metrics = seqs
                    .iter()
                    .zip(den.chunks(len))
                    .map(|(s, y)| denoise_metrics(&s.clean, &s.noisy, y))
                    .collect::<Result<Vec<_>>>()?;
                denoising.push(DenoiseRow {
                    snr_bucket: snr,
                    method: m.name().to_string(),
                    provenance: prov.clone(),
                    metrics: DenoiseSummary::of(&metrics),
                });
            }

            let noisy = flatten(seqs, noisy_of);
            let mut den = predict(dcae, Windows::new(&noisy, len)?)?;
            clamp_unit(&mut den);
            for variant in FaultVariant::ALL {
                let (model, inputs) = match variant {
                    FaultVariant::Clean => (&fault_clean, &den),
                    FaultVariant::Noisy => (&fault_noisy, &noisy),
                };
                let preds = model.predict(Windows::new(inputs, len)?)?;
                let (row, entries) = detection_stats(self, seqs, &preds, snr, variant)?;
                detection.push(row);
                if self.cfg.eval.confusion_snr_db.iter().any(|c| (c - snr).abs() < 1e-9) {
                    confusion.extend(entries);
                }
            }
        }

        let resolution = Some(self.resolution_check(dcae)?);
        let sweep = self.load_sweep().ok();
        let report = EvalReport {
            provenance: prov,
            window_len: len,
            snr_grid: grid.clone(),
            gaps,
            denoising,
            detection,
            confusion,
            resolution,
            sweep,
        };
        self.ensure_dir()?;
        emit_report(&self.paths.dir, &report)?;
        Ok(report)
    }

    /// Peak widths of a reflective fixture: clean, noisy and denoised.
    pub fn resolution_check(&self, dcae: &Dcae) -> Result<ResolutionCheck> {
        let sim = &self.cfg.sim;
        let ev = &self.cfg.eval;
        let len = dcae.arch().input_len;
        let spacing = sim.sample_spacing_m();
        let event = EventSpec {
            position_m: 0.5 * sim.fiber_length_km * 1000.0,
            event_type: EventType::Reflective,
            loss_db: 0.0,
            reflect_height_db: ev.resolution_height_db,
            terminates_fiber: true,
        };
        let trace = synthesize_clean_trace(sim, &[event])?;
        let peak = event.sample_index(spacing);
        let start = peak
            .checked_sub(len * 2 / 5)
            .filter(|s| s + len <= trace.samples.len())
            .ok_or_else(|| invalid("resolution fixture does not fit in the trace"))?;
        let raw = &trace.samples[start..start + len];
        let top = raw.iter().copied().fold(f64::MIN, f64::max);
        let clean: Vec<f64> = raw.iter().map(|v| v / top).collect();
        let power = clean.iter().map(|v| v * v).sum::<f64>() / len as f64;
        let sigma = (power / 10f64.powf(ev.resolution_snr_db / 10.0)).sqrt();

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.stage_seed(Stage::Resolution));
        let mut noisy_all = Vec::with_capacity(len * ev.resolution_trials);
        for _ in 0..ev.resolution_trials {
            noisy_all.extend(clean.iter().map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + sigma * z
            }));
        }
        let den = dcae.denoise_windows(&noisy_all)?;
        let width = |x: &[f64]| fwhm_resolution(x, spacing).unwrap_or(f64::NAN);
        Ok(ResolutionCheck {
            snr_db: ev.resolution_snr_db,
            sample_spacing_m: spacing,
            clean_fwhm_m: fwhm_resolution(&clean, spacing)?,
            noisy_fwhm_m: Summary::of(noisy_all.chunks(len).map(width)),
            denoised_fwhm_m: Summary::of(den.chunks(len).map(width)),
            provenance: self.provenance(),
        })
    }

    /// Trains one autoencoder per grid point, varying one axis at a time
    /// around the configured architecture.
    pub fn sweep(&self) -> Result<SweepReport> {
        self.ensure_dir()?;
        let sw = &self.cfg.sweep;
        let base = &self.cfg.dcae.arch;
        let mut points: Vec<(&str, std::result::Result<DcaeArch, String>)> = Vec::new();
        for &d in &sw.depths {
            let arch = DcaeArch::with_depth(d).map(|a| DcaeArch {
                kernel_size: base.kernel_size,
                output_kernel: base.output_kernel,
                input_len: base.input_len,
                ..a
            });
            points.push(("depth", arch.map_err(|e| e.to_string())));
        }
        for &k in &sw.kernel_sizes {
            let arch = DcaeArch {
                kernel_size: k,
                output_kernel: k,
                ..base.clone()
            };
            points.push(("kernel_size", arch.validate().map(|_| arch.clone()).map_err(|e| e.to_string())));
        }
        for &l in &sw.input_lens {
            let arch = DcaeArch {
                input_len: l,
                ..base.clone()
            };
            points.push(("input_len", arch.validate().map(|_| arch.clone()).map_err(|e| e.to_string())));
        }

        let mut datasets: BTreeMap<usize, std::result::Result<Dataset, String>> = BTreeMap::new();
        for (_, arch) in &points {
            if let Ok(a) = arch {
                datasets.entry(a.input_len).or_insert_with(|| {
                    let dc = DatasetConfig {
                        window_len: a.input_len,
                        stride: a.input_len,
                        windows_per_bucket: sw.windows_per_bucket,
                        ..self.cfg.dataset.clone()
                    };
                    build_datasets(&self.cfg.sim, &self.cfg.layout, &dc, self.cfg.stage_seed(Stage::Dataset), &self.hash)
                        .map_err(|e| e.to_string())
                });
            }
        }

        let seed = self.cfg.stage_seed(Stage::Sweep);
        let opts = sw.train.opts(seed);
        let rows = points
            .par_iter()
            .map(|(axis, arch)| {
                let outcome = arch.clone().and_then(|a| {
                    let ds = datasets[&a.input_len].as_ref().map_err(|e| e.clone())?;
                    self.sweep_point(&a, ds, &opts).map_err(|e| e.to_string()).map(|r| (a, r))
                });
                let shown = arch.clone().unwrap_or_else(|_| base.clone());
                match outcome {
                    Ok((a, (mse, epochs))) => SweepRow {
                        axis: axis.to_string(),
                        depth: a.depth(),
                        kernel_size: a.kernel_size,
                        input_len: a.input_len,
                        provenance: self.provenance(),
                        mse: Some(mse),
                        epochs,
                        note: None,
                    },
                    Err(note) => SweepRow {
                        axis: axis.to_string(),
                        depth: shown.depth(),
                        kernel_size: shown.kernel_size,
                        input_len: shown.input_len,
                        provenance: self.provenance(),
                        mse: None,
                        epochs: 0,
                        note: Some(note),
                    },
                }
            })
            .collect::<Vec<_>>();
        let report = SweepReport {
            provenance: self.provenance(),
            rows,
        };
        write_json(&self.paths.sweep(), &report)?;
        write_sweep_csv(&self.paths.dir.join("sweep.csv"), &report)?;
        Ok(report)
    }

    fn sweep_point(&self, arch: &DcaeArch, ds: &Dataset, opts: &TrainOpts) -> Result<(Summary, usize)> {
        let mut model = Dcae::new(arch.clone(), opts.seed)?;
        let log = self.train_denoiser(&mut model, ds, opts)?;
        let test: Vec<&LabeledSequence> = ds.test.iter().collect();
        let den = model.denoise_windows(&flatten(&test, noisy_of))?;
        let errs = test
            .iter()
            .zip(den.chunks(arch.input_len))
            .map(|(s, y)| reconstruction_mse(&s.clean, y))
            .collect::<Result<Vec<_>>>()?;
        Ok((Summary::of(errs), log.epochs.len()))
    }

    pub fn load_sweep(&self) -> Result<SweepReport> {
        let path = self.paths.sweep();
        let report: SweepReport = serde_json::from_slice(&crate::dataset::read_all(&path)?)?;
        check_hash(&path, &report.provenance.config_hash, &self.hash)?;
        Ok(report)
    }

    /// Denoises a trace with the autoencoder or a reference network.
    pub fn denoise_trace_with(&self, method: Method, trace: &Trace, stride: usize) -> Result<Trace> {
        match method {
            Method::Dcae => denoise_trace(&self.load_dcae()?, trace, stride),
            Method::Reference(k) => denoise_trace(&self.load_reference(k)?, trace, stride),
            Method::Classical(m) => Err(invalid(format!(
                "{} is tuned per SNR bucket and cannot denoise a whole trace",
                m.name()
            ))),
        }
    }

    /// Event reports for a trace: the autoencoder followed by the
    /// clean-trained network, or the noisy-trained network alone.
    pub fn analyze(&self, variant: FaultVariant, trace: &Trace) -> Result<Vec<WindowReport>> {
        let fault = self.load_faultnet(variant)?;
        match variant {
            FaultVariant::Clean => analyze_trace(Some(&self.load_dcae()?), &fault, trace),
            FaultVariant::Noisy => analyze_trace(None, &fault, trace),
        }
    }
}

fn group_by_bucket<'a>(ds: &Dataset, seqs: &'a [LabeledSequence]) -> Vec<Vec<&'a LabeledSequence>> {
    let mut out = vec![Vec::new(); ds.meta.snr_grid.len()];
    for s in seqs {
        if let Some(b) = ds.bucket(s) {
            out[b].push(s);
        }
    }
    out
}

fn detection_stats(
    run: &Run,
    seqs: &[&LabeledSequence],
    preds: &[FaultPrediction],
    snr: f64,
    variant: FaultVariant,
) -> Result<(DetectionRow, Vec<ConfusionEntry>)> {
    let spacing = run.cfg.sim.sample_spacing_m();
    let window_len = run.cfg.dataset.window_len;
    let types: Vec<usize> = seqs.iter().map(|s| s.event_type.index()).collect();
    let causes: Vec<usize> = seqs.iter().map(|s| s.cause.index()).collect();
    let pt: Vec<usize> = preds.iter().map(|p| p.event_type().index()).collect();
    let pc: Vec<usize> = preds.iter().map(|p| p.cause().index()).collect();
    let type_report = classification_report(&pt, &types, EventClass::ALL.len())?;
    let cause_report = classification_report(&pc, &causes, Cause::ALL.len())?;
    let loc = Summary::of(
        seqs.iter()
            .zip(preds)
            .filter_map(|(s, p)| s.position.map(|i| localization_error_m(p.position_norm, i as usize, window_len, spacing))),
    );
    let pipeline = variant.pipeline().to_string();
    let row = DetectionRow {
        snr_bucket: snr,
        pipeline: pipeline.clone(),
        provenance: run.provenance(),
        n: seqs.len(),
        detection_accuracy: type_report.accuracy,
        diagnosis_accuracy: cause_report.accuracy,
        localization_error_m: loc,
    };
    let entry = |task: &str, labels: Vec<String>, report| ConfusionEntry {
        snr_bucket: snr,
        pipeline: pipeline.clone(),
        task: task.to_string(),
        labels,
        provenance: run.provenance(),
        report,
    };
    let entries = vec![
        entry("event_type", EventClass::ALL.iter().map(|c| c.name().to_string()).collect(), type_report),
        entry("cause", Cause::ALL.iter().map(|c| c.name().to_string()).collect(), cause_report),
    ];
    Ok((row, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
        }
        assert_eq!(Method::parse("median"), None);
        for v in FaultVariant::ALL {
            assert_eq!(FaultVariant::parse(v.name()), Some(v));
        }
    }

    #[test]
    fn mismatched_hash_refused() {
        let p = Path::new("x.otdrck");
        assert!(check_hash(p, "a", "a").is_ok());
        assert!(matches!(check_hash(p, "a", "b"), Err(CoreError::Config(_))));
    }
}
