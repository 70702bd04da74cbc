//! Staged grid execution with checkpoints.
//!
//! Layout under the output directory, per grid seed `s`:
//!
//! ```text
//! seed-{s}/dataset.json                 spec + teacher (samples are regenerated)
//! seed-{s}/base.model.json              + base.metrics.jsonl
//! seed-{s}/calibration.json             statistics of the base model
//! seed-{s}/lambda-{λ}/prehab.model.json + prehab.metrics.jsonl   (λ > 0)
//! seed-{s}/lambda-{λ}/calibration.json  statistics of the prehab model (λ > 0)
//! seed-{s}/lambda-{λ}/{method}-r{ratio}/surgery.model.json
//! seed-{s}/lambda-{λ}/{method}-r{ratio}/rehab.model.json   + rehab.metrics.jsonl
//! ```
//!
//! `λ = 0` cells reuse the base model as their prehab model, and ratio `0`
//! cells skip surgery and rehab. Every reported number is recomputed from
//! the checkpoints, so a resumed run reports exactly what an uninterrupted
//! one does.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::report::{ExperimentReport, LayerSpectrum, StageKind, StageRecord, StageStatus};
use super::{gen_dataset, DatasetSpec, ExperimentConfig, PipelineError, PlantedDataset};
use crate::calibration::{calibrate, LayerCalibration};
use crate::checkpoint;
use crate::compressors::{compress_model, rank_for_ratio, CompressionMethod, CompressionPlan};
use crate::linalg::svd;
use crate::model::{Evaluation, ModelState};
use crate::trainer::{self, write_metrics_jsonl, PrehabConfig, RehabConfig, StepMetrics, TrainConfig};

/// Pipeline steps in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Step {
    Dataset,
    Base,
    Calibrate,
    Prehab,
    Surgery,
    Rehab,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Load existing checkpoints instead of recomputing them.
    pub resume: bool,
    /// Abort with [`PipelineError::Interrupted`] once this many stages have
    /// been computed (loaded checkpoints do not count).
    pub stop_after: Option<usize>,
    /// Last step to execute; later stages are reported as pending.
    pub through: Step,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            resume: false,
            stop_after: None,
            through: Step::Rehab,
        }
    }
}

/// What `dataset.json` stores: enough to regenerate and verify the samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub spec: DatasetSpec,
    pub teacher: ModelState,
    pub attempts: usize,
}

enum Slot<T> {
    Ready(T),
    Failed(String),
    Skipped,
    Pending,
}

impl<T> Slot<T> {
    fn ready(&self) -> Option<&T> {
        match self {
            Slot::Ready(v) => Some(v),
            _ => None,
        }
    }

    /// Downstream slot when this one is not ready. Failures of unreported
    /// steps (`aux`) are carried forward as failures; others skip.
    fn blocked<U>(&self, aux: Option<&str>) -> Slot<U> {
        match (self, aux) {
            (Slot::Ready(_), _) => unreachable!("ready slots are not blocking"),
            (Slot::Failed(msg), Some(name)) => Slot::Failed(format!("{name}: {msg}")),
            (Slot::Failed(_), None) | (Slot::Skipped, _) => Slot::Skipped,
            (Slot::Pending, _) => Slot::Pending,
        }
    }
}

/// Reported view of a stage: status plus the model it produced or carried.
struct View<'a> {
    status: StageStatus,
    model: Option<&'a ModelState>,
    checkpoint: Option<String>,
    error: Option<String>,
}

fn view<'a>(slot: &'a Slot<ModelState>, rel: &str) -> View<'a> {
    match slot {
        Slot::Ready(m) => View {
            status: StageStatus::Ok,
            model: Some(m),
            checkpoint: Some(rel.to_string()),
            error: None,
        },
        Slot::Failed(e) => View {
            status: StageStatus::Failed,
            model: None,
            checkpoint: None,
            error: Some(e.clone()),
        },
        Slot::Skipped => View {
            status: StageStatus::Skipped,
            model: None,
            checkpoint: None,
            error: None,
        },
        Slot::Pending => View {
            status: StageStatus::Pending,
            model: None,
            checkpoint: None,
            error: None,
        },
    }
}

fn passthrough<'a>(upstream: &View<'a>) -> View<'a> {
    match upstream.status {
        StageStatus::Ok | StageStatus::Passthrough => View {
            status: StageStatus::Passthrough,
            model: upstream.model,
            checkpoint: upstream.checkpoint.clone(),
            error: None,
        },
        StageStatus::Pending => View {
            status: StageStatus::Pending,
            model: None,
            checkpoint: None,
            error: None,
        },
        StageStatus::Failed | StageStatus::Skipped => View {
            status: StageStatus::Skipped,
            model: None,
            checkpoint: None,
            error: None,
        },
    }
}

fn lambda_dir(seed: u64, lambda: f64) -> String {
    format!("seed-{seed}/lambda-{lambda}")
}

fn cell_dir(seed: u64, lambda: f64, method: CompressionMethod, ratio: f64) -> String {
    format!("{}/{method}-r{ratio}", lambda_dir(seed, lambda))
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    root: PathBuf,
    opts: &'a RunOptions,
    fresh: usize,
    evaluations: HashMap<String, (Evaluation, usize)>,
}

impl Runner<'_> {
    fn stage<T, F>(&mut self, step: Step, rel: &str, kind: &str, compute: F) -> Result<Slot<T>, PipelineError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<(T, Option<Vec<StepMetrics>>), PipelineError>,
    {
        if step > self.opts.through {
            return Ok(Slot::Pending);
        }
        let path = self.root.join(rel);
        if self.opts.resume && path.exists() {
            return Ok(match checkpoint::load(&path, kind) {
                Ok(v) => Slot::Ready(v),
                Err(e) => Slot::Failed(e.to_string()),
            });
        }
        if let Some(limit) = self.opts.stop_after {
            if self.fresh >= limit {
                return Err(PipelineError::Interrupted { completed: self.fresh });
            }
        }
        let result = compute().and_then(|(value, metrics)| {
            checkpoint::save(&path, kind, &value)?;
            if let Some(metrics) = metrics {
                let log = self.root.join(rel.replace(".model.json", ".metrics.jsonl"));
                write_metrics_jsonl(&log, &metrics)?;
            }
            Ok(value)
        });
        self.fresh += 1;
        Ok(match result {
            Ok(v) => Slot::Ready(v),
            Err(e) => Slot::Failed(e.to_string()),
        })
    }

    fn dataset(&mut self, seed: u64) -> Result<Slot<PlantedDataset>, PipelineError> {
        let spec = DatasetSpec {
            seed: self.config.dataset.seed.wrapping_add(seed),
            ..self.config.dataset.clone()
        };
        let mut generated = None;
        let record: Slot<DatasetRecord> =
            self.stage(Step::Dataset, &format!("seed-{seed}/dataset.json"), "dataset", || {
                let data = gen_dataset(&spec)?;
                let record = DatasetRecord {
                    spec: data.spec.clone(),
                    teacher: data.teacher.clone(),
                    attempts: data.attempts,
                };
                generated = Some(data);
                Ok((record, None))
            })?;
        let record = match record {
            Slot::Ready(r) => r,
            other => return Ok(other.blocked(Some("dataset"))),
        };
        let data = match generated {
            Some(d) => d,
            None => match gen_dataset(&record.spec) {
                Ok(d) => d,
                Err(e) => return Ok(Slot::Failed(format!("dataset: {e}"))),
            },
        };
        if data.teacher != record.teacher || record.spec != spec {
            return Ok(Slot::Failed(
                "dataset: checkpoint does not match the configured data".into(),
            ));
        }
        Ok(Slot::Ready(data))
    }

    fn evaluate(&mut self, view: &View<'_>, test: Option<&PlantedDataset>) -> Option<(Evaluation, usize)> {
        let (model, key, data) = (view.model?, view.checkpoint.clone()?, test?);
        if let Some(hit) = self.evaluations.get(&key) {
            return Some(*hit);
        }
        let eval = model.evaluate(&data.test).ok()?;
        let out = (eval, model.param_count());
        self.evaluations.insert(key, out);
        Some(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        view: &View<'_>,
        stage: StageKind,
        cell: (CompressionMethod, f64, f64, u64),
        data: Option<&PlantedDataset>,
        calib: Option<&Vec<LayerCalibration>>,
        mask: &[bool],
    ) -> StageRecord {
        let (method, ratio, lambda, seed) = cell;
        let evaluation = self.evaluate(view, data);
        let layers = match (view.model, calib) {
            (Some(model), Some(calib)) => spectra(model, calib, mask, ratio, self.config.spectrum_top_k),
            _ => Vec::new(),
        };
        let finite = |x: f64| x.is_finite().then_some(x);
        StageRecord {
            method,
            ratio,
            lambda,
            seed,
            stage,
            status: view.status,
            test_loss: evaluation.and_then(|(e, _)| finite(e.loss)),
            test_accuracy: evaluation.map(|(e, _)| e.accuracy),
            param_count: evaluation.map(|(_, p)| p),
            layers,
            checkpoint: view.checkpoint.clone(),
            error: view.error.clone(),
        }
    }

    fn run_seed(
        &mut self,
        seed: u64,
        out: &mut BTreeMap<(usize, usize, usize, usize, StageKind), StageRecord>,
        si: usize,
    ) -> Result<(), PipelineError> {
        let config = self.config;
        let dataset = self.dataset(seed)?;

        let base_rel = format!("seed-{seed}/base.model.json");
        let base: Slot<ModelState> = match &dataset {
            Slot::Ready(data) => {
                let init_seed = config.model.init_seed.wrapping_add(seed);
                let train = TrainConfig {
                    seed: config.base.seed.wrapping_add(seed),
                    ..config.base.clone()
                };
                let widths = config.student_widths();
                self.stage(Step::Base, &base_rel, "model", || {
                    let model = ModelState::init(&widths, init_seed)?;
                    let outcome = trainer::train_base(&model, &data.train, &train)?;
                    Ok((outcome.model, Some(outcome.metrics)))
                })?
            }
            other => other.blocked(None),
        };
        // Dataset failures surface on the base stage.
        let base = match (&dataset, base) {
            (Slot::Failed(e), _) => Slot::Failed(e.clone()),
            (_, b) => b,
        };

        let calib_rel = format!("seed-{seed}/calibration.json");
        let base_calib: Slot<Vec<LayerCalibration>> = match (&base, dataset.ready()) {
            (Slot::Ready(model), Some(data)) => self.stage(Step::Calibrate, &calib_rel, "calibration", || {
                Ok((calibrate(model, &data.calibration)?, None))
            })?,
            (Slot::Ready(_), None) => unreachable!("base is ready only with data"),
            (other, _) => other.blocked(None),
        };

        let mask: Vec<bool> = {
            let n = config.model.hidden_widths.len() + 1;
            match &config.compression.layers {
                None => (0..n).map(|i| i + 1 < n).collect(),
                Some(list) => (0..n).map(|i| list.contains(&i)).collect(),
            }
        };
        let spectrum_calib = base_calib.ready();
        let data = dataset.ready();

        for (li, &lambda) in config.lambdas.iter().enumerate() {
            let prehab_rel = format!("{}/prehab.model.json", lambda_dir(seed, lambda));
            let prehab_calib_rel = format!("{}/calibration.json", lambda_dir(seed, lambda));
            let (prehab_slot, prehab_calib): (Option<Slot<ModelState>>, Slot<Vec<LayerCalibration>>) = if lambda == 0.0
            {
                let calib = match &base_calib {
                    Slot::Ready(c) => Slot::Ready(c.clone()),
                    other => other.blocked(Some("calibration")),
                };
                (None, calib)
            } else {
                let slot = match (&base, &base_calib, data) {
                    (Slot::Ready(model), Slot::Ready(calib), Some(data)) => {
                        let cfg = PrehabConfig {
                            lambda,
                            seed: config.prehab.seed.wrapping_add(seed),
                            ..config.prehab.clone()
                        };
                        self.stage(Step::Prehab, &prehab_rel, "model", || {
                            let outcome = trainer::prehab(model, &data.train, calib, &cfg)?;
                            Ok((outcome.model, Some(outcome.metrics)))
                        })?
                    }
                    (Slot::Ready(_), calib, _) => calib.blocked(Some("calibration")),
                    (other, _, _) => other.blocked(None),
                };
                let calib = match (&slot, data) {
                    (Slot::Ready(model), Some(data)) => {
                        self.stage(Step::Prehab, &prehab_calib_rel, "calibration", || {
                            Ok((calibrate(model, &data.calibration)?, None))
                        })?
                    }
                    (other, _) => other.blocked(None),
                };
                (Some(slot), calib)
            };

            for (mi, &method) in config.compression.methods.iter().enumerate() {
                for (ri, &ratio) in config.compression.ratios.iter().enumerate() {
                    let cell = (method, ratio, lambda, seed);
                    let dir = cell_dir(seed, lambda, method, ratio);
                    let surgery_rel = format!("{dir}/surgery.model.json");
                    let rehab_rel = format!("{dir}/rehab.model.json");

                    let base_view = view(&base, &base_rel);
                    let prehab_view = match &prehab_slot {
                        None => passthrough(&base_view),
                        Some(slot) => view(slot, &prehab_rel),
                    };

                    let surgery_slot: Option<Slot<ModelState>> = if ratio == 0.0 {
                        None
                    } else {
                        Some(match (prehab_view.model, prehab_view.status) {
                            (Some(model), _) => {
                                let calibs = if method.needs_calibration() {
                                    match &prehab_calib {
                                        Slot::Ready(c) => Some(c.as_slice()),
                                        other => {
                                            let blocked: Slot<ModelState> = other.blocked(Some("calibration"));
                                            self.push_cell(
                                                out,
                                                (mi, ri, li, si),
                                                cell,
                                                [&base_view, &prehab_view],
                                                blocked,
                                                &surgery_rel,
                                                &rehab_rel,
                                                data,
                                                spectrum_calib,
                                                &mask,
                                            )?;
                                            continue;
                                        }
                                    }
                                } else {
                                    None
                                };
                                self.stage(Step::Surgery, &surgery_rel, "model", || {
                                    let plan = CompressionPlan::for_ratio(model, method, ratio, &mask)?;
                                    Ok((compress_model(model, &plan, calibs)?, None))
                                })?
                            }
                            (None, StageStatus::Pending) => Slot::Pending,
                            (None, _) => Slot::Skipped,
                        })
                    };
                    match surgery_slot {
                        None => {
                            let surgery_view = passthrough(&prehab_view);
                            let rehab_view = passthrough(&surgery_view);
                            for (stage, v) in [
                                (StageKind::Base, &base_view),
                                (StageKind::Prehab, &prehab_view),
                                (StageKind::Surgery, &surgery_view),
                                (StageKind::Rehab, &rehab_view),
                            ] {
                                let rec = self.record(v, stage, cell, data, spectrum_calib, &mask);
                                out.insert((mi, ri, li, si, stage), rec);
                            }
                        }
                        Some(slot) => {
                            self.push_cell(
                                out,
                                (mi, ri, li, si),
                                cell,
                                [&base_view, &prehab_view],
                                slot,
                                &surgery_rel,
                                &rehab_rel,
                                data,
                                spectrum_calib,
                                &mask,
                            )?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn push_cell(
        &mut self,
        out: &mut BTreeMap<(usize, usize, usize, usize, StageKind), StageRecord>,
        index: (usize, usize, usize, usize),
        cell: (CompressionMethod, f64, f64, u64),
        upstream: [&View<'_>; 2],
        surgery: Slot<ModelState>,
        surgery_rel: &str,
        rehab_rel: &str,
        data: Option<&PlantedDataset>,
        spectrum_calib: Option<&Vec<LayerCalibration>>,
        mask: &[bool],
    ) -> Result<(), PipelineError> {
        let (mi, ri, li, si) = index;
        let seed = cell.3;
        let surgery_view = view(&surgery, surgery_rel);
        let rehab_slot;
        let rehab_view = if !self.config.stages.rehab {
            passthrough(&surgery_view)
        } else {
            rehab_slot = match (&surgery, data) {
                (Slot::Ready(model), Some(data)) => {
                    let cfg = RehabConfig {
                        seed: self.config.rehab.seed.wrapping_add(seed),
                        ..self.config.rehab.clone()
                    };
                    self.stage(Step::Rehab, rehab_rel, "model", || {
                        let outcome = trainer::rehab(model, data.rehab_split(), &cfg)?;
                        Ok((outcome.model, Some(outcome.metrics)))
                    })?
                }
                (other, _) => other.blocked(None),
            };
            view(&rehab_slot, rehab_rel)
        };
        for (stage, v) in [
            (StageKind::Base, upstream[0]),
            (StageKind::Prehab, upstream[1]),
            (StageKind::Surgery, &surgery_view),
            (StageKind::Rehab, &rehab_view),
        ] {
            let rec = self.record(v, stage, cell, data, spectrum_calib, mask);
            out.insert((mi, ri, li, si, stage), rec);
        }
        Ok(())
    }
}

/// Spectrum summaries of `W_ℓ·X_ℓ` for the masked layers.
fn spectra(
    model: &ModelState,
    calib: &[LayerCalibration],
    mask: &[bool],
    ratio: f64,
    top_k: usize,
) -> Vec<LayerSpectrum> {
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.get(*i).copied().unwrap_or(false))
        .filter_map(|(i, layer)| {
            let x = &calib.get(i)?.whitening_x;
            let s = svd(&layer.effective_weight().try_matmul(x).ok()?).ok()?;
            let plan_rank = (ratio > 0.0)
                .then(|| rank_for_ratio(layer.out_dim(), layer.in_dim(), ratio).ok())
                .flatten();
            let energy = s.frobenius_norm_sq();
            let nuclear = s.nuclear_norm();
            Some(LayerSpectrum {
                layer: i,
                top_singular_values: s.sigma.iter().take(top_k).copied().collect(),
                stable_rank: (energy > 0.0).then(|| nuclear * nuclear / energy),
                plan_rank,
                tail_energy: plan_rank.map(|r| s.tail_energy(r)),
            })
        })
        .collect()
}

/// Runs the full grid. Stage failures are recorded in the report; only
/// invalid configs and interruptions abort.
pub fn run_experiment(
    config: &ExperimentConfig,
    out: &Path,
    opts: &RunOptions,
) -> Result<ExperimentReport, PipelineError> {
    config.validate()?;
    let mut runner = Runner {
        config,
        root: out.to_path_buf(),
        opts,
        fresh: 0,
        evaluations: HashMap::new(),
    };
    let mut records = BTreeMap::new();
    for (si, &seed) in config.seeds.iter().enumerate() {
        runner.run_seed(seed, &mut records, si)?;
    }
    Ok(ExperimentReport::new(config.clone(), records.into_values().collect()))
}
