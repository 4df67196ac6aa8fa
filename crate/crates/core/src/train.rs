//! Training loop, evaluation, intervention experiments and checkpoints.
//!
//! One training stream drives everything random in a run: the per-epoch
//! shuffle, the substitution draw and the latent noise of every sample, in
//! that order. The stream, the optimizer moments and the history are all
//! part of a checkpoint, so resuming reproduces an uninterrupted run
//! exactly.
//!
//! Checkpoints are JSON documents:
//! `{format, config, epoch, params: [{name, group, rows, cols, data}], adam:
//! {step, m, v}, rng, history}`. `data`, `m` and `v` are row-major. Floats
//! are written with round-trip precision.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::MultimodalSample;
use crate::detector::{generate, infer_with, loss_and_grads, InferenceMode, LossBreakdown, StepDraws};
use crate::error::{Error, Result};
use crate::explain::{teacher_forced_hits, ExplanationSequence};
use crate::latent::InterventionPolicy;
use crate::metrics::{classification_report, generation_report, ClassificationReport, GenerationReport};
use crate::model::Model;
use crate::params::{Gradients, ParamGroup, ParamStore};
use crate::rng::{derived_rng, SeededRng};

const TRAIN_STREAM: u64 = 2;
const DO_F_STREAM: u64 = 3;
pub const CHECKPOINT_FORMAT: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect();
        Self { step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected step; missing gradients count as zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, cfg: &ModelConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let lr = match store.param(id).group {
                ParamGroup::Base => cfg.lr_base,
                ParamGroup::New => cfg.lr_new,
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match grads.get(id) {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| b1 * x);
                    v.mapv_inplace(|x| b2 * x);
                }
            }
            let eps = cfg.adam_eps;
            ndarray::Zip::from(store.value_mut(id)).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionCounter {
    pub ground_truth: u64,
    pub generated: u64,
}

impl InterventionCounter {
    pub fn record(&mut self, substituted: bool) {
        if substituted {
            self.ground_truth += 1;
        } else {
            self.generated += 1;
        }
    }

    pub fn rate(&self) -> f64 {
        let n = self.ground_truth + self.generated;
        if n == 0 {
            0.0
        } else {
            self.ground_truth as f64 / n as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classification: ClassificationReport,
    pub generation: GenerationReport,
    /// Teacher-forced next-token accuracy on the ground-truth explanations.
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
    pub train: Option<EvalReport>,
    pub heldout: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    /// Batch-mean loss of every optimizer step.
    pub step_losses: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
    pub interventions: InterventionCounter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeResult {
    pub classification: ClassificationReport,
    pub predictions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub normal: ModeResult,
    pub do_e: ModeResult,
    pub do_f: ModeResult,
    pub noise_seed: u64,
}

impl InterventionReport {
    pub fn mode(&self, mode: InferenceMode) -> &ModeResult {
        match mode {
            InferenceMode::Normal => &self.normal,
            InferenceMode::DoE => &self.do_e,
            InferenceMode::DoF => &self.do_f,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub config: ModelConfig,
    pub train: EvalReport,
    pub heldout: Option<EvalReport>,
    pub interventions: InterventionReport,
    pub loss_curve: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
    pub intervention_counter: InterventionCounter,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `step,reconstruction,kl,exp,total` rows.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("step,reconstruction,kl,exp,total\n");
        for (i, l) in self.loss_curve.iter().enumerate() {
            out.push_str(&format!("{i},{:?},{:?},{:?},{:?}\n", l.reconstruction, l.kl, l.exp, l.total));
        }
        out
    }
}

/// Short hex id derived from the config (FNV-1a over its TOML form).
pub fn run_id(cfg: &ModelConfig) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in cfg.to_toml().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")[..12].to_string()
}

/// Normal-mode detection and generation quality on `data`.
pub fn evaluate(model: &Model, data: &[MultimodalSample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
    }
    let mut rng = derived_rng(model.config.seed, DO_F_STREAM);
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    let (mut cands, mut refs) = (Vec::new(), Vec::new());
    let (mut hits, mut total) = (0, 0);
    for s in data {
        let (m, generated) = generate(model, s)?;
        let truth = s.explanation()?;
        cands.push(generated.content().to_vec());
        refs.push(truth.content().to_vec());
        let (h, t) = teacher_forced_hits(&model.params, &model.arch.decoder, &m, truth)?;
        hits += h;
        total += t;
        preds.push(infer_with(model, s, &m, generated, InferenceMode::Normal, &mut rng)?.predicted_label);
        labels.push(s.label()?);
    }
    Ok(EvalReport {
        classification: classification_report(&preds, &labels)?,
        generation: generation_report(&cands, &refs)?,
        token_accuracy: hits as f64 / total.max(1) as f64,
    })
}

/// Detection under `normal`, `do(E)` and `do(F)`. The three modes share one
/// decode per sample; do(F) noise comes from a stream fixed by `noise_seed`.
pub fn run_intervention_experiment(model: &Model, data: &[MultimodalSample], noise_seed: u64) -> Result<InterventionReport> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot run interventions on an empty dataset".into()));
    }
    let generated: Vec<(Array2<f64>, ExplanationSequence)> = data.iter().map(|s| generate(model, s)).collect::<Result<_>>()?;
    intervention_experiment_with(model, data, &generated, noise_seed)
}

/// [`run_intervention_experiment`] with caller-supplied `(M, E_hat)` pairs.
pub fn intervention_experiment_with(
    model: &Model,
    data: &[MultimodalSample],
    generated: &[(Array2<f64>, ExplanationSequence)],
    noise_seed: u64,
) -> Result<InterventionReport> {
    let labels: Vec<usize> = data.iter().map(|s| s.label()).collect::<Result<_>>()?;
    let run = |mode: InferenceMode| -> Result<ModeResult> {
        let mut rng = derived_rng(noise_seed, DO_F_STREAM);
        let predictions = data
            .iter()
            .zip(generated)
            .map(|(s, (m, e))| infer_with(model, s, m, e.clone(), mode, &mut rng).map(|o| o.predicted_label))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModeResult { classification: classification_report(&predictions, &labels)?, predictions })
    };
    Ok(InterventionReport {
        normal: run(InferenceMode::Normal)?,
        do_e: run(InferenceMode::DoE)?,
        do_f: run(InferenceMode::DoF)?,
        noise_seed,
    })
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Directory for `checkpoint.json` (rewritten after every epoch) and
    /// NaN diagnostics.
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after an evaluation where train weighted-F1 and token accuracy
    /// reach these values.
    pub target: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub rng: SeededRng,
    /// Completed epochs.
    pub epoch: usize,
    pub history: TrainingHistory,
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: u32,
    config: ModelConfig,
    epoch: usize,
    params: Vec<NamedArray>,
    adam: AdamState,
    rng: SeededRng,
    history: TrainingHistory,
}

fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

impl Trainer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let adam = Adam::new(&model.params);
        let rng = derived_rng(model.config.seed, TRAIN_STREAM);
        Ok(Self { model, adam, rng, epoch: 0, history: TrainingHistory::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// One pass over `data` in a freshly shuffled order. Returns the mean
    /// per-sample loss.
    pub fn train_epoch(&mut self, data: &[MultimodalSample], dump_dir: Option<&Path>) -> Result<LossBreakdown> {
        use rand::seq::SliceRandom;
        if data.is_empty() {
            return Err(Error::Invalid("cannot train on an empty dataset".into()));
        }
        let cfg = self.model.config.clone();
        let policy = InterventionPolicy::training(cfg.intervention_epsilon)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let cache: Option<Vec<ExplanationSequence>> = if cfg.cache_explanations {
            Some(data.iter().map(|s| generate(&self.model, s).map(|(_, e)| e)).collect::<Result<_>>()?)
        } else {
            None
        };
        let mut epoch_losses = Vec::with_capacity(data.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Gradients::new(self.model.params.len());
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let draws = StepDraws::draw(&self.model, &policy, &mut self.rng);
                let cached = cache.as_ref().map(|c| &c[i]);
                let step = match loss_and_grads(&self.model, &data[i], cached, &draws) {
                    Ok(s) => s,
                    Err(Error::NonFinite(msg)) => return Err(self.abort(data, batch, &msg, dump_dir)),
                    Err(e) => return Err(e),
                };
                if !step.loss.is_additive() {
                    return Err(Error::Invalid(format!("loss terms do not add up for {}: {:?}", data[i].id, step.loss)));
                }
                if !step.grads.is_finite() {
                    return Err(self.abort(data, batch, "non-finite gradient", dump_dir));
                }
                self.history.interventions.record(step.intervened);
                grads.add_assign(&step.grads);
                losses.push(step.loss);
            }
            grads.scale(1.0 / batch.len() as f64);
            self.adam.update(&mut self.model.params, &grads, &cfg);
            self.history.step_losses.push(LossBreakdown::mean(&losses));
            epoch_losses.extend(losses);
        }
        self.epoch += 1;
        Ok(LossBreakdown::mean(&epoch_losses))
    }

    fn abort(&self, data: &[MultimodalSample], batch: &[usize], msg: &str, dump_dir: Option<&Path>) -> Error {
        let ids: Vec<&str> = batch.iter().map(|&i| data[i].id.as_str()).collect();
        let mut detail = format!("epoch {}, step {}: {msg}; batch {:?}", self.epoch, self.history.step_losses.len(), ids);
        if let Some(dir) = dump_dir {
            let dump = serde_json::json!({
                "epoch": self.epoch,
                "step": self.history.step_losses.len(),
                "message": msg,
                "batch": ids,
                "samples": batch.iter().map(|&i| serde_json::json!({
                    "id": data[i].id,
                    "label": data[i].label,
                    "explanation": data[i].explanation.as_ref().map(|e| e.tokens().to_vec()),
                    "visual": flat(&data[i].visual),
                    "acoustic": flat(&data[i].acoustic),
                })).collect::<Vec<_>>(),
            });
            let path = dir.join("nan_dump.json");
            if std::fs::create_dir_all(dir).is_ok() && std::fs::write(&path, dump.to_string()).is_ok() {
                detail.push_str(&format!(" (dump at {})", path.display()));
            }
        }
        Error::NonFinite(detail)
    }

    /// Trains until `config.epochs` epochs are complete (or the target is
    /// met), evaluating every `eval_every` epochs and on the last one.
    pub fn fit(&mut self, train: &[MultimodalSample], heldout: Option<&[MultimodalSample]>, opts: &FitOptions) -> Result<()> {
        let dump = opts.checkpoint_dir.as_deref();
        while self.epoch < self.model.config.epochs {
            let mean_loss = self.train_epoch(train, dump)?;
            let e = self.epoch;
            let every = self.model.config.eval_every;
            let due = e == self.model.config.epochs || (every > 0 && e.is_multiple_of(every));
            let (train_eval, heldout_eval) = if due {
                (Some(evaluate(&self.model, train)?), heldout.map(|h| evaluate(&self.model, h)).transpose()?)
            } else {
                (None, None)
            };
            let reached = match (&train_eval, opts.target) {
                (Some(r), Some((f1, acc))) => r.classification.weighted_f1 >= f1 && r.token_accuracy >= acc,
                _ => false,
            };
            self.history.epochs.push(EpochRecord { epoch: e, mean_loss, train: train_eval, heldout: heldout_eval });
            if let Some(dir) = &opts.checkpoint_dir {
                self.save(&dir.join(CHECKPOINT_FILE))?;
            }
            if reached {
                break;
            }
        }
        Ok(())
    }

    /// Final evaluation plus the intervention experiment on the held-out
    /// set (or the training set when none is given).
    pub fn report(&self, train: &[MultimodalSample], heldout: Option<&[MultimodalSample]>) -> Result<ExperimentReport> {
        let probe = heldout.unwrap_or(train);
        Ok(ExperimentReport {
            run_id: run_id(&self.model.config),
            config: self.model.config.clone(),
            train: evaluate(&self.model, train)?,
            heldout: heldout.map(|h| evaluate(&self.model, h)).transpose()?,
            interventions: run_intervention_experiment(&self.model, probe, self.model.config.seed)?,
            loss_curve: self.history.step_losses.clone(),
            epochs: self.history.epochs.clone(),
            intervention_counter: self.history.interventions,
        })
    }

    fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .model
            .params
            .iter()
            .map(|(_, p)| NamedArray {
                name: p.name.clone(),
                group: p.group,
                rows: p.value.nrows(),
                cols: p.value.ncols(),
                data: flat(&p.value),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: self.model.config.clone(),
            epoch: self.epoch,
            params,
            adam: AdamState {
                step: self.adam.step,
                m: self.adam.m.iter().map(flat).collect(),
                v: self.adam.v.iter().map(flat).collect(),
            },
            rng: self.rng.clone(),
            history: self.history.clone(),
        }
    }

    /// Writes atomically (temp file then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        let file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        serde_json::to_writer(file, &self.to_checkpoint())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format { path: path.to_path_buf(), msg };
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(file).map_err(|e| bad(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported checkpoint format {}", ck.format)));
        }
        let mut model = Model::new(ck.config)?;
        if ck.params.len() != model.params.len() || ck.adam.m.len() != ck.params.len() || ck.adam.v.len() != ck.params.len() {
            return Err(bad("parameter count does not match the configured architecture".into()));
        }
        let mut adam = Adam::new(&model.params);
        adam.step = ck.adam.step;
        let moments = ck.adam.m.into_iter().zip(ck.adam.v);
        for (i, (p, (m, v))) in ck.params.into_iter().zip(moments).enumerate() {
            let id = model.params.id(&p.name).ok_or_else(|| bad(format!("unknown parameter {}", p.name)))?;
            let shape = model.params.value(id).dim();
            if shape != (p.rows, p.cols) || p.data.len() != p.rows * p.cols || id.index() != i {
                return Err(bad(format!("parameter {} has shape {}x{}, expected {:?}", p.name, p.rows, p.cols, shape)));
            }
            let to_array = |v: Vec<f64>| Array2::from_shape_vec(shape, v).map_err(|e| bad(format!("{}: {e}", p.name)));
            *model.params.value_mut(id) = to_array(p.data)?;
            adam.m[i] = to_array(m)?;
            adam.v[i] = to_array(v)?;
        }
        Ok(Self { model, adam, rng: ck.rng, epoch: ck.epoch, history: ck.history })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticCorpusSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d: 16,
            d_c: 16,
            d_f: 4,
            ffn_dim: 16,
            decoder_layers: 1,
            bitrans_layers: 1,
            max_expl_len: 8,
            batch_size: 4,
            epochs: 2,
            eval_every: 1,
            ..Default::default()
        }
    }

    fn corpus(cfg: &ModelConfig, n: usize) -> Vec<MultimodalSample> {
        generate_synthetic_dataset(&SyntheticCorpusSpec { num_samples: n, ..Default::default() }, cfg).unwrap().0
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = tiny();
        let model = Model::new(cfg.clone()).unwrap();
        let mut store = model.params.clone();
        let mut grads = Gradients::new(store.len());
        let id = model.arch.classifier.w;
        let shape = store.value(id).dim();
        grads.accumulate(id, Array2::from_elem(shape, 0.5));
        let before = store.value(id).clone();
        Adam::new(&store).update(&mut store, &grads, &cfg);
        let moved = &before - store.value(id);
        assert!(moved.iter().all(|&d| (d - cfg.lr_new).abs() < 1e-10));
    }

    #[test]
    fn curve_has_one_entry_per_step_and_counts_every_draw() {
        let cfg = tiny();
        let data = corpus(&cfg, 6);
        let mut tr = Trainer::new(cfg).unwrap();
        tr.fit(&data, None, &FitOptions::default()).unwrap();
        assert_eq!(tr.history.step_losses.len(), 2 * 2);
        let c = tr.history.interventions;
        assert_eq!(c.ground_truth + c.generated, 12);
        assert!(tr.history.step_losses.iter().all(LossBreakdown::is_additive));
    }

    #[test]
    fn epsilon_extremes_take_one_branch_only() {
        for (eps, gt) in [(0.0, 0), (1.0, 6)] {
            let cfg = ModelConfig { intervention_epsilon: eps, epochs: 1, ..tiny() };
            let data = corpus(&cfg, 6);
            let mut tr = Trainer::new(cfg).unwrap();
            tr.fit(&data, None, &FitOptions::default()).unwrap();
            assert_eq!(tr.history.interventions.ground_truth, gt);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let cfg = ModelConfig { epochs: 1, ..tiny() };
        let data = corpus(&cfg, 4);
        let mut tr = Trainer::new(cfg).unwrap();
        tr.fit(&data, None, &FitOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        tr.save(&path).unwrap();
        let back = Trainer::load(&path).unwrap();
        assert_eq!(back.model.params, tr.model.params);
        assert_eq!(back.adam, tr.adam);
        assert_eq!(back.rng, tr.rng);
        assert_eq!(back.history, tr.history);
        assert_eq!(evaluate(&back.model, &data).unwrap(), evaluate(&tr.model, &data).unwrap());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        std::fs::write(&path, "{\"format\": 1}").unwrap();
        assert!(matches!(Trainer::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn run_id_depends_on_config() {
        assert_eq!(run_id(&tiny()), run_id(&tiny()));
        assert_ne!(run_id(&tiny()), run_id(&ModelConfig { seed: 1, ..tiny() }));
    }
}
