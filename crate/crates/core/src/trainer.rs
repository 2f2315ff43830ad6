//! Fine-tuning loop: teacher-forced loss, Adafactor steps, periodic
//! validation and early stopping.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_optimizer_state, load_parameters, save_optimizer_state, save_parameters};
use crate::corpus::{read_jsonl, write_records, CorpusRecord};
use crate::error::{Error, Result};
use crate::model::{example_nll, loss_and_gradients_with, Example, StepOptions};
use crate::optimizer::{adafactor_step, init_state, AdafactorState, OptimConfig};
use crate::params::{ModelConfig, Parameters};
use crate::tokenizer::{EncodeOptions, TokenizerModel};

pub const CONFIG_FILE: &str = "config.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const BEST_FILE: &str = "best.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "trainer.json";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// Examples per optimizer step; gradients are averaged over them.
    pub batch_size: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub eval_steps: usize,
    pub patience: usize,
    pub max_steps: usize,
    pub checkpointing: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            batch_size: 1,
            max_input_len: 8192,
            max_output_len: 512,
            eval_steps: 4000,
            patience: 3,
            max_steps: 100_000,
            checkpointing: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        for (field, value) in [
            ("batch_size", self.batch_size),
            ("eval_steps", self.eval_steps),
            ("patience", self.patience),
            ("max_input_len", self.max_input_len),
            ("max_output_len", self.max_output_len),
        ] {
            if value == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if self.max_input_len < 2 {
            return Err(Error::invalid("max_input_len", "must leave room for SOS and EOS"));
        }
        Ok(())
    }

    /// Checks that the sequence limits fit the model's position tables.
    pub fn check_model(&self, model: &ModelConfig) -> Result<()> {
        if self.max_input_len > model.max_enc_len {
            return Err(Error::invalid(
                "max_input_len",
                format!("{} exceeds the model's {} encoder positions", self.max_input_len, model.max_enc_len),
            ));
        }
        if self.max_output_len > model.max_dec_len {
            return Err(Error::invalid(
                "max_output_len",
                format!("{} exceeds the model's {} decoder positions", self.max_output_len, model.max_dec_len),
            ));
        }
        Ok(())
    }
}

/// Encodes one article/summary pair. The target holds at most
/// `max_output_len` predicted tokens, EOS included.
pub fn encode_pair(tokenizer: &TokenizerModel, article: &str, summary: &str, config: &TrainingConfig) -> Example {
    Example {
        source: tokenizer.encode(article, &EncodeOptions::new(config.max_input_len)),
        target: tokenizer.encode(summary, &EncodeOptions::new(config.max_output_len + 1).with_globals(Vec::new())),
    }
}

pub fn build_examples(tokenizer: &TokenizerModel, records: &[CorpusRecord], config: &TrainingConfig) -> Vec<Example> {
    records.par_iter().map(|r| encode_pair(tokenizer, &r.article, &r.summary, config)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub step: usize,
    pub val_loss: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Training loss of step `i + 1`.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalEntry>,
    pub stop: Option<StopReason>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LogLine {
    Eval { step: usize, val_loss: f64, perplexity: f64 },
    Step { step: usize, loss: f64 },
    Stop { stop: StopReason },
}

impl TrainLog {
    fn lines(&self) -> Vec<LogLine> {
        let mut out = Vec::with_capacity(self.losses.len() + self.evals.len() + 1);
        let mut evals = self.evals.iter().peekable();
        for (i, &loss) in self.losses.iter().enumerate() {
            out.push(LogLine::Step { step: i + 1, loss });
            while let Some(e) = evals.next_if(|e| e.step == i + 1) {
                out.push(LogLine::Eval { step: e.step, val_loss: e.val_loss, perplexity: e.perplexity });
            }
        }
        if let Some(stop) = self.stop {
            out.push(LogLine::Stop { stop });
        }
        out
    }

    fn from_lines(lines: Vec<LogLine>) -> Result<Self> {
        let mut log = TrainLog::default();
        for line in lines {
            match line {
                LogLine::Step { step, loss } => {
                    if step != log.losses.len() + 1 {
                        return Err(Error::Checkpoint(format!("log skips from step {} to {step}", log.losses.len())));
                    }
                    log.losses.push(loss);
                }
                LogLine::Eval { step, val_loss, perplexity } => log.evals.push(EvalEntry { step, val_loss, perplexity }),
                LogLine::Stop { stop } => log.stop = Some(stop),
            }
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub step: usize,
    /// `None` when training ended before the first evaluation.
    pub val_loss: Option<f64>,
}

/// Mean per-token cross-entropy over `val`, weighting every real target
/// token equally.
pub fn evaluate_validation(params: &Parameters, config: &ModelConfig, val: &[Example]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let parts: Vec<(f64, usize)> = val.par_iter().map(|ex| example_nll(params, config, ex)).collect::<Result<_>>()?;
    let (nll, count) = parts.iter().fold((0.0, 0usize), |(a, c), &(n, k)| (a + n, c + k));
    Ok(nll / count as f64)
}

/// True when the last `patience` evaluations all fail to improve on the
/// best evaluation before them.
pub fn should_stop(history: &[f64], patience: usize) -> bool {
    if patience == 0 || history.len() <= patience {
        return false;
    }
    let (before, recent) = history.split_at(history.len() - patience);
    let best = before.iter().copied().fold(f64::INFINITY, f64::min);
    recent.iter().all(|&v| v >= best)
}

#[derive(Serialize, Deserialize)]
struct SavedConfig {
    model: ModelConfig,
    training: TrainingConfig,
    optimizer: OptimConfig,
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    step: usize,
    best_step: usize,
    best_val_loss: Option<f64>,
}

pub struct Trainer {
    model: ModelConfig,
    training: TrainingConfig,
    optimizer: OptimConfig,
    params: Parameters,
    state: AdafactorState,
    step: usize,
    log: TrainLog,
    best: Checkpoint,
    dir: Option<PathBuf>,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    pub fn new(model: ModelConfig, params: Parameters, training: TrainingConfig, optimizer: OptimConfig) -> Result<Self> {
        model.validate()?;
        training.validate()?;
        training.check_model(&model)?;
        let optimizer = OptimConfig { learning_rate: training.learning_rate, ..optimizer };
        optimizer.validate()?;
        params.check_shapes(&model)?;
        let state = init_state(&params);
        let best = Checkpoint { params: params.clone(), step: 0, val_loss: None };
        Ok(Trainer { model, training, optimizer, params, state, step: 0, log: TrainLog::default(), best, dir: None, order: None })
    }

    /// Saves to `dir` after every evaluation and when training stops.
    pub fn with_checkpoint_dir(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Continues from the latest checkpoint saved in `dir`.
    pub fn resume(dir: &Path) -> Result<Self> {
        let config_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
        let saved: SavedConfig = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (model, params) = load_parameters(&dir.join(PARAMS_FILE))?;
        if model != saved.model {
            return Err(Error::Checkpoint("parameter file and config.json disagree on the model".into()));
        }
        let state = load_optimizer_state(&dir.join(OPTIMIZER_FILE), &params)?;
        let state_path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let progress: SavedState = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let log_path = dir.join(LOG_FILE);
        let file = fs::File::open(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let log = TrainLog::from_lines(read_jsonl(std::io::BufReader::new(file), &log_path)?)?;
        if log.losses.len() != progress.step {
            return Err(Error::Checkpoint(format!("log has {} steps, state says {}", log.losses.len(), progress.step)));
        }
        let best_params = if progress.best_val_loss.is_some() { load_parameters(&dir.join(BEST_FILE))?.1 } else { params.clone() };
        let mut trainer = Trainer::new(model, params, saved.training, saved.optimizer)?;
        trainer.state = state;
        trainer.step = progress.step;
        trainer.log = log;
        trainer.best = Checkpoint { params: best_params, step: progress.best_step, val_loss: progress.best_val_loss };
        trainer.dir = Some(dir.to_path_buf());
        Ok(trainer)
    }

    pub fn set_max_steps(&mut self, max_steps: usize) {
        self.training.max_steps = max_steps;
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    /// Position of the `k`-th example drawn overall; each epoch is a fresh
    /// permutation seeded from the run seed and the epoch number.
    fn example_index(&mut self, k: usize, n: usize) -> usize {
        let epoch = k / n;
        if self.order.as_ref().map(|(e, p)| *e != epoch || p.len() != n).unwrap_or(true) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.training.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            perm.shuffle(&mut rng);
            self.order = Some((epoch, perm));
        }
        self.order.as_ref().expect("order set above").1[k % n]
    }

    fn train_step(&mut self, train: &[Example]) -> Result<f64> {
        let step = self.step + 1;
        let options = StepOptions {
            checkpointing: self.training.checkpointing,
            dropout_seed: Some(self.training.seed.wrapping_add((step as u64).wrapping_mul(0xD134_2543_DE82_EF95))),
        };
        let b = self.training.batch_size;
        let mut total = 0.0;
        let mut grads: Option<Parameters> = None;
        for i in 0..b {
            let idx = self.example_index(self.step * b + i, train.len());
            let (loss, g) = loss_and_gradients_with(&self.params, &self.model, &train[idx], options)
                .map_err(|e| Error::TrainingDiverged { step, source: Box::new(e) })?;
            total += loss;
            match grads.as_mut() {
                Some(acc) => acc.scaled_add(1.0, &g),
                None => grads = Some(g),
            }
        }
        let mut grads = grads.expect("batch_size is at least 1");
        if b > 1 {
            grads.scale(1.0 / b as f64);
        }
        let loss = total / b as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, source: Box::new(Error::NonFinite { stage: crate::Stage::Output }) });
        }
        adafactor_step(&mut self.params, &grads, &mut self.state, &self.optimizer)
            .map_err(|e| Error::TrainingDiverged { step, source: Box::new(e) })?;
        self.step = step;
        self.log.losses.push(loss);
        Ok(loss)
    }

    fn evaluate(&mut self, val: &[Example]) -> Result<()> {
        let val_loss = evaluate_validation(&self.params, &self.model, val)?;
        self.log.evals.push(EvalEntry { step: self.step, val_loss, perplexity: val_loss.exp() });
        if self.best.val_loss.is_none_or(|best| val_loss < best) {
            self.best = Checkpoint { params: self.params.clone(), step: self.step, val_loss: Some(val_loss) };
            if let Some(dir) = &self.dir {
                save_parameters(&dir.join(BEST_FILE), &self.model, &self.params)?;
            }
        }
        Ok(())
    }

    /// Trains until `max_steps` or early stopping. Calling again after an
    /// early stop does nothing.
    pub fn run(&mut self, train: &[Example], val: &[Example]) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        if val.is_empty() {
            return Err(Error::Empty("validation split"));
        }
        if self.log.stop == Some(StopReason::EarlyStop) {
            return Ok(());
        }
        self.log.stop = None;
        while self.step < self.training.max_steps {
            self.train_step(train)?;
            if self.step.is_multiple_of(self.training.eval_steps) {
                self.evaluate(val)?;
                let history: Vec<f64> = self.log.evals.iter().map(|e| e.val_loss).collect();
                if should_stop(&history, self.training.patience) {
                    self.log.stop = Some(StopReason::EarlyStop);
                    break;
                }
                self.save()?;
            }
        }
        self.log.stop.get_or_insert(StopReason::MaxSteps);
        self.save()
    }

    /// Writes the latest state to the checkpoint directory, if any.
    pub fn save(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let config = SavedConfig { model: self.model.clone(), training: self.training.clone(), optimizer: self.optimizer.clone() };
        write_json(&dir.join(CONFIG_FILE), &config)?;
        save_parameters(&dir.join(PARAMS_FILE), &self.model, &self.params)?;
        save_optimizer_state(&dir.join(OPTIMIZER_FILE), &self.state)?;
        let log_path = dir.join(LOG_FILE);
        let mut file = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
        write_records(&self.log.lines(), &mut file).map_err(|e| Error::io(&log_path, e))?;
        let state = SavedState { step: self.step, best_step: self.best.step, best_val_loss: self.best.val_loss };
        write_json(&dir.join(STATE_FILE), &state)
    }

    pub fn finish(self) -> (Checkpoint, TrainLog) {
        (self.best, self.log)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains from `params` and returns the best checkpoint by validation loss
/// together with the full log.
pub fn train(
    model: &ModelConfig,
    params: Parameters,
    train_split: &[Example],
    val_split: &[Example],
    training: &TrainingConfig,
    optimizer: &OptimConfig,
) -> Result<(Checkpoint, TrainLog)> {
    let mut trainer = Trainer::new(model.clone(), params, training.clone(), optimizer.clone())?;
    trainer.run(train_split, val_split)?;
    Ok(trainer.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::example_loss;
    use crate::tokenizer::Encoding;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            window: 4,
            max_enc_len: 10,
            max_dec_len: 6,
            dropout: 0.0,
        }
    }

    fn pair(src: &[u32], tgt: &[u32]) -> Example {
        let mut s = vec![1];
        s.extend_from_slice(src);
        s.push(2);
        let mut t = vec![1];
        t.extend_from_slice(tgt);
        t.push(2);
        Example { source: Encoding::from_ids(s, &[0]), target: Encoding::from_ids(t, &[]) }
    }

    fn data() -> Vec<Example> {
        vec![pair(&[4, 5, 6], &[7, 8]), pair(&[9, 10], &[11]), pair(&[6, 6, 5, 4], &[8, 7, 4])]
    }

    fn config(eval_steps: usize, max_steps: usize) -> TrainingConfig {
        TrainingConfig {
            learning_rate: 1e-2,
            max_input_len: 10,
            max_output_len: 5,
            eval_steps,
            max_steps,
            patience: 100,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn defaults_follow_the_reported_configuration() {
        let c = TrainingConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.max_input_len, c.max_output_len), (1e-4, 1, 8192, 512));
        assert_eq!(c.eval_steps, 4000);
        assert!(c.checkpointing);
        assert!(TrainingConfig { batch_size: 0, ..c.clone() }.validate().is_err());
        assert!(TrainingConfig { patience: 0, ..c.clone() }.validate().is_err());
        assert!(matches!(
            TrainingConfig { eval_steps: 0, ..c }.validate(),
            Err(Error::InvalidConfig { field: "eval_steps", .. })
        ));
    }

    #[test]
    fn should_stop_rule() {
        assert!(should_stop(&[3.0, 2.5, 2.6, 2.7], 2));
        assert!(!should_stop(&[3.0, 2.5], 2));
        assert!(!should_stop(&[], 3));
        assert!(!should_stop(&[3.0, 2.5, 2.6, 2.4], 2));
        assert!(should_stop(&[3.0, 3.0], 1));
    }

    #[test]
    fn eval_schedule_hits_multiples_only() {
        let (_, log) = train(&tiny(), Parameters::init(&tiny(), 1), &data(), &data()[..1], &config(10, 25), &OptimConfig::default()).unwrap();
        let steps: Vec<usize> = log.evals.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![10, 20]);
        assert_eq!(log.losses.len(), 25);
        assert_eq!(log.stop, Some(StopReason::MaxSteps));
    }

    #[test]
    fn validation_loss_properties() {
        let c = tiny();
        let z = Parameters::zeros(&c);
        let uniform = evaluate_validation(&z, &c, &data()).unwrap();
        assert!((uniform - (c.vocab_size as f64).ln()).abs() < 1e-12);
        let p = Parameters::init(&c, 3);
        let one = &data()[..1];
        assert_eq!(evaluate_validation(&p, &c, one).unwrap(), example_loss(&p, &c, &one[0]).unwrap());
        assert_eq!(evaluate_validation(&p, &c, &data()).unwrap(), evaluate_validation(&p, &c, &data()).unwrap());
        assert!(matches!(evaluate_validation(&p, &c, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn best_checkpoint_has_minimum_validation_loss() {
        let (best, log) = train(&tiny(), Parameters::init(&tiny(), 2), &data(), &data(), &config(3, 30), &OptimConfig::default()).unwrap();
        let min = log.evals.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(best.val_loss, Some(min));
        assert_eq!(evaluate_validation(&best.params, &tiny(), &data()).unwrap(), min);
    }

    #[test]
    fn early_stop_waits_for_patience() {
        // A step size this large makes validation loss oscillate.
        let cfg = TrainingConfig { learning_rate: 5.0, patience: 2, ..config(1, 200) };
        let (_, log) = train(&tiny(), Parameters::init(&tiny(), 4), &data(), &data(), &cfg, &OptimConfig::default()).unwrap();
        assert_eq!(log.stop, Some(StopReason::EarlyStop));
        assert!(log.evals.len() > cfg.patience);
        assert!(log.losses.len() < 200);
        let history: Vec<f64> = log.evals.iter().map(|e| e.val_loss).collect();
        assert!(should_stop(&history, cfg.patience));
        assert!(!should_stop(&history[..history.len() - 1], cfg.patience));
    }

    #[test]
    fn training_is_deterministic() {
        let run = || train(&tiny(), Parameters::init(&tiny(), 5), &data(), &data(), &config(4, 12), &OptimConfig::default()).unwrap();
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_accumulation_averages() {
        let cfg = TrainingConfig { batch_size: 3, ..config(100, 2) };
        let (_, log) = train(&tiny(), Parameters::init(&tiny(), 6), &data(), &data(), &cfg, &OptimConfig::default()).unwrap();
        let p = Parameters::init(&tiny(), 6);
        let mean: f64 = data().iter().map(|e| example_loss(&p, &tiny(), e).unwrap()).sum::<f64>() / 3.0;
        assert!((log.losses[0] - mean).abs() < 1e-12);
    }

    #[test]
    fn resume_continues_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let straight = {
            let mut t = Trainer::new(tiny(), Parameters::init(&tiny(), 7), config(3, 14), OptimConfig::default()).unwrap();
            t.run(&data(), &data()).unwrap();
            (t.params().clone(), t.log().clone())
        };
        let mut first = Trainer::new(tiny(), Parameters::init(&tiny(), 7), config(3, 8), OptimConfig::default())
            .unwrap()
            .with_checkpoint_dir(dir.path())
            .unwrap();
        first.run(&data(), &data()).unwrap();
        drop(first);
        let mut resumed = Trainer::resume(dir.path()).unwrap();
        assert_eq!(resumed.step(), 8);
        resumed.set_max_steps(14);
        resumed.run(&data(), &data()).unwrap();
        assert_eq!(resumed.params(), &straight.0);
        assert_eq!(resumed.log(), &straight.1);
    }

    #[test]
    fn non_finite_loss_reports_step() {
        let mut p = Parameters::init(&tiny(), 8);
        p.token_embedding[[5, 0]] = f64::NAN;
        let err = train(&tiny(), p, &data(), &data(), &config(10, 5), &OptimConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { step, .. } if step >= 1));
    }
}
