//! The training loop: seeded epoch shuffles, per-step dropout streams,
//! CSV metrics, periodic checkpoints, plateau stopping. Bit-deterministic
//! given (seed, config, dataset); the wall-clock column is diagnostic only.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use hvqa_core::attention::SelectionMode;
use hvqa_core::nn::{Forward, Mode, ParamSet};
use hvqa_core::rng::{self, mix, stream_rng};
use hvqa_core::scalar::Scalar;
use hvqa_core::tape::Tape;
use hvqa_data::Dataset;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::eval::{assemble_images, check_compat, evaluate};
use crate::loss::{cross_entropy, with_weight_decay};
use crate::model::{argmax_rows, VqaModel};
use crate::optim::Adam;
use crate::{Result, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub mean_selected_fraction: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str =
        "step,loss,train_acc,eval_acc,mean_selected_fraction,wall_ms";

    pub fn csv_line(&self) -> String {
        let eval = self.eval_acc.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step, self.loss, self.train_acc, eval, self.mean_selected_fraction, self.wall_ms
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    Plateau,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub stop: StopReason,
    pub rows: Vec<MetricsRow>,
    /// Eval-mode accuracy over the full training split after the last step.
    pub final_train_acc: f64,
    pub final_eval_acc: Option<f64>,
}

#[derive(Default)]
pub struct TrainSinks<'a> {
    pub metrics_csv: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
    pub verbose: bool,
}

pub struct Trainer {
    pub config: RunConfig,
    pub params: ParamSet<f32>,
    pub model: VqaModel,
    pub opt: Adam<f32>,
    pub step: u64,
    pub q_vocab: u32,
    pub a_vocab: u32,
}

impl Trainer {
    pub fn new(config: RunConfig, q_vocab: u32, a_vocab: u32) -> Result<Self> {
        let mut params = ParamSet::new();
        let model = VqaModel::build(&config, q_vocab as usize, a_vocab as usize, &mut params)?;
        let opt = Adam::new(&params, config.lr);
        Ok(Trainer { config, params, model, opt, step: 0, q_vocab, a_vocab })
    }

    /// Rebuilds the model from the stored config and restores parameters and
    /// optimizer state; continuing matches an uninterrupted run bitwise.
    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        let mut trainer =
            Trainer::new(checkpoint.config.clone(), checkpoint.q_vocab, checkpoint.a_vocab)?;
        checkpoint.restore_into(&mut trainer.params, &mut trainer.opt)?;
        trainer.step = checkpoint.step;
        Ok(trainer)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            &self.params,
            &self.opt,
            self.step,
            self.q_vocab,
            self.a_vocab,
        )
    }

    /// One optimization step over an explicit list of sample indices.
    pub fn train_step(&mut self, dataset: &Dataset, indices: &[usize]) -> Result<MetricsRow> {
        let start = Instant::now();
        let images = assemble_images(dataset, indices);
        let questions: Vec<Vec<u16>> =
            indices.iter().map(|&i| dataset.samples[i].tokens.clone()).collect();
        let answers: Vec<u16> = indices.iter().map(|&i| dataset.samples[i].answer).collect();

        let mut tape = Tape::new();
        let mut step_rng = stream_rng(mix(self.config.seed, self.step), 2);
        let mut fwd = Forward::with_rng(&mut tape, &mut self.params, Mode::Train, &mut step_rng);
        let out = self.model.forward_batch(&mut fwd, images, &questions)?;
        let ce = cross_entropy(fwd.tape, out.logits, &answers)?;
        let loss = with_weight_decay(&mut fwd, ce, self.config.weight_decay)?;
        let bindings = fwd.bindings();
        tape.backward(loss)?;

        let mut grads = Vec::with_capacity(self.opt.ids().len());
        for &id in self.opt.ids() {
            let var = bindings
                .iter()
                .find(|(pid, _)| *pid == id)
                .map(|(_, v)| *v)
                .ok_or_else(|| {
                    TrainError::Config(format!("parameter {} not bound in forward", self.params.name(id)))
                })?;
            grads.push(tape.grad_tensor(var));
        }
        let step_index = self.step;
        self.opt.step(&mut self.params, &grads, step_index)?;
        self.step += 1;

        let logits = tape.value(out.logits);
        let preds = argmax_rows(logits, indices.len(), self.model.answers);
        let correct = preds
            .iter()
            .zip(&answers)
            .filter(|(p, a)| **p == **a as usize)
            .count();
        let mean_fraction = out
            .selections
            .iter()
            .map(|s| s.fraction())
            .sum::<f64>()
            / out.selections.len() as f64;
        Ok(MetricsRow {
            step: step_index,
            loss: tape.value(loss)[0].as_f64(),
            train_acc: correct as f64 / indices.len() as f64,
            eval_acc: None,
            mean_selected_fraction: mean_fraction,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs from the current step to `max_steps` (or a training plateau).
    pub fn run(
        &mut self,
        train_data: &Dataset,
        eval_data: Option<&Dataset>,
        sinks: &mut TrainSinks,
    ) -> Result<TrainOutcome> {
        check_compat(&self.model, train_data)?;
        if let Some(eval) = eval_data {
            check_compat(&self.model, eval)?;
        }
        if train_data.len() < self.config.batch {
            return Err(TrainError::Config(format!(
                "dataset has {} samples, batch is {}",
                train_data.len(),
                self.config.batch
            )));
        }
        let batch = self.config.batch;
        let steps_per_epoch = (train_data.len() / batch) as u64;
        let mut rows = Vec::new();
        if let Some(csv) = sinks.metrics_csv.as_deref_mut() {
            if self.step == 0 {
                writeln!(csv, "{}", MetricsRow::CSV_HEADER)?;
            }
        }

        let mut perm: Vec<usize> = Vec::new();
        let mut perm_epoch = u64::MAX;
        let mut window_acc_sum = 0.0;
        let mut window_count = 0usize;
        let mut best_window = f64::NEG_INFINITY;
        let mut stale_windows = 0usize;
        let mut epoch_fraction_sum = 0.0;
        let mut epoch_fraction_count = 0usize;
        let mut stop = StopReason::MaxSteps;

        while self.step < self.config.max_steps {
            let epoch = self.step / steps_per_epoch;
            let idx_in_epoch = (self.step % steps_per_epoch) as usize;
            if epoch != perm_epoch {
                perm = (0..train_data.len()).collect();
                let mut shuffle_rng = stream_rng(mix(self.config.seed, epoch), 3);
                rng::shuffle(&mut shuffle_rng, &mut perm);
                perm_epoch = epoch;
            }
            let indices = &perm[idx_in_epoch * batch..(idx_in_epoch + 1) * batch];
            let mut row = self.train_step(train_data, indices)?;
            window_acc_sum += row.train_acc;
            window_count += 1;
            epoch_fraction_sum += row.mean_selected_fraction;
            epoch_fraction_count += 1;

            let at_eval = self.step % self.config.eval_every == 0;
            if at_eval {
                if let Some(eval) = eval_data {
                    let report = evaluate(&self.model, &mut self.params, eval, batch)?;
                    row.eval_acc = Some(report.overall);
                }
                let window_acc = window_acc_sum / window_count as f64;
                if window_acc > best_window + self.config.plateau_min_delta {
                    best_window = window_acc;
                    stale_windows = 0;
                } else {
                    stale_windows += 1;
                }
                window_acc_sum = 0.0;
                window_count = 0;
            }

            if let Some(csv) = sinks.metrics_csv.as_deref_mut() {
                writeln!(csv, "{}", row.csv_line())?;
            }
            if sinks.verbose && at_eval {
                eprintln!(
                    "step {:>6}  loss {:.4}  batch acc {:.3}  selected {:.3}",
                    row.step, row.loss, row.train_acc, row.mean_selected_fraction
                );
            }
            if self.step % steps_per_epoch == 0 && self.config.attention_mode == SelectionMode::Adaptive
            {
                if sinks.verbose {
                    eprintln!(
                        "epoch {:>4}  mean selected fraction {:.4}",
                        epoch,
                        epoch_fraction_sum / epoch_fraction_count as f64
                    );
                }
                epoch_fraction_sum = 0.0;
                epoch_fraction_count = 0;
            }
            rows.push(row);

            if let Some(dir) = sinks.checkpoint_dir {
                if self.step % self.config.checkpoint_every == 0 {
                    self.checkpoint().save(dir.join(format!("checkpoint_{:08}.hckp", self.step)))?;
                }
            }
            if self.config.plateau_windows > 0 && stale_windows >= self.config.plateau_windows {
                stop = StopReason::Plateau;
                break;
            }
        }

        // Final full-split accuracy in eval mode; this is the number a later
        // eval run on the same split reproduces exactly.
        let train_report = evaluate(&self.model, &mut self.params, train_data, batch)?;
        let final_eval_acc = match eval_data {
            Some(eval) => Some(evaluate(&self.model, &mut self.params, eval, batch)?.overall),
            None => None,
        };
        let final_row = MetricsRow {
            step: self.step,
            loss: rows.last().map(|r| r.loss).unwrap_or(f64::NAN),
            train_acc: train_report.overall,
            eval_acc: final_eval_acc,
            mean_selected_fraction: rows.last().map(|r| r.mean_selected_fraction).unwrap_or(0.0),
            wall_ms: 0.0,
        };
        if let Some(csv) = sinks.metrics_csv.as_deref_mut() {
            writeln!(csv, "{}", final_row.csv_line())?;
        }
        rows.push(final_row);
        if let Some(dir) = sinks.checkpoint_dir {
            self.checkpoint().save(dir.join("checkpoint_final.hckp"))?;
        }
        Ok(TrainOutcome {
            steps: self.step,
            stop,
            rows,
            final_train_acc: train_report.overall,
            final_eval_acc,
        })
    }
}

/// Builds a trainer from the dataset's declared vocabularies and runs it.
pub fn train_full(
    config: RunConfig,
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    sinks: &mut TrainSinks,
) -> Result<(Trainer, TrainOutcome)> {
    let mut trainer = Trainer::new(config, train_data.q_vocab, train_data.a_vocab)?;
    let outcome = trainer.run(train_data, eval_data, sinks)?;
    Ok((trainer, outcome))
}
