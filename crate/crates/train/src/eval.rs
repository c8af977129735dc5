//! Deterministic evaluation: eval-mode forward (running batch-norm
//! statistics, no dropout), accuracy overall and per question family.

use hvqa_core::attention::Selection;
use hvqa_core::nn::{Forward, Mode, ParamSet};
use hvqa_core::tape::Tape;
use hvqa_core::tensor::Tensor;
use hvqa_data::normalize::normalize_image;
use hvqa_data::qa::QuestionFamily;
use hvqa_data::Dataset;

use crate::model::{argmax_rows, VqaModel};
use crate::{Result, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: f64,
    pub total: usize,
    /// (family name, accuracy, sample count); families with no samples
    /// report accuracy 0 over count 0.
    pub per_family: [(&'static str, f64, usize); 3],
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("overall        {:>7.3}%  ({} samples)\n", self.overall * 100.0, self.total));
        for (name, acc, count) in &self.per_family {
            out.push_str(&format!("{name:<14} {:>7.3}%  ({count} samples)\n", acc * 100.0));
        }
        out
    }
}

/// Builds the `[n, s, s, 3]` image tensor for a set of sample indices,
/// normalizing each image by its own L2 norm.
pub fn assemble_images(dataset: &Dataset, indices: &[usize]) -> Tensor<f32> {
    let s = dataset.img_h as usize;
    let c = dataset.img_c as usize;
    let mut data = Vec::with_capacity(indices.len() * s * s * c);
    for &i in indices {
        let normalized = normalize_image(&dataset.samples[i].image);
        data.extend_from_slice(normalized.data());
    }
    Tensor::new(vec![indices.len(), s, s, c], data).expect("batch shape")
}

pub fn check_compat(model: &VqaModel, dataset: &Dataset) -> Result<()> {
    if dataset.img_h as usize != model.image_size || dataset.img_w as usize != model.image_size {
        return Err(TrainError::Config(format!(
            "dataset images are {}×{}, model expects {}×{}",
            dataset.img_w, dataset.img_h, model.image_size, model.image_size
        )));
    }
    if dataset.a_vocab as usize != model.answers {
        return Err(TrainError::Config(format!(
            "dataset has {} answer classes, model has {}",
            dataset.a_vocab, model.answers
        )));
    }
    Ok(())
}

/// Accuracy on the full dataset, overall and per family. Record order does
/// not affect the result: eval mode is per-sample deterministic.
pub fn evaluate(
    model: &VqaModel,
    params: &mut ParamSet<f32>,
    dataset: &Dataset,
    batch: usize,
) -> Result<EvalReport> {
    check_compat(model, dataset)?;
    if dataset.is_empty() {
        return Err(TrainError::Config("cannot evaluate an empty dataset".into()));
    }
    let mut correct = [0usize; 3];
    let mut counts = [0usize; 3];
    let mut total_correct = 0usize;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let preds = predict(model, params, dataset, chunk)?;
        for (&i, pred) in chunk.iter().zip(&preds) {
            let sample = &dataset.samples[i];
            let family = sample.family as usize;
            counts[family] += 1;
            if pred.answer == sample.answer {
                correct[family] += 1;
                total_correct += 1;
            }
        }
    }
    let family_name = |f: u8| QuestionFamily::from_u8(f).expect("valid family").name();
    let per_family = [0u8, 1, 2].map(|f| {
        let fi = f as usize;
        let acc = if counts[fi] == 0 { 0.0 } else { correct[fi] as f64 / counts[fi] as f64 };
        (family_name(f), acc, counts[fi])
    });
    Ok(EvalReport {
        overall: total_correct as f64 / dataset.len() as f64,
        total: dataset.len(),
        per_family,
    })
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub answer: u16,
    pub selection: Selection,
}

/// Eval-mode predictions (answer id + attention selection) for a set of
/// sample indices.
pub fn predict(
    model: &VqaModel,
    params: &mut ParamSet<f32>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<Prediction>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(TrainError::Config(format!(
            "sample index {bad} out of range for {} records",
            dataset.len()
        )));
    }
    let images = assemble_images(dataset, indices);
    let questions: Vec<Vec<u16>> =
        indices.iter().map(|&i| dataset.samples[i].tokens.clone()).collect();
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, params, Mode::Eval);
    let out = model.forward_batch(&mut fwd, images, &questions)?;
    let logits = tape.value(out.logits);
    let preds = argmax_rows(logits, indices.len(), model.answers);
    Ok(preds
        .into_iter()
        .zip(out.selections)
        .map(|(answer, selection)| Prediction { answer: answer as u16, selection })
        .collect())
}
