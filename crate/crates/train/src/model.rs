//! Model assembly from a [`RunConfig`]: CNN image encoder, LSTM question
//! encoder, multimodal fusion, one of the four attention mechanisms, one of
//! the three aggregators, and the answer classifier.

use hvqa_core::attention::{
    fraction_to_k, fuse, presence, select_adaptive, select_fixed_k, Alignment, ImageEmbed,
    QuestionEmbed, Selection, SelectionMode, SoftAttention, StraightThroughGate,
};
use hvqa_core::aggregate::{sum_pool, PairwiseAggregator, RelationAggregator};
use hvqa_core::nn::{ConvLayerSpec, ConvStack, ConvStackSpec, Forward, Lstm, Mlp, ParamSet};
use hvqa_core::rng::stream_rng;
use hvqa_core::scalar::Scalar;
use hvqa_core::tape::Var;
use hvqa_core::tensor::Tensor;

use crate::config::{Aggregator, RunConfig};
use crate::{Result, TrainError};

pub struct VqaModel {
    pub conv: ConvStack,
    pub lstm: Lstm,
    pub img_embed: ImageEmbed,
    pub q_embed: QuestionEmbed,
    pub alignment: Alignment,
    pub soft: Option<SoftAttention>,
    pub st_gate: Option<StraightThroughGate>,
    pub pairwise: Option<PairwiseAggregator>,
    pub relation: Option<RelationAggregator>,
    pub classifier: Mlp,
    pub mode: SelectionMode,
    pub aggregator: Aggregator,
    pub k: usize,
    pub tau: Option<f64>,
    pub cells: usize,
    pub image_size: usize,
    pub d: usize,
    pub answers: usize,
}

impl VqaModel {
    /// Registers every parameter of the configured variant; initialization
    /// draws from a ChaCha stream seeded by `config.seed`, in registration
    /// order.
    pub fn build<T: Scalar>(
        config: &RunConfig,
        q_vocab: usize,
        a_vocab: usize,
        params: &mut ParamSet<T>,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 10);
        let preset = config.preset;
        let channels = preset.conv_channels();
        let spec = ConvStackSpec {
            layers: channels
                .iter()
                .map(|&c| ConvLayerSpec { out_channels: c, kernel: 3, stride: 2 })
                .collect(),
            batch_norm: true,
        };
        let conv = ConvStack::new(params, &mut rng, "cnn", 3, spec);
        let (embed_dim, lstm_hidden) = preset.lstm_dims();
        let lstm = Lstm::new(params, &mut rng, "lstm", q_vocab, embed_dim, lstm_hidden);
        let d = config.d;
        let img_embed = ImageEmbed::new(params, &mut rng, "img_embed", channels[3], d);
        let q_embed = QuestionEmbed::new(params, &mut rng, "q_embed", lstm_hidden, d);
        let alignment = Alignment::new(params, &mut rng, "align", d, config.alignment_depth)?;

        let extent = preset.map_extent();
        let cells = extent * extent;
        let k = fraction_to_k(config.fraction, cells);

        let soft = match config.attention_mode {
            SelectionMode::Soft => {
                Some(SoftAttention::new(params, &mut rng, "soft", d, config.hops)?)
            }
            _ => None,
        };
        let st_gate = match config.attention_mode {
            SelectionMode::StraightThrough => {
                Some(StraightThroughGate::new(params, &mut rng, "st", d, config.st_mu))
            }
            _ => None,
        };

        let (pairwise, relation) = match config.aggregator {
            Aggregator::Sum => (None, None),
            Aggregator::Pairwise => (
                Some(PairwiseAggregator::new(
                    params,
                    &mut rng,
                    "pairwise",
                    d,
                    config.pairwise_heads,
                    config.head_dim(),
                    config.pairwise_scale_scores,
                )?),
                None,
            ),
            Aggregator::Relation => (
                None,
                Some(RelationAggregator::new(
                    params,
                    &mut rng,
                    "rn",
                    d,
                    d,
                    config.rn_g_hidden,
                    4,
                    config.rn_f_hidden,
                    d,
                )),
            ),
        };
        if config.attention_mode == SelectionMode::Soft && config.aggregator != Aggregator::Sum {
            return Err(TrainError::Config(
                "soft attention pools directly; use aggregator=sum".into(),
            ));
        }

        let classifier = Mlp::new(
            params,
            &mut rng,
            "classifier",
            &[d, preset.classifier_hidden(), a_vocab],
            config.dropout,
        );

        Ok(VqaModel {
            conv,
            lstm,
            img_embed,
            q_embed,
            alignment,
            soft,
            st_gate,
            pairwise,
            relation,
            classifier,
            mode: config.attention_mode,
            aggregator: config.aggregator,
            k,
            tau: config.tau,
            cells,
            image_size: preset.image_size(),
            d,
            answers: a_vocab,
        })
    }

    /// Batched forward pass. `images` is `[batch, s, s, 3]`, already
    /// normalized; `questions` holds one token sequence per sample.
    pub fn forward_batch<T: Scalar>(
        &self,
        fwd: &mut Forward<T>,
        images: Tensor<T>,
        questions: &[Vec<u16>],
    ) -> Result<BatchOutput> {
        let batch = questions.len();
        let img_shape = images.shape().to_vec();
        if img_shape != [batch, self.image_size, self.image_size, 3] {
            return Err(TrainError::Config(format!(
                "expected images [{batch}, {s}, {s}, 3], got {img_shape:?}",
                s = self.image_size
            )));
        }
        let images = fwd.tape.constant(images);
        let feat = self.conv.forward(fwd, images)?;
        let fs = fwd.tape.shape(feat).to_vec();
        let cells = fs[1] * fs[2];
        debug_assert_eq!(cells, self.cells);
        let cell_rows = fwd.tape.reshape(feat, vec![batch * cells, fs[3]])?;

        let hq = self.lstm.forward_batch(fwd, questions)?;
        let x_hat = self.img_embed.forward(fwd, cell_rows)?;
        let q_hat = self.q_embed.forward(fwd, hq)?;

        // broadcast each sample's question embedding over its own cells
        let per_cell: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat(b).take(cells)).collect();
        let q_expanded = fwd.tape.gather_rows(q_hat, &per_cell)?;
        let fused = fuse(fwd.tape, x_hat, q_expanded)?;
        let m_all = self.alignment.forward(fwd, fused)?;

        let mut pooled_rows = Vec::with_capacity(batch);
        let mut selections = Vec::with_capacity(batch);
        for b in 0..batch {
            let m_b = fwd.tape.slice_rows(m_all, b * cells, cells)?;
            let q_b = fwd.tape.slice_rows(q_hat, b, 1)?;
            let (pooled, selection) = self.attend_and_aggregate(fwd, m_b, q_b)?;
            pooled_rows.push(pooled);
            selections.push(selection);
        }
        let stacked = fwd.tape.concat_rows(&pooled_rows)?;
        let logits = self.classifier.forward(fwd, stacked)?;
        Ok(BatchOutput { logits, selections })
    }

    fn attend_and_aggregate<T: Scalar>(
        &self,
        fwd: &mut Forward<T>,
        m: Var,
        q: Var,
    ) -> Result<(Var, Selection)> {
        match self.mode {
            SelectionMode::FixedK => {
                let p = presence(fwd.tape, m)?;
                let (sel, gathered) = select_fixed_k(fwd.tape, m, p, self.k)?;
                Ok((self.aggregate(fwd, gathered, q)?, sel))
            }
            SelectionMode::Adaptive => {
                let p = presence(fwd.tape, m)?;
                let (sel, gathered) = select_adaptive(fwd.tape, m, p, self.tau)?;
                Ok((self.aggregate(fwd, gathered, q)?, sel))
            }
            SelectionMode::Soft => {
                let soft = self.soft.as_ref().expect("soft mode has a soft module");
                let (pooled, weights) = soft.forward(fwd, m, q)?;
                let presence = weights.last().cloned().unwrap_or_default();
                let sel = Selection {
                    indices: (0..self.cells).collect(),
                    presence,
                    mode: SelectionMode::Soft,
                    cells: self.cells,
                    threshold: None,
                    fallback: false,
                };
                Ok((pooled, sel))
            }
            SelectionMode::StraightThrough => {
                let gate = self.st_gate.as_ref().expect("st mode has a gate");
                let (masked, sel) = gate.forward(fwd, m, self.k)?;
                Ok((self.aggregate(fwd, masked, q)?, sel))
            }
        }
    }

    fn aggregate<T: Scalar>(&self, fwd: &mut Forward<T>, rows: Var, q: Var) -> Result<Var> {
        match self.aggregator {
            Aggregator::Sum => Ok(sum_pool(fwd.tape, rows)?),
            Aggregator::Pairwise => {
                Ok(self.pairwise.as_ref().expect("pairwise module").forward(fwd, rows)?)
            }
            Aggregator::Relation => {
                Ok(self.relation.as_ref().expect("relation module").forward(fwd, rows, q)?)
            }
        }
    }
}

pub struct BatchOutput {
    pub logits: Var,
    pub selections: Vec<Selection>,
}

/// Row index of the largest logit per sample (ties by ascending class).
pub fn argmax_rows<T: Scalar>(values: &[T], rows: usize, cols: usize) -> Vec<usize> {
    (0..rows)
        .map(|r| {
            let row = &values[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
