//! Multimodal fusion and the four attention mechanisms.
//!
//! The pipeline embeds image cells and the question into a shared `d`-
//! dimensional space, fuses them by element-wise addition, and reduces each
//! fused cell to a presence score (its L2 norm). Selection then either keeps
//! the top-k cells (fixed-k), every cell whose softmax-normalized presence
//! beats `τ = 1/(w·h)` (adaptive), re-weights all cells (soft), or applies a
//! straight-through top-k gate (gradient flows densely, values are masked
//! hard).
//!
//! Selected values are gathered raw: selection probabilities are never
//! multiplied into the forward values.

use crate::nn::{Forward, Linear, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{self, Tape, Var};
use crate::tensor::{Result, TensorError};

use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    FixedK,
    Adaptive,
    Soft,
    StraightThrough,
}

/// Outcome of one attention pass over a `w·h`-cell map.
///
/// `indices` are unique flat cell indices stored in ascending order, so that
/// downstream sum pooling adds cells in the same order a full-map sum would.
#[derive(Debug, Clone)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub presence: Vec<f64>,
    pub mode: SelectionMode,
    pub cells: usize,
    pub threshold: Option<f64>,
    /// Set when the adaptive rule admitted no cell and the argmax fallback fired.
    pub fallback: bool,
}

impl Selection {
    pub fn k(&self) -> usize {
        self.indices.len()
    }

    pub fn fraction(&self) -> f64 {
        self.indices.len() as f64 / self.cells as f64
    }
}

/// `k = round(fraction · cells)`, clamped to `[1, cells]`.
pub fn fraction_to_k(fraction: f64, cells: usize) -> usize {
    ((fraction * cells as f64).round() as usize).clamp(1, cells)
}

// ── Embedding and fusion ──────────────────────────────────────────────────

/// Two 1×1 projection layers with a ReLU after each, applied per spatial
/// cell: `[n, c] -> [n, d]`.
pub struct ImageEmbed {
    l1: Linear,
    l2: Linear,
}

impl ImageEmbed {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        d: usize,
    ) -> Self {
        ImageEmbed {
            l1: Linear::new(params, rng, &format!("{name}.0"), in_channels, d, true),
            l2: Linear::new(params, rng, &format!("{name}.1"), d, d, true),
        }
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, cells: Var) -> Result<Var> {
        let h = self.l1.forward(fwd, cells)?;
        let h = fwd.tape.relu(h);
        let h = self.l2.forward(fwd, h)?;
        Ok(fwd.tape.relu(h))
    }
}

/// Two linear layers with a ReLU after each: `[b, q] -> [b, d]`.
pub struct QuestionEmbed {
    l1: Linear,
    l2: Linear,
}

impl QuestionEmbed {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        d: usize,
    ) -> Self {
        QuestionEmbed {
            l1: Linear::new(params, rng, &format!("{name}.0"), in_dim, d, true),
            l2: Linear::new(params, rng, &format!("{name}.1"), d, d, true),
        }
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, q: Var) -> Result<Var> {
        let h = self.l1.forward(fwd, q)?;
        let h = fwd.tape.relu(h);
        let h = self.l2.forward(fwd, h)?;
        Ok(fwd.tape.relu(h))
    }
}

/// Element-wise addition of the broadcast question embedding into every
/// image cell: `m[n,d] = x̂[n,d] + q̂`, where `q̂` is `[1,d]` (or already
/// expanded to `[n,d]`).
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, image_cells: Var, question: Var) -> Result<Var> {
    tape.add(image_cells, question)
}

/// Post-fusion per-cell processing: `depth` 1×1 layers with ReLU.
pub struct Alignment {
    layers: Vec<Linear>,
}

impl Alignment {
    /// `depth` must be 0 or 2.
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        depth: usize,
    ) -> Result<Self> {
        if depth != 0 && depth != 2 {
            return Err(TensorError::arg(
                "alignment",
                format!("depth must be 0 or 2, got {depth}"),
            ));
        }
        let layers = (0..depth)
            .map(|i| Linear::new(params, rng, &format!("{name}.{i}"), d, d, true))
            .collect();
        Ok(Alignment { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, m: Var) -> Result<Var> {
        let mut h = m;
        for layer in &self.layers {
            let lin = layer.forward(fwd, h)?;
            h = fwd.tape.relu(lin);
        }
        Ok(h)
    }
}

/// Presence vector: per-cell L2 norm of the fused map `[n, d] -> [n]`.
pub fn presence<T: Scalar>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    tape.l2_norm_last(m)
}

// ── Hard selection ────────────────────────────────────────────────────────

/// Fixed-k hard attention: gathers the k cells with the largest presence.
/// Gradients flow only through the gathered cells.
pub fn select_fixed_k<T: Scalar>(
    tape: &mut Tape<T>,
    m: Var,
    p: Var,
    k: usize,
) -> Result<(Selection, Var)> {
    let cells = tape.value(p).len();
    let mut indices = tape.topk(p, k)?;
    indices.sort_unstable();
    let selected = tape.gather_rows(m, &indices)?;
    let presence = tape.value(p).iter().map(|v| v.as_f64()).collect();
    Ok((
        Selection {
            indices,
            presence,
            mode: SelectionMode::FixedK,
            cells,
            threshold: None,
            fallback: false,
        },
        selected,
    ))
}

/// Adaptive hard attention: keeps every cell whose softmax-normalized
/// presence strictly exceeds `τ` (default `1/cells`). With uniform presence
/// the strict inequality admits nothing and the argmax cell is selected
/// instead, with the fallback flag set. The softmax is only compared against
/// the threshold; it never scales the gathered values.
pub fn select_adaptive<T: Scalar>(
    tape: &mut Tape<T>,
    m: Var,
    p: Var,
    tau: Option<f64>,
) -> Result<(Selection, Var)> {
    let presence: Vec<f64> = tape.value(p).iter().map(|v| v.as_f64()).collect();
    let cells = presence.len();
    let tau = tau.unwrap_or(1.0 / cells as f64);
    let probs = softmax_f64(tape.value(p));
    let mut indices: Vec<usize> = (0..cells).filter(|&i| probs[i] > tau).collect();
    let fallback = indices.is_empty();
    if fallback {
        indices = tape.topk(p, 1)?;
    }
    let selected = tape.gather_rows(m, &indices)?;
    Ok((
        Selection {
            indices,
            presence,
            mode: SelectionMode::Adaptive,
            cells,
            threshold: Some(tau),
            fallback,
        },
        selected,
    ))
}

/// Stable softmax of a value slice in f64, used only for thresholding.
pub fn softmax_f64<T: Scalar>(values: &[T]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for v in values {
        max = max.max(v.as_f64());
    }
    let exps: Vec<f64> = values.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ── Soft attention ────────────────────────────────────────────────────────

/// One scoring hop: a per-cell MLP over the cell and the current query state,
/// softmax-normalized across cells.
struct SoftHop {
    cell_proj: Linear,
    query_proj: Linear,
    score: Linear,
}

/// Multi-hop soft attention. Every cell receives a nonzero weight; the
/// pooled vector is the weight-averaged cell sum and the query state is
/// advanced by the pooled vector between hops.
///
/// The scorer is one hidden layer of width `d/2` with ReLU.
pub struct SoftAttention {
    hops: Vec<SoftHop>,
}

impl SoftAttention {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        hops: usize,
    ) -> Result<Self> {
        if hops == 0 {
            return Err(TensorError::arg("soft_attention", "hops must be >= 1"));
        }
        let width = (d / 2).max(1);
        let hops = (0..hops)
            .map(|h| SoftHop {
                cell_proj: Linear::new(params, rng, &format!("{name}.{h}.cell"), d, width, true),
                query_proj: Linear::new(params, rng, &format!("{name}.{h}.query"), d, width, false),
                score: Linear::new(params, rng, &format!("{name}.{h}.score"), width, 1, true),
            })
            .collect();
        Ok(SoftAttention { hops })
    }

    /// `m` is `[n, d]`, `question` is `[1, d]`. Returns the pooled `[1, d]`
    /// vector of the final hop plus the per-hop weights.
    pub fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<T>,
        m: Var,
        question: Var,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let mut query = question;
        let mut pooled = None;
        let mut weights = Vec::new();
        for hop in &self.hops {
            let cells = hop.cell_proj.forward(fwd, m)?;
            let q = hop.query_proj.forward(fwd, query)?;
            let mixed = fwd.tape.add(cells, q)?;
            let act = fwd.tape.relu(mixed);
            let scores = hop.score.forward(fwd, act)?;
            let row = fwd.tape.transpose(scores)?;
            let att = fwd.tape.softmax(row, 1)?;
            weights.push(fwd.tape.value(att).iter().map(|v| v.as_f64()).collect());
            let pool = fwd.tape.matmul(att, m)?;
            query = fwd.tape.add(query, pool)?;
            pooled = Some(pool);
        }
        Ok((pooled.expect("hops >= 1"), weights))
    }
}

// ── Straight-through gate ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StNormalizer {
    Sigmoid,
    Softmax,
}

/// Straight-through top-k estimator. The score network is an MLP with one
/// hidden layer of width `d/2` and a ReLU, normalized by `μ`; the forward
/// pass multiplies rows by the exact 0/1 top-k indicator while the backward
/// pass routes gradients through the score path for every cell.
pub struct StraightThroughGate {
    f1: Linear,
    f2: Linear,
    pub normalizer: StNormalizer,
}

impl StraightThroughGate {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        normalizer: StNormalizer,
    ) -> Self {
        let width = (d / 2).max(1);
        StraightThroughGate {
            f1: Linear::new(params, rng, &format!("{name}.f1"), d, width, true),
            f2: Linear::new(params, rng, &format!("{name}.f2"), width, 1, true),
            normalizer,
        }
    }

    /// Normalized scores `g = μ(f(x))`, shape `[n, 1]`.
    pub fn scores<T: Scalar>(&self, fwd: &mut Forward<T>, x: Var) -> Result<Var> {
        let hidden = self.f1.forward(fwd, x)?;
        let act = fwd.tape.relu(hidden);
        let raw = self.f2.forward(fwd, act)?;
        match self.normalizer {
            StNormalizer::Sigmoid => Ok(fwd.tape.sigmoid(raw)),
            StNormalizer::Softmax => {
                let row = fwd.tape.transpose(raw)?;
                let sm = fwd.tape.softmax(row, 1)?;
                fwd.tape.transpose(sm)
            }
        }
    }

    /// Masks `x[n, d]` down to its top-k rows by score. Returns the masked
    /// map (zeroed rows kept in place) and the selection.
    pub fn forward<T: Scalar>(
        &self,
        fwd: &mut Forward<T>,
        x: Var,
        k: usize,
    ) -> Result<(Var, Selection)> {
        let n = fwd.tape.shape(x)[0];
        if k == 0 || k > n {
            return Err(TensorError::arg(
                "straight_through",
                format!("k = {k} out of range for {n} rows"),
            ));
        }
        let g = self.scores(fwd, x)?;
        let mask = fwd.tape.st_topk_mask(g, k)?;
        let masked = fwd.tape.scale_rows(x, mask)?;
        let mut indices = tape::top_k_indices(fwd.tape.value(g), k)?;
        indices.sort_unstable();
        let presence = fwd.tape.value(g).iter().map(|v| v.as_f64()).collect();
        Ok((
            masked,
            Selection {
                indices,
                presence,
                mode: SelectionMode::StraightThrough,
                cells: n,
                threshold: None,
                fallback: false,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::rng::stream_rng;
    use crate::tensor::Tensor;

    fn map_2x2(tape: &mut Tape<f64>, data: &[f64]) -> (Var, Var) {
        let m = tape.leaf(Tensor::from_f64(vec![4, 2], data).unwrap());
        let p = tape.l2_norm_last(m).unwrap();
        (m, p)
    }

    #[test]
    fn fraction_conversion() {
        assert_eq!(fraction_to_k(0.16, 100), 16);
        assert_eq!(fraction_to_k(0.25, 16), 4);
        assert_eq!(fraction_to_k(1.0, 16), 16);
        assert_eq!(fraction_to_k(0.001, 16), 1);
    }

    #[test]
    fn fixed_k_selects_largest_presence() {
        let mut tape = Tape::new();
        let (m, p) = map_2x2(&mut tape, &[0.1, 0.0, 3.0, 4.0, 0.2, 0.0, 1.0, 0.0]);
        let (sel, gathered) = select_fixed_k(&mut tape, m, p, 2).unwrap();
        assert_eq!(sel.indices, vec![1, 3]);
        assert_eq!(tape.value(gathered), &[3.0, 4.0, 1.0, 0.0]);
    }

    #[test]
    fn fixed_k_full_selection_is_whole_map() {
        let mut tape = Tape::new();
        let (m, p) = map_2x2(&mut tape, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let (sel, gathered) = select_fixed_k(&mut tape, m, p, 4).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2, 3]);
        assert_eq!(tape.value(gathered), tape.value(m));
    }

    #[test]
    fn adaptive_selects_above_threshold() {
        // p = [2,0,0,0] on a 2×2 grid: softmax ≈ [0.7112, 0.0963, ..], τ = 0.25
        let mut tape = Tape::<f64>::new();
        let m = tape.leaf(Tensor::from_f64(vec![4, 1], &[2.0, 0.0, 0.0, 0.0]).unwrap());
        let p = tape.l2_norm_last(m).unwrap();
        let (sel, _) = select_adaptive(&mut tape, m, p, None).unwrap();
        assert_eq!(sel.indices, vec![0]);
        assert!(!sel.fallback);
        assert_eq!(sel.threshold, Some(0.25));
    }

    #[test]
    fn adaptive_uniform_falls_back_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let m = tape.leaf(Tensor::from_f64(vec![4, 1], &[1.5, 1.5, 1.5, 1.5]).unwrap());
        let p = tape.l2_norm_last(m).unwrap();
        let (sel, gathered) = select_adaptive(&mut tape, m, p, None).unwrap();
        assert!(sel.fallback);
        assert_eq!(sel.indices, vec![0]);
        assert_eq!(tape.value(gathered), &[1.5]);
    }

    #[test]
    fn adaptive_tau_is_inverse_cell_count() {
        for (w, h) in [(10usize, 10usize), (4, 4)] {
            let n = w * h;
            let mut tape = Tape::new();
            let m = tape.leaf(Tensor::filled(vec![n, 1], 1.0));
            let p = tape.l2_norm_last(m).unwrap();
            let (sel, _) = select_adaptive(&mut tape, m, p, None).unwrap();
            assert_eq!(sel.threshold, Some(1.0 / n as f64));
        }
    }

    #[test]
    fn soft_attention_single_cell_returns_cell() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream_rng(11, 0);
        let soft = SoftAttention::new(&mut params, &mut rng, "soft", 3, 2).unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
        let m = fwd.tape.constant(Tensor::from_f64(vec![1, 3], &[0.4, -1.0, 2.0]).unwrap());
        let q = fwd.tape.constant(Tensor::from_f64(vec![1, 3], &[0.5, 0.5, 0.5]).unwrap());
        let (pooled, weights) = soft.forward(&mut fwd, m, q).unwrap();
        assert_eq!(tape.value(pooled), &[0.4, -1.0, 2.0]);
        assert!(weights.iter().all(|w| w == &vec![1.0]));
    }

    #[test]
    fn soft_attention_weights_sum_to_one() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream_rng(12, 0);
        let soft = SoftAttention::new(&mut params, &mut rng, "soft", 4, 2).unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
        let m = fwd.tape.constant(Tensor::from_f64(vec![5, 4], &[0.3; 20]).unwrap());
        let q = fwd.tape.constant(Tensor::from_f64(vec![1, 4], &[0.1, -0.4, 0.9, 0.0]).unwrap());
        let (_, weights) = soft.forward(&mut fwd, m, q).unwrap();
        for hop in weights {
            let total: f64 = hop.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_scores_pool_to_mean() {
        // identical cells → uniform softmax regardless of scorer params
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream_rng(13, 0);
        let soft = SoftAttention::new(&mut params, &mut rng, "soft", 2, 1).unwrap();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
        let m = fwd.tape.constant(Tensor::from_f64(vec![4, 2], &[1.0, 3.0, 1.0, 3.0, 1.0, 3.0, 1.0, 3.0]).unwrap());
        let q = fwd.tape.constant(Tensor::from_f64(vec![1, 2], &[0.2, 0.7]).unwrap());
        let (pooled, _) = soft.forward(&mut fwd, m, q).unwrap();
        for (v, e) in tape.value(pooled).iter().zip([1.0, 3.0]) {
            assert!((v - e).abs() < 1e-9);
        }
    }

    #[test]
    fn straight_through_masks_exactly_k_rows() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = stream_rng(14, 0);
        let gate = StraightThroughGate::new(&mut params, &mut rng, "st", 4, StNormalizer::Softmax);
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = fwd.tape.constant(Tensor::from_f64(vec![6, 4], &data).unwrap());
        let (masked, sel) = gate.forward(&mut fwd, x, 2).unwrap();
        assert_eq!(sel.indices.len(), 2);
        let vm = tape.value(masked);
        let vx = tape.value(x);
        for row in 0..6 {
            for col in 0..4 {
                let expect = if sel.indices.contains(&row) { vx[row * 4 + col] } else { 0.0 };
                assert_eq!(vm[row * 4 + col].to_bits(), expect.to_bits());
            }
        }
    }
}
