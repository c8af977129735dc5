//! Reduce a selected `[k, d]` feature set to a single vector.
//!
//! Three aggregators: sum pooling, a multi-head non-local pairwise operator
//! (query/key/value over all k×k cell pairs), and relation aggregation (a
//! shared MLP over all ordered cell pairs, summed, then read out). All are
//! permutation-invariant in the selected set.
//!
//! The pairwise and relation operators cost Θ(k²) in the selected count,
//! which is what hard attention saves: [`pairwise_flops`] and
//! [`relation_flops`] give the closed-form counts, and [`kernels`] holds
//! plain forward implementations staged so a benchmark can time the
//! quadratic interaction separately from the linear projections.

use rand_chacha::ChaCha8Rng;

use crate::nn::{Forward, Linear, ParamSet};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, TensorError};

/// Column-wise sum of the selected rows, in ascending row order, yielding
/// `[1, d]`. With the full map selected this is bitwise identical to summing
/// the map directly.
pub fn sum_pool<T: Scalar>(tape: &mut Tape<T>, selected: Var) -> Result<Var> {
    tape.sum_axis0(selected)
}

// ── Non-local pairwise operator ───────────────────────────────────────────

pub struct PairwiseHead {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

/// Multi-head query/key/value operator over the selected cells.
///
/// Per head: project queries, keys, and values; softmax the k×k score matrix
/// over its second index; sum values by weight. Head outputs are
/// concatenated and linearly recombined to `d`, then sum-pooled. Scores are
/// raw dot products by default; `scale_scores` divides by √d_h.
pub struct PairwiseAggregator {
    pub heads: Vec<PairwiseHead>,
    pub recombine: Linear,
    pub d: usize,
    pub head_dim: usize,
    pub scale_scores: bool,
}

impl PairwiseAggregator {
    /// `head_dim · heads` must not exceed `d`.
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        heads: usize,
        head_dim: usize,
        scale_scores: bool,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 {
            return Err(TensorError::arg("pairwise", "heads and head_dim must be positive"));
        }
        if head_dim * heads > d {
            return Err(TensorError::arg(
                "pairwise",
                format!("head_dim {head_dim} × heads {heads} exceeds d = {d}"),
            ));
        }
        let head_blocks: Vec<PairwiseHead> = (0..heads)
            .map(|h| PairwiseHead {
                wq: Linear::new(params, rng, &format!("{name}.{h}.wq"), d, head_dim, false),
                wk: Linear::new(params, rng, &format!("{name}.{h}.wk"), d, head_dim, false),
                wv: Linear::new(params, rng, &format!("{name}.{h}.wv"), d, head_dim, false),
            })
            .collect();
        let recombine = Linear::new(params, rng, &format!("{name}.out"), head_dim * heads, d, false);
        Ok(PairwiseAggregator { heads: head_blocks, recombine, d, head_dim, scale_scores })
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, selected: Var) -> Result<Var> {
        let mut head_outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.wq.forward(fwd, selected)?;
            let key = head.wk.forward(fwd, selected)?;
            let v = head.wv.forward(fwd, selected)?;
            let key_t = fwd.tape.transpose(key)?;
            let mut scores = fwd.tape.matmul(q, key_t)?;
            if self.scale_scores {
                scores = fwd.tape.scale(scores, 1.0 / (self.head_dim as f64).sqrt());
            }
            let att = fwd.tape.softmax(scores, 1)?;
            head_outputs.push(fwd.tape.matmul(att, v)?);
        }
        let mut concat = head_outputs[0];
        for &h in &head_outputs[1..] {
            concat = fwd.tape.concat_cols(concat, h)?;
        }
        let recombined = self.recombine.forward(fwd, concat)?;
        sum_pool(fwd.tape, recombined)
    }
}

// ── Relation aggregation ──────────────────────────────────────────────────

/// Relation aggregation: a shared pair function g over every ordered pair of
/// selected cells (self-pairs included) concatenated with the question
/// embedding, summed over pairs in lexicographic order, then a readout f.
///
/// The pair function's first layer is stored split as three blocks (first
/// cell, second cell, question), which is algebraically identical to
/// concatenating `[m_a; m_b; q̂]` and avoids materializing k²-row question
/// copies.
pub struct RelationAggregator {
    pub g_first_a: Linear,
    pub g_first_b: Linear,
    pub g_first_q: Linear,
    pub g_rest: Vec<Linear>,
    pub f_hidden: Linear,
    pub f_out: Linear,
    pub d: usize,
    pub q_dim: usize,
}

impl RelationAggregator {
    pub fn new<T: Scalar>(
        params: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        q_dim: usize,
        g_hidden: usize,
        g_layers: usize,
        f_hidden: usize,
        out_dim: usize,
    ) -> Self {
        assert!(g_layers >= 1, "relation aggregator needs at least one g layer");
        let g_first_a = Linear::new(params, rng, &format!("{name}.g0.a"), d, g_hidden, false);
        let g_first_b = Linear::new(params, rng, &format!("{name}.g0.b"), d, g_hidden, false);
        let g_first_q = Linear::new(params, rng, &format!("{name}.g0.q"), q_dim, g_hidden, true);
        let g_rest = (1..g_layers)
            .map(|i| Linear::new(params, rng, &format!("{name}.g{i}"), g_hidden, g_hidden, true))
            .collect();
        let f_hidden_l = Linear::new(params, rng, &format!("{name}.f0"), g_hidden, f_hidden, true);
        let f_out = Linear::new(params, rng, &format!("{name}.f1"), f_hidden, out_dim, true);
        RelationAggregator {
            g_first_a,
            g_first_b,
            g_first_q,
            g_rest,
            f_hidden: f_hidden_l,
            f_out,
            d,
            q_dim,
        }
    }

    /// `selected` is `[k, d]`, `question` is `[1, q_dim]`; returns `[1, out]`.
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<T>, selected: Var, question: Var) -> Result<Var> {
        let k = fwd.tape.shape(selected)[0];
        // Ordered pairs in lexicographic order: (0,0), (0,1), .., (k-1,k-1).
        let first: Vec<usize> = (0..k).flat_map(|a| std::iter::repeat(a).take(k)).collect();
        let second: Vec<usize> = (0..k).flat_map(|_| 0..k).collect();
        let cell_a = fwd.tape.gather_rows(selected, &first)?;
        let cell_b = fwd.tape.gather_rows(selected, &second)?;
        let ha = self.g_first_a.forward(fwd, cell_a)?;
        let hb = self.g_first_b.forward(fwd, cell_b)?;
        let hq = self.g_first_q.forward(fwd, question)?;
        let sum_ab = fwd.tape.add(ha, hb)?;
        let pre = fwd.tape.add(sum_ab, hq)?;
        let mut h = fwd.tape.relu(pre);
        for layer in &self.g_rest {
            let lin = layer.forward(fwd, h)?;
            h = fwd.tape.relu(lin);
        }
        let pooled = fwd.tape.sum_axis0(h)?;
        let f1 = self.f_hidden.forward(fwd, pooled)?;
        let f1 = fwd.tape.relu(f1);
        self.f_out.forward(fwd, f1)
    }
}

// ── FLOP models ───────────────────────────────────────────────────────────

/// Closed-form multiply-add counts for the pairwise operator at a given
/// selected-set size. `pairwise_term` is the part that scales with k².
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairwiseFlops {
    pub projections: u64,
    pub scores: u64,
    pub weighted_sum: u64,
    pub softmax: u64,
    pub recombine: u64,
    pub pool: u64,
}

impl PairwiseFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.scores + self.weighted_sum + self.softmax + self.recombine + self.pool
    }

    /// The quadratic interaction term: scores, softmax, and weighted sums.
    pub fn pairwise_term(&self) -> u64 {
        self.scores + self.weighted_sum + self.softmax
    }
}

/// Multiply-add model for [`PairwiseAggregator`] with `head_dim = d / heads`.
pub fn pairwise_flops(k: usize, d: usize, heads: usize) -> PairwiseFlops {
    let (k, d, heads) = (k as u64, d as u64, heads as u64);
    let dh = d / heads;
    PairwiseFlops {
        projections: 3 * heads * k * d * dh,
        scores: heads * k * k * dh,
        weighted_sum: heads * k * k * dh,
        softmax: heads * k * k,
        recombine: k * (dh * heads) * d,
        pool: k * d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationFlops {
    pub pair_count: u64,
    pub g_per_pair: u64,
    pub f_readout: u64,
}

impl RelationFlops {
    pub fn total(&self) -> u64 {
        self.pair_count * self.g_per_pair + self.f_readout
    }

    pub fn pairwise_term(&self) -> u64 {
        self.pair_count * self.g_per_pair
    }
}

/// Multiply-add model for [`RelationAggregator`].
pub fn relation_flops(
    k: usize,
    d: usize,
    q_dim: usize,
    g_hidden: usize,
    g_layers: usize,
    f_hidden: usize,
    out_dim: usize,
) -> RelationFlops {
    let (k, d, q, gh, fh, out) = (
        k as u64,
        d as u64,
        q_dim as u64,
        g_hidden as u64,
        f_hidden as u64,
        out_dim as u64,
    );
    let g_per_pair = 2 * d * gh + (g_layers as u64 - 1) * gh * gh;
    RelationFlops {
        pair_count: k * k,
        g_per_pair,
        // question block is applied once, not per pair
        f_readout: q * gh + gh * fh + fh * out,
    }
}

// ── Plain forward kernels (benchmark + cross-checks) ──────────────────────

pub mod kernels {
    //! Tape-free f32 forwards of the aggregators, staged so the quadratic
    //! interaction can be timed on its own. `interact` output at k = 1 is
    //! bitwise the value projection: the softmax over a single element is 1.

    use crate::kernels::{dot, matmul_seq};
    use crate::rng;

    /// One head's projection matrices, `[d × dh]` each, plus the shared
    /// recombination `[dh·heads × d]`.
    pub struct PairwiseKernel {
        pub wq: Vec<Vec<f32>>,
        pub wk: Vec<Vec<f32>>,
        pub wv: Vec<Vec<f32>>,
        pub w_out: Vec<f32>,
        pub d: usize,
        pub dh: usize,
        pub heads: usize,
    }

    pub struct Projected {
        pub q: Vec<Vec<f32>>,
        pub k: Vec<Vec<f32>>,
        pub v: Vec<Vec<f32>>,
        pub rows: usize,
    }

    impl PairwiseKernel {
        pub fn random(d: usize, heads: usize, seed: u64) -> Self {
            let dh = d / heads;
            let mut rng = rng::stream_rng(seed, 0);
            let mut mat = |rows: usize, cols: usize| -> Vec<f32> {
                (0..rows * cols)
                    .map(|_| rng::uniform_sym(&mut rng, (6.0 / (rows + cols) as f64).sqrt()) as f32)
                    .collect()
            };
            PairwiseKernel {
                wq: (0..heads).map(|_| mat(d, dh)).collect(),
                wk: (0..heads).map(|_| mat(d, dh)).collect(),
                wv: (0..heads).map(|_| mat(d, dh)).collect(),
                w_out: mat(dh * heads, d),
                d,
                dh,
                heads,
            }
        }

        /// Linear stage: project the k selected cells to per-head q/k/v.
        pub fn project(&self, selected: &[f32], k: usize) -> Projected {
            let proj = |w: &Vec<Vec<f32>>| -> Vec<Vec<f32>> {
                w.iter().map(|m| matmul_seq(selected, m, k, self.d, self.dh)).collect()
            };
            Projected { q: proj(&self.wq), k: proj(&self.wk), v: proj(&self.wv), rows: k }
        }

        /// Quadratic stage: k×k scores, softmax, weighted value sums; output
        /// is the concatenated head outputs `[k, dh·heads]`.
        pub fn interact(&self, p: &Projected) -> Vec<f32> {
            let k = p.rows;
            let dh = self.dh;
            let mut out = vec![0.0f32; k * dh * self.heads];
            for h in 0..self.heads {
                let (q, key, v) = (&p.q[h], &p.k[h], &p.v[h]);
                let mut weights = vec![0.0f32; k];
                for i in 0..k {
                    let qi = &q[i * dh..(i + 1) * dh];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..k {
                        weights[j] = dot(qi, &key[j * dh..(j + 1) * dh]);
                        max = max.max(weights[j]);
                    }
                    let mut sum = 0.0f32;
                    for w in weights.iter_mut() {
                        *w = (*w - max).exp();
                        sum += *w;
                    }
                    let row = &mut out[(i * self.heads + h) * dh..(i * self.heads + h + 1) * dh];
                    for j in 0..k {
                        let w = weights[j] / sum;
                        for (o, &val) in row.iter_mut().zip(&v[j * dh..(j + 1) * dh]) {
                            *o += w * val;
                        }
                    }
                }
            }
            out
        }

        /// Linear stage: recombine heads to `[k, d]` and sum-pool to `[d]`.
        pub fn recombine_pool(&self, interacted: &[f32], k: usize) -> Vec<f32> {
            let wide = self.dh * self.heads;
            let mixed = matmul_seq(interacted, &self.w_out, k, wide, self.d);
            let mut pooled = vec![0.0f32; self.d];
            for row in 0..k {
                for j in 0..self.d {
                    pooled[j] += mixed[row * self.d + j];
                }
            }
            pooled
        }

        pub fn full(&self, selected: &[f32], k: usize) -> Vec<f32> {
            let p = self.project(selected, k);
            let x = self.interact(&p);
            self.recombine_pool(&x, k)
        }
    }

    /// Plain relation-aggregation forward: g over all ordered pairs, sum,
    /// readout f.
    pub struct RelationKernel {
        pub g_a: Vec<f32>,
        pub g_b: Vec<f32>,
        pub g_q: Vec<f32>,
        pub g_bias0: Vec<f32>,
        pub g_rest: Vec<(Vec<f32>, Vec<f32>)>,
        pub f_hidden: (Vec<f32>, Vec<f32>),
        pub f_out: (Vec<f32>, Vec<f32>),
        pub d: usize,
        pub q_dim: usize,
        pub g_hidden: usize,
        pub f_dim: usize,
        pub out_dim: usize,
    }

    impl RelationKernel {
        pub fn random(
            d: usize,
            q_dim: usize,
            g_hidden: usize,
            g_layers: usize,
            f_dim: usize,
            out_dim: usize,
            seed: u64,
        ) -> Self {
            let mut rng = rng::stream_rng(seed, 1);
            let mut mat = |rows: usize, cols: usize| -> Vec<f32> {
                (0..rows * cols)
                    .map(|_| rng::uniform_sym(&mut rng, (6.0 / (rows + cols) as f64).sqrt()) as f32)
                    .collect()
            };
            RelationKernel {
                g_a: mat(d, g_hidden),
                g_b: mat(d, g_hidden),
                g_q: mat(q_dim, g_hidden),
                g_bias0: vec![0.0; g_hidden],
                g_rest: (1..g_layers).map(|_| (mat(g_hidden, g_hidden), vec![0.0; g_hidden])).collect(),
                f_hidden: (mat(g_hidden, f_dim), vec![0.0; f_dim]),
                f_out: (mat(f_dim, out_dim), vec![0.0; out_dim]),
                d,
                q_dim,
                g_hidden,
                f_dim,
                out_dim,
            }
        }

        pub fn full(&self, selected: &[f32], k: usize, question: &[f32]) -> Vec<f32> {
            let gh = self.g_hidden;
            let q_part = matmul_seq(question, &self.g_q, 1, self.q_dim, gh);
            let a_part = matmul_seq(selected, &self.g_a, k, self.d, gh);
            let b_part = matmul_seq(selected, &self.g_b, k, self.d, gh);
            let mut pooled = vec![0.0f32; gh];
            let mut h = vec![0.0f32; gh];
            for a in 0..k {
                for b in 0..k {
                    for j in 0..gh {
                        let pre = a_part[a * gh + j] + b_part[b * gh + j] + q_part[j] + self.g_bias0[j];
                        h[j] = pre.max(0.0);
                    }
                    for (w, bias) in &self.g_rest {
                        let next = matmul_seq(&h, w, 1, gh, gh);
                        for j in 0..gh {
                            h[j] = (next[j] + bias[j]).max(0.0);
                        }
                    }
                    for j in 0..gh {
                        pooled[j] += h[j];
                    }
                }
            }
            let mut f1 = matmul_seq(&pooled, &self.f_hidden.0, 1, gh, self.f_dim);
            for (v, b) in f1.iter_mut().zip(&self.f_hidden.1) {
                *v = (*v + b).max(0.0);
            }
            let mut out = matmul_seq(&f1, &self.f_out.0, 1, self.f_dim, self.out_dim);
            for (v, b) in out.iter_mut().zip(&self.f_out.1) {
                *v += b;
            }
            out
        }
    }
}
