//! Aggregator equivalence oracles, permutation invariance, and the FLOP
//! model against an instrumented multiply-add count.

use hvqa_core::aggregate::{
    kernels::{PairwiseKernel, RelationKernel},
    pairwise_flops, relation_flops, sum_pool, PairwiseAggregator, RelationAggregator,
};
use hvqa_core::nn::{Forward, Mode, ParamSet};
use hvqa_core::rng::{self, stream_rng};
use hvqa_core::tape::Tape;
use hvqa_core::tensor::Tensor;

fn rand_vec_f64(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut r = stream_rng(seed, 0);
    (0..n).map(|_| rng::uniform_sym(&mut r, scale)).collect()
}

/// Brute-force relation oracle: explicit double loop over ordered pairs with
/// plain vector math, reading the same weights the aggregator uses.
fn relation_brute_force(
    params: &ParamSet<f64>,
    agg: &RelationAggregator,
    selected: &[f64],
    k: usize,
    question: &[f64],
    g_hidden: usize,
    f_hidden: usize,
    out_dim: usize,
) -> Vec<f64> {
    let d = agg.d;
    let wa = params.get(agg.g_first_a.w).data();
    let wb = params.get(agg.g_first_b.w).data();
    let wq = params.get(agg.g_first_q.w).data();
    let bq = params.get(agg.g_first_q.b.unwrap()).data();
    let matvec = |x: &[f64], w: &[f64], rows: usize, cols: usize| -> Vec<f64> {
        let mut out = vec![0.0; cols];
        for (j, o) in out.iter_mut().enumerate() {
            for i in 0..rows {
                *o += x[i] * w[i * cols + j];
            }
        }
        out
    };
    let mut pooled = vec![0.0; g_hidden];
    for a in 0..k {
        for b in 0..k {
            let xa = &selected[a * d..(a + 1) * d];
            let xb = &selected[b * d..(b + 1) * d];
            let ha = matvec(xa, wa, d, g_hidden);
            let hb = matvec(xb, wb, d, g_hidden);
            let hq = matvec(question, wq, agg.q_dim, g_hidden);
            let mut h: Vec<f64> = (0..g_hidden)
                .map(|j| (ha[j] + hb[j] + hq[j] + bq[j]).max(0.0))
                .collect();
            for layer in &agg.g_rest {
                let w = params.get(layer.w).data();
                let bias = params.get(layer.b.unwrap()).data();
                let next = matvec(&h, w, g_hidden, g_hidden);
                h = (0..g_hidden).map(|j| (next[j] + bias[j]).max(0.0)).collect();
            }
            for j in 0..g_hidden {
                pooled[j] += h[j];
            }
        }
    }
    let fw = params.get(agg.f_hidden.w).data();
    let fb = params.get(agg.f_hidden.b.unwrap()).data();
    let f1: Vec<f64> = {
        let lin = matvec(&pooled, fw, g_hidden, f_hidden);
        (0..f_hidden).map(|j| (lin[j] + fb[j]).max(0.0)).collect()
    };
    let ow = params.get(agg.f_out.w).data();
    let ob = params.get(agg.f_out.b.unwrap()).data();
    let lin = matvec(&f1, ow, f_hidden, out_dim);
    (0..out_dim).map(|j| lin[j] + ob[j]).collect()
}

#[test]
fn relation_matches_brute_force_oracle() {
    for (k, d) in [(1usize, 4usize), (3, 8), (8, 16)] {
        let (g_hidden, f_hidden, out_dim, q_dim) = (10, 7, 5, 6);
        let mut params = ParamSet::<f64>::new();
        let mut r = stream_rng(42 + k as u64, 0);
        let agg =
            RelationAggregator::new(&mut params, &mut r, "rn", d, q_dim, g_hidden, 4, f_hidden, out_dim);
        let selected = rand_vec_f64(100 + k as u64, k * d, 1.0);
        let question = rand_vec_f64(200 + k as u64, q_dim, 1.0);

        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
        let sel = fwd.tape.constant(Tensor::new(vec![k, d], selected.clone()).unwrap());
        let q = fwd.tape.constant(Tensor::new(vec![1, q_dim], question.clone()).unwrap());
        let out = agg.forward(&mut fwd, sel, q).unwrap();
        let got = tape.value(out).to_vec();

        let want = relation_brute_force(
            &params, &agg, &selected, k, &question, g_hidden, f_hidden, out_dim,
        );
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "k={k}: {g} vs {w}");
        }
        // k = 1 degenerates to f(g([m1; m1; q]))
        if k == 1 {
            assert_eq!(got.len(), out_dim);
        }
    }
}

#[test]
fn pairwise_k1_interact_is_value_projection_exactly() {
    let kernel = PairwiseKernel::random(16, 2, 5);
    let selected: Vec<f32> = rand_vec_f64(7, 16, 1.0).iter().map(|&v| v as f32).collect();
    let projected = kernel.project(&selected, 1);
    let interacted = kernel.interact(&projected);
    // softmax over one element is exactly 1: the interaction output is the
    // value projection, bitwise.
    let mut expected = Vec::new();
    for h in 0..kernel.heads {
        expected.extend_from_slice(&projected.v[h]);
    }
    let got: Vec<u32> = interacted.iter().map(|v| v.to_bits()).collect();
    let want: Vec<u32> = expected.iter().map(|v| v.to_bits()).collect();
    assert_eq!(got, want);
}

#[test]
fn pairwise_tape_k1_with_identity_recombination_is_value_projection() {
    let d = 6;
    let mut params = ParamSet::<f64>::new();
    let mut r = stream_rng(9, 0);
    let agg = PairwiseAggregator::new(&mut params, &mut r, "pw", d, 1, d, false).unwrap();
    let mut eye = Tensor::<f64>::zeros(vec![d, d]);
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    *params.get_mut(agg.recombine.w) = eye;

    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
    let selected = rand_vec_f64(10, d, 1.0);
    let sel = fwd.tape.constant(Tensor::new(vec![1, d], selected.clone()).unwrap());
    let out = agg.forward(&mut fwd, sel).unwrap();

    // expected: W_v-projected single cell
    let wv = params.get(agg.heads[0].wv.w).data().to_vec();
    let mut want = vec![0.0f64; d];
    for j in 0..d {
        for n in 0..d {
            want[n] += selected[j] * wv[j * d + n];
        }
    }
    let got: Vec<u64> = tape.value(out).iter().map(|v| v.to_bits()).collect();
    let want_bits: Vec<u64> = want.iter().map(|v| v.to_bits()).collect();
    assert_eq!(got, want_bits);
}

#[test]
fn pairwise_uniform_scores_average_values() {
    // W_q = 0 makes every score equal, so each x̃ is the mean of the values.
    let d = 8;
    let k = 5;
    let mut params = ParamSet::<f64>::new();
    let mut r = stream_rng(11, 0);
    let agg = PairwiseAggregator::new(&mut params, &mut r, "pw", d, 2, 4, false).unwrap();
    for head in &agg.heads {
        for v in params.get_mut(head.wq.w).data_mut() {
            *v = 0.0;
        }
    }
    let selected = rand_vec_f64(12, k * d, 1.0);

    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
    let sel = fwd.tape.constant(Tensor::new(vec![k, d], selected.clone()).unwrap());
    let v0 = agg.heads[0].wv.forward(&mut fwd, sel).unwrap();
    let values = tape.value(v0).to_vec();

    let mut tape2 = Tape::new();
    let mut fwd2 = Forward::new(&mut tape2, &mut params, Mode::Eval);
    let sel2 = fwd2.tape.constant(Tensor::new(vec![k, d], selected).unwrap());
    let q = agg.heads[0].wq.forward(&mut fwd2, sel2).unwrap();
    let key = agg.heads[0].wk.forward(&mut fwd2, sel2).unwrap();
    let key_t = fwd2.tape.transpose(key).unwrap();
    let scores = fwd2.tape.matmul(q, key_t).unwrap();
    let att = fwd2.tape.softmax(scores, 1).unwrap();
    let v = agg.heads[0].wv.forward(&mut fwd2, sel2).unwrap();
    let xt = fwd2.tape.matmul(att, v).unwrap();
    let got = tape2.value(xt);

    let dh = 4;
    for row in 0..k {
        for c in 0..dh {
            let mean: f64 = (0..k).map(|j| values[j * dh + c]).sum::<f64>() / k as f64;
            assert!((got[row * dh + c] - mean).abs() < 1e-9);
        }
    }
}

#[test]
fn aggregators_are_permutation_invariant() {
    let d = 8;
    let k = 6;
    let q_dim = 5;
    let mut params = ParamSet::<f64>::new();
    let mut r = stream_rng(13, 0);
    let pairwise = PairwiseAggregator::new(&mut params, &mut r, "pw", d, 2, 4, false).unwrap();
    let relation = RelationAggregator::new(&mut params, &mut r, "rn", d, q_dim, 10, 4, 7, 5);

    let selected = rand_vec_f64(14, k * d, 1.0);
    let question = rand_vec_f64(15, q_dim, 1.0);
    let mut perm: Vec<usize> = (0..k).collect();
    let mut pr = stream_rng(16, 0);
    rng::shuffle(&mut pr, &mut perm);
    let mut permuted = vec![0.0; k * d];
    for (new, &old) in perm.iter().enumerate() {
        permuted[new * d..(new + 1) * d].copy_from_slice(&selected[old * d..(old + 1) * d]);
    }

    let run = |rows: &[f64], which: usize| -> Vec<f64> {
        let mut ps = params.clone();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &mut ps, Mode::Eval);
        let sel = fwd.tape.constant(Tensor::new(vec![k, d], rows.to_vec()).unwrap());
        let out = match which {
            0 => sum_pool(fwd.tape, sel).unwrap(),
            1 => pairwise.forward(&mut fwd, sel).unwrap(),
            _ => {
                let q = fwd
                    .tape
                    .constant(Tensor::new(vec![1, q_dim], question.clone()).unwrap());
                relation.forward(&mut fwd, sel, q).unwrap()
            }
        };
        tape.value(out).to_vec()
    };

    for which in 0..3 {
        let base = run(&selected, which);
        let moved = run(&permuted, which);
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-6, "aggregator {which}: {a} vs {b}");
        }
    }
}

#[test]
fn tape_pairwise_matches_plain_kernel() {
    let d = 16;
    let heads = 2;
    let k = 5;
    let kernel = PairwiseKernel::random(d, heads, 21);
    let mut params = ParamSet::<f32>::new();
    let mut r = stream_rng(22, 0);
    let agg = PairwiseAggregator::new(&mut params, &mut r, "pw", d, heads, d / heads, false).unwrap();
    for (h, head) in agg.heads.iter().enumerate() {
        *params.get_mut(head.wq.w) = Tensor::new(vec![d, d / heads], kernel.wq[h].clone()).unwrap();
        *params.get_mut(head.wk.w) = Tensor::new(vec![d, d / heads], kernel.wk[h].clone()).unwrap();
        *params.get_mut(head.wv.w) = Tensor::new(vec![d, d / heads], kernel.wv[h].clone()).unwrap();
    }
    *params.get_mut(agg.recombine.w) = Tensor::new(vec![d, d], kernel.w_out.clone()).unwrap();

    let selected: Vec<f32> = rand_vec_f64(23, k * d, 1.0).iter().map(|&v| v as f32).collect();
    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
    let sel = fwd.tape.constant(Tensor::new(vec![k, d], selected.clone()).unwrap());
    let out = agg.forward(&mut fwd, sel).unwrap();
    let got = tape.value(out).to_vec();
    let want = kernel.full(&selected, k);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-4, "{g} vs {w}");
    }
}

/// Instrumented multiply-add counter mirroring the kernel loop nests.
fn count_pairwise_macs(k: usize, d: usize, heads: usize) -> u64 {
    let dh = d / heads;
    let mut macs: u64 = 0;
    // project: three matmuls [k,d]·[d,dh] per head
    for _proj in 0..3 {
        for _h in 0..heads {
            macs += (k * d * dh) as u64;
        }
    }
    // interact: per head, per (i, j): score dot (dh) + softmax exp (1) + axpy (dh)
    for _h in 0..heads {
        for _i in 0..k {
            for _j in 0..k {
                macs += dh as u64 + 1 + dh as u64;
            }
        }
    }
    // recombine: [k, dh·heads]·[dh·heads, d]; pool: k·d adds
    macs += (k * dh * heads * d) as u64;
    macs += (k * d) as u64;
    macs
}

#[test]
fn flop_model_matches_instrumented_count() {
    for (k, d, heads) in [(4usize, 16usize, 2usize), (8, 16, 2), (16, 32, 2), (5, 12, 3)] {
        let model = pairwise_flops(k, d, heads);
        assert_eq!(model.total(), count_pairwise_macs(k, d, heads), "k={k} d={d} heads={heads}");
    }
}

#[test]
fn flop_scaling_ratios() {
    // pairwise-term ratio at k=16 vs n=64 is exactly 1/16
    let at16 = pairwise_flops(16, 512, 2).pairwise_term();
    let at64 = pairwise_flops(64, 512, 2).pairwise_term();
    assert_eq!(at64 / at16, 16);
    // relation pair count: 16² = 256 vs 64² = 4096
    let rn16 = relation_flops(16, 128, 128, 256, 4, 256, 128);
    let rn64 = relation_flops(64, 128, 128, 256, 4, 256, 128);
    assert_eq!(rn16.pair_count, 256);
    assert_eq!(rn64.pair_count, 4096);
    assert_eq!(rn64.pairwise_term() / rn16.pairwise_term(), 16);
}

#[test]
fn relation_kernel_matches_tape_relation() {
    let (k, d, q_dim, gh, fh, out_dim) = (4usize, 8usize, 6usize, 10usize, 7usize, 5usize);
    let kernel = RelationKernel::random(d, q_dim, gh, 4, fh, out_dim, 31);
    let mut params = ParamSet::<f32>::new();
    let mut r = stream_rng(32, 0);
    let agg = RelationAggregator::new(&mut params, &mut r, "rn", d, q_dim, gh, 4, fh, out_dim);
    *params.get_mut(agg.g_first_a.w) = Tensor::new(vec![d, gh], kernel.g_a.clone()).unwrap();
    *params.get_mut(agg.g_first_b.w) = Tensor::new(vec![d, gh], kernel.g_b.clone()).unwrap();
    *params.get_mut(agg.g_first_q.w) = Tensor::new(vec![q_dim, gh], kernel.g_q.clone()).unwrap();
    for (i, layer) in agg.g_rest.iter().enumerate() {
        *params.get_mut(layer.w) = Tensor::new(vec![gh, gh], kernel.g_rest[i].0.clone()).unwrap();
    }
    *params.get_mut(agg.f_hidden.w) = Tensor::new(vec![gh, fh], kernel.f_hidden.0.clone()).unwrap();
    *params.get_mut(agg.f_out.w) = Tensor::new(vec![fh, out_dim], kernel.f_out.0.clone()).unwrap();

    let selected: Vec<f32> = rand_vec_f64(33, k * d, 1.0).iter().map(|&v| v as f32).collect();
    let question: Vec<f32> = rand_vec_f64(34, q_dim, 1.0).iter().map(|&v| v as f32).collect();

    let mut tape = Tape::new();
    let mut fwd = Forward::new(&mut tape, &mut params, Mode::Eval);
    let sel = fwd.tape.constant(Tensor::new(vec![k, d], selected.clone()).unwrap());
    let q = fwd.tape.constant(Tensor::new(vec![1, q_dim], question.clone()).unwrap());
    let out = agg.forward(&mut fwd, sel, q).unwrap();
    let got = tape.value(out).to_vec();
    let want = kernel.full(&selected, k, &question);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-4, "{g} vs {w}");
    }
}
