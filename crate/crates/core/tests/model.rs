use est_core::autodiff::Tape;
use est_core::model::{Forward, LayerMask, ModelConfig, ModelParams, SubnetworkMask};
use est_core::scheduler::Rates;
use est_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(n_layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads: 4,
        head_dim: 3,
        hidden: 8,
        mlp_inner: 4,
        vocab: 11,
        seq_len: 5,
    }
}

/// Parameters with every entry random, including LayerNorm gains and biases.
fn random_params(config: ModelConfig, seed: u64, scale: f64) -> ModelParams<f64> {
    let mut p = ModelParams::<f64>::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let flat: Vec<f64> = p
        .flatten()
        .iter()
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    p.assign_flat(&flat).unwrap();
    p
}

fn tokens(config: &ModelConfig, batch: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * config.seq_len;
    let inputs = (0..n).map(|_| rng.random_range(0..config.vocab)).collect();
    let targets = (0..n).map(|_| rng.random_range(0..config.vocab)).collect();
    (inputs, targets)
}

fn input_leaf(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-1.0..1.0))
}

fn pairs_of_four() -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for a in 0..4 {
        for b in a + 1..4 {
            out.push(vec![a, b]);
        }
    }
    out
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs() / scale))
}

fn run_mha(params: &ModelParams<f64>, x: &Tensor<f64>, heads: &[usize], batch: usize) -> Vec<f64> {
    let mut fwd = Forward::new(params);
    let xv = fwd.tape.leaf(x.clone(), false);
    let out = fwd.mha(xv, 0, heads, batch).unwrap();
    fwd.tape.value(out).data().to_vec()
}

fn run_mlp(params: &ModelParams<f64>, x: &Tensor<f64>, cols: &[usize]) -> Vec<f64> {
    let mut fwd = Forward::new(params);
    let xv = fwd.tape.leaf(x.clone(), false);
    let out = fwd.mlp(xv, 0, cols).unwrap();
    fwd.tape.value(out).data().to_vec()
}

#[test]
fn mha_mean_over_head_pairs_is_full_output() {
    let config = tiny(1);
    let params = random_params(config, 1, 0.5);
    let x = input_leaf(2 * config.seq_len, config.hidden, 2);
    let full = run_mha(&params, &x, &[0, 1, 2, 3], 2);
    let subsets = pairs_of_four();
    let mut mean = vec![0.0; full.len()];
    for s in &subsets {
        for (m, v) in mean.iter_mut().zip(run_mha(&params, &x, s, 2)) {
            *m += v / subsets.len() as f64;
        }
    }
    assert_eq!(subsets.len(), 6);
    assert!(max_rel(&mean, &full) < 1e-12);
}

#[test]
fn mlp_mean_over_column_pairs_is_full_output() {
    let config = tiny(1);
    let params = random_params(config, 3, 0.5);
    let x = input_leaf(config.seq_len, config.hidden, 4);
    let full = run_mlp(&params, &x, &[0, 1, 2, 3]);
    let subsets = pairs_of_four();
    let mut mean = vec![0.0; full.len()];
    for s in &subsets {
        for (m, v) in mean.iter_mut().zip(run_mlp(&params, &x, s)) {
            *m += v / subsets.len() as f64;
        }
    }
    assert!(max_rel(&mean, &full) < 1e-12);
}

#[test]
fn sampled_mlp_matches_explicitly_sliced_weights() {
    let config = ModelConfig {
        mlp_inner: 7,
        ..tiny(1)
    };
    let params = random_params(config, 5, 0.5);
    let x = input_leaf(config.seq_len, config.hidden, 6);
    let cols = [1, 4, 6];
    let got = run_mlp(&params, &x, &cols);
    let w1t = &params.tensors()[params.index_of("h0.mlp.w1t").unwrap()];
    let w2t = &params.tensors()[params.index_of("h0.mlp.w2t").unwrap()];
    let scale = 7.0 / 3.0;
    for r in 0..config.seq_len {
        for o in 0..config.hidden {
            let mut acc = 0.0;
            for &j in &cols {
                let pre: f64 = (0..config.hidden).map(|i| x.row(r)[i] * w1t.row(j)[i]).sum();
                acc += reference_gelu(pre) * w2t.row(j)[o];
            }
            let want = scale * acc;
            assert!((got[r * config.hidden + o] - want).abs() < 1e-12);
        }
    }
}

fn reference_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn reference_layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * rstd * g + b)
        .collect()
}

fn matvec_rows(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
    // x (len in) times w (in×out)
    (0..w.cols()).map(|o| (0..w.rows()).map(|i| x[i] * w.row(i)[o]).sum()).collect()
}

/// Straight-line GPT forward for one sequence, written without the tape.
fn reference_logits(params: &ModelParams<f64>, seq: &[usize]) -> Vec<Vec<f64>> {
    let c = *params.config();
    let t = |name: &str| &params.tensors()[params.index_of(name).unwrap()];
    let mut x: Vec<Vec<f64>> = seq
        .iter()
        .enumerate()
        .map(|(p, &tok)| t("wte").row(tok).iter().zip(t("wpe").row(p)).map(|(a, b)| a + b).collect())
        .collect();
    for l in 0..c.n_layers {
        let g = |s: &str| t(&format!("h{l}.{s}"));
        let normed: Vec<Vec<f64>> = x
            .iter()
            .map(|r| reference_layer_norm(r, g("ln1.gain").data(), g("ln1.bias").data()))
            .collect();
        let mut attn = vec![vec![0.0; c.hidden]; seq.len()];
        for h in 0..c.n_heads {
            let q: Vec<Vec<f64>> = normed.iter().map(|r| matvec_rows(r, g(&format!("attn.q{h}")))).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|r| matvec_rows(r, g(&format!("attn.k{h}")))).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|r| matvec_rows(r, g(&format!("attn.v{h}")))).collect();
            for i in 0..seq.len() {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (c.head_dim as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut mixed = vec![0.0; c.head_dim];
                for j in 0..=i {
                    for d in 0..c.head_dim {
                        mixed[d] += e[j] / z * v[j][d];
                    }
                }
                for (a, o) in attn[i].iter_mut().zip(matvec_rows(&mixed, g(&format!("attn.o{h}")))) {
                    *a += o;
                }
            }
        }
        for (r, a) in x.iter_mut().zip(&attn) {
            r.iter_mut().zip(a).for_each(|(v, d)| *v += d);
        }
        for r in x.iter_mut() {
            let n = reference_layer_norm(r, g("ln2.gain").data(), g("ln2.bias").data());
            let (w1t, w2t) = (g("mlp.w1t"), g("mlp.w2t"));
            for j in 0..c.mlp_inner {
                let pre: f64 = n.iter().zip(w1t.row(j)).map(|(a, b)| a * b).sum();
                let act = reference_gelu(pre);
                r.iter_mut().zip(w2t.row(j)).for_each(|(v, w)| *v += act * w);
            }
        }
    }
    x.iter()
        .map(|r| {
            let n = reference_layer_norm(r, t("ln_f.gain").data(), t("ln_f.bias").data());
            (0..c.vocab).map(|v| n.iter().zip(t("wte").row(v)).map(|(a, b)| a * b).sum()).collect()
        })
        .collect()
}

#[test]
fn forward_matches_reference_implementation() {
    let config = tiny(2);
    let params = random_params(config, 7, 0.4);
    let batch = 3;
    let (inputs, _) = tokens(&config, batch, 8);
    let want: Vec<f64> = inputs
        .chunks(config.seq_len)
        .flat_map(|s| reference_logits(&params, s).into_iter().flatten())
        .collect();

    let mut fwd = Forward::new(&params);
    let dense = fwd.logits_dense(&inputs, batch).unwrap();
    let dense = fwd.tape.value(dense).data().to_vec();
    let mut fwd = Forward::new(&params);
    let full = fwd.logits(&inputs, batch, &SubnetworkMask::full(&config)).unwrap();
    let full = fwd.tape.value(full).data().to_vec();

    assert!(max_rel(&dense, &want) < 1e-12, "{}", max_rel(&dense, &want));
    // the full mask takes no scaling or gather ops, so it is bitwise the dense path
    assert_eq!(full, dense);
}

#[test]
fn skipped_layer_is_the_identity() {
    let config = tiny(3);
    let params = random_params(config, 9, 0.5);
    let x = input_leaf(config.seq_len, config.hidden, 10);
    let mask = SubnetworkMask {
        layers: vec![LayerMask {
            layer: 1,
            heads: vec![0, 1, 2, 3],
            cols: vec![0, 1, 2, 3],
        }],
        rates: Rates::new(1.0, 1.0, 1.0 / 3.0),
    };
    let mut fwd = Forward::new(&params);
    let xv = fwd.tape.leaf(x.clone(), false);
    let out = fwd.layer(xv, 0, &mask, 1).unwrap();
    assert_eq!(out, xv);
    assert_eq!(fwd.tape.value(out).data(), x.data());
    let changed = fwd.layer(xv, 1, &mask, 1).unwrap();
    assert_ne!(fwd.tape.value(changed).data(), x.data());
}

#[test]
fn unsampled_parameters_get_no_gradient() {
    let config = tiny(3);
    let params = random_params(config, 11, 0.5);
    let (inputs, targets) = tokens(&config, 2, 12);
    let mask = SubnetworkMask {
        layers: vec![LayerMask {
            layer: 2,
            heads: vec![1, 3],
            cols: vec![0, 2],
        }],
        rates: Rates::new(0.5, 0.5, 0.34),
    };
    let (_, grads) = params.loss_and_grads(&inputs, &targets, 2, Some(&mask)).unwrap();
    let grad = |name: &str| grads[params.index_of(name).unwrap()].as_ref();
    for l in [0, 1] {
        for name in ["ln1.gain", "ln2.bias", "attn.q0", "attn.o3", "mlp.w1t", "mlp.w2t"] {
            assert!(grad(&format!("h{l}.{name}")).is_none(), "h{l}.{name}");
        }
    }
    for h in [0, 2] {
        for p in ["q", "k", "v", "o"] {
            assert!(grad(&format!("h2.attn.{p}{h}")).is_none());
        }
    }
    for h in [1, 3] {
        assert!(grad(&format!("h2.attn.q{h}")).unwrap().iter().any(|g| *g != 0.0));
    }
    for name in ["h2.mlp.w1t", "h2.mlp.w2t"] {
        let g = grad(name).unwrap();
        for (row, chunk) in g.chunks(config.hidden).enumerate() {
            let sampled = row == 0 || row == 2;
            assert_eq!(chunk.iter().any(|v| *v != 0.0), sampled, "{name} row {row}");
        }
    }
    assert!(grad("wte").is_some() && grad("ln_f.gain").is_some());
}

/// Central-difference check of `n_checks` random parameter entries.
fn gradient_check<T: est_core::Scalar>(mask: Option<&SubnetworkMask>, n_checks: usize, seed: u64) -> f64 {
    let config = tiny(2);
    let params: ModelParams<T> = random_params(config, seed, 0.5).cast();
    let (inputs, targets) = tokens(&config, 2, seed + 1);
    let (_, grads) = params.loss_and_grads(&inputs, &targets, 2, mask).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut worst = 0.0f64;
    for _ in 0..n_checks {
        let id = rng.random_range(0..params.tensors().len());
        let j = rng.random_range(0..params.tensors()[id].numel());
        let analytic = grads[id].as_ref().map_or(0.0, |g| g[j].as_f64());
        // finite differences in f64 on exactly the values the gradient saw
        let v = params.tensors()[id].data()[j].as_f64();
        let at = |delta: f64| {
            let mut p: ModelParams<f64> = params.cast();
            p.tensors_mut()[id].data_mut()[j] = v + delta;
            p.loss(&inputs, &targets, 2, mask).unwrap()
        };
        let h = 1e-4 * v.abs().max(1.0);
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn model_gradients_match_finite_differences_f64() {
    let worst = gradient_check::<f64>(None, 40, 21);
    assert!(worst <= 1e-6, "{worst}");
    let mask = SubnetworkMask {
        layers: vec![LayerMask {
            layer: 1,
            heads: vec![0, 2, 3],
            cols: vec![1, 2],
        }],
        rates: Rates::new(0.75, 0.5, 0.5),
    };
    let worst = gradient_check::<f64>(Some(&mask), 40, 22);
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn model_gradients_match_finite_differences_f32() {
    let worst = gradient_check::<f32>(None, 40, 23);
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn initial_loss_is_near_uniform() {
    let config = ModelConfig {
        vocab: 256,
        seq_len: 16,
        ..tiny(2)
    };
    let params = ModelParams::<f64>::init(config, 3).unwrap();
    let (inputs, targets) = tokens(&config, 4, 4);
    let loss = params.loss(&inputs, &targets, 4, None).unwrap();
    assert!((loss - 256f64.ln()).abs() < 0.05, "{loss}");
}

#[test]
fn masks_with_bad_indices_are_rejected() {
    let config = tiny(2);
    let params = random_params(config, 1, 0.5);
    let (inputs, targets) = tokens(&config, 1, 2);
    let bad = SubnetworkMask {
        layers: vec![LayerMask {
            layer: 0,
            heads: vec![4],
            cols: vec![0],
        }],
        rates: Rates::new(0.25, 0.25, 0.5),
    };
    assert!(params.loss(&inputs, &targets, 1, Some(&bad)).is_err());
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(input_leaf(2, 2, 1), true);
    assert!(tape.sum(x).is_ok());
}
