use std::collections::BTreeMap;

use est_core::harness::{next_batch, Corpus};
use est_core::model::ModelConfig;
use est_core::sampler::{mask_for_step, sample_mask, sample_subset, start_mask_stream, SamplerSeed};
use est_core::scheduler::{Rates, SamplingScheduler};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_two_of_four_subset_is_equally_likely() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 60_000;
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for _ in 0..draws {
        *counts.entry(sample_subset(4, 2, &mut rng).unwrap()).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    for (subset, c) in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 1.0 / 6.0).abs() < 0.01, "{subset:?}: {f}");
    }
}

#[test]
fn inclusion_probability_matches_rate() {
    let config = ModelConfig {
        n_layers: 6,
        n_heads: 8,
        head_dim: 2,
        hidden: 4,
        mlp_inner: 10,
        vocab: 8,
        seq_len: 4,
    };
    let rates = Rates::new(0.25, 0.3, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 20_000;
    let mut layer_hits = [0usize; 6];
    let mut head_hits = [0usize; 8];
    let mut col_hits = [0usize; 10];
    let mut sampled_layers = 0;
    for _ in 0..draws {
        let m = sample_mask(&config, rates, &mut rng).unwrap();
        assert_eq!(m.layers.len(), 3);
        for l in &m.layers {
            layer_hits[l.layer] += 1;
            sampled_layers += 1;
            assert_eq!((l.heads.len(), l.cols.len()), (2, 3));
            l.heads.iter().for_each(|&h| head_hits[h] += 1);
            l.cols.iter().for_each(|&c| col_hits[c] += 1);
        }
    }
    for c in layer_hits {
        assert!((c as f64 / draws as f64 - 0.5).abs() < 0.015);
    }
    for c in head_hits {
        assert!((c as f64 / sampled_layers as f64 - 0.25).abs() < 0.01);
    }
    for c in col_hits {
        assert!((c as f64 / sampled_layers as f64 - 0.3).abs() < 0.01);
    }
}

#[test]
fn batch_windows_start_uniformly() {
    // 36 distinct tokens, windows of 16 plus one target: starts 0..=19
    let marked: String = (0..36u8).map(|i| (b'A' + i) as char).collect();
    let corpus = Corpus::from_text(&marked);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0usize; 20];
    let draws = 10_000;
    for _ in 0..draws / 4 {
        let b = next_batch(&corpus, 4, 16, &mut rng).unwrap();
        for row in b.inputs.chunks(16) {
            counts[row[0] - b'A' as usize] += 1;
        }
    }
    for c in counts {
        assert!((c as f64 / draws as f64 - 0.05).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn stream_and_direct_masks_agree() {
    let config = ModelConfig {
        n_layers: 4,
        n_heads: 4,
        head_dim: 2,
        hidden: 4,
        mlp_inner: 8,
        vocab: 8,
        seq_len: 4,
    };
    let sched = SamplingScheduler::parse_stages("10:0.5,0.5,0.5; 20:0.5,0.5,1; 30:1,1,1").unwrap();
    let seed = SamplerSeed { seed: 9, stream_id: 4 };
    let streamed: Vec<_> = start_mask_stream(sched.clone(), config, seed, 2, 1)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(streamed.len(), 30);
    for (step, mask) in &streamed {
        assert_eq!(mask, &mask_for_step(&config, &sched, seed, *step).unwrap());
        assert_eq!(mask.rates, sched.rates_at(*step).unwrap());
    }
    let late: Vec<_> = start_mask_stream(sched, config, seed, 1, 25)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(late.as_slice(), &streamed[24..]);
}
