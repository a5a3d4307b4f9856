//! Checks against the default synthetic corpus.

use latentview::corpus::{self, Entry, Signal, ViewMatrix};
use latentview::eval;
use latentview::factorizer::{self, LatentModel, TrainConfig};
use latentview::pseudoclass::{self, KMeansConfig};
use latentview::sampler::{self, SamplerConfig, Weighting};
use latentview::synth::{self, SynthConfig};

fn sampled_default(seed: u64) -> ViewMatrix {
    let planted = synth::generate_planted(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let m = corpus::apply_activity_filter(&planted.matrix, 10, 20000).unwrap();
    let dist =
        sampler::build_sampling_distribution(&m, &corpus::popularity(&m), Weighting::LogPopularity);
    sampler::sample_negatives(
        &m,
        &dist,
        &SamplerConfig {
            neg_ratio: 2.0,
            seed,
        },
    )
    .unwrap()
}

#[test]
fn default_corpus_density_and_long_tail() {
    for seed in [0, 1, 2] {
        let c = synth::generate_planted(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let d = c.matrix.density();
        assert!((0.009..=0.011).contains(&d), "seed {seed}: density {d}");
        let share = c.top_decile_share();
        assert!(share >= 0.4, "seed {seed}: top-decile share {share}");
    }
}

#[test]
fn default_activity_bounds_reach_a_fixpoint() {
    let c = synth::generate_planted(&SynthConfig::default()).unwrap();
    let f = corpus::apply_activity_filter(&c.matrix, 10, 20000).unwrap();
    assert!(f.n_items() > 0 && f.n_users() > 0);
    for i in 0..f.n_items() {
        let n = f.viewers(i).count();
        assert!((10..=20000).contains(&n), "item {i} keeps {n} views");
    }
    for col in f.user_columns() {
        assert!((10..=20000).contains(&col.positives.len()));
    }
    assert_eq!(corpus::apply_activity_filter(&f, 10, 20000).unwrap(), f);
}

#[test]
fn untrained_model_ranks_at_chance() {
    let m = sampled_default(4);
    let items = corpus::split_items(&m, 0.05, 4).unwrap();
    let split = corpus::split_entries(&m, items, 0.2, 4).unwrap();
    let model = factorizer::init_model(
        &TrainConfig {
            seed: 4,
            ..TrainConfig::default()
        },
        m.n_items(),
        m.n_users(),
    );
    let pr = eval::personalized_ranking(&model, &split.val).unwrap();
    assert!((pr - 0.5).abs() <= 0.05, "untrained PR {pr}");
}

#[test]
fn random_baseline_is_stable_across_seeds() {
    let m = sampled_default(1);
    let a = eval::random_baseline(&m, 100_000, 10).unwrap();
    let b = eval::random_baseline(&m, 100_000, 11).unwrap();
    let se = a.jaccard_std_error.hypot(b.jaccard_std_error);
    assert!(
        (a.mean_jaccard - b.mean_jaccard).abs() <= 3.0 * se,
        "{} vs {} (se {se})",
        a.mean_jaccard,
        b.mean_jaccard
    );
}

#[test]
fn true_factors_recover_planted_components() {
    let cfg = SynthConfig {
        spread: 0.05,
        noise_sd: 0.05,
        seed: 3,
        ..SynthConfig::default()
    };
    let c = synth::generate_planted(&cfg).unwrap();
    let truth = c.true_item_embedding();
    let fit = pseudoclass::kmeans_fit(
        &truth,
        &KMeansConfig {
            k: cfg.components,
            seed: 3,
            ..KMeansConfig::default()
        },
    )
    .unwrap();

    let mut model = LatentModel::zeros(c.matrix.n_items(), c.matrix.n_users(), c.dim);
    for i in 0..c.matrix.n_items() {
        model.item_mut(i).copy_from_slice(truth.row(i));
    }
    for (j, row) in c.user_factors.chunks_exact(c.dim).enumerate() {
        model.user_mut(j).copy_from_slice(row);
    }
    let items: Vec<usize> = (0..c.matrix.n_items()).collect();
    let mut val: Vec<Entry> = c.matrix.entries().filter(|e| e.user < 20).collect();
    val.extend(
        (0..40)
            .filter(|&i| c.matrix.get(i, 0).is_none())
            .map(|i| Entry::new(i, 0, Signal::Negative)),
    );
    let report = synth::oracle_check(&c, &model, &fit, &items, &val).unwrap();
    assert_eq!(report.ari, 1.0);
    assert_eq!(report.neighborhood_overlap, 1.0);
}
