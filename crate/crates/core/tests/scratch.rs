// Temporary tuning harness; removed once acceptance configs are fixed.
use std::time::Instant;

use metahar_core::datasets::{synth_generate, SyntheticSpec};
use metahar_core::episodes::{KQuery, SamplingMode};
use metahar_core::eval::{lopo_evaluate, wilcoxon_signed_rank, AlgorithmSpec, EvalOptions};
use metahar_core::maml::MamlConfig;
use metahar_core::relation::RnConfig;

fn bench_ds(effect: f64) -> metahar_core::datasets::PersonDataset {
    synth_generate(&SyntheticSpec {
        n_persons: 10,
        n_classes: 5,
        instances_per_person_class: 30,
        feature_shape: vec![6, 6],
        person_effect: effect,
        noise: 0.1,
        seed: 2024,
    })
    .unwrap()
}

#[test]
#[ignore]
fn tune_maml() {
    for effect in [2.0] {
        let ds = bench_ds(effect);
        for (epochs, n_tasks, gs, hidden) in [(30usize, 8usize, 3usize, 64usize), (50, 8, 3, 64)] {
            let base = MamlConfig {
                epochs,
                n_tasks,
                gs,
                meta_gs: 10,
                k_support: 5,
                k_query: KQuery::All,
                hidden,
                ..MamlConfig::default()
            };
            let t0 = Instant::now();
            let pers = lopo_evaluate(
                &AlgorithmSpec::Maml(MamlConfig { mode: SamplingMode::Personalised, ..base.clone() }),
                &ds,
                &EvalOptions { base_seed: 11, max_folds: None },
            )
            .unwrap();
            let conv = lopo_evaluate(
                &AlgorithmSpec::Maml(MamlConfig { mode: SamplingMode::Conventional, ..base }),
                &ds,
                &EvalOptions { base_seed: 11, max_folds: None },
            )
            .unwrap();
            let w = wilcoxon_signed_rank(&pers.accuracies(), &conv.accuracies()).unwrap();
            println!(
                "effect {effect} epochs {epochs} n {n_tasks} gs {gs} hidden {hidden}: pers {:.4} conv {:.4} gap {:.4} p {:.5} [{:.1}s]",
                pers.mean_accuracy,
                conv.mean_accuracy,
                pers.mean_accuracy - conv.mean_accuracy,
                w.p_value,
                t0.elapsed().as_secs_f64()
            );
            println!("  pers folds: {:?}", pers.accuracies());
            println!("  conv folds: {:?}", conv.accuracies());
        }
    }
}

#[test]
#[ignore]
fn tune_rn() {
    for effect in [2.0] {
        let ds = bench_ds(effect);
        for (epochs, kernels, patience) in [(120usize, 8usize, 20usize)] {
            let base = RnConfig {
                epochs,
                kernels,
                patience,
                k_support: 5,
                k_query: KQuery::All,
                ..RnConfig::default()
            };
            let t0 = Instant::now();
            let pers = lopo_evaluate(
                &AlgorithmSpec::Rn(RnConfig { mode: SamplingMode::Personalised, ..base.clone() }),
                &ds,
                &EvalOptions { base_seed: 11, max_folds: None },
            )
            .unwrap();
            let conv = lopo_evaluate(
                &AlgorithmSpec::Rn(RnConfig { mode: SamplingMode::Conventional, ..base }),
                &ds,
                &EvalOptions { base_seed: 11, max_folds: None },
            )
            .unwrap();
            let w = wilcoxon_signed_rank(&pers.accuracies(), &conv.accuracies()).unwrap();
            println!(
                "effect {effect} epochs {epochs} kernels {kernels}: pers {:.4} conv {:.4} gap {:.4} p {:.5} [{:.1}s]",
                pers.mean_accuracy,
                conv.mean_accuracy,
                pers.mean_accuracy - conv.mean_accuracy,
                w.p_value,
                t0.elapsed().as_secs_f64()
            );
            println!("  pers folds: {:?}", pers.accuracies());
            println!("  conv folds: {:?}", conv.accuracies());
        }
    }
}
