use std::path::Path;

use proptest::prelude::*;
use qformer_peft::adapters::{AdapterKind, AdapterSet, AdapterTargetSpec};
use qformer_peft::experiment::ExperimentConfig;
use qformer_peft::gradcheck::loss_value;
use qformer_peft::qformer::QFormer;
use qformer_peft::tasks::{generate, TaskKind, TaskSpec};
use qformer_peft::trainer::{prepare, train, train_step, AdamW, Example, NoObserver, RunConfig};

fn memorize_config() -> ExperimentConfig {
    let path = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/memorize_lora.toml"));
    ExperimentConfig::load(path).unwrap()
}

#[test]
fn first_epoch_lowers_memorization_loss() {
    let cfg = memorize_config();
    let data = generate(&cfg.task).unwrap();
    let examples = prepare::<f64>(&data.train, data.spec.n_img, data.spec.image_dim).unwrap();
    let runs = [
        (AdapterKind::Lora, 1),
        (AdapterKind::Lora, 2),
        (AdapterKind::Lora, 4),
        (AdapterKind::Lora, 8),
        (AdapterKind::AdaLora, 12),
    ];
    for (kind, rank) in runs {
        let mut model = QFormer::<f64>::new(cfg.model.clone(), 1).unwrap();
        let mut set = AdapterSet::attach(&mut model, &AdapterTargetSpec::all(), kind, rank, 2).unwrap();
        let before = loss_value(&model, Some(&set), &examples, 0.0).unwrap();
        let mut opt = AdamW::new(cfg.train.optimizer);
        assert_eq!(cfg.train.optimizer.learning_rate, 5e-4);
        for ex in &examples {
            let batch: Vec<&Example<f64>> = vec![ex];
            train_step(&mut model, Some(&mut set), &mut opt, &batch, 1, 1.0, cfg.train.orth_reg).unwrap();
        }
        let after = loss_value(&model, Some(&set), &examples, 0.0).unwrap();
        assert!(after < before, "{kind:?} r={rank}: {before} -> {after}");
    }
}

#[test]
fn train_leaves_frozen_base_untouched() {
    let cfg = memorize_config();
    let data = generate(&cfg.task).unwrap();
    for (kind, rank) in [(AdapterKind::Lora, 4), (AdapterKind::AdaLora, 12)] {
        let mut model = QFormer::<f64>::new(cfg.model.clone(), 3).unwrap();
        let mut set = AdapterSet::attach(&mut model, &AdapterTargetSpec::all(), kind, rank, 4).unwrap();
        let before: Vec<u64> = model.params().iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect();
        let adapters_before: Vec<f64> = set.keyed_params().flat_map(|(_, p)| p.tensor.data().to_vec()).collect();
        let run = RunConfig {
            max_epochs: 3,
            ..cfg.train.clone()
        };
        train(&mut model, Some(&mut set), &data, &run, &mut NoObserver).unwrap();
        let after: Vec<u64> = model.params().iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect();
        let adapters_after: Vec<f64> = set.keyed_params().flat_map(|(_, p)| p.tensor.data().to_vec()).collect();
        assert_eq!(before, after);
        assert_ne!(adapters_before, adapters_after);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn early_stopping_respects_max_epochs(max_epochs in 1usize..6, patience in 0usize..4, seed in 0u64..50) {
        let spec = TaskSpec {
            kind: TaskKind::Alignment,
            n_train: 8,
            n_val: 8,
            n_test: 4,
            image_dim: 8,
            seed,
            ..TaskSpec::default()
        };
        let data = generate(&spec).unwrap();
        let mut mc = qformer_peft::qformer::QFormerConfig::tiny(1, 8, 2);
        mc.num_queries = 2;
        let mut model = QFormer::<f64>::new(mc, seed).unwrap();
        let mut set = AdapterSet::attach(&mut model, &AdapterTargetSpec::all(), AdapterKind::Lora, 1, seed).unwrap();
        let run = RunConfig { max_epochs, patience, batch_size: 4, grad_accum_iters: 1, ..RunConfig::default() };
        let res = train(&mut model, Some(&mut set), &data, &run, &mut NoObserver).unwrap();
        prop_assert!(!res.epochs.is_empty() && res.epochs.len() <= max_epochs);
        prop_assert!(res.best_epoch >= 1 && res.best_epoch <= res.epochs.len());
    }
}
