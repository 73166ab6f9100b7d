//! Scratch calibration runner (not part of the public surface).

use tripletspace::cleaning::*;
use tripletspace::config::PipelineConfig;
use tripletspace::synth::generate_synthetic;
use tripletspace::train::{classification_accuracy, train_classifier};

fn main() {
    for (n, frac, sw) in [(40usize, 0.5, 0.08), (40, 0.6, 0.08)] {
        println!("=== n={n} frac={frac} sigma_w={sw}");
        for seed in 1u64..=5 {
            let mut cfg = PipelineConfig::default();
            cfg.num_identities = 200;
            cfg.samples_per_identity = (n, n);
            cfg.label_flip_rate = 0.15;
            cfg.noisy_identity_fraction = frac;
            cfg.sigma_within = sw;
            cfg.sigma_between = 0.25;
            cfg.cls_learning_rate = 1.0;
            cfg.seed = seed;
            let (full, truth) = generate_synthetic(&cfg.synthetic_spec()).unwrap();
            let (tr, ev) = full.split_holdout(cfg.holdout_fraction);
            let train = full.subset(&tr);
            let train_flipped: Vec<bool> = tr.iter().map(|&i| truth.flipped[i]).collect();
            let eval = full.subset(&ev);
            let eval_truth: Vec<u32> = ev.iter().map(|&i| truth.true_identity[i]).collect();

            let (noisy_clf, _) =
                train_classifier(&train, &cfg, cfg.seed, "cleaning:init").unwrap();
            let noisy_acc = classification_accuracy(&noisy_clf, &eval, &eval_truth).unwrap();
            let (clean, report) =
                filter_by_agreement(&train, &noisy_clf, Some(&train_flipped)).unwrap();
            let (retrained, _) = retrain_clean(&clean, &cfg, cfg.seed).unwrap();
            let clean_acc = classification_accuracy(&retrained, &eval, &eval_truth).unwrap();
            let kept_fraction = report.kept as f64 / train.len() as f64;
            let (_, rr) =
                fixed_ratio_baseline(&train, &noisy_clf, kept_fraction, Some(&train_flipped))
                    .unwrap();
            println!(
                "  seed {seed}: noisy {noisy_acc:.4} cleaned {clean_acc:.4} ok={} | recall agree {:.3} ratio {:.3} ok={}",
                clean_acc >= noisy_acc,
                report.noise_recall.unwrap(),
                rr.noise_recall.unwrap(),
                report.noise_recall.unwrap() > rr.noise_recall.unwrap()
            );
        }
    }
}
