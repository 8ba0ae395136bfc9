//! Calibration probe (manual; not part of the shipped surface).

use echoflow::channel::ACTIVITY_CATALOG;
use echoflow::dataset::split_leave_one_group_out;
use echoflow::learn::{
    finetune, finetune_loss_and_grads, ArchConfig, TrainConfig,
};
use echoflow::pipeline::synth_labeled_dataset;
use rand::SeedableRng;

fn main() {
    let classes: Vec<&str> = ACTIVITY_CATALOG.to_vec();
    let ds = synth_labeled_dataset(&classes, 5, 3, 4242).unwrap();
    eprintln!("dataset ready: {} windows", ds.len());

    for (seed, lr, fine) in [(11u64, 3e-3, 20usize), (7, 3e-3, 20), (11, 1e-3, 20)] {
        let (train, test) = split_leave_one_group_out(&ds, "G0").unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            pretrain_epochs: 0,
            finetune_epochs: fine,
            lr_init: lr,
            seed,
            arch: ArchConfig::default(),
            ..TrainConfig::default()
        };
        let model = finetune::<f32>(None, &train, &cfg).unwrap();
        // final loss on the full training set, train-mode stats
        let mut enc = model.encoder.clone();
        let mut head = model.head.clone();
        let refs: Vec<_> = train.items().iter().map(|i| &i.window).collect();
        let x = echoflow::learn::windows_to_batch::<f32>(&refs[..16]);
        let labels: Vec<usize> =
            train.items()[..16].iter().map(|i| i.label.id as usize).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (loss_probe, _, _) =
            finetune_loss_and_grads(&mut enc, &mut head, &x, &labels, 0.5, &mut rng);

        let acc = |set: &echoflow::dataset::LabeledDataset| {
            let refs: Vec<_> = set.items().iter().map(|i| &i.window).collect();
            let probs = model.probs(&refs).unwrap();
            let mut hits = 0;
            for (item, row) in set.items().iter().zip(probs.rows()) {
                let rv: Vec<f64> = row.iter().copied().collect();
                if model.class_of(&rv).id == item.label.id {
                    hits += 1;
                }
            }
            hits as f64 / set.len() as f64
        };
        eprintln!(
            "seed={seed} lr={lr} fine={fine}: probe-loss {loss_probe:.4} train-acc(eval) {:.3} test-acc {:.3}",
            acc(&train),
            acc(&test)
        );
    }
}
