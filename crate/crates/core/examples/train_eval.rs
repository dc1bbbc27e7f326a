//! Train on randomized view subsets, then evaluate on held-out frames with and without shuffling.

use poemkit::dataset::GenConfig;
use poemkit::decoder::{Model, ModelConfig};
use poemkit::metrics::mpjpe;
use poemkit::pipeline::{evaluate, template_baseline, RootSource};
use poemkit::synth::shuffle_views;
use poemkit::train::{train, LrSchedule, TrainConfig, TrainRoot};
use poemkit::Result;

fn main() -> Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let gen = GenConfig::default();
    let mut model = Model::new(ModelConfig::tiny())?;
    let frames = |range: std::ops::Range<u64>| -> Result<Vec<_>> {
        range.map(|i| Ok(gen.frame(&model.hand, 11, i)?.1)).collect()
    };
    let (train_set, test_set) = (frames(0..100)?, frames(100..120)?);

    let cfg = TrainConfig {
        steps,
        lr: 1e-3,
        warmup: 50,
        batch_size: 4,
        randomize_views: true,
        root: TrainRoot::Estimate,
        schedule: LrSchedule::Cosine { floor: 0.05 },
        ..TrainConfig::default()
    };
    train(&mut model, &train_set, &cfg, |l| {
        if l.step % 100 == 0 {
            println!("step {:>5} loss {:.2} mm", l.step, l.loss * 1000.0);
        }
    })?;

    let baseline: f64 = test_set
        .iter()
        .map(|f| mpjpe(&template_baseline(&model, f)[f.n_vertices()..], f.gt_joints()))
        .sum::<Result<f64>>()?
        / test_set.len() as f64;
    let report = evaluate(&model, &test_set, RootSource::Estimate)?;
    let shuffled: Vec<_> = test_set.iter().enumerate().map(|(i, f)| shuffle_views(f, i as u64)).collect::<Result<_>>()?;
    let shuffled = evaluate(&model, &shuffled, RootSource::Estimate)?;
    println!("template baseline MPJPE {baseline:.2} mm");
    print!("{}", report.table());
    println!("shuffled camera order MPJPE {:.2} mm", shuffled.mpjpe);
    Ok(())
}
