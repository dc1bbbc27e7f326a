//! Generate a dataset on disk, reconstruct it with a saved checkpoint, and score it.

use poemkit::dataset::{read_dataset, write_dataset, GenConfig};
use poemkit::decoder::{Model, ModelConfig};
use poemkit::pipeline::{reconstruct_all, score_predictions, ReconstructOptions, ViewSpec};
use poemkit::tensor::{load_checkpoint, save_checkpoint, Dtype};
use poemkit::Result;

fn main() -> Result<()> {
    let dir = tempfile::tempdir().map_err(|e| poemkit::Error::InvalidInput(e.to_string()))?;
    let manifest = write_dataset(&dir.path().join("data"), &GenConfig::default(), 4, 42)?;
    println!("generated {} frames, config hash {}", manifest.n_frames, &manifest.config_hash[..16]);

    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &Model::new(ModelConfig::tiny())?.params, Dtype::F64)?;
    let model = Model::with_params(ModelConfig::tiny(), load_checkpoint(&ckpt)?.params)?;

    let ds = read_dataset(&dir.path().join("data"))?;
    let ids: Vec<String> = ds.ids().map(str::to_string).collect();
    let opts = ReconstructOptions {
        views: "shuffle:1".parse::<ViewSpec>()?,
        ..ReconstructOptions::default()
    };
    let preds = reconstruct_all(&model, &ids, &ds.frames, &opts)?;
    print!("{}", score_predictions(&preds, &ids, &ds.frames)?.table());
    Ok(())
}
