//! `export-embeddings`: student concept-space embeddings of the held-out
//! target scenes, for external visualization.

use std::path::Path;

use pixcon::metrics::export_embeddings;
use pixcon::toymodel::Checkpoint;
use pixcon::{FeatureGrid, LabelGrid};

use crate::error::{CliError, CliResult};

/// Writes one CSV row per evaluation pixel; pixel indices run over the
/// evaluation scenes stacked top to bottom. Returns the row count.
pub fn run_export(checkpoint: &Path, out: &Path) -> CliResult<usize> {
    if !checkpoint.exists() {
        return Err(CliError::Read {
            path: checkpoint.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        });
    }
    let trainer = Checkpoint::load(checkpoint)?.restore()?;
    let scenes = &trainer.data().eval_target;
    let model = trainer.student();
    let space = trainer.config().concept_space;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut height = 0;
    for s in scenes {
        data.extend_from_slice(model.concept_features(s, space)?.as_slice());
        labels.extend_from_slice(s.labels.as_slice());
        height += s.height;
    }
    let width = scenes[0].width;
    let classes = scenes[0].labels.num_classes();
    let features = FeatureGrid::new(height, width, space.dim(&model.shape), data)?;
    let labels = LabelGrid::new(height, width, classes, labels)?;
    Ok(export_embeddings(&features, &labels, out)?)
}
