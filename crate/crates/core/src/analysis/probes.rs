use rayon::prelude::*;

use crate::autodiff::ParamVector;
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::models::ModelSpec;

const CHUNK: usize = 256;

/// Mean over each shard's samples of `‖f_θ(x)‖₂`, the L2 norm of the logits.
pub fn feature_norm_probe(
    theta: &ParamVector,
    model: &ModelSpec,
    ds: &Dataset,
    shards: &[ClientShard],
) -> Result<Vec<(usize, f64)>> {
    shards
        .par_iter()
        .map(|shard| {
            if shard.indices.is_empty() {
                return Err(Error::Usage(format!("client {} has no samples", shard.client_id)));
            }
            let mut total = 0.0;
            for idx in shard.indices.chunks(CHUNK) {
                let batch = ds.batch(idx)?;
                let logits = model.logits(theta, batch.inputs())?;
                total += logits
                    .data()
                    .chunks(model.num_classes())
                    .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .sum::<f64>();
            }
            Ok((shard.client_id, total / shard.n_k() as f64))
        })
        .collect()
}
