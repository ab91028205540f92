//! Minimal MLP substrate shared by the score network and the classifiers.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod tensor;

use std::ops::Range;

pub use checkpoint::{Checkpoint, CheckpointMeta, Role};
pub use mlp::{timestep_embedding, Activation, ForwardCache, MlpConfig, MlpParams};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor;

use crate::error::Result;
use crate::exec::{chunk_ranges, Exec};

/// Rows per chunk in [`accumulate_gradients`]. Fixed so that the reduction
/// order, and therefore the summed gradient, is independent of threading.
pub const GRAD_CHUNK: usize = 16;

/// Forward and backward over `x` in fixed row chunks, summing the per-chunk
/// losses and parameter gradients in chunk order.
///
/// `upstream(rows, outputs)` returns the chunk's loss contribution and the
/// gradient of the total loss with respect to `outputs`.
pub fn accumulate_gradients<F>(
    net: &MlpParams,
    x: &Tensor,
    t: Option<&[f64]>,
    exec: Exec,
    upstream: F,
) -> Result<(f64, Vec<f64>, Vec<ForwardCache>)>
where
    F: Fn(Range<usize>, &Tensor) -> Result<(f64, Tensor)> + Sync + Send,
{
    let ranges = chunk_ranges(x.rows(), GRAD_CHUNK);
    let parts = exec.try_map(ranges.len(), |i| {
        let r = ranges[i].clone();
        let xc = x.slice_rows(r.clone());
        let tc = t.map(|t| &t[r.clone()]);
        let (y, cache) = net.forward_cached(&xc, tc)?;
        let (loss, up) = upstream(r, &y)?;
        let mut grad = vec![0.0; net.num_params()];
        net.backward_into(&cache, &up, &mut grad)?;
        Ok::<_, crate::Error>((loss, grad, cache))
    })?;
    let mut total = 0.0;
    let mut grad = vec![0.0; net.num_params()];
    let mut caches = Vec::with_capacity(parts.len());
    for (loss, g, cache) in parts {
        total += loss;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        caches.push(cache);
    }
    Ok((total, grad, caches))
}
