use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cuts a `[C, L]` series into `ceil(L / patch)` non-overlapping windows.
///
/// Token `t` holds channel 0's window, then channel 1's, and so on, giving
/// `[T, C * patch]`. The tail of the last window is zero-padded.
pub fn patchify(series: &Tensor, patch_size: usize) -> Result<Tensor> {
    if series.rank() != 2 {
        return Err(Error::shape("patchify", series.shape(), &[0, 0]));
    }
    let (c, l) = (series.shape()[0], series.shape()[1]);
    if patch_size == 0 || patch_size > l {
        return Err(Error::Config(format!(
            "patch_size {patch_size} must lie in 1..={l} (series length)"
        )));
    }
    let t = l.div_ceil(patch_size);
    let width = c * patch_size;
    let mut out = vec![0.0; t * width];
    for tok in 0..t {
        for ch in 0..c {
            let start = tok * patch_size;
            let end = (start + patch_size).min(l);
            let src = &series.data()[ch * l + start..ch * l + end];
            let dst = tok * width + ch * patch_size;
            out[dst..dst + src.len()].copy_from_slice(src);
        }
    }
    Tensor::new(vec![t, width], out)
}

/// Inverse layout of [`patchify`]: `[T, C * patch] -> [C, T * patch]`,
/// padding included.
pub fn unpatchify(tokens: &Tensor, channels: usize) -> Result<Tensor> {
    let (t, width) = (tokens.shape()[0], tokens.shape()[1]);
    if channels == 0 || width % channels != 0 {
        return Err(Error::shape("unpatchify", tokens.shape(), &[channels]));
    }
    let p = width / channels;
    let mut out = vec![0.0; channels * t * p];
    for tok in 0..t {
        for ch in 0..channels {
            let src = &tokens.data()[tok * width + ch * p..tok * width + (ch + 1) * p];
            let dst = ch * t * p + tok * p;
            out[dst..dst + p].copy_from_slice(src);
        }
    }
    Tensor::new(vec![channels, t * p], out)
}

/// Patchifies a `[B, C, L]` batch into `[B, T, C * patch]`.
pub fn patchify_batch(batch: &Tensor, patch_size: usize) -> Result<Tensor> {
    if batch.rank() != 3 {
        return Err(Error::shape("patchify_batch", batch.shape(), &[0, 0, 0]));
    }
    let (b, c, l) = (batch.shape()[0], batch.shape()[1], batch.shape()[2]);
    let mut data = Vec::new();
    let mut tokens = 0;
    let mut width = 0;
    for s in 0..b {
        let series = Tensor::new(vec![c, l], batch.data()[s * c * l..(s + 1) * c * l].to_vec())?;
        let p = patchify(&series, patch_size)?;
        tokens = p.shape()[0];
        width = p.shape()[1];
        data.extend(p.into_data());
    }
    Tensor::new(vec![b, tokens, width], data)
}
