use super::kmeans::Codebook;
use crate::error::{Error, Result};
use crate::features::DescriptorGrid;

/// Hard-assignment histogram over a codebook, L1-normalized.
pub fn bow_encode(grid: &DescriptorGrid, codebook: &Codebook) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::data("no descriptors"));
    }
    if grid.dim != codebook.dim {
        return Err(Error::shape(
            "bow_encode",
            format!(
                "descriptor dim {} does not match codebook dim {}",
                grid.dim, codebook.dim
            ),
        ));
    }
    let mut hist = vec![0.0; codebook.k];
    for row in grid.rows() {
        hist[codebook.nearest(row).0] += 1.0;
    }
    let n = grid.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    Ok(hist)
}

/// Element-wise square root: the explicit Hellinger feature map.
pub fn hellinger_map(h: &[f64]) -> Result<Vec<f64>> {
    if let Some((i, v)) = h.iter().enumerate().find(|(_, v)| v.is_nan() || **v < 0.0) {
        return Err(Error::invalid(format!(
            "histogram entry {i} is {v}; the Hellinger map needs non-negative input"
        )));
    }
    Ok(h.iter().map(|v| v.sqrt()).collect())
}
