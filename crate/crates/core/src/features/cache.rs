use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DescriptorGrid, DescriptorKind, DescriptorParams};
use crate::artifact;
use crate::error::Result;

const MAGIC: &[u8; 8] = b"DRAWDESC";

#[derive(Serialize, Deserialize)]
struct Header {
    kind: DescriptorKind,
    params: DescriptorParams,
    page_id: String,
    n: usize,
    d: usize,
    positions: Vec<(usize, usize)>,
}

/// Descriptors are stored as 32-bit floats.
pub fn save_descriptor_cache(path: &Path, page_id: &str, grid: &DescriptorGrid) -> Result<()> {
    let header = Header {
        kind: grid.kind,
        params: grid.params.clone(),
        page_id: page_id.to_string(),
        n: grid.len(),
        d: grid.dim,
        positions: grid.positions.clone(),
    };
    artifact::write_container(
        path,
        MAGIC,
        &header,
        &artifact::f32_bytes(grid.descriptors.iter().copied()),
    )
}

pub fn load_descriptor_cache(path: &Path) -> Result<(String, DescriptorGrid)> {
    let (h, payload): (Header, _) = artifact::read_container(path, MAGIC)?;
    let descriptors = artifact::take_f32(&payload, &mut 0, h.n * h.d)?;
    let grid = DescriptorGrid {
        positions: h.positions,
        descriptors,
        dim: h.d,
        kind: h.kind,
        params: h.params,
    };
    Ok((h.page_id, grid))
}
