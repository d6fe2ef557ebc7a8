//! Content-addressed caching of the sensitivity matrix. The cache key hashes
//! the mesh text, electrode layout, and reference conductivity, so any change
//! to the inputs (or a corrupted file) forces a rebuild.

use std::path::Path;
use std::time::Instant;

use eit_core::forward::{solve_all, Conductivity};
use eit_core::mesh::{ElectrodeLayout, Mesh};
use eit_core::sensitivity::{
    assemble_sensitivity, sensitivity_content_hash, SensitivityMatrix,
};

use crate::error::{at_stage, CliError};

/// Outcome of a cache lookup, for logs and the run manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Rebuilt,
}

/// Return the sensitivity matrix for this mesh and layout, reading the cache
/// file when its content hash matches and rebuilding (and rewriting) it
/// otherwise. Prints one line saying which happened.
pub fn load_or_build_sensitivity(
    mesh: &Mesh,
    layout: &ElectrodeLayout,
    cache_path: &Path,
) -> Result<(SensitivityMatrix, CacheStatus), CliError> {
    let key = sensitivity_content_hash(&mesh.to_text(Some(layout)), layout, 1.0);

    if cache_path.exists() {
        match SensitivityMatrix::read_cache(cache_path) {
            Ok((s, hash)) if hash == key && s.n_elements() == mesh.n_elements() => {
                println!(
                    "jacobian: cache hit ({} x {}) at {}",
                    s.rows(),
                    s.n_elements(),
                    cache_path.display()
                );
                return Ok((s, CacheStatus::Hit));
            }
            Ok(_) => println!("jacobian: cache is for different inputs, rebuilding"),
            Err(e) => println!("jacobian: cache unreadable ({e}), rebuilding"),
        }
    }

    let started = Instant::now();
    let sigma = Conductivity::uniform(mesh, 1.0).map_err(at_stage("jacobian"))?;
    let ps = solve_all(mesh, layout, &sigma).map_err(at_stage("jacobian"))?;
    let s = assemble_sensitivity(mesh, &ps).map_err(at_stage("jacobian"))?;
    s.write_cache(cache_path, &key).map_err(at_stage("jacobian cache"))?;
    println!(
        "jacobian: built {} x {} in {} ms, cached at {}",
        s.rows(),
        s.n_elements(),
        started.elapsed().as_millis(),
        cache_path.display()
    );
    Ok((s, CacheStatus::Rebuilt))
}
