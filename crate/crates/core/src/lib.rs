//! Session-based next-item recommendation with a variational GRU.
//!
//! The recurrent state of the network is the mean and log-variance of a
//! Gaussian posterior over latent activations. Training maximizes a
//! reparameterized evidence lower bound with Adagrad and Nesterov momentum
//! over session-parallel mini-batches; prediction averages scores over
//! posterior samples.
//!
//! Data-parallel loops (lanes of a mini-batch, evaluation sessions, output
//! rows) run on rayon when the `parallel` feature is enabled and
//! [`Execution::Parallel`] is selected. Reductions happen in a fixed order,
//! so both execution modes produce bit-identical results.

pub mod ablation;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod trainer;
pub mod vgru;

pub use error::{Error, Result};
pub use model::Model;
pub use numerics::{Execution, Matrix, Rng};

use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
