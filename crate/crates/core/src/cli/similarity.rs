//! Cosine-similarity matrices over stored per-task adapters.

use std::fs;
use std::path::{Path, PathBuf};

use crate::adapter::LoraPair;
use crate::cli::checkpoint::load_checkpoint;
use crate::cli::sweep::format_float;
use crate::dynamics::{similarity_matrix, Component};
use crate::error::{Error, Result};
use crate::matlib::Matrix;

fn tensor(tensors: &[(String, Matrix)], name: &str, path: &Path) -> Result<Matrix> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m.clone())
        .ok_or_else(|| Error::Format(format!("{} has no tensor {name:?}", path.display())))
}

/// Loads every `*.ckpt` adapter in `dir`, sorted by file name.
pub fn load_adapters(dir: &Path) -> Result<Vec<(PathBuf, LoraPair)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let t = load_checkpoint(&p)?;
        let a = tensor(&t, "A", &p)?;
        let b = tensor(&t, "B", &p)?;
        let pair = LoraPair::new(a, b).map_err(|e| Error::ShapeMismatch(format!("{}: {e}", p.display())))?;
        out.push((p, pair));
    }
    Ok(out)
}

pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|&v| format_float(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Writes `similarity_<component>.csv` into `dir` and returns its path and
/// the matrix.
pub fn emit_similarity(dir: &Path, component: Component) -> Result<(PathBuf, Matrix)> {
    let adapters = load_adapters(dir)?;
    if adapters.len() < 2 {
        return Err(Error::Validation(format!(
            "{} holds {} adapter checkpoints, need at least 2",
            dir.display(),
            adapters.len()
        )));
    }
    let dims = adapters[0].1.dims();
    if let Some((p, pair)) = adapters.iter().find(|(_, pair)| pair.dims() != dims) {
        return Err(Error::ShapeMismatch(format!(
            "{} has dims {:?}, expected {dims:?}",
            p.display(),
            pair.dims()
        )));
    }
    let pairs: Vec<LoraPair> = adapters.into_iter().map(|(_, p)| p).collect();
    let sim = similarity_matrix(&pairs, component)?;
    let path = dir.join(format!("similarity_{component}.csv"));
    fs::write(&path, matrix_to_csv(&sim)).map_err(|e| Error::io(&path, e))?;
    Ok((path, sim))
}
