use std::path::{Path, PathBuf};

use rayon::prelude::*;
use segfuse_core::labels::Modality;
use segfuse_core::volume_io::{load_case, CaseArchive};

use crate::error::{CliError, CliResult};

/// `(case_id, path)` of every `.npz` file in `dir`, sorted by name.
pub fn list_cases(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(CliError::io(dir))?;
    let mut out = Vec::new();
    for e in entries {
        let path = e.map_err(CliError::io(dir))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "npz") {
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((id, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::Usage(format!("no .npz case archives in {}", dir.display())));
    }
    Ok(out)
}

/// Loads every case, keeping only `single` when given.
pub fn load_cases(dir: &Path, single: Option<Modality>) -> CliResult<Vec<(String, CaseArchive)>> {
    list_cases(dir)?
        .into_par_iter()
        .map(|(id, path)| {
            let case = load_case(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let case = match single {
                Some(m) => case.select_channel(m)?,
                None => case,
            };
            Ok((id, case))
        })
        .collect()
}

pub fn subset(cases: &[(String, CaseArchive)], ids: &[String]) -> Vec<(String, CaseArchive)> {
    ids.iter()
        .filter_map(|id| cases.iter().find(|(c, _)| c == id).cloned())
        .collect()
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(path, contents).map_err(CliError::io(path))
}
