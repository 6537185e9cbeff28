//! `qsdlab compare`: distances between the sections of two run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{QsdError, Result};
use crate::sections::{parse_section, section_diff, section_jaccard, SectionHeader, SectionPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub index: usize,
    pub file_a: String,
    pub file_b: String,
    pub matched: usize,
    pub rms: f64,
    pub max_abs_dx: f64,
    pub max_abs_dp: f64,
    pub jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub dir_a: PathBuf,
    pub dir_b: PathBuf,
    pub model_a: String,
    pub model_b: String,
    pub pairs: Vec<PairReport>,
    /// Over all pairs: worst RMS, worst coordinate differences, lowest Jaccard.
    pub max_rms: f64,
    pub max_abs_dx: f64,
    pub max_abs_dp: f64,
    pub min_jaccard: f64,
}

struct Loaded {
    file: String,
    header: SectionHeader,
    points: Vec<SectionPoint>,
}

fn trajectory_index(name: &str) -> Option<usize> {
    let stem = name.strip_prefix("section_")?.strip_suffix(".csv")?;
    let (_, idx) = stem.rsplit_once('_')?;
    (idx.len() == 4).then(|| idx.parse().ok()).flatten()
}

fn load_dir(dir: &Path) -> Result<BTreeMap<usize, Loaded>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| QsdError::Config(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let name = entry?.file_name().to_string_lossy().into_owned();
        let Some(index) = trajectory_index(&name) else { continue };
        let path = dir.join(&name);
        let text = fs::read_to_string(&path)?;
        let (header, points) =
            parse_section(&text).map_err(|e| QsdError::Config(format!("{}: {e}", path.display())))?;
        if let Some(prev) = out.insert(index, Loaded { file: name.clone(), header, points }) {
            return Err(QsdError::Config(format!(
                "{}: both {} and {name} claim trajectory {index}",
                dir.display(),
                prev.file
            )));
        }
    }
    if out.is_empty() {
        return Err(QsdError::Config(format!("{}: no section files found", dir.display())));
    }
    Ok(out)
}

fn check_compatible(a: &Loaded, b: &Loaded) -> Result<()> {
    let (ha, hb) = (&a.header, &b.header);
    for (name, x, y) in [("beta", ha.beta, hb.beta), ("gamma", ha.gamma, hb.gamma), ("g", ha.g, hb.g)] {
        if x != y {
            return Err(QsdError::Config(format!(
                "refusing to compare {} and {}: {name} differs ({x} vs {y})",
                a.file, b.file
            )));
        }
    }
    // A noise-free run has no seed and pairs with any seed.
    if let (Some(x), Some(y)) = (ha.seed, hb.seed) {
        if x != y {
            return Err(QsdError::Config(format!(
                "refusing to compare {} and {}: seed differs ({x} vs {y})",
                a.file, b.file
            )));
        }
    }
    Ok(())
}

/// Pairs section files by trajectory index. Every file of `dir_a` must
/// have a partner in `dir_b` and vice versa, unless one side holds a single
/// noise-free section, which is then compared against every file of the
/// other side.
pub fn compare_dirs(dir_a: &Path, dir_b: &Path) -> Result<CompareReport> {
    let a = load_dir(dir_a)?;
    let b = load_dir(dir_b)?;
    let single = |m: &BTreeMap<usize, Loaded>| m.len() == 1 && m.values().all(|l| l.header.seed.is_none());
    let mut pairs = Vec::new();
    let mut push = |index: usize, la: &Loaded, lb: &Loaded| -> Result<()> {
        check_compatible(la, lb)?;
        let d = section_diff(&la.points, &lb.points);
        pairs.push(PairReport {
            index,
            file_a: la.file.clone(),
            file_b: lb.file.clone(),
            matched: d.matched,
            rms: d.rms,
            max_abs_dx: d.max_abs_dx,
            max_abs_dp: d.max_abs_dp,
            jaccard: section_jaccard(&la.points, &lb.points)?,
        });
        Ok(())
    };
    if single(&a) && b.len() > 1 {
        let la = a.values().next().expect("one entry");
        for (&i, lb) in &b {
            push(i, la, lb)?;
        }
    } else if single(&b) && a.len() > 1 {
        let lb = b.values().next().expect("one entry");
        for (&i, la) in &a {
            push(i, la, lb)?;
        }
    } else if a.len() == 1 && b.len() == 1 {
        let (&i, la) = a.iter().next().expect("one entry");
        push(i, la, b.values().next().expect("one entry"))?;
    } else {
        let ka: Vec<_> = a.keys().collect();
        let kb: Vec<_> = b.keys().collect();
        if ka != kb {
            return Err(QsdError::Config(format!(
                "trajectory sets differ: {} has {:?}, {} has {:?}",
                dir_a.display(),
                ka,
                dir_b.display(),
                kb
            )));
        }
        for (i, la) in &a {
            push(*i, la, &b[i])?;
        }
    }
    let fold = |f: fn(&PairReport) -> f64| pairs.iter().map(f).fold(0.0, f64::max);
    Ok(CompareReport {
        dir_a: dir_a.to_path_buf(),
        dir_b: dir_b.to_path_buf(),
        model_a: a.values().next().map(|l| l.header.model.clone()).unwrap_or_default(),
        model_b: b.values().next().map(|l| l.header.model.clone()).unwrap_or_default(),
        max_rms: fold(|p| p.rms),
        max_abs_dx: fold(|p| p.max_abs_dx),
        max_abs_dp: fold(|p| p.max_abs_dp),
        min_jaccard: pairs.iter().map(|p| p.jaccard).fold(1.0, f64::min),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_from_file_name() {
        assert_eq!(trajectory_index("section_mqsd_0012.csv"), Some(12));
        assert_eq!(trajectory_index("section_classical_0000.csv"), Some(0));
        assert_eq!(trajectory_index("section_mqsd_12.csv"), None);
        assert_eq!(trajectory_index("manifest.json"), None);
    }
}
