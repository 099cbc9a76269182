use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Charset;
use crate::error::{Error, Result};
use crate::rng;

pub const LABELS_FILE: &str = "labels.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image path relative to the manifest root.
    pub path: PathBuf,
    label: String,
}

/// A word-level dataset: image paths under `root` with transcriptions.
///
/// Immutable once built. Label reads go through [`Manifest::label`], which
/// counts them, so protocols that must not see labels can be audited.
#[derive(Clone, Debug)]
pub struct Manifest {
    root: PathBuf,
    entries: Arc<Vec<ManifestEntry>>,
    label_reads: Arc<AtomicUsize>,
}

impl PartialEq for Manifest {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root && self.entries == other.entries
    }
}

/// Out-of-charset symbols found in a manifest.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    /// `(line number, transcription, offending symbols)`; lines are 1-based.
    pub offenders: Vec<(usize, String, Vec<char>)>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown: Vec<String> = self
            .offenders
            .iter()
            .take(10)
            .map(|(line, _, chars)| format!("line {line}: {chars:?}"))
            .collect();
        write!(f, "{} offending line(s): {}", self.offenders.len(), shown.join("; "))?;
        if self.offenders.len() > 10 {
            write!(f, "; ...")?;
        }
        Ok(())
    }
}

impl Manifest {
    /// Builds a manifest from entries without touching the filesystem.
    pub fn from_entries(root: impl Into<PathBuf>, entries: Vec<(PathBuf, String)>) -> Self {
        Self {
            root: root.into(),
            entries: Arc::new(
                entries
                    .into_iter()
                    .map(|(path, label)| ManifestEntry { path, label })
                    .collect(),
            ),
            label_reads: Arc::default(),
        }
    }

    /// Parses `<dir>/labels.tsv` (`relpath<TAB>transcription` per line) and
    /// checks that every referenced image exists.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(LABELS_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.strip_suffix('\r').unwrap_or(line);
            let Some((rel, label)) = line.split_once('\t') else {
                return Err(Error::Malformed {
                    path: path.clone(),
                    line: line_no,
                    message: "expected `<relpath>\\t<transcription>`".into(),
                });
            };
            if rel.is_empty() {
                return Err(Error::Malformed {
                    path: path.clone(),
                    line: line_no,
                    message: "empty image path".into(),
                });
            }
            let rel = PathBuf::from(rel);
            if !dir.join(&rel).is_file() {
                return Err(Error::MissingImage(dir.join(&rel)));
            }
            entries.push((rel, label.to_string()));
        }
        if entries.is_empty() {
            return Err(Error::Ingestion(format!("{} has no entries", path.display())));
        }
        Ok(Self::from_entries(dir, entries))
    }

    /// Writes `labels.tsv` under the root.
    pub fn write(&self) -> Result<()> {
        let mut out = String::new();
        for e in self.entries.iter() {
            out.push_str(&e.path.to_string_lossy());
            out.push('\t');
            out.push_str(&e.label);
            out.push('\n');
        }
        std::fs::create_dir_all(&self.root)?;
        std::fs::write(self.root.join(LABELS_FILE), out)?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rel_path(&self, i: usize) -> &Path {
        &self.entries[i].path
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].path)
    }

    /// Transcription of entry `i`. Every call is counted.
    pub fn label(&self, i: usize) -> &str {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        &self.entries[i].label
    }

    /// Number of label reads so far, across clones of this manifest.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Reports every transcription using symbols outside `charset`.
    pub fn validate(&self, charset: &Charset) -> Result<()> {
        let mut report = ValidationReport::default();
        for i in 0..self.len() {
            let label = self.label(i);
            if let Err(bad) = charset.encode(label) {
                report.offenders.push((i + 1, label.to_string(), bad));
            }
        }
        if report.offenders.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(report))
        }
    }

    /// Manifest restricted to `indices` (in the given order); labels are
    /// carried over without being read.
    pub fn select(&self, indices: &[usize]) -> Manifest {
        Manifest {
            root: self.root.clone(),
            entries: Arc::new(indices.iter().map(|&i| self.entries[i].clone()).collect()),
            label_reads: self.label_reads.clone(),
        }
    }
}

/// A seeded label subset with the indices drawn from the parent manifest.
#[derive(Clone, Debug)]
pub struct Subset {
    pub manifest: Manifest,
    pub record: SubsetRecord,
}

/// Audit record for a subset, persisted as a JSON sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecord {
    pub fraction: f64,
    pub seed: u64,
    pub total: usize,
    /// Indices into the parent manifest, ascending.
    pub indices: Vec<usize>,
    /// SHA-256 over the selected indices.
    pub digest: String,
}

impl SubsetRecord {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Number of entries kept for `fraction` of `n`: `⌈fraction·n⌉`.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    // guard against 0.07 * 100 = 7.000000000000001
    let raw = fraction * n as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (k as usize).clamp(1, n)
}

/// Uniform draw of `⌈fraction·|manifest|⌉` entries without replacement.
/// The draw is a prefix of one seeded permutation, so for a fixed seed
/// smaller fractions are always contained in larger ones.
pub fn subset_labels(manifest: &Manifest, fraction: f64, seed: u64) -> Result<Subset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("label fraction {fraction} is outside (0, 1]")));
    }
    let n = manifest.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::purpose::SUBSET));
    let mut indices = order[..subset_size(n, fraction)].to_vec();
    indices.sort_unstable();
    let mut h = Sha256::new();
    for i in &indices {
        h.update((*i as u64).to_le_bytes());
    }
    Ok(Subset {
        manifest: manifest.select(&indices),
        record: SubsetRecord {
            fraction,
            seed,
            total: n,
            indices,
            digest: hex::encode(h.finalize()),
        },
    })
}

/// Seeded train/validation split; returns `(train, validation)` index lists.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::purpose::SPLIT));
    let k = if n < 2 { 0 } else { subset_size(n, fraction).min(n - 1) };
    let mut val = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn write_dir(lines: &str, files: &[&str]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for f in files {
            std::fs::write(dir.path().join(f), b"x").unwrap();
        }
        std::fs::write(dir.path().join(LABELS_FILE), lines).unwrap();
        dir
    }

    fn synthetic(n: usize) -> Manifest {
        Manifest::from_entries(
            "/tmp",
            (0..n).map(|i| (PathBuf::from(format!("{i}.png")), format!("w{i}"))).collect(),
        )
    }

    #[test]
    fn parses_valid_lines_in_order() {
        let dir = write_dir("a.png\tfoo\nb.png\tbar baz\nc.png\t\n", &["a.png", "b.png", "c.png"]);
        let m = Manifest::load(dir.path()).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.rel_path(1), Path::new("b.png"));
        assert_eq!(m.label(1), "bar baz");
        assert_eq!(m.label(2), "");
    }

    #[test]
    fn line_without_tab_names_line_number() {
        let dir = write_dir("a.png\tfoo\nb.png foo\n", &["a.png", "b.png"]);
        match Manifest::load(dir.path()).unwrap_err() {
            Error::Malformed { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_image_names_path() {
        let dir = write_dir("a.png\tfoo\nmissing.png\tbar\n", &["a.png"]);
        let err = Manifest::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("missing.png"), "{err}");
    }

    #[test]
    fn missing_labels_file_is_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Manifest::load(dir.path()), Err(Error::Ingestion(_))));
    }

    #[test]
    fn validation_lists_offenders() {
        let m = Manifest::from_entries(
            "/tmp",
            vec![("a".into(), "abc".into()), ("b".into(), "aé".into()), ("c".into(), "x!".into())],
        );
        let cs = Charset::new("abcx".chars()).unwrap();
        match m.validate(&cs).unwrap_err() {
            Error::Validation(r) => {
                assert_eq!(r.offenders.len(), 2);
                assert_eq!(r.offenders[0].0, 2);
                assert_eq!(r.offenders[0].2, vec!['é']);
                assert_eq!(r.offenders[1].2, vec!['!']);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn label_reads_are_counted() {
        let m = synthetic(3);
        let sub = m.select(&[0, 2]);
        assert_eq!(m.label_reads(), 0);
        let _ = sub.label(0);
        assert_eq!(m.label_reads(), 1);
    }

    #[test]
    fn subset_counts_and_identity() {
        let m = synthetic(100);
        assert_eq!(subset_labels(&m, 0.05, 1).unwrap().manifest.len(), 5);
        assert_eq!(subset_labels(&m, 0.07, 1).unwrap().manifest.len(), 7);
        let full = subset_labels(&m, 1.0, 1).unwrap();
        assert_eq!(full.manifest, m);
        assert!(subset_labels(&m, 0.0, 1).is_err());
        assert!(subset_labels(&m, 1.5, 1).is_err());
        assert!(subset_labels(&m, f64::NAN, 1).is_err());
    }

    #[test]
    fn subsets_are_nested_and_seeded() {
        let m = synthetic(200);
        for seed in 0..5 {
            let small: HashSet<_> = subset_labels(&m, 0.05, seed).unwrap().record.indices.into_iter().collect();
            let large: HashSet<_> = subset_labels(&m, 0.10, seed).unwrap().record.indices.into_iter().collect();
            assert!(small.is_subset(&large));
        }
        let a = subset_labels(&m, 0.1, 3).unwrap().record;
        let b = subset_labels(&m, 0.1, 3).unwrap().record;
        let c = subset_labels(&m, 0.1, 4).unwrap().record;
        assert_eq!(a, b);
        assert_ne!(a.indices, c.indices);
    }

    #[test]
    fn validation_split_partitions() {
        let (train, val) = split_validation(50, 0.1, 9);
        assert_eq!(val.len(), 5);
        let mut all: Vec<_> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
    }
}
