//! Dataset manifests: `<split>\t<category>\t<relative path>` per line.
//!
//! Blank lines and lines starting with `#` are ignored, except a
//! `# seed=<n>` line which records the generator seed.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::binio::{read_file, write_file};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!(
                "split must be 'train' or 'test', got '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub category: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::Validation(format!(
                    "manifest lists {} more than once",
                    e.path.display()
                )));
            }
            if e.category.contains(['\t', '\n']) {
                return Err(Error::Validation(format!(
                    "category {:?} contains a tab or newline",
                    e.category
                )));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        if let Some(seed) = self.seed {
            out.push_str(&format!("# seed={seed}\n"));
        }
        for e in &self.entries {
            let path = e.path.to_str().ok_or_else(|| {
                Error::Validation(format!("non UTF-8 path {}", e.path.display()))
            })?;
            out.push_str(&format!("{}\t{}\t{}\n", e.split, e.category, path));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut manifest = DatasetManifest::default();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(seed) = comment.trim().strip_prefix("seed=") {
                    manifest.seed = Some(seed.trim().parse().map_err(|_| {
                        Error::Validation(format!("manifest line {lineno}: bad seed '{seed}'"))
                    })?);
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [split, category, path] = fields[..] else {
                return Err(Error::Validation(format!(
                    "manifest line {lineno}: expected 3 tab-separated fields, got {}",
                    fields.len()
                )));
            };
            let split = split
                .parse()
                .map_err(|e| Error::Validation(format!("manifest line {lineno}: {e}")))?;
            manifest.entries.push(ManifestEntry {
                split,
                category: category.to_string(),
                path: PathBuf::from(path),
            });
        }
        manifest.validate()?;
        Ok(manifest)
    }
}

pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), m.to_text()?.as_bytes())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Validation(format!("{}: manifest is not UTF-8", path.display())))?;
    DatasetManifest::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let text = "# seed=7\ntrain\tsynthetic\ta.adft\n\ntest\tsynthetic\tsub/b.adft\n";
        let m = DatasetManifest::parse(text).unwrap();
        assert_eq!(m.seed, Some(7));
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.split(Split::Test).count(), 1);
        assert_eq!(m.to_text().unwrap(), text.replace("\n\n", "\n"));
    }

    #[test]
    fn rejects_duplicates_and_bad_splits() {
        assert!(DatasetManifest::parse("train\tc\ta\ntest\tc\ta\n").is_err());
        let err = DatasetManifest::parse("val\tc\ta\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
        assert!(DatasetManifest::parse("train\tc\n").is_err());
    }
}
