use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub speaker: String,
    pub split: Split,
}

/// `path<TAB>speaker_id[<TAB>train|dev]` per line. Relative paths resolve
/// against the manifest's directory; blank lines and `#` comments are skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let bad = |msg: &str| Error::invalid(format!("manifest line {}: {msg}", n + 1));
            if !(2..=3).contains(&fields.len()) {
                return Err(bad("expected path<TAB>speaker[<TAB>split]"));
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(bad("empty path or speaker"));
            }
            let split = match fields.get(2).map(|s| s.trim()) {
                None | Some("train") => Split::Train,
                Some("dev") => Split::Dev,
                Some(other) => return Err(bad(&format!("unknown split {other:?}"))),
            };
            let path = Path::new(fields[0]);
            let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
            entries.push(ManifestEntry { path, speaker: fields[1].to_string(), split });
        }
        Ok(Self { entries })
    }

    /// Reads and parses a manifest; every referenced file must exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(&text, path.parent().unwrap_or(Path::new(".")))?;
        if m.entries.is_empty() {
            return Err(Error::invalid(format!("{} lists no clips", path.display())));
        }
        if let Some(missing) = m.entries.iter().find(|e| !e.path.exists()) {
            return Err(Error::invalid(format!("manifest entry {} does not exist", missing.path.display())));
        }
        Ok(m)
    }

    pub fn speakers(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.speaker.as_str()).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_splits_and_resolves_paths() {
        let m = Manifest::parse("a.wav\tx\n# note\n\n/abs/b.wav\ty\tdev\nc.wav\tx\ttrain\n", Path::new("/data")).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[0].path, PathBuf::from("/data/a.wav"));
        assert_eq!(m.entries[1].path, PathBuf::from("/abs/b.wav"));
        assert_eq!(m.split(Split::Dev).len(), 1);
        assert_eq!(m.speakers().len(), 2);
        assert!(Manifest::parse("a.wav\n", Path::new(".")).is_err());
        assert!(Manifest::parse("a.wav\tx\ttest\n", Path::new(".")).is_err());
    }
}
