//! Dataset manifests: one CSV row per clip.
//!
//! Columns `id,split,noisy,clean,noisy2,extra_noise`; optional columns may be
//! empty. Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Strategy;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestItem {
    pub id: String,
    pub split: Split,
    pub noisy: PathBuf,
    pub clean: Option<PathBuf>,
    pub noisy2: Option<PathBuf>,
    pub extra_noise: Option<PathBuf>,
}

impl ManifestItem {
    /// Name of the first field `strategy` needs that this item lacks.
    pub fn missing_for(&self, strategy: Strategy) -> Option<&'static str> {
        match strategy {
            Strategy::Ont => None,
            Strategy::Nct if self.clean.is_none() => Some("clean"),
            Strategy::Nnt if self.noisy2.is_none() => Some("noisy2"),
            Strategy::Nernt if self.extra_noise.is_none() => Some("extra_noise"),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    split: Split,
    noisy: String,
    #[serde(default)]
    clean: String,
    #[serde(default)]
    noisy2: String,
    #[serde(default)]
    extra_noise: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
}

fn opt(s: &str, base: &Path) -> Option<PathBuf> {
    (!s.trim().is_empty()).then(|| base.join(s.trim()))
}

fn rel(p: &Path, base: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<ManifestItem> {
        self.items.iter().filter(|i| i.split == split).cloned().collect()
    }

    pub fn validate_for(items: &[ManifestItem], strategy: Strategy) -> Result<()> {
        if items.is_empty() {
            return Err(Error::Manifest("dataset is empty".into()));
        }
        for item in items {
            if let Some(field) = item.missing_for(strategy) {
                return Err(Error::Manifest(format!(
                    "item '{}' lacks field '{field}' required by strategy {strategy}",
                    item.id
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut items = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (line, row) in reader.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Manifest(format!("row {}: {e}", line + 1)))?;
            if row.id.is_empty() {
                return Err(Error::Manifest(format!("row {}: empty id", line + 1)));
            }
            if row.noisy.is_empty() {
                return Err(Error::Manifest(format!("item '{}' lacks field 'noisy'", row.id)));
            }
            if !seen.insert(row.id.clone()) {
                return Err(Error::Manifest(format!("duplicate id '{}'", row.id)));
            }
            items.push(ManifestItem {
                noisy: base.join(&row.noisy),
                clean: opt(&row.clean, base),
                noisy2: opt(&row.noisy2, base),
                extra_noise: opt(&row.extra_noise, base),
                id: row.id,
                split: row.split,
            });
        }
        Ok(Self { items })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_csv(&self, base: &Path) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let s = |p: &Option<PathBuf>| p.as_deref().map(|p| rel(p, base)).unwrap_or_default();
        for i in &self.items {
            w.serialize(Row {
                id: i.id.clone(),
                split: i.split,
                noisy: rel(&i.noisy, base),
                clean: s(&i.clean),
                noisy2: s(&i.noisy2),
                extra_noise: s(&i.extra_noise),
            })
            .map_err(|e| Error::Manifest(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Manifest(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_csv(path.parent().unwrap_or(Path::new(".")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEXT: &str = "id,split,noisy,clean,noisy2,extra_noise\n\
                        a,train,noisy/a.wav,clean/a.wav,,\n\
                        b,test,noisy/b.wav,,noisy2/b.wav,extra/b.wav\n";

    #[test]
    fn parse_resolves_paths() {
        let m = DatasetManifest::parse(TEXT, Path::new("/data")).unwrap();
        assert_eq!(m.items.len(), 2);
        assert_eq!(m.items[0].noisy, PathBuf::from("/data/noisy/a.wav"));
        assert_eq!(m.items[0].clean, Some(PathBuf::from("/data/clean/a.wav")));
        assert_eq!(m.items[0].noisy2, None);
        assert_eq!(m.items[1].split, Split::Test);
        assert_eq!(m.split(Split::Train).len(), 1);
    }

    #[test]
    fn round_trip() {
        let base = Path::new("/data");
        let m = DatasetManifest::parse(TEXT, base).unwrap();
        assert_eq!(m.to_csv(base).unwrap(), TEXT);
    }

    #[test]
    fn validation_names_missing_field() {
        let m = DatasetManifest::parse(TEXT, Path::new("/d")).unwrap();
        let err = DatasetManifest::validate_for(&m.items, Strategy::Nct).unwrap_err();
        assert!(err.to_string().contains("'clean'"), "{err}");
        assert!(err.to_string().contains("'b'"), "{err}");
        let err = DatasetManifest::validate_for(&m.items, Strategy::Nnt).unwrap_err();
        assert!(err.to_string().contains("noisy2"));
        DatasetManifest::validate_for(&m.items, Strategy::Ont).unwrap();
        assert!(DatasetManifest::validate_for(&[], Strategy::Ont).is_err());
    }

    #[test]
    fn rejects_bad_rows() {
        let dup = "id,split,noisy\na,train,x.wav\na,train,y.wav\n";
        assert!(DatasetManifest::parse(dup, Path::new(".")).is_err());
        let split = "id,split,noisy\na,dev,x.wav\n";
        assert!(DatasetManifest::parse(split, Path::new(".")).is_err());
        let no_noisy = "id,split,noisy\na,train,\n";
        let err = DatasetManifest::parse(no_noisy, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("'noisy'"));
    }
}
