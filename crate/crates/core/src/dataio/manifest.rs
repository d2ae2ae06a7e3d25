use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split tag {other:?} (expected train or test)"
            )),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub ground_truth: PathBuf,
    pub fov: Option<PathBuf>,
    pub split: Split,
}

impl ManifestEntry {
    /// File stem of the image, used as the id in outputs.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.split == split)
    }

    /// Parses `image,gt[,fov],split` lines. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let (image, gt, fov, split) = match fields[..] {
                [image, gt, split] => (image, gt, None, split),
                [image, gt, fov, split] => (image, gt, Some(fov), split),
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!(
                            "expected 3 or 4 comma-separated fields, got {}",
                            fields.len()
                        ),
                    })
                }
            };
            if [image, gt, split].iter().any(|f| f.is_empty()) || fov == Some("") {
                return Err(Error::Parse {
                    line: line_no,
                    message: "empty field".into(),
                });
            }
            let split = split.parse().map_err(|message| Error::Parse {
                line: line_no,
                message,
            })?;
            entries.push(ManifestEntry {
                image: base.join(image),
                ground_truth: base.join(gt),
                fov: fov.map(|f| base.join(f)),
                split,
            });
        }
        Ok(Self { entries })
    }

    /// Every referenced file must exist.
    pub fn validate(&self) -> Result<()> {
        let missing: Vec<PathBuf> = self
            .entries
            .iter()
            .flat_map(|e| [Some(&e.image), Some(&e.ground_truth), e.fov.as_ref()])
            .flatten()
            .filter(|p| !p.is_file())
            .cloned()
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingFiles(missing))
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# image,ground_truth[,fov],split\n");
        for e in &self.entries {
            out.push_str(&e.image.display().to_string());
            out.push(',');
            out.push_str(&e.ground_truth.display().to_string());
            if let Some(fov) = &e.fov {
                out.push(',');
                out.push_str(&fov.display().to_string());
            }
            out.push(',');
            out.push_str(&e.split.to_string());
            out.push('\n');
        }
        out
    }
}

/// Reads and validates a manifest file; relative paths are taken from its directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = DatasetManifest::parse(&text, base)?;
    manifest.validate()?;
    Ok(manifest)
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Leading digits of a file name, the pairing key in DRIVE-style folders
/// (`21_training.png`, `21_manual1.png`, `21_training_mask.png`).
fn numeric_key(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_string_lossy();
    let digits: String = name.chars().take_while(|c| c.is_ascii_digit()).collect();
    (!digits.is_empty()).then_some(digits)
}

/// Builds a manifest from a DRIVE-style split folder holding `images/`,
/// `1st_manual/` and optionally `mask/`, pairing files by numeric prefix.
pub fn load_drive_layout(dir: impl AsRef<Path>, split: Split) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let gts = sorted_files(&dir.join("1st_manual"))?;
    let masks = if dir.join("mask").is_dir() {
        sorted_files(&dir.join("mask"))?
    } else {
        Vec::new()
    };
    let find = |files: &[PathBuf], key: &str| {
        files
            .iter()
            .find(|p| numeric_key(p).as_deref() == Some(key))
            .cloned()
    };
    let mut entries = Vec::new();
    for image in sorted_files(&dir.join("images"))? {
        let key = numeric_key(&image).ok_or_else(|| {
            Error::Argument(format!("{} has no numeric id prefix", image.display()))
        })?;
        let ground_truth = find(&gts, &key).ok_or_else(|| {
            Error::MissingFiles(vec![dir
                .join("1st_manual")
                .join(format!("{key}_manual1.*"))])
        })?;
        entries.push(ManifestEntry {
            image,
            ground_truth,
            fov: find(&masks, &key),
            split,
        });
    }
    let manifest = DatasetManifest { entries };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_optional_fov_column() {
        let m =
            DatasetManifest::parse("a.png,b.png,c.png,train\na.png,b.png,test\n", Path::new(""))
                .unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].fov, Some(PathBuf::from("c.png")));
        assert_eq!(m.entries[0].split, Split::Train);
        assert_eq!(m.entries[1].fov, None);
        assert_eq!(m.entries[1].split, Split::Test);
    }

    #[test]
    fn wrong_field_count_names_line() {
        let err =
            DatasetManifest::parse("# header\na.png,b.png,test\na.png,b.png\n", Path::new(""))
                .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let m = DatasetManifest::parse("# c\n\n  \na,b,train\n", Path::new("")).unwrap();
        assert_eq!(m.entries.len(), 1);
    }

    #[test]
    fn unknown_split_is_rejected() {
        assert!(DatasetManifest::parse("a,b,validation", Path::new("")).is_err());
    }

    #[test]
    fn validation_lists_every_missing_path() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.png"), b"x").unwrap();
        let text = "a.png,gt.png,fov.png,train\n";
        let path = dir.path().join("m.csv");
        std::fs::write(&path, text).unwrap();
        match load_manifest(&path) {
            Err(Error::MissingFiles(paths)) => {
                assert_eq!(
                    paths,
                    vec![dir.path().join("gt.png"), dir.path().join("fov.png")]
                );
            }
            other => panic!("expected missing files, got {other:?}"),
        }
    }

    #[test]
    fn drive_layout_pairs_by_numeric_prefix() {
        let dir = tempfile::tempdir().unwrap();
        for sub in ["images", "1st_manual", "mask"] {
            std::fs::create_dir(dir.path().join(sub)).unwrap();
        }
        for id in ["21", "22"] {
            std::fs::write(dir.path().join(format!("images/{id}_training.png")), b"x").unwrap();
            std::fs::write(
                dir.path().join(format!("1st_manual/{id}_manual1.png")),
                b"x",
            )
            .unwrap();
        }
        std::fs::write(dir.path().join("mask/22_training_mask.png"), b"x").unwrap();
        let m = load_drive_layout(dir.path(), Split::Train).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert!(m.entries[0].fov.is_none());
        assert!(m.entries[1].fov.is_some());
        assert_eq!(m.entries[1].id(), "22_training");
    }
}
