//! Dataset directories:
//!
//! ```text
//! <root>/images/<id>.pgm | <id>.ften
//! <root>/masks/<id>.pgm  | <id>.ften
//! <root>/manifest.txt
//! ```
//!
//! The manifest lists one id per line. A split adds a `# split seed=<n>`
//! trailer followed by `train:` and `val:` sections.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{mask_from_pgm, mask_to_pgm, window_and_normalize, Pgm, RawSlice, SamplePair, SplitManifest};
use crate::error::{Error, Result};
use crate::ften;
use crate::real::Real;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub ids: Vec<String>,
    pub split: Option<SplitManifest>,
}

impl Manifest {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for id in &self.ids {
            out.push_str(id);
            out.push('\n');
        }
        if let Some(split) = &self.split {
            let _ = writeln!(out, "# split seed={}", split.seed);
            out.push_str("train:\n");
            for id in &split.train_ids {
                out.push_str(id);
                out.push('\n');
            }
            out.push_str("val:\n");
            for id in &split.val_ids {
                out.push_str(id);
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut ids = Vec::new();
        let mut split: Option<SplitManifest> = None;
        let mut section: Option<bool> = None;
        for (k, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# split seed=") {
                let seed = rest.trim().parse().map_err(|_| format!("line {}: bad split seed {rest:?}", k + 1))?;
                split = Some(SplitManifest { seed, train_ids: vec![], val_ids: vec![] });
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            match (line, split.as_mut()) {
                ("train:", Some(_)) => section = Some(true),
                ("val:", Some(_)) => section = Some(false),
                (id, None) => ids.push(id.to_string()),
                (id, Some(s)) => match section {
                    Some(true) => s.train_ids.push(id.to_string()),
                    Some(false) => s.val_ids.push(id.to_string()),
                    None => return Err(format!("line {}: id {id:?} outside a train:/val: section", k + 1)),
                },
            }
        }
        if let Some(s) = &split {
            let mut all: Vec<&String> = s.train_ids.iter().chain(&s.val_ids).collect();
            all.sort();
            let mut listed: Vec<&String> = ids.iter().collect();
            listed.sort();
            if all != listed {
                return Err("split sections do not partition the id list".into());
            }
        }
        Ok(Self { ids, split })
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(MANIFEST);
        let text = fs::read_to_string(&path)?;
        Self::parse(&text).map_err(|reason| Error::format(path.display().to_string(), reason))
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        fs::write(root.as_ref().join(MANIFEST), self.render())?;
        Ok(())
    }
}

/// Handle on a dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = Manifest::load(&root)?;
        Ok(Self { root, manifest })
    }

    /// Creates `images/` and `masks/` under `root`.
    pub fn create(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("images"))?;
        fs::create_dir_all(root.join("masks"))?;
        Ok(Self { root, manifest: Manifest { ids: vec![], split: None } })
    }

    fn find(&self, dir: &str, id: &str) -> Result<PathBuf> {
        for ext in ["ften", "pgm"] {
            let p = self.root.join(dir).join(format!("{id}.{ext}"));
            if p.exists() {
                return Ok(p);
            }
        }
        Err(Error::format(self.root.join(dir).join(id).display().to_string(), "no .pgm or .ften file"))
    }

    /// Raw Hounsfield slice; only greymap images carry HU.
    pub fn load_raw(&self, id: &str) -> Result<RawSlice> {
        let p = self.root.join("images").join(format!("{id}.pgm"));
        Ok(RawSlice::from_pgm(id, &Pgm::load(&p)?))
    }

    pub fn load_mask<T: Real>(&self, id: &str) -> Result<crate::tensor::Tensor<T>> {
        let p = self.find("masks", id)?;
        if p.extension().is_some_and(|e| e == "ften") {
            let m: crate::tensor::Tensor<T> = ften::load(&p)?;
            return Ok(m.map(|v| if v >= T::of(0.5) { T::one() } else { T::zero() }));
        }
        mask_from_pgm(&Pgm::load(&p)?)
    }

    /// Normalized pair. FTEN images are taken as already normalized;
    /// greymap images are windowed to `[lo_hu, hi_hu]`.
    pub fn load_pair<T: Real>(&self, id: &str, lo_hu: f64, hi_hu: f64) -> Result<SamplePair<T>> {
        let p = self.find("images", id)?;
        let image = if p.extension().is_some_and(|e| e == "ften") {
            ften::load(&p)?
        } else {
            window_and_normalize(&RawSlice::from_pgm(id, &Pgm::load(&p)?), lo_hu, hi_hu)?
        };
        let mask = self.load_mask(id)?;
        SamplePair::new(id, image, mask).map_err(|e| Error::format(p.display().to_string(), e.to_string()))
    }

    pub fn load_all<T: Real>(&self, ids: &[String], lo_hu: f64, hi_hu: f64) -> Result<Vec<SamplePair<T>>> {
        ids.iter().map(|id| self.load_pair(id, lo_hu, hi_hu)).collect()
    }

    pub fn split(&self) -> Result<&SplitManifest> {
        self.manifest
            .split
            .as_ref()
            .ok_or_else(|| Error::format(self.root.join(MANIFEST).display().to_string(), "manifest has no split"))
    }

    /// Ids of `"train"`, `"val"` or `"all"`.
    pub fn ids(&self, split: &str) -> Result<Vec<String>> {
        match split {
            "all" => Ok(self.manifest.ids.clone()),
            "train" => Ok(self.split()?.train_ids.clone()),
            "val" => Ok(self.split()?.val_ids.clone()),
            other => Err(Error::arg(format!("unknown split {other:?}, expected train, val or all"))),
        }
    }

    pub fn write_raw(&mut self, slice: &RawSlice, mask: &Pgm) -> Result<()> {
        slice.to_pgm().save(self.root.join("images").join(format!("{}.pgm", slice.id)))?;
        mask.save(self.root.join("masks").join(format!("{}.pgm", slice.id)))?;
        self.manifest.ids.push(slice.id.clone());
        Ok(())
    }

    /// Normalized image as FTEN, mask as an 8-bit greymap.
    pub fn write_pair<T: Real>(&mut self, pair: &SamplePair<T>) -> Result<()> {
        ften::save(self.root.join("images").join(format!("{}.ften", pair.id)), &pair.image)?;
        mask_to_pgm(&pair.mask).save(self.root.join("masks").join(format!("{}.pgm", pair.id)))?;
        self.manifest.ids.push(pair.id.clone());
        Ok(())
    }

    pub fn save_manifest(&self) -> Result<()> {
        self.manifest.save(&self.root)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split_dataset;
    use crate::tensor::{Shape, Tensor};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("case_{k:03}")).collect()
    }

    #[test]
    fn manifest_round_trip() {
        let plain = Manifest { ids: ids(3), split: None };
        assert_eq!(plain.render(), "case_000\ncase_001\ncase_002\n");
        assert_eq!(Manifest::parse(&plain.render()).unwrap(), plain);
        let split = Manifest { ids: ids(5), split: Some(split_dataset(&ids(5), 9).unwrap()) };
        let text = split.render();
        assert!(text.contains("# split seed=9\ntrain:\n"));
        assert_eq!(Manifest::parse(&text).unwrap(), split);
    }

    #[test]
    fn manifest_rejects_inconsistent_split() {
        assert!(Manifest::parse("a\nb\n# split seed=1\ntrain:\na\nval:\nc\n").is_err());
        assert!(Manifest::parse("a\n# split seed=1\na\n").is_err());
        assert!(Manifest::parse("a\n# split seed=x\n").is_err());
    }

    #[test]
    fn pairs_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::create(dir.path()).unwrap();
        let image = Tensor::<f32>::create([1, 1, 4, 4], crate::tensor::Init::Uniform { lo: 0.0, hi: 1.0, seed: 2 }).unwrap();
        let mut mask = Tensor::<f32>::zeros(Shape::of(1, 1, 4, 4));
        mask.data_mut()[5] = 1.0;
        let pair = SamplePair::new("p0", image, mask).unwrap();
        ds.write_pair(&pair).unwrap();
        ds.save_manifest().unwrap();

        let raw = RawSlice::new("r0", 2, 2, vec![-1000, 170, -415, 0]).unwrap();
        let rmask = Pgm::new(2, 2, 255, vec![0, 255, 0, 0]).unwrap();
        ds.write_raw(&raw, &rmask).unwrap();

        let back = Dataset::open(dir.path()).unwrap();
        assert_eq!(back.manifest.ids, ["p0"]);
        assert_eq!(back.load_pair::<f32>("p0", -1000.0, 170.0).unwrap(), pair);
        let r = ds.load_pair::<f64>("r0", -1000.0, 170.0).unwrap();
        assert_eq!(r.image.data()[..2], [0.0, 1.0]);
        assert_eq!(r.mask.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(ds.load_raw("r0").unwrap(), raw);
        assert!(back.split().is_err());
        assert!(ds.load_pair::<f32>("missing", 0.0, 1.0).is_err());
    }
}
