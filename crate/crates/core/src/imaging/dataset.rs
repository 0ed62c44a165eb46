//! LR / HR / Ref / Ref↓ sample groups and their on-disk manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{read_fgrid, write_fgrid, write_png};
use super::{degrade, generate_phantom, Image};
use crate::error::{invalid, Error, Result};
use crate::seeds;

/// One training/evaluation group. All four images share `lr`/`hr` dims and
/// `ref`/`ref_down` dims; every side is divisible by 4.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGroup {
    pub lr: Image,
    pub hr: Image,
    pub reference: Image,
    pub ref_down: Image,
}

impl SampleGroup {
    pub fn new(lr: Image, hr: Image, reference: Image, ref_down: Image) -> Result<Self> {
        if lr.dims() != hr.dims() {
            return invalid("lr and hr dims differ");
        }
        if reference.dims() != ref_down.dims() {
            return invalid("ref and ref_down dims differ");
        }
        for (h, w) in [hr.dims(), reference.dims()] {
            if h % 4 != 0 || w % 4 != 0 {
                return invalid(format!("group dims {h}x{w} not divisible by 4"));
            }
        }
        Ok(Self {
            lr,
            hr,
            reference,
            ref_down,
        })
    }
}

/// Seeds used to synthesize one group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSeeds {
    pub hr: u64,
    pub lr_noise: u64,
    pub reference: u64,
    pub ref_noise: u64,
}

impl GroupSeeds {
    pub fn for_group(seed: u64, index: usize) -> Self {
        let i = index as u64;
        let hr = seeds::derive(seed, &[i, 0]);
        let mut reference = seeds::derive(seed, &[i, 1]);
        if reference == hr {
            reference = reference.wrapping_add(1);
        }
        Self {
            hr,
            lr_noise: seeds::derive(seed, &[i, 2]),
            reference,
            ref_noise: seeds::derive(seed, &[i, 3]),
        }
    }
}

pub fn make_group(seeds: &GroupSeeds, height: usize, width: usize) -> Result<SampleGroup> {
    let hr = generate_phantom(seeds.hr, height, width)?;
    let lr = degrade(&hr, seeds.lr_noise)?;
    let reference = generate_phantom(seeds.reference, height, width)?;
    let ref_down = degrade(&reference, seeds.ref_noise)?;
    SampleGroup::new(lr, hr, reference, ref_down)
}

/// `n` synthetic groups; deterministic in `seed`.
pub fn make_dataset(n: usize, seed: u64, height: usize, width: usize) -> Result<Vec<SampleGroup>> {
    if n == 0 {
        return invalid("dataset needs at least one group");
    }
    (0..n)
        .map(|i| make_group(&GroupSeeds::for_group(seed, i), height, width))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub lr: PathBuf,
    pub hr: PathBuf,
    #[serde(rename = "ref")]
    pub reference: PathBuf,
    pub ref_down: PathBuf,
    pub seeds: GroupSeeds,
}

/// `manifest.json`: group file paths (relative to the manifest) and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub groups: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Generates `n` groups into `dir` as FGRID files (plus PNG previews of HR/LR).
pub fn write_dataset(dir: &Path, n: usize, seed: u64, height: usize, width: usize) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut groups = Vec::with_capacity(n);
    if n == 0 {
        return invalid("dataset needs at least one group");
    }
    for i in 0..n {
        let s = GroupSeeds::for_group(seed, i);
        let g = make_group(&s, height, width)?;
        let name = |kind: &str| PathBuf::from(format!("group_{i:04}_{kind}.fgrid"));
        let entry = ManifestEntry {
            index: i,
            lr: name("lr"),
            hr: name("hr"),
            reference: name("ref"),
            ref_down: name("ref_down"),
            seeds: s,
        };
        write_fgrid(&g.lr, &dir.join(&entry.lr))?;
        write_fgrid(&g.hr, &dir.join(&entry.hr))?;
        write_fgrid(&g.reference, &dir.join(&entry.reference))?;
        write_fgrid(&g.ref_down, &dir.join(&entry.ref_down))?;
        write_png(&g.hr, &dir.join(format!("group_{i:04}_hr.png")))?;
        write_png(&g.lr, &dir.join(format!("group_{i:04}_lr.png")))?;
        groups.push(entry);
    }
    let manifest = Manifest {
        version: 1,
        seed,
        height,
        width,
        groups,
    };
    fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads every group listed in `dir/manifest.json`.
pub fn load_dataset(dir: &Path) -> Result<Vec<SampleGroup>> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.groups.is_empty() {
        return Err(Error::Format("manifest lists no groups".into()));
    }
    manifest
        .groups
        .iter()
        .map(|e| {
            SampleGroup::new(
                read_fgrid(&dir.join(&e.lr))?,
                read_fgrid(&dir.join(&e.hr))?,
                read_fgrid(&dir.join(&e.reference))?,
                read_fgrid(&dir.join(&e.ref_down))?,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let a = make_dataset(4, 0, 96, 96).unwrap();
        assert_eq!(a.len(), 4);
        for g in &a {
            for img in [&g.lr, &g.hr, &g.reference, &g.ref_down] {
                assert_eq!(img.dims(), (96, 96));
            }
        }
        let b = make_dataset(4, 0, 96, 96).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn groups_are_distinct() {
        let d = make_dataset(2, 0, 64, 64).unwrap();
        assert!(d[0].hr.count_differing(&d[1].hr) > 0);
        assert!(d[0].hr.count_differing(&d[0].reference) > 0);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(make_dataset(0, 0, 64, 64).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), 2, 9, 64, 64).unwrap();
        assert_eq!(m.groups.len(), 2);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, make_dataset(2, 9, 64, 64).unwrap());
    }
}
