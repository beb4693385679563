//! Splits images into an indexed grid of tiles and places processed tiles back.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{bail, DprError, Result};
use crate::imaging::Image;
use crate::refiner::tile_file_name;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyMode {
    #[default]
    Full,
    /// Negative tiles are written as zeros.
    BlackNegatives,
}

impl std::str::FromStr for AssemblyMode {
    type Err = DprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "black_negatives" => Ok(Self::BlackNegatives),
            other => Err(DprError::Config(format!("unknown assembly mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexedPatch {
    pub tile: Image,
    pub row: usize,
    pub col: usize,
    pub polarity: Polarity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexedPatchSet {
    pub image_id: String,
    pub grid: usize,
    /// Side of every tile in pixels.
    pub patch_px: usize,
    pub patches: Vec<IndexedPatch>,
}

/// Cuts `image` into `grid × grid` tiles in row-major order, all marked negative.
pub fn partition(image: &Image, grid: usize, image_id: &str) -> Result<IndexedPatchSet> {
    if grid == 0 || image.height() % grid != 0 || image.width() % grid != 0 || image.height() != image.width() {
        bail!(
            Shape,
            "{}x{} image cannot be split into a {grid}x{grid} grid",
            image.height(),
            image.width()
        );
    }
    let p = image.height() / grid;
    let mut patches = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            patches.push(IndexedPatch {
                tile: image.crop(row * p, col * p, p, p)?,
                row,
                col,
                polarity: Polarity::Negative,
            });
        }
    }
    Ok(IndexedPatchSet {
        image_id: image_id.to_string(),
        grid,
        patch_px: p,
        patches,
    })
}

impl IndexedPatchSet {
    /// Sets each tile's polarity from a binary grid.
    pub fn apply_mask(&mut self, mask: &Array2<u8>) -> Result<()> {
        if mask.dim() != (self.grid, self.grid) {
            bail!(Shape, "mask {:?} does not match grid {}", mask.dim(), self.grid);
        }
        for p in &mut self.patches {
            p.polarity = if mask[[p.row, p.col]] != 0 {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
        }
        Ok(())
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.patches.iter().filter(|p| p.polarity == polarity).count()
    }

    /// Errors unless every index in the grid appears exactly once and tiles share dims.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut duplicates = BTreeSet::new();
        let mut outside = Vec::new();
        for p in &self.patches {
            if p.row >= self.grid || p.col >= self.grid {
                outside.push((p.row, p.col));
            } else if !seen.insert((p.row, p.col)) {
                duplicates.insert((p.row, p.col));
            }
        }
        let missing: Vec<_> = (0..self.grid)
            .flat_map(|r| (0..self.grid).map(move |c| (r, c)))
            .filter(|rc| !seen.contains(rc))
            .collect();
        if !duplicates.is_empty() || !missing.is_empty() || !outside.is_empty() {
            bail!(
                InvalidInput,
                "patch set `{}`: duplicate {:?}, missing {:?}, out of grid {:?}",
                self.image_id,
                duplicates,
                missing,
                outside
            );
        }
        let dims = (self.patch_px, self.patch_px);
        let channels = self.patches.first().map(|p| p.tile.channels()).unwrap_or(0);
        for p in &self.patches {
            let (h, w, c) = p.tile.dims();
            if (h, w) != dims || c != channels {
                bail!(
                    Shape,
                    "tile ({}, {}) is {h}x{w}x{c}, expected {}x{}x{channels}",
                    p.row,
                    p.col,
                    dims.0,
                    dims.1
                );
            }
        }
        Ok(())
    }
}

/// Places every tile at its index; the patch list order is irrelevant.
pub fn organize(set: &IndexedPatchSet, mode: AssemblyMode) -> Result<Image> {
    set.validate()?;
    let p = set.patch_px;
    let channels = set.patches[0].tile.channels();
    let mut out = Image::zeros(set.grid * p, set.grid * p, channels);
    for patch in &set.patches {
        if mode == AssemblyMode::BlackNegatives && patch.polarity == Polarity::Negative {
            continue;
        }
        out.paste(&patch.tile, patch.row * p, patch.col * p)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    row: usize,
    col: usize,
    polarity: Polarity,
    file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PatchIndex {
    image_id: String,
    grid: usize,
    patch_px: usize,
    patches: Vec<IndexEntry>,
}

/// Writes tiles as 8-bit PNGs plus `index.json`.
pub fn save_patch_set(dir: &Path, set: &IndexedPatchSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DprError::io(dir, e))?;
    let mut entries = Vec::with_capacity(set.patches.len());
    for p in &set.patches {
        let file = tile_file_name(&set.image_id, p.row, p.col);
        p.tile.save_png(&dir.join(&file))?;
        entries.push(IndexEntry {
            row: p.row,
            col: p.col,
            polarity: p.polarity,
            file,
        });
    }
    let index = PatchIndex {
        image_id: set.image_id.clone(),
        grid: set.grid,
        patch_px: set.patch_px,
        patches: entries,
    };
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| DprError::io(&path, e))
}

pub fn load_patch_set(dir: &Path) -> Result<IndexedPatchSet> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|e| DprError::io(&path, e))?;
    let index: PatchIndex = serde_json::from_str(&text)?;
    let patches = index
        .patches
        .iter()
        .map(|e| {
            Ok(IndexedPatch {
                tile: Image::load_png(&dir.join(&e.file))?,
                row: e.row,
                col: e.col,
                polarity: e.polarity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IndexedPatchSet {
        image_id: index.image_id,
        grid: index.grid,
        patch_px: index.patch_px,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn image(side: usize, seed: u64) -> Image {
        let mut s = seed;
        Image::new(Array3::from_shape_fn((side, side, 3), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 40) as f32 / (1u64 << 24) as f32
        }))
        .unwrap()
    }

    #[test]
    fn grid_one_is_whole_image() {
        let img = image(12, 1);
        let set = partition(&img, 1, "a").unwrap();
        assert_eq!(set.patches.len(), 1);
        assert_eq!(set.patches[0].tile, img);
    }

    #[test]
    fn tiles_are_slices() {
        let img = image(128, 2);
        let set = partition(&img, 8, "a").unwrap();
        assert_eq!(set.patches.len(), 64);
        assert_eq!(set.patch_px, 16);
        for p in &set.patches {
            let slice = img.pixels().slice(ndarray::s![
                p.row * 16..(p.row + 1) * 16,
                p.col * 16..(p.col + 1) * 16,
                ..
            ]);
            assert_eq!(p.tile.pixels().view(), slice);
        }
        assert!(partition(&image(10, 0), 3, "a").is_err());
    }

    #[test]
    fn black_mode_and_errors() {
        let img = image(8, 3);
        let set = partition(&img, 4, "a").unwrap();
        let black = organize(&set, AssemblyMode::BlackNegatives).unwrap();
        assert!(black.pixels().iter().all(|&v| v == 0.0));

        let mut mixed = set.clone();
        let mut mask = Array2::zeros((4, 4));
        mask[[1, 2]] = 1;
        mixed.apply_mask(&mask).unwrap();
        assert_eq!(mixed.count(Polarity::Positive), 1);
        let out = organize(&mixed, AssemblyMode::BlackNegatives).unwrap();
        assert_eq!(out.crop(2, 4, 2, 2).unwrap(), img.crop(2, 4, 2, 2).unwrap());
        assert_eq!(out.crop(0, 0, 2, 2).unwrap(), Image::zeros(2, 2, 3));

        let mut dup = set.clone();
        dup.patches[1].row = 0;
        dup.patches[1].col = 0;
        let msg = organize(&dup, AssemblyMode::Full).unwrap_err().to_string();
        assert!(msg.contains("(0, 0)") && msg.contains("(0, 1)"), "{msg}");
        let mut short = set.clone();
        short.patches.pop();
        assert!(organize(&short, AssemblyMode::Full).is_err());
    }

    #[test]
    fn enlarged_tiles_assemble_at_full_size() {
        let img = image(32, 4);
        let mut set = partition(&img, 4, "a").unwrap();
        for p in &mut set.patches {
            p.tile = crate::imaging::enlarge(&p.tile, 4, crate::imaging::Interpolation::Bilinear).unwrap();
        }
        set.patch_px = 32;
        assert_eq!(organize(&set, AssemblyMode::Full).unwrap().dims(), (128, 128, 3));
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        // Multiples of 1/255 survive 8-bit storage exactly.
        let img = image(16, 5).map(|v| (v * 255.0).round() / 255.0);
        let mut set = partition(&img, 2, "img7").unwrap();
        set.patches[3].polarity = Polarity::Positive;
        save_patch_set(dir.path(), &set).unwrap();
        let back = load_patch_set(dir.path()).unwrap();
        assert_eq!(back, set);
    }

    proptest! {
        #[test]
        fn roundtrip_and_order_invariance(seed in 0u64..1000, grid in 1usize..6, side in 1usize..5, swaps in proptest::collection::vec((0usize..36, 0usize..36), 0..10)) {
            let img = image(grid * side, seed);
            let mut set = partition(&img, grid, "x").unwrap();
            prop_assert_eq!(organize(&set, AssemblyMode::Full).unwrap(), img.clone());
            let n = set.patches.len();
            for (a, b) in swaps {
                set.patches.swap(a % n, b % n);
            }
            prop_assert_eq!(organize(&set, AssemblyMode::Full).unwrap(), img.clone());
            let again = partition(&organize(&set, AssemblyMode::Full).unwrap(), grid, "x").unwrap();
            prop_assert_eq!(again, partition(&img, grid, "x").unwrap());
        }
    }
}
