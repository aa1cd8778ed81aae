//! Tiled slide storage, tissue masking, region sampling, patch gridding and
//! reconstruction of regions from loose patch datasets.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use image::{ImageEncoder, RgbImage};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TILE_SIZE: u32 = 448;
pub const DEFAULT_REGION_SIDE: u32 = 4480;
pub const DEFAULT_PATCH_SIDE: u32 = 224;
pub const DEFAULT_MICRONS_PER_PIXEL: f64 = 0.25;
/// Regions below this tissue fraction are never sampled.
pub const MIN_TISSUE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueThresholds {
    pub s_min: f64,
    pub v_max: f64,
}

impl Default for TissueThresholds {
    fn default() -> Self {
        Self {
            s_min: 0.08,
            v_max: 0.95,
        }
    }
}

impl TissueThresholds {
    pub fn is_tissue(&self, r: u8, g: u8, b: u8) -> bool {
        let max = r.max(g).max(b) as f64 / 255.0;
        let min = r.min(g).min(b) as f64 / 255.0;
        let sat = if max > 0.0 { (max - min) / max } else { 0.0 };
        sat >= self.s_min && max <= self.v_max
    }
}

/// Fraction of RGB pixels classified as tissue.
pub fn tissue_fraction(rgb: &[u8], thresholds: TissueThresholds) -> Result<f64> {
    if rgb.is_empty() || rgb.len() % 3 != 0 {
        return Err(Error::Domain(format!(
            "tissue_fraction needs a nonempty RGB buffer, got {} bytes",
            rgb.len()
        )));
    }
    let hits = rgb
        .chunks_exact(3)
        .filter(|p| thresholds.is_tissue(p[0], p[1], p[2]))
        .count();
    Ok(hits as f64 / (rgb.len() / 3) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub slide_id: String,
    pub width: u32,
    pub height: u32,
    pub microns_per_pixel: f64,
    pub tile_size: u32,
}

impl BundleManifest {
    pub fn tile_grid(&self) -> (u32, u32) {
        (self.height.div_ceil(self.tile_size), self.width.div_ceil(self.tile_size))
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.tile_size == 0 {
            return Err(Error::Integrity(format!(
                "slide {} has zero extent or tile size",
                self.slide_id
            )));
        }
        if !(self.microns_per_pixel.is_finite() && self.microns_per_pixel > 0.0) {
            return Err(Error::Integrity(format!(
                "slide {}: microns_per_pixel must be positive",
                self.slide_id
            )));
        }
        Ok(())
    }
}

/// An on-disk slide: `manifest.json` plus `tiles/{row}_{col}.png`. Edge
/// tiles are cropped to the slide extent. Tiles are read on demand.
#[derive(Debug, Clone)]
pub struct SlideBundle {
    pub manifest: BundleManifest,
    dir: PathBuf,
}

fn tile_path(dir: &Path, row: u32, col: u32) -> PathBuf {
    dir.join("tiles").join(format!("{row}_{col}.png"))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image {
            path: PathBuf::from("<memory>"),
            source,
        })?;
    Ok(buf)
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(img.to_rgb8())
}

impl SlideBundle {
    /// Tiles `image` into a new bundle directory.
    pub fn write(
        image: &RgbImage,
        slide_id: &str,
        microns_per_pixel: f64,
        tile_size: u32,
        dir: &Path,
    ) -> Result<Self> {
        let manifest = BundleManifest {
            slide_id: slide_id.to_string(),
            width: image.width(),
            height: image.height(),
            microns_per_pixel,
            tile_size,
        };
        manifest.validate()?;
        let (rows, cols) = manifest.tile_grid();
        let cells: Vec<(u32, u32)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        cells.par_iter().try_for_each(|&(r, c)| {
            let (x, y) = (c * tile_size, r * tile_size);
            let w = tile_size.min(manifest.width - x);
            let h = tile_size.min(manifest.height - y);
            let tile = image::imageops::crop_imm(image, x, y, w, h).to_image();
            crate::io::write_atomic(&tile_path(dir, r, c), &encode_png(&tile)?)
        })?;
        let json = serde_json::to_vec_pretty(&manifest)?;
        crate::io::write_atomic(&dir.join("manifest.json"), &json)?;
        Ok(Self {
            manifest,
            dir: dir.to_path_buf(),
        })
    }

    /// Opens a bundle and checks that every tile of the declared extent exists.
    pub fn open(dir: &Path) -> Result<Self> {
        let text = crate::io::read_to_string(&dir.join("manifest.json"))?;
        let manifest: BundleManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        let (rows, cols) = manifest.tile_grid();
        for r in 0..rows {
            for c in 0..cols {
                let p = tile_path(dir, r, c);
                if !p.is_file() {
                    return Err(Error::Integrity(format!(
                        "slide {} is missing tile {}",
                        manifest.slide_id,
                        p.display()
                    )));
                }
            }
        }
        Ok(Self {
            manifest,
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn slide_id(&self) -> &str {
        &self.manifest.slide_id
    }

    /// Pixel-exact crop of the level-0 image.
    pub fn read_rect(&self, x: u32, y: u32, w: u32, h: u32) -> Result<RgbImage> {
        let m = &self.manifest;
        if w == 0 || h == 0 || x + w > m.width || y + h > m.height {
            return Err(Error::Geometry(format!(
                "rect ({x},{y}) {w}x{h} outside slide {}x{}",
                m.width, m.height
            )));
        }
        let ts = m.tile_size;
        let mut out = RgbImage::new(w, h);
        for r in y / ts..=(y + h - 1) / ts {
            for c in x / ts..=(x + w - 1) / ts {
                let p = tile_path(&self.dir, r, c);
                let tile = read_png(&p)?;
                let (tx, ty) = (c * ts, r * ts);
                let ew = ts.min(m.width - tx);
                let eh = ts.min(m.height - ty);
                if tile.dimensions() != (ew, eh) {
                    return Err(Error::Integrity(format!(
                        "tile {} is {:?}, expected {ew}x{eh}",
                        p.display(),
                        tile.dimensions()
                    )));
                }
                let x0 = x.max(tx);
                let y0 = y.max(ty);
                let x1 = (x + w).min(tx + ew);
                let y1 = (y + h).min(ty + eh);
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        out.put_pixel(xx - x, yy - y, *tile.get_pixel(xx - tx, yy - ty));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn read_full(&self) -> Result<RgbImage> {
        self.read_rect(0, 0, self.manifest.width, self.manifest.height)
    }

    pub fn read_region(&self, region: &Region) -> Result<RgbImage> {
        self.read_rect(region.x, region.y, region.side, region.side)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x: u32,
    pub y: u32,
    pub side: u32,
    pub tissue_fraction: f64,
}

/// Lattice origins with stride `side / 2` that fit inside the slide.
pub fn candidate_origins(width: u32, height: u32, side: u32) -> Vec<(u32, u32)> {
    let stride = (side / 2).max(1);
    let axis = |len: u32| -> Vec<u32> {
        if len < side {
            return Vec::new();
        }
        (0..=(len - side) / stride).map(|k| k * stride).collect()
    };
    let xs = axis(width);
    axis(height)
        .into_iter()
        .flat_map(|y| xs.iter().map(move |&x| (x, y)))
        .collect()
}

/// Draws `n` tissue-bearing regions. Without replacement when enough
/// qualifying candidates exist, with replacement otherwise.
pub fn sample_regions(
    bundle: &SlideBundle,
    n: usize,
    side: u32,
    seed: u64,
    thresholds: TissueThresholds,
) -> Result<Vec<Region>> {
    let m = &bundle.manifest;
    if side == 0 || m.width < side || m.height < side {
        return Err(Error::Geometry(format!(
            "slide {} ({}x{}) is smaller than region side {side}",
            m.slide_id, m.width, m.height
        )));
    }
    let candidates: Vec<Region> = candidate_origins(m.width, m.height, side)
        .into_par_iter()
        .map(|(x, y)| {
            let px = bundle.read_rect(x, y, side, side)?;
            Ok(Region {
                x,
                y,
                side,
                tissue_fraction: tissue_fraction(px.as_raw(), thresholds)?,
            })
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|r| r.tissue_fraction >= MIN_TISSUE_FRACTION)
        .collect();
    choose_regions(&candidates, n, seed, &m.slide_id)
}

/// Selection step of [`sample_regions`], split out for reuse on
/// precomputed candidate lists.
pub fn choose_regions(candidates: &[Region], n: usize, seed: u64, slide_id: &str) -> Result<Vec<Region>> {
    if candidates.is_empty() {
        return Err(Error::Data(format!("no tissue in slide {slide_id}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if candidates.len() >= n {
        Ok(index::sample(&mut rng, candidates.len(), n)
            .into_iter()
            .map(|i| candidates[i])
            .collect())
    } else {
        Ok((0..n)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub row: u32,
    pub col: u32,
    /// Interleaved RGB, `side * side * 3` bytes.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub region: Region,
    pub patch_side: u32,
    /// Patches per row (and per column).
    pub n: u32,
    /// Row-major.
    pub patches: Vec<Patch>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

pub fn check_divisible(side: u32, patch_side: u32) -> Result<u32> {
    if patch_side == 0 || side == 0 || side % patch_side != 0 {
        return Err(Error::Geometry(format!(
            "region side {side} is not a multiple of patch side {patch_side}"
        )));
    }
    Ok(side / patch_side)
}

/// Cuts an in-memory region image into row-major patches.
pub fn grid_from_image(region: Region, img: &RgbImage, patch_side: u32) -> Result<PatchGrid> {
    let n = check_divisible(region.side, patch_side)?;
    if img.dimensions() != (region.side, region.side) {
        return Err(Error::Geometry(format!(
            "region image is {:?}, expected side {}",
            img.dimensions(),
            region.side
        )));
    }
    let mut patches = Vec::with_capacity((n * n) as usize);
    for row in 0..n {
        for col in 0..n {
            let crop = image::imageops::crop_imm(img, col * patch_side, row * patch_side, patch_side, patch_side)
                .to_image();
            patches.push(Patch {
                row,
                col,
                pixels: crop.into_raw(),
            });
        }
    }
    Ok(PatchGrid {
        region,
        patch_side,
        n,
        patches,
    })
}

pub fn patch_grid(bundle: &SlideBundle, region: Region, patch_side: u32) -> Result<PatchGrid> {
    check_divisible(region.side, patch_side)?;
    let img = bundle.read_region(&region)?;
    grid_from_image(region, &img, patch_side)
}

/// Inverse of [`grid_from_image`].
pub fn assemble(grid: &PatchGrid) -> RgbImage {
    let side = grid.region.side;
    let ps = grid.patch_side as usize;
    let mut img = RgbImage::new(side, side);
    for p in &grid.patches {
        let (x0, y0) = (p.col * grid.patch_side, p.row * grid.patch_side);
        for (k, px) in p.pixels.chunks_exact(3).enumerate() {
            let (dx, dy) = ((k % ps) as u32, (k / ps) as u32);
            img.put_pixel(x0 + dx, y0 + dy, image::Rgb([px[0], px[1], px[2]]));
        }
    }
    img
}

// ---- patch-only datasets -----------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRecord {
    pub patch_path: PathBuf,
    pub x: i64,
    pub y: i64,
    pub slide_id: String,
}

pub const PATCH_CSV_HEADER: &str = "patch_path,x,y,slide_id";

/// Parses `patch_path,x,y,slide_id`; relative paths resolve against `root`.
pub fn parse_patch_csv(text: &str, source: &str, root: &Path) -> Result<Vec<PatchRecord>> {
    let perr = |line: usize, message: String| Error::Parse {
        source_name: source.to_string(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || (i == 0 && line == PATCH_CSV_HEADER) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(perr(i + 1, format!("expected 4 fields, found {}", f.len())));
        }
        let coord = |s: &str| s.parse::<i64>().map_err(|_| perr(i + 1, format!("coordinate {s:?} is not an integer")));
        out.push(PatchRecord {
            patch_path: root.join(f[0]),
            x: coord(f[1])?,
            y: coord(f[2])?,
            slide_id: f[3].to_string(),
        });
    }
    Ok(out)
}

pub fn read_patch_csv(path: &Path) -> Result<Vec<PatchRecord>> {
    let text = crate::io::read_to_string(path)?;
    let root = path.parent().unwrap_or(Path::new(""));
    parse_patch_csv(&text, &path.display().to_string(), root)
}

/// A region rebuilt from loose patches; absent grid positions are padded.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredRegion {
    pub slide_id: String,
    pub origin: (u64, u64),
    pub side: u32,
    pub patch_side: u32,
    /// Row-major `n * n` slots.
    pub slots: Vec<Option<PathBuf>>,
}

impl ClusteredRegion {
    pub fn padded(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_none).collect()
    }

    pub fn padded_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_none()).count()
    }

    /// Loads present patches (row-major); padded slots yield `None`.
    pub fn load(&self) -> Result<Vec<Option<Vec<u8>>>> {
        self.slots
            .par_iter()
            .map(|s| match s {
                None => Ok(None),
                Some(p) => {
                    let img = read_png(p)?;
                    if img.dimensions() != (self.patch_side, self.patch_side) {
                        return Err(Error::Geometry(format!(
                            "patch {} is {:?}, expected side {}",
                            p.display(),
                            img.dimensions(),
                            self.patch_side
                        )));
                    }
                    Ok(Some(img.into_raw()))
                }
            })
            .collect()
    }
}

/// Groups patches into region-sized cells per slide. Output is sorted by
/// slide and cell, so it does not depend on input order.
pub fn cluster_patches(records: &[PatchRecord], region_side: u32, patch_side: u32) -> Result<Vec<ClusteredRegion>> {
    let n = check_divisible(region_side, patch_side)?;
    let side = region_side as u64;
    let mut cells: BTreeMap<(&str, u64, u64), Vec<Option<PathBuf>>> = BTreeMap::new();
    let mut seen = HashSet::new();
    for r in records {
        if r.x < 0 || r.y < 0 {
            return Err(Error::Domain(format!(
                "patch {} has negative coordinates ({}, {})",
                r.patch_path.display(),
                r.x,
                r.y
            )));
        }
        let (x, y) = (r.x as u64, r.y as u64);
        let (cx, cy) = (x / side, y / side);
        let col = ((x - cx * side) / patch_side as u64) as usize;
        let row = ((y - cy * side) / patch_side as u64) as usize;
        if !seen.insert((r.slide_id.as_str(), cx, cy, row, col)) {
            return Err(Error::Integrity(format!(
                "two patches of slide {} map to cell ({cx},{cy}) slot ({row},{col})",
                r.slide_id
            )));
        }
        let slots = cells
            .entry((r.slide_id.as_str(), cy, cx))
            .or_insert_with(|| vec![None; (n * n) as usize]);
        slots[row * n as usize + col] = Some(r.patch_path.clone());
    }
    Ok(cells
        .into_iter()
        .map(|((slide, cy, cx), slots)| ClusteredRegion {
            slide_id: slide.to_string(),
            origin: (cx * side, cy * side),
            side: region_side,
            patch_side,
            slots,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const PINK: [u8; 3] = [230, 120, 180];

    #[test]
    fn tissue_fraction_examples() {
        let t = TissueThresholds::default();
        assert_eq!(tissue_fraction(&[255; 30], t).unwrap(), 0.0);
        assert_eq!(tissue_fraction(&PINK.repeat(10), t).unwrap(), 1.0);
        let mut half = [255u8; 3].repeat(5);
        half.extend(PINK.repeat(5));
        assert_eq!(tissue_fraction(&half, t).unwrap(), 0.5);
        assert!(matches!(tissue_fraction(&[], t), Err(Error::Domain(_))));
    }

    #[test]
    fn lattice_has_half_side_stride() {
        assert_eq!(candidate_origins(192, 192, 64).len(), 25);
        assert_eq!(candidate_origins(64, 64, 64), vec![(0, 0)]);
        assert!(candidate_origins(63, 64, 64).is_empty());
    }

    fn region(side: u32) -> Region {
        Region {
            x: 0,
            y: 0,
            side,
            tissue_fraction: 1.0,
        }
    }

    #[test]
    fn grid_counts_and_errors() {
        let img = RgbImage::from_fn(48, 48, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let g = grid_from_image(region(48), &img, 16).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!((g.patches[5].row, g.patches[5].col), (1, 2));
        assert_eq!(&g.patches[5].pixels[..3], &[32, 16, 7]);
        assert_eq!(assemble(&g), img);
        assert_eq!(grid_from_image(region(48), &img, 48).unwrap().len(), 1);
        assert!(matches!(check_divisible(300, 224), Err(Error::Geometry(_))));
        assert_eq!(check_divisible(4480, 224).unwrap(), 20);
    }

    #[test]
    fn choose_regions_with_and_without_replacement() {
        let cands: Vec<Region> = (0..50)
            .map(|i| Region { x: i, ..region(8) })
            .collect();
        let mut all = choose_regions(&cands, 50, 1, "s").unwrap();
        all.sort_by_key(|r| r.x);
        assert_eq!(all, cands);
        let few = &cands[..10];
        let drawn = choose_regions(few, 50, 1, "s").unwrap();
        assert_eq!(drawn.len(), 50);
        assert!(drawn.iter().all(|r| r.x < 10));
        assert_eq!(drawn, choose_regions(few, 50, 1, "s").unwrap());
        let err = choose_regions(&[], 5, 1, "s").unwrap_err();
        assert!(err.to_string().contains("no tissue"));
    }

    fn rec(x: i64, y: i64) -> PatchRecord {
        PatchRecord {
            patch_path: PathBuf::from(format!("{x}_{y}.png")),
            x,
            y,
            slide_id: "uc1".into(),
        }
    }

    #[test]
    fn cluster_examples() {
        let one = cluster_patches(&[rec(0, 0), rec(224, 224)], 4480, 224).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].padded_count(), 398);
        assert!(!one[0].padded()[21]);
        let two = cluster_patches(&[rec(0, 0), rec(9000, 9000)], 4480, 224).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[1].origin, (8960, 8960));
        let full: Vec<PatchRecord> = (0..400).map(|k| rec(224 * (k % 20), 224 * (k / 20))).collect();
        let c = cluster_patches(&full, 4480, 224).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].padded_count(), 0);
        assert!(matches!(cluster_patches(&[rec(-1, 0)], 4480, 224), Err(Error::Domain(_))));
    }

    #[test]
    fn patch_csv_parses_and_resolves_paths() {
        let text = "patch_path,x,y,slide_id\na.png,0,224,s1\n";
        let r = parse_patch_csv(text, "p.csv", Path::new("/data")).unwrap();
        assert_eq!(r[0].patch_path, PathBuf::from("/data/a.png"));
        assert_eq!((r[0].x, r[0].y), (0, 224));
        assert!(parse_patch_csv("a.png,zero,1,s\n", "p.csv", Path::new("")).is_err());
    }
}
