//! Dataset ingestion: age-labeled face records, age-group schemes,
//! subject-disjoint splits and age-ordered pair sampling.
//!
//! Two ingestion paths are supported:
//! - a manifest CSV with header `subject_id,path,age_years` (paths relative
//!   to the manifest's directory), and
//! - a directory of images with filename-encoded ages (`AGE_*.ext`,
//!   UTKFace style). Such directories carry no subject identity, so each
//!   file becomes its own subject and split disjointness holds only at file
//!   granularity (a warning is logged).
//!
//! Images are decoded to RGB, resized with bilinear interpolation to the
//! configured resolution, and mapped from 8-bit to `[-1, 1]` via
//! `x / 127.5 - 1`. The in-memory layout is CHW (`Array3<f32>`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single face image in CHW layout, values in `[-1, 1]`.
pub type Image = Array3<f32>;

/// One labeled face image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub subject_id: String,
    pub image_path: PathBuf,
    pub age_years: u32,
    pub group: usize,
}

/// Contiguous age bins over `[0, ∞)` defined by ascending inclusive upper
/// bounds; the last bin is open-ended. `boundaries = [30, 40, 50]` gives the
/// four bins 0–30, 31–40, 41–50, 51+.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupScheme {
    boundaries: Vec<u32>,
}

impl GroupScheme {
    pub fn new(boundaries: Vec<u32>) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(Error::invalid("a group scheme needs at least one boundary"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("group boundaries must be strictly ascending"));
        }
        Ok(GroupScheme { boundaries })
    }

    /// Morph/CACD-style bins: 30-, 31-40, 41-50, 51+.
    pub fn morph() -> Self {
        GroupScheme {
            boundaries: vec![30, 40, 50],
        }
    }

    /// UTKFace-style 9 bins: 0-3, 4-11, 12-17, 18-29, 30-40, 41-55, 56-65,
    /// 66-80, 81+.
    pub fn utkface() -> Self {
        GroupScheme {
            boundaries: vec![3, 11, 17, 29, 40, 55, 65, 80],
        }
    }

    /// `n` ten-year bins used by the procedural corpus: 0-9, 10-19, …
    pub fn uniform_decades(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid("need at least 2 groups"));
        }
        GroupScheme::new((1..n).map(|i| (10 * i - 1) as u32).collect())
    }

    pub fn n_groups(&self) -> usize {
        self.boundaries.len() + 1
    }

    pub fn boundaries(&self) -> &[u32] {
        &self.boundaries
    }

    /// Representative age (bin midpoint; open top bin uses boundary + 5).
    pub fn midpoint_age(&self, group: usize) -> Result<f64> {
        if group >= self.n_groups() {
            return Err(Error::invalid(format!(
                "group {group} out of range for {} groups",
                self.n_groups()
            )));
        }
        let lo = if group == 0 {
            0.0
        } else {
            self.boundaries[group - 1] as f64 + 1.0
        };
        Ok(match self.boundaries.get(group) {
            Some(&hi) => (lo + hi as f64) / 2.0,
            None => lo + 5.0,
        })
    }
}

/// Index of the bin containing `age_years`.
pub fn assign_age_group(age_years: i64, scheme: &GroupScheme) -> Result<usize> {
    if age_years < 0 {
        return Err(Error::invalid(format!("negative age {age_years}")));
    }
    let age = age_years as u32;
    for (i, &hi) in scheme.boundaries.iter().enumerate() {
        if age <= hi {
            return Ok(i);
        }
    }
    Ok(scheme.boundaries.len())
}

/// One-hot age condition of length `N`: exactly one entry is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    values: Vec<f32>,
}

impl ConditionVector {
    pub fn one_hot(group: usize, n_groups: usize) -> Result<Self> {
        if group >= n_groups {
            return Err(Error::invalid(format!(
                "group {group} out of range for {n_groups} groups"
            )));
        }
        let mut values = vec![0.0; n_groups];
        values[group] = 1.0;
        Ok(ConditionVector { values })
    }

    pub fn from_values(values: Vec<f32>) -> Result<Self> {
        let ones = values.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("condition vector is not one-hot"));
        }
        Ok(ConditionVector { values })
    }

    pub fn group(&self) -> usize {
        self.values.iter().position(|&v| v == 1.0).expect("one-hot")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_array(&self) -> Array1<f32> {
        Array1::from_vec(self.values.clone())
    }
}

/// A batch of sampled pairs. Under ordered sampling every row satisfies
/// `argmax(young_conditions) < argmax(old_conditions)`.
#[derive(Debug, Clone)]
pub struct OrderedPairBatch {
    /// `(B, 3, H, W)`
    pub young_images: Array4<f32>,
    pub old_images: Array4<f32>,
    /// `(B, N)` one-hot rows
    pub young_conditions: Array2<f32>,
    pub old_conditions: Array2<f32>,
}

impl OrderedPairBatch {
    pub fn batch_size(&self) -> usize {
        self.young_images.dim().0
    }

    pub fn n_groups(&self) -> usize {
        self.young_conditions.dim().1
    }

    pub fn young_group(&self, row: usize) -> usize {
        argmax_row(&self.young_conditions, row)
    }

    pub fn old_group(&self, row: usize) -> usize {
        argmax_row(&self.old_conditions, row)
    }
}

fn argmax_row(m: &Array2<f32>, row: usize) -> usize {
    let mut best = 0;
    for j in 1..m.dim().1 {
        if m[(row, j)] > m[(row, best)] {
            best = j;
        }
    }
    best
}

/// Deterministic subject-disjoint split. Subjects are shuffled by seed and
/// assigned to train until `round(train_fraction * n_subjects)` is reached.
pub fn split_by_subject(
    records: &[FaceRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<FaceRecord>, Vec<FaceRecord>)> {
    if records.is_empty() {
        return Err(Error::invalid("cannot split an empty record list"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction {train_fraction} must be in (0, 1)"
        )));
    }
    let mut subjects: Vec<&str> = records
        .iter()
        .map(|r| r.subject_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let n_train = (train_fraction * subjects.len() as f64).round() as usize;
    let train_set: BTreeSet<&str> = subjects.iter().take(n_train).copied().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in records {
        if train_set.contains(r.subject_id.as_str()) {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((train, test))
}

/// Training dataset with all images resident in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<FaceRecord>,
    pub images: Vec<Image>,
    pub n_groups: usize,
}

impl Dataset {
    pub fn new(records: Vec<FaceRecord>, images: Vec<Image>, n_groups: usize) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::invalid(format!(
                "{} records but {} images",
                records.len(),
                images.len()
            )));
        }
        for r in &records {
            if r.group >= n_groups {
                return Err(Error::invalid(format!(
                    "record {} has group {} outside [0, {n_groups})",
                    r.image_path.display(),
                    r.group
                )));
            }
        }
        Ok(Dataset {
            records,
            images,
            n_groups,
        })
    }

    /// Load every record's image at the given resolution.
    pub fn load(
        records: Vec<FaceRecord>,
        base_dir: &Path,
        resolution: usize,
        n_groups: usize,
    ) -> Result<Self> {
        let mut images = Vec::with_capacity(records.len());
        for r in &records {
            let path = if r.image_path.is_absolute() {
                r.image_path.clone()
            } else {
                base_dir.join(&r.image_path)
            };
            images.push(load_image(&path, resolution)?);
        }
        Dataset::new(records, images, n_groups)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of records per group, ascending group order.
    pub fn by_group(&self) -> Vec<Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry(r.group).or_default().push(i);
        }
        let n = self.n_groups;
        (0..n)
            .map(|g| groups.remove(&g).unwrap_or_default())
            .collect()
    }

    /// Sample a batch of age-ordered pairs: a (young, old) group pair is
    /// drawn uniformly from all ordered pairs with `young < old` among the
    /// non-empty groups, then a record uniformly within each group. With
    /// `ordered = false` the pair is drawn uniformly over ordered pairs of
    /// distinct groups in either direction (the "w/o OI" ablation).
    pub fn sample_pair_batch(
        &self,
        batch_size: usize,
        ordered: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<OrderedPairBatch> {
        let by_group = self.by_group();
        let non_empty: Vec<usize> = (0..self.n_groups)
            .filter(|&g| !by_group[g].is_empty())
            .collect();
        if non_empty.len() < 2 {
            return Err(Error::DegenerateDataset(format!(
                "pair sampling needs records in at least 2 distinct groups, found {}",
                non_empty.len()
            )));
        }
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (i, &a) in non_empty.iter().enumerate() {
            for &b in non_empty.iter().skip(i + 1) {
                pairs.push((a, b));
                if !ordered {
                    pairs.push((b, a));
                }
            }
        }

        let (c, h, w) = self.images[0].dim();
        let mut young = Array4::zeros((batch_size, c, h, w));
        let mut old = Array4::zeros((batch_size, c, h, w));
        let mut yc = Array2::zeros((batch_size, self.n_groups));
        let mut oc = Array2::zeros((batch_size, self.n_groups));
        for row in 0..batch_size {
            let &(gy, go) = &pairs[rng.gen_range(0..pairs.len())];
            let iy = by_group[gy][rng.gen_range(0..by_group[gy].len())];
            let io = by_group[go][rng.gen_range(0..by_group[go].len())];
            young
                .slice_mut(ndarray::s![row, .., .., ..])
                .assign(&self.images[iy]);
            old.slice_mut(ndarray::s![row, .., .., ..])
                .assign(&self.images[io]);
            yc[(row, gy)] = 1.0;
            oc[(row, go)] = 1.0;
        }
        Ok(OrderedPairBatch {
            young_images: young,
            old_images: old,
            young_conditions: yc,
            old_conditions: oc,
        })
    }
}

/// Read a manifest CSV (`subject_id,path,age_years`) and label groups under
/// the scheme. Paths stay relative; callers resolve against the manifest dir.
pub fn read_manifest(path: &Path, scheme: &GroupScheme) -> Result<Vec<FaceRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?
        .clone();
    let expect = ["subject_id", "path", "age_years"];
    if headers.iter().collect::<Vec<_>>() != expect {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("header must be {expect:?}, got {headers:?}"),
        });
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("row {i}: {e}"),
        })?;
        let age: i64 = row[2].trim().parse().map_err(|_| Error::Manifest {
            path: path.to_path_buf(),
            msg: format!("row {i}: bad age {:?}", &row[2]),
        })?;
        let group = assign_age_group(age, scheme)?;
        records.push(FaceRecord {
            subject_id: row[0].to_string(),
            image_path: PathBuf::from(&row[1]),
            age_years: age as u32,
            group,
        });
    }
    if records.is_empty() {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            msg: "manifest has no rows".into(),
        });
    }
    Ok(records)
}

/// Write records in the manifest format next to their images.
pub fn write_manifest(path: &Path, records: &[FaceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    w.write_record(["subject_id", "path", "age_years"])
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    for r in records {
        w.write_record([
            r.subject_id.as_str(),
            &r.image_path.to_string_lossy(),
            &r.age_years.to_string(),
        ])
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Ingest a directory of `AGE_*.ext` files (UTKFace style). Each file becomes
/// its own subject; disjointness then only holds at file granularity.
pub fn scan_age_encoded_dir(dir: &Path, scheme: &GroupScheme) -> Result<Vec<FaceRecord>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for e in entries {
        let e = e.map_err(|er| Error::io(dir, er))?;
        let p = e.path();
        let ext_ok = p
            .extension()
            .and_then(|s| s.to_str())
            .map(|s| matches!(s.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            .unwrap_or(false);
        if ext_ok {
            paths.push(p);
        }
    }
    paths.sort();
    let mut records = Vec::new();
    for p in paths {
        let stem = p
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("unreadable filename {}", p.display())))?;
        let age_part = stem.split('_').next().unwrap_or_default();
        let age: i64 = age_part.parse().map_err(|_| {
            Error::invalid(format!(
                "filename {} does not start with an AGE_ prefix",
                p.display()
            ))
        })?;
        let group = assign_age_group(age, scheme)?;
        records.push(FaceRecord {
            subject_id: stem.to_string(),
            image_path: p.file_name().map(PathBuf::from).unwrap_or_else(|| p.clone()),
            age_years: age as u32,
            group,
        });
    }
    if records.is_empty() {
        return Err(Error::invalid(format!(
            "no AGE_-prefixed images found in {}",
            dir.display()
        )));
    }
    log::warn!(
        "directory ingestion has no subject ids; treating each of the {} files as its own subject (split disjointness holds at file granularity only)",
        records.len()
    );
    Ok(records)
}

/// Decode, resize (bilinear) and normalize an image to CHW `[-1, 1]`.
pub fn load_image(path: &Path, resolution: usize) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = image::imageops::resize(
        &img.to_rgb8(),
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut out = Array3::zeros((3, resolution, resolution));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// Map `[-1, 1]` CHW back to an 8-bit RGB image.
pub fn to_rgb8(img: &Image) -> image::RgbImage {
    let (_, h, w) = img.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize(img[(0, y, x)]),
                quantize(img[(1, y, x)]),
                quantize(img[(2, y, x)]),
            ];
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}

fn quantize(v: f32) -> u8 {
    (((v + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    to_rgb8(img).save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Stack single images into a batch array.
pub fn stack_images(images: &[&Image]) -> Array4<f32> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(ndarray::s![i, .., .., ..]).assign(*img);
    }
    out
}

/// One-hot rows for a list of groups.
pub fn condition_rows(groups: &[usize], n_groups: usize) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((groups.len(), n_groups));
    for (i, &g) in groups.iter().enumerate() {
        if g >= n_groups {
            return Err(Error::invalid(format!(
                "group {g} out of range for {n_groups} groups"
            )));
        }
        out[(i, g)] = 1.0;
    }
    Ok(out)
}
