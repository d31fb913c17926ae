//! Datasets and C-way k-shot episode sampling.
//!
//! Datasets are split by class: every class belongs to exactly one of
//! meta-train, meta-val or meta-test, so episodes drawn from one split never
//! see classes from another.
//!
//! # FSDS file format
//!
//! Little-endian. The header is the four bytes `FSDS`, followed by six
//! `u32` fields: `version` (= 1), `num_classes`, `per_class`, `height`,
//! `width`, `channels`. The body is `num_classes * per_class * height *
//! width * channels` `u8` intensities, class-major then example-major, and
//! each image is read as a flat vector scaled to `[0, 1]`.
//!
//! An optional sidecar `<file>.splits.json` of the form
//! `{"meta_train": [..], "meta_val": [..], "meta_test": [..]}` assigns
//! class indices to splits. Without it the first 70% of classes are
//! meta-train, the next 10% meta-val and the rest meta-test.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

const MAGIC: &[u8; 4] = b"FSDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::MetaTrain, Split::MetaVal, Split::MetaTest];
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "meta_train" => Ok(Split::MetaTrain),
            "val" | "meta_val" => Ok(Split::MetaVal),
            "test" | "meta_test" => Ok(Split::MetaTest),
            other => Err(Error::config(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn numel(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    classes: Vec<Vec<Vec<f64>>>,
    splits: Vec<Split>,
    image: Option<ImageShape>,
}

/// 70/10/20 split by class index.
pub fn default_splits(num_classes: usize) -> Vec<Split> {
    let train = (0.7 * num_classes as f64).round() as usize;
    let val = (0.1 * num_classes as f64).round() as usize;
    (0..num_classes)
        .map(|c| match c {
            c if c < train => Split::MetaTrain,
            c if c < train + val => Split::MetaVal,
            _ => Split::MetaTest,
        })
        .collect()
}

impl Dataset {
    /// `classes[c][i]` is example `i` of class `c`.
    pub fn new(classes: Vec<Vec<Vec<f64>>>, splits: Vec<Split>) -> Result<Self> {
        let input_dim = classes
            .first()
            .and_then(|c| c.first())
            .map(Vec::len)
            .ok_or_else(|| Error::config("dataset needs at least one class with one example"))?;
        if input_dim == 0 {
            return Err(Error::config("examples must have positive dimension"));
        }
        if classes.iter().flatten().any(|x| x.len() != input_dim) {
            return Err(Error::config("examples have inconsistent dimensions"));
        }
        if splits.len() != classes.len() {
            return Err(Error::config(format!(
                "{} split tags for {} classes",
                splits.len(),
                classes.len()
            )));
        }
        Ok(Self {
            input_dim,
            classes,
            splits,
            image: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn examples(&self, class: usize) -> &[Vec<f64>] {
        &self.classes[class]
    }

    pub fn split_of(&self, class: usize) -> Split {
        self.splits[class]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image
    }

    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&c| self.splits[c] == split)
            .collect()
    }

    pub fn with_splits(mut self, splits: Vec<Split>) -> Result<Self> {
        if splits.len() != self.classes.len() {
            return Err(Error::config("split tags must cover every class"));
        }
        self.splits = splits;
        Ok(self)
    }
}

/// Parameters of the synthetic class-structured generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default = "defaults::per_class")]
    pub per_class: usize,
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::class_spread")]
    pub class_spread: f64,
    #[serde(default = "defaults::noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn num_classes() -> usize {
        100
    }
    pub fn per_class() -> usize {
        40
    }
    pub fn input_dim() -> usize {
        16
    }
    pub fn class_spread() -> f64 {
        3.0
    }
    pub fn noise() -> f64 {
        1.0
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: defaults::num_classes(),
            per_class: defaults::per_class(),
            input_dim: defaults::input_dim(),
            class_spread: defaults::class_spread(),
            noise: defaults::noise(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 || self.input_dim == 0 {
            return Err(Error::config("synthetic dataset sizes must be positive"));
        }
        if !(self.class_spread >= 0.0 && self.class_spread.is_finite()) {
            return Err(Error::config("class_spread must be a non-negative number"));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be positive"));
        }
        Ok(())
    }
}

/// Class means `m_c ~ N(0, s^2 I)`, examples `x ~ N(m_c, noise^2 I)`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &[0x5EED]);
    let mut normal = |scale: f64| -> f64 {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    };
    let classes = (0..spec.num_classes)
        .map(|_| {
            let mean: Vec<f64> = (0..spec.input_dim)
                .map(|_| normal(spec.class_spread))
                .collect();
            (0..spec.per_class)
                .map(|_| mean.iter().map(|m| m + normal(spec.noise)).collect())
                .collect()
        })
        .collect();
    Dataset::new(classes, default_splits(spec.num_classes))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitSidecar {
    meta_train: Vec<usize>,
    meta_val: Vec<usize>,
    meta_test: Vec<usize>,
}

impl SplitSidecar {
    fn from_tags(tags: &[Split]) -> Self {
        let pick = |s| (0..tags.len()).filter(|&c| tags[c] == s).collect();
        Self {
            meta_train: pick(Split::MetaTrain),
            meta_val: pick(Split::MetaVal),
            meta_test: pick(Split::MetaTest),
        }
    }

    fn into_tags(self, num_classes: usize) -> Result<Vec<Split>> {
        let mut tags = vec![None; num_classes];
        for (split, ids) in [
            (Split::MetaTrain, self.meta_train),
            (Split::MetaVal, self.meta_val),
            (Split::MetaTest, self.meta_test),
        ] {
            for c in ids {
                match tags.get_mut(c) {
                    Some(slot @ None) => *slot = Some(split),
                    Some(Some(_)) => {
                        return Err(Error::config(format!("class {c} assigned to two splits")))
                    }
                    None => {
                        return Err(Error::config(format!(
                            "split sidecar names class {c} out of range"
                        )))
                    }
                }
            }
        }
        tags.into_iter()
            .enumerate()
            .map(|(c, t)| t.ok_or_else(|| Error::config(format!("class {c} has no split"))))
            .collect()
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".splits.json");
    PathBuf::from(s)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            detail: "truncated header".into(),
        })
}

/// Parses an FSDS image. Splits default to 70/10/20 by class index.
pub fn parse_fsds(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "missing FSDS magic".into(),
        });
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let field = |i: usize| read_u32(bytes, 8 + 4 * i).map(|v| v as usize);
    let (num_classes, per_class) = (field(0)?, field(1)?);
    let image = ImageShape {
        height: field(2)?,
        width: field(3)?,
        channels: field(4)?,
    };
    for (i, v) in [
        num_classes,
        per_class,
        image.height,
        image.width,
        image.channels,
    ]
    .iter()
    .enumerate()
    {
        if *v == 0 {
            return Err(Error::Format {
                offset: (8 + 4 * i) as u64,
                detail: "zero-sized header field".into(),
            });
        }
    }
    let dim = image.numel();
    let body = num_classes
        .checked_mul(per_class)
        .and_then(|n| n.checked_mul(dim))
        .ok_or_else(|| Error::Format {
            offset: 8,
            detail: "header sizes overflow".into(),
        })?;
    let expected = HEADER_LEN + body;
    if bytes.len() < expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!(
                "truncated body: expected {expected} bytes, found {}",
                bytes.len()
            ),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            detail: "trailing bytes after body".into(),
        });
    }
    let pixels = &bytes[HEADER_LEN..];
    let classes = pixels
        .chunks(per_class * dim)
        .map(|class| {
            class
                .chunks(dim)
                .map(|img| img.iter().map(|&b| b as f64 / 255.0).collect())
                .collect()
        })
        .collect();
    let mut ds = Dataset::new(classes, default_splits(num_classes))?;
    ds.image = Some(image);
    Ok(ds)
}

/// Serializes a dataset loaded from (or shaped like) an FSDS file.
///
/// Every value must be an exact multiple of 1/255 in `[0, 1]` and every
/// class must hold the same number of examples.
pub fn encode_fsds(ds: &Dataset) -> Result<Vec<u8>> {
    let image = ds.image.ok_or_else(|| {
        Error::contract("dataset has no image shape; only FSDS-shaped datasets can be written")
    })?;
    let per_class = ds.classes[0].len();
    if ds.classes.iter().any(|c| c.len() != per_class) {
        return Err(Error::contract(
            "FSDS needs the same example count in every class",
        ));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + ds.num_classes() * per_class * image.numel());
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION as usize,
        ds.num_classes(),
        per_class,
        image.height,
        image.width,
        image.channels,
    ] {
        let v = u32::try_from(v).map_err(|_| Error::contract("header field exceeds u32"))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in ds.classes.iter().flatten().flatten() {
        let scaled = v * 255.0;
        let byte = scaled.round();
        if !(0.0..=255.0).contains(&byte) || (scaled - byte).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "value {v} is not an 8-bit intensity"
            )));
        }
        out.push(byte as u8);
    }
    Ok(out)
}

/// Reads an FSDS file and its optional split sidecar.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let ds = parse_fsds(&bytes)?;
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        let tags: SplitSidecar = serde_json::from_slice(&fs::read(&sidecar)?)?;
        let n = ds.num_classes();
        return ds.with_splits(tags.into_tags(n)?);
    }
    Ok(ds)
}

/// Writes the FSDS file, plus a sidecar when splits differ from the default.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_fsds(ds)?)?;
    let sidecar = sidecar_path(path);
    if ds.splits != default_splits(ds.num_classes()) {
        fs::write(
            &sidecar,
            serde_json::to_vec_pretty(&SplitSidecar::from_tags(&ds.splits))?,
        )?;
    } else if sidecar.exists() {
        fs::remove_file(&sidecar)?;
    }
    Ok(())
}

/// One C-way k-shot task. Labels are episode-local, `0..ways`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// `[ways * shots, D]`, class-major.
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    /// `[ways * queries, D]`, class-major.
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    /// Episode label -> dataset class id.
    pub class_map: Vec<usize>,
    /// `(dataset class, example index)` of every support row.
    pub support_ids: Vec<(usize, usize)>,
    pub query_ids: Vec<(usize, usize)>,
}

impl Episode {
    pub fn input_dim(&self) -> usize {
        self.support_x.last_dim()
    }

    pub fn num_queries(&self) -> usize {
        self.query_y.len()
    }

    /// Builds an episode from explicit rows. Labels must cover `0..ways`
    /// with `shots` support and `queries` query rows each.
    pub fn from_parts(
        support: Vec<(Vec<f64>, usize)>,
        query: Vec<(Vec<f64>, usize)>,
        ways: usize,
    ) -> Result<Self> {
        let count = |rows: &[(Vec<f64>, usize)], c| rows.iter().filter(|r| r.1 == c).count();
        let shots = count(&support, 0);
        let queries = count(&query, 0);
        if ways == 0 || queries == 0 {
            return Err(Error::contract(
                "episodes need at least one class and one query per class",
            ));
        }
        for c in 0..ways {
            if count(&support, c) != shots || shots == 0 {
                return Err(Error::contract(format!(
                    "class {c} has {} support examples",
                    count(&support, c)
                )));
            }
            if count(&query, c) != queries {
                return Err(Error::contract(format!(
                    "class {c} has {} query examples",
                    count(&query, c)
                )));
            }
        }
        if support.iter().chain(&query).any(|r| r.1 >= ways) {
            return Err(Error::contract("label out of range"));
        }
        let split = |rows: Vec<(Vec<f64>, usize)>| -> Result<(Tensor, Vec<usize>)> {
            let (x, y): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
            Ok((Tensor::from_rows(&x)?, y))
        };
        let ns = support.len();
        let nq = query.len();
        let (support_x, support_y) = split(support)?;
        let (query_x, query_y) = split(query)?;
        Ok(Self {
            ways,
            shots,
            queries,
            support_x,
            support_y,
            query_x,
            query_y,
            class_map: (0..ways).collect(),
            support_ids: (0..ns).map(|i| (usize::MAX, i)).collect(),
            query_ids: (0..nq).map(|i| (usize::MAX, i)).collect(),
        })
    }
}

/// Draws `ways` distinct classes from `split`, then `shots + queries`
/// distinct examples per class: the first `shots` go to support, the rest to
/// query. Episode labels follow the order classes were drawn.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &Dataset,
    split: Split,
    ways: usize,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if ways == 0 || shots == 0 || queries == 0 {
        return Err(Error::contract(
            "episodes need at least one way, one shot and one query",
        ));
    }
    let pool = dataset.classes_in(split);
    if pool.len() < ways {
        return Err(Error::contract(format!(
            "{split:?} has {} classes but {ways} are needed ({} short)",
            pool.len(),
            ways - pool.len()
        )));
    }
    let per_class = shots + queries;
    if let Some(&c) = pool
        .iter()
        .find(|&&c| dataset.examples(c).len() < per_class)
    {
        return Err(Error::contract(format!(
            "class {c} has {} examples but {per_class} are needed",
            dataset.examples(c).len()
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, pool.len(), ways)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    sample_with_classes(dataset, &chosen, shots, queries, rng)
}

/// Same as [`sample_episode`] but with a fixed, ordered class list.
pub fn sample_with_classes<R: Rng + ?Sized>(
    dataset: &Dataset,
    classes: &[usize],
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<Episode> {
    let ways = classes.len();
    let per_class = shots + queries;
    let distinct: BTreeSet<_> = classes.iter().collect();
    if distinct.len() != ways {
        return Err(Error::contract("episode classes must be distinct"));
    }
    let dim = dataset.input_dim();
    let mut sx = Vec::with_capacity(ways * shots * dim);
    let mut qx = Vec::with_capacity(ways * queries * dim);
    let (mut sy, mut qy, mut sids, mut qids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (label, &class) in classes.iter().enumerate() {
        let examples = dataset.examples(class);
        if examples.len() < per_class {
            return Err(Error::contract(format!(
                "class {class} has {} examples but {per_class} are needed",
                examples.len()
            )));
        }
        for (n, i) in index::sample(rng, examples.len(), per_class)
            .into_iter()
            .enumerate()
        {
            if n < shots {
                sx.extend_from_slice(&examples[i]);
                sy.push(label);
                sids.push((class, i));
            } else {
                qx.extend_from_slice(&examples[i]);
                qy.push(label);
                qids.push((class, i));
            }
        }
    }
    if ways == 0 || shots == 0 || queries == 0 {
        return Err(Error::contract(
            "episodes need at least one way, one shot and one query",
        ));
    }
    let query_x = Tensor::new(vec![ways * queries, dim], qx)?;
    Ok(Episode {
        ways,
        shots,
        queries,
        support_x: Tensor::new(vec![ways * shots, dim], sx)?,
        support_y: sy,
        query_x,
        query_y: qy,
        class_map: classes.to_vec(),
        support_ids: sids,
        query_ids: qids,
    })
}
