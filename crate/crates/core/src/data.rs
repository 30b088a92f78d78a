//! Synthetic image datasets and the on-disk dataset format.
//!
//! A dataset on disk is a payload file plus a CSV manifest. The payload starts
//! with the 8-byte magic `FSCILDAT`, a `u32` version and a `u32` scalar width,
//! followed by one tensor record per image (see [`crate::binary`]). The
//! manifest has the columns `path,offset,label,split`, where `offset` is the
//! byte offset of the image record inside `path` (relative to the manifest).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binary::{check_magic, read_tensor, read_u32, tensor_record_len, write_tensor, write_u32, write_usize};
use crate::classifier::ClassId;
use crate::error::{contract_err, Error, Result};
use crate::protocol::{LabeledSample, Split};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"FSCILDAT";

fn default_train_fraction() -> f64 {
    0.8
}

/// Class-template images with additive Gaussian pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub classes: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the class templates.
    pub separation: f64,
    pub noise_std: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return contract_err("data.synthetic.classes must be at least 2");
        }
        if self.samples_per_class < 2 {
            return contract_err("data.synthetic.samples_per_class must be at least 2");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return contract_err("data.synthetic.noise_std must be a finite non-negative number");
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return contract_err("data.synthetic.separation must be a finite non-negative number");
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return contract_err("data.synthetic.train_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Training samples per class.
    pub fn train_per_class(&self) -> usize {
        (self.samples_per_class as f64 * self.train_fraction + 1e-9).floor() as usize
    }
}

/// Generates `classes * samples_per_class` images of shape
/// `[channels, image_size, image_size]`.
///
/// Each class draws a template with per-pixel standard deviation
/// `separation`; samples add independent noise of standard deviation
/// `noise_std`. Within a class the first `train_per_class` samples are
/// training samples, the rest test samples. Both splits must be non-empty.
pub fn generate_synthetic_dataset<T: Scalar>(
    params: &SyntheticParams,
    image_size: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<LabeledSample<T>>> {
    params.validate()?;
    let n_train = params.train_per_class();
    if n_train == 0 || n_train >= params.samples_per_class {
        return Err(Error::Capacity(format!(
            "{} samples per class at train fraction {} leave an empty split",
            params.samples_per_class, params.train_fraction
        )));
    }
    let shape = [channels, image_size, image_size];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(params.classes * params.samples_per_class);
    for class in 0..params.classes {
        let template = Tensor::<f64>::randn(&shape, params.separation, &mut rng);
        for i in 0..params.samples_per_class {
            let noise = Tensor::<f64>::randn(&shape, params.noise_std, &mut rng);
            let image = template.add(&noise)?.cast();
            out.push(LabeledSample {
                image,
                label: class as ClassId,
                split: if i < n_train { Split::Train } else { Split::Test },
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    path: String,
    offset: u64,
    label: ClassId,
    split: Split,
}

/// Writes `<dir>/dataset.bin` and `<dir>/manifest.csv`.
pub fn write_dataset<T: Scalar>(dir: &Path, samples: &[LabeledSample<T>]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let payload_name = "dataset.bin";
    let mut payload = BufWriter::new(File::create(dir.join(payload_name))?);
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
    payload.write_all(DATASET_MAGIC)?;
    write_u32(&mut payload, 1)?;
    write_usize(&mut payload, T::BYTES, "scalar width")?;
    let mut offset = 16u64;
    for s in samples {
        write_tensor(&mut payload, &s.image)?;
        manifest.serialize(ManifestRow {
            path: payload_name.into(),
            offset,
            label: s.label,
            split: s.split,
        })?;
        offset += tensor_record_len(&s.image) as u64;
    }
    payload.flush()?;
    manifest.flush()?;
    Ok(())
}

/// Reads a dataset from its manifest.
pub fn read_dataset<T: Scalar>(manifest_path: &Path) -> Result<Vec<LabeledSample<T>>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::Reader::from_path(manifest_path)?;
    let mut open: Option<(String, BufReader<File>)> = None;
    let mut out = Vec::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        if open.as_ref().map(|(p, _)| p != &row.path).unwrap_or(true) {
            let mut f = BufReader::new(File::open(base.join(&row.path))?);
            check_magic(&mut f, DATASET_MAGIC)?;
            let _version = read_u32(&mut f)?;
            let width = read_u32(&mut f)? as usize;
            if width != T::BYTES {
                return Err(Error::Format(format!(
                    "{} stores {width}-byte scalars, reader expects {}",
                    row.path,
                    T::BYTES
                )));
            }
            open = Some((row.path.clone(), f));
        }
        let (_, f) = open.as_mut().expect("payload opened above");
        f.seek(SeekFrom::Start(row.offset))?;
        let image = read_tensor(&mut f.by_ref())?;
        out.push(LabeledSample {
            image,
            label: row.label,
            split: row.split,
        });
    }
    Ok(out)
}

/// Mean Pearson correlation of pixel vectors over sample pairs within the
/// same class and across classes, as `(within, between)`.
pub fn pixel_correlations<T: Scalar>(samples: &[LabeledSample<T>]) -> (f64, f64) {
    let centered: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let v: Vec<f64> = s.image.data().iter().map(|x| x.as_f64()).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let c: Vec<f64> = v.iter().map(|x| x - m).collect();
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            c.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let (mut within, mut wn, mut between, mut bn) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let r: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            if samples[i].label == samples[j].label {
                within += r;
                wn += 1;
            } else {
                between += r;
                bn += 1;
            }
        }
    }
    (within / wn.max(1) as f64, between / bn.max(1) as f64)
}

/// Shuffles sample order deterministically; used by tests that must not rely
/// on generation order.
pub fn shuffled<T: Clone>(samples: &[T], seed: u64) -> Vec<T> {
    let mut out = samples.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}
