//! Cosine classifier with temperature, prototype replacement and append.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use rand::Rng;

use crate::binary::{check_magic, read_scalar, read_u32, write_scalar, write_u32, write_usize};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::ops::{l2_normalize, NORM_EPS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Global class identifier.
pub type ClassId = u32;

/// Default logit scale.
pub const DEFAULT_TEMPERATURE: f64 = 16.0;

pub const CLASSIFIER_MAGIC: &[u8; 8] = b"FSCILCLS";

/// Per-class weight vectors with their class ids and the temperature.
///
/// Weights are stored as given; they are normalized whenever logits are
/// computed, so unnormalized columns produced by gradient training are fine.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState<T> {
    weights: Vec<Vec<T>>,
    class_ids: Vec<ClassId>,
    temperature: T,
    dim: usize,
}

impl<T: Scalar> ClassifierState<T> {
    pub fn new(class_ids: Vec<ClassId>, weights: Vec<Vec<T>>, dim: usize, temperature: T) -> Result<Self> {
        if class_ids.len() != weights.len() {
            return contract_err(format!(
                "{} class ids for {} weight vectors",
                class_ids.len(),
                weights.len()
            ));
        }
        if let Some(w) = weights.iter().find(|w| w.len() != dim) {
            return shape_err(format!("weight of length {} in a {dim}-dim classifier", w.len()));
        }
        if temperature.is_nan() || temperature <= T::zero() {
            return Err(Error::Domain("temperature must be positive".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = class_ids.iter().find(|c| !seen.insert(**c)) {
            return contract_err(format!("duplicate class id {dup}"));
        }
        Ok(Self {
            weights,
            class_ids,
            temperature,
            dim,
        })
    }

    pub fn empty(dim: usize, temperature: T) -> Result<Self> {
        Self::new(Vec::new(), Vec::new(), dim, temperature)
    }

    /// Gaussian-initialized columns for gradient training.
    pub fn random<R: Rng + ?Sized>(
        class_ids: Vec<ClassId>,
        dim: usize,
        temperature: T,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = class_ids
            .iter()
            .map(|_| Tensor::<T>::randn(&[dim], std, rng).into_data())
            .collect();
        Self::new(class_ids, weights, dim, temperature)
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn weights(&self) -> &[Vec<T>] {
        &self.weights
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn column_of(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    /// Weights as a `[classes, dim]` matrix.
    pub fn weight_matrix(&self) -> Result<Tensor<T>> {
        Tensor::from_rows(&self.weights)
    }

    /// Same classes with the weights replaced wholesale.
    pub fn with_weight_matrix(&self, w: &Tensor<T>) -> Result<Self> {
        if w.shape() != [self.num_classes(), self.dim] {
            return shape_err(format!(
                "weight matrix {:?} for {} classes of dim {}",
                w.shape(),
                self.num_classes(),
                self.dim
            ));
        }
        Ok(Self {
            weights: w.rows().map(<[T]>::to_vec).collect(),
            ..self.clone()
        })
    }

    /// `tau * z . phi_j / ||phi_j||` for every class.
    pub fn cosine_logits(&self, z: &[T]) -> Result<Vec<T>> {
        if z.len() != self.dim {
            return shape_err(format!("feature of length {} for dim {}", z.len(), self.dim));
        }
        let norm = z.iter().map(|&v| v * v).sum::<T>().sqrt();
        let tol = T::lit(1e-6).max(T::epsilon() * T::lit(100.0));
        if (norm - T::one()).abs() > tol {
            return contract_err(format!("feature norm {norm} is not 1"));
        }
        let eps = T::lit(NORM_EPS);
        Ok(self
            .weights
            .iter()
            .zip(&self.class_ids)
            .map(|(w, id)| {
                let wn = w.iter().map(|&v| v * v).sum::<T>().sqrt();
                if wn <= eps {
                    log::warn!("classifier weight of class {id} has zero norm");
                }
                let dot: T = z.iter().zip(w).map(|(&a, &b)| a * b).sum();
                self.temperature * dot / wn.max(eps)
            })
            .collect())
    }

    /// Class with the largest logit; ties go to the lowest class id.
    pub fn predict(&self, z: &[T]) -> Result<ClassId> {
        let logits = self.cosine_logits(z)?;
        let mut best: Option<(T, ClassId)> = None;
        for (&l, &id) in logits.iter().zip(&self.class_ids) {
            best = match best {
                None => Some((l, id)),
                Some((bl, bid)) if l > bl || (l == bl && id < bid) => Some((l, id)),
                keep => keep,
            };
        }
        best.map(|(_, id)| id)
            .ok_or_else(|| Error::Contract("cannot predict with an empty classifier".into()))
    }

    /// Every base column replaced by the prototype of its class.
    pub fn replace_base_classifier(&self, per_class: &BTreeMap<ClassId, Vec<Tensor<T>>>) -> Result<Self> {
        for id in &self.class_ids {
            if !per_class.contains_key(id) {
                return contract_err(format!("no features supplied for class {id}"));
            }
        }
        if let Some(extra) = per_class.keys().find(|k| !self.class_ids.contains(k)) {
            return contract_err(format!("class {extra} is not part of the classifier"));
        }
        let weights = self
            .class_ids
            .iter()
            .map(|id| fit_prototype(&per_class[id]).map(Tensor::into_data))
            .collect::<Result<_>>()?;
        Ok(Self {
            weights,
            ..self.clone()
        })
    }

    /// Appends one prototype column per new class, in class id order.
    pub fn append_classes(&self, new_per_class: &BTreeMap<ClassId, Vec<Tensor<T>>>) -> Result<Self> {
        let mut out = self.clone();
        for (&id, feats) in new_per_class {
            if out.class_ids.contains(&id) {
                return contract_err(format!("class {id} already exists in the classifier"));
            }
            out.weights.push(fit_prototype(feats)?.into_data());
            out.class_ids.push(id);
        }
        Ok(out)
    }

    /// Writes the classifier in the checkpoint conventions: magic `FSCILCLS`,
    /// version, scalar width, temperature, class count, dim, then one row per
    /// class of `class_id: u32` followed by `dim` scalars.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CLASSIFIER_MAGIC)?;
        write_u32(w, 1)?;
        write_usize(w, T::BYTES, "scalar width")?;
        write_scalar(w, self.temperature)?;
        write_usize(w, self.num_classes(), "class count")?;
        write_usize(w, self.dim, "dim")?;
        for (id, row) in self.class_ids.iter().zip(&self.weights) {
            write_u32(w, *id)?;
            for &v in row {
                write_scalar(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        check_magic(r, CLASSIFIER_MAGIC)?;
        let version = read_u32(r)?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported classifier version {version}")));
        }
        let width = read_u32(r)? as usize;
        if width != T::BYTES {
            return Err(Error::Format(format!(
                "classifier stores {width}-byte scalars, reader expects {}",
                T::BYTES
            )));
        }
        let temperature = read_scalar(r)?;
        let count = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut ids = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(read_u32(r)?);
            weights.push((0..dim).map(|_| read_scalar(r)).collect::<Result<Vec<T>>>()?);
        }
        Self::new(ids, weights, dim, temperature)
    }
}

/// Normalized class mean: the minimizer of `1/2 sum ||mu - z_i||^2`, scaled
/// to unit length.
pub fn fit_prototype<T: Scalar>(features: &[Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = features.first() else {
        return Err(Error::Domain("prototype of an empty feature set".into()));
    };
    let d = first.len();
    let mut mean = vec![T::zero(); d];
    for f in features {
        if f.len() != d {
            return shape_err(format!("feature lengths {} and {d} disagree", f.len()));
        }
        for (m, &v) in mean.iter_mut().zip(f.data()) {
            *m += v;
        }
    }
    let n = T::from_usize(features.len()).expect("count fits the scalar type");
    for m in &mut mean {
        *m /= n;
    }
    if mean.iter().map(|&v| v * v).sum::<T>().sqrt() <= T::lit(NORM_EPS) {
        log::warn!("class features average to zero; prototype left unnormalized");
    }
    Tensor::vector(l2_normalize(&mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[xs.len()], xs).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
        let t = Tensor::<f64>::randn(&[d], 1.0, rng);
        Tensor::vector(l2_normalize(t.data())).unwrap()
    }

    #[test]
    fn logits_reference_cases() {
        let s = ClassifierState::new(vec![0, 1], vec![vec![1.0, 1.0], vec![0.0, 3.0]], 2, 16.0).unwrap();
        let l: Vec<f64> = s.cosine_logits(&[1.0, 0.0]).unwrap();
        assert!((l[0] - 11.313708498984761).abs() < 1e-12);
        assert_eq!(l[1], 0.0);
        let r = 0.5f64.sqrt();
        let l = s.cosine_logits(&[r, r]).unwrap();
        assert!((l[0] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn logits_require_unit_feature() {
        let s = ClassifierState::new(vec![0], vec![vec![1.0, 0.0]], 2, 16.0).unwrap();
        assert!(matches!(s.cosine_logits(&[2.0, 0.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weight_column_is_guarded() {
        let s = ClassifierState::new(vec![0], vec![vec![0.0, 0.0]], 2, 16.0).unwrap();
        let l: Vec<f64> = s.cosine_logits(&[1.0, 0.0]).unwrap();
        assert_eq!(l, vec![0.0]);
    }

    #[test]
    fn prototype_reference_cases() {
        assert_eq!(fit_prototype(&[v(&[0.6, 0.8])]).unwrap(), v(&[0.6, 0.8]));
        let p = fit_prototype(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap();
        let r = 0.5f64.sqrt();
        assert!((p.data()[0] - r).abs() < 1e-15 && (p.data()[1] - r).abs() < 1e-15);
        let z = v(&[0.0, -1.0, 0.0]);
        assert_eq!(fit_prototype(&vec![z.clone(); 4]).unwrap(), z);
        assert!(matches!(fit_prototype::<f64>(&[]), Err(Error::Domain(_))));
        let degenerate = fit_prototype(&[v(&[1.0, 0.0]), v(&[-1.0, 0.0])]).unwrap();
        assert_eq!(degenerate.data(), &[0.0, 0.0]);
    }

    #[test]
    fn replacement_contract() {
        let s = ClassifierState::new(vec![3, 7], vec![vec![0.2, 0.1], vec![-1.0, 0.4]], 2, 16.0).unwrap();
        let mut feats = BTreeMap::new();
        feats.insert(3, vec![v(&[1.0, 0.0])]);
        let err = s.replace_base_classifier(&feats).unwrap_err().to_string();
        assert!(err.contains("class 7"), "{err}");
        feats.insert(7, vec![v(&[0.0, 1.0])]);
        let r = s.replace_base_classifier(&feats).unwrap();
        assert_eq!(r.weights(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(r.class_ids(), &[3, 7]);
        assert_eq!(r.temperature(), 16.0);
    }

    #[test]
    fn replacement_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cols: Vec<Tensor<f64>> = (0..3).map(|_| unit(&mut rng, 5)).collect();
        let s = ClassifierState::new(vec![0, 1, 2], cols.iter().map(|c| c.data().to_vec()).collect(), 5, 16.0)
            .unwrap();
        let feats: BTreeMap<_, _> = cols.iter().enumerate().map(|(i, c)| (i as u32, vec![c.clone(); 3])).collect();
        let r = s.replace_base_classifier(&feats).unwrap();
        for (a, b) in r.weights().iter().zip(s.weights()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn append_keeps_existing_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = ClassifierState::random(vec![0, 1], 4, 16.0, 0.02, &mut rng).unwrap();
        assert_eq!(s.append_classes(&BTreeMap::new()).unwrap(), s);
        let mut new = BTreeMap::new();
        new.insert(9, vec![unit(&mut rng, 4)]);
        let a = s.append_classes(&new).unwrap();
        assert_eq!(a.num_classes(), 3);
        assert_eq!(&a.weights()[..2], s.weights());
        let z = unit(&mut rng, 4);
        let before = s.cosine_logits(z.data()).unwrap();
        let after = a.cosine_logits(z.data()).unwrap();
        assert_eq!(&after[..2], &before[..]);

        let mut dup = BTreeMap::new();
        dup.insert(1, vec![unit(&mut rng, 4)]);
        assert!(matches!(a.append_classes(&dup), Err(Error::Contract(_))));
    }

    #[test]
    fn ties_go_to_lowest_class_id() {
        let s = ClassifierState::new(vec![5, 2, 9], vec![vec![1.0, 0.0]; 3], 2, 16.0).unwrap();
        assert_eq!(s.predict(&[1.0, 0.0]).unwrap(), 2);
    }

    #[test]
    fn constructor_rejects_duplicates_and_bad_temperature() {
        assert!(ClassifierState::<f64>::new(vec![1, 1], vec![vec![1.0], vec![1.0]], 1, 1.0).is_err());
        assert!(ClassifierState::<f64>::new(vec![1], vec![vec![1.0]], 1, 0.0).is_err());
    }

    #[test]
    fn export_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = ClassifierState::<f64>::random(vec![4, 0, 11], 6, 12.5, 1.0, &mut rng).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 * 4 + 8 + 3 * (4 + 6 * 8));
        assert_eq!(ClassifierState::<f64>::read_from(&mut buf.as_slice()).unwrap(), s);
    }
}
