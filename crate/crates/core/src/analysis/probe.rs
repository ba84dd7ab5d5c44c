//! Decoding probes: a small classifier trained on logged activations, and
//! its confusion matrix.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::Mlp;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::scalar::{sc, Scalar};
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Labeled activation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset<T: Scalar> {
    /// `[n, d_in]`.
    pub x: Tensor<T>,
    pub y: Vec<usize>,
    pub n_classes: usize,
}

impl<T: Scalar> ProbeDataset<T> {
    pub fn new(x: Tensor<T>, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.shape().len() != 2 || x.rows() != y.len() {
            return Err(dim_err("probe_dataset", format!("{:?} inputs for {} labels", x.shape(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Config(format!("label {bad} outside {n_classes} classes")));
        }
        Ok(Self { x, y, n_classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        let d = self.x.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Self {
            x: Tensor::new(&[idx.len(), d], data).expect("subset shape"),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Seeded shuffle split; `train_fraction` of the rows go to the first set.
pub fn split_dataset<T: Scalar, R: Rng + ?Sized>(
    ds: &ProbeDataset<T>,
    train_fraction: f64,
    rng: &mut R,
) -> (ProbeDataset<T>, ProbeDataset<T>) {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    let cut = ((ds.len() as f64) * train_fraction).round() as usize;
    (ds.subset(&idx[..cut]), ds.subset(&idx[cut..]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 256],
            epochs: 20,
            batch: 64,
            lr: 1e-3,
        }
    }
}

/// Trained classifier `d_in → hidden… → n_classes` (layer norm and ELU on
/// the hidden layers).
#[derive(Debug, Clone)]
pub struct Probe<T: Scalar> {
    pub store: ParamStore<T>,
    pub mlp: Mlp,
    pub n_classes: usize,
}

impl<T: Scalar> Probe<T> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, n_classes: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut widths = vec![d_in];
        widths.extend_from_slice(hidden);
        widths.push(n_classes);
        let mlp = Mlp::new(&mut store, "probe", &widths, true, rng);
        Self { store, mlp, n_classes }
    }

    pub fn d_in(&self) -> usize {
        self.mlp.d_in()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.d_in() {
            return Err(dim_err("probe", format!("expected [n, {}], got {:?}", self.d_in(), x.shape())));
        }
        Ok(())
    }

    /// Class scores `[n, n_classes]`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut tape = GradTape::new(&self.store);
        let xv = tape.constant(x.clone());
        let out = self.mlp.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let l = self.logits(x)?;
        Ok((0..l.rows())
            .map(|r| {
                l.row(r)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect())
    }

    pub fn accuracy(&self, ds: &ProbeDataset<T>) -> Result<f64> {
        let p = self.predict(&ds.x)?;
        Ok(p.iter().zip(&ds.y).filter(|(a, b)| a == b).count() as f64 / ds.len().max(1) as f64)
    }
}

/// Trains a probe with cross-entropy and Adam on shuffled minibatches.
pub fn train_probe<T: Scalar, R: Rng + ?Sized>(
    ds: &ProbeDataset<T>,
    config: &ProbeConfig,
    rng: &mut R,
) -> Result<Probe<T>> {
    for c in 0..ds.n_classes {
        if !ds.y.contains(&c) {
            return Err(Error::MissingData(format!("class {c} is absent from the probe training set")));
        }
    }
    let mut probe = Probe::new(ds.x.cols(), ds.n_classes, &config.hidden, rng);
    let mut adam = Adam::new(
        &probe.store,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..config.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(config.batch.max(1)) {
            let b = ds.subset(chunk);
            let mut target = Tensor::zeros(&[chunk.len(), ds.n_classes]);
            for (r, &c) in b.y.iter().enumerate() {
                target.set(r, c, sc(-1.0 / chunk.len() as f64));
            }
            let grads = {
                let mut tape = GradTape::new(&probe.store);
                let xv = tape.constant(b.x);
                let logits = probe.mlp.forward(&mut tape, xv)?;
                let logp = tape.log_softmax_rows(logits);
                let t = tape.constant(target);
                let prod = tape.mul(t, logp)?;
                let loss = tape.sum(prod);
                if !tape.value(loss).item().is_finite() {
                    return Err(Error::NonFinite("probe loss".into()));
                }
                tape.backward(loss)?
            };
            adam.step(&mut probe.store, &grads);
        }
    }
    Ok(probe)
}

/// Counts `m[true][predicted]`.
pub fn confusion<T: Scalar>(probe: &Probe<T>, test: &ProbeDataset<T>) -> Result<Vec<Vec<usize>>> {
    let pred = probe.predict(&test.x)?;
    let k = probe.n_classes.max(test.n_classes);
    let mut m = vec![vec![0; k]; k];
    for (&t, &p) in test.y.iter().zip(&pred) {
        m[t][p] += 1;
    }
    Ok(m)
}

/// Each row divided by its total (empty rows stay zero).
pub fn row_normalize(m: &[Vec<usize>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter().map(|&v| if n == 0 { 0.0 } else { v as f64 / n as f64 }).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_confusion_normalizes_to_identity() {
        let m = vec![vec![3, 0], vec![0, 5]];
        assert_eq!(row_normalize(&m), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn labels_must_be_in_range() {
        assert!(ProbeDataset::<f32>::new(Tensor::zeros(&[2, 3]), vec![0, 4], 3).is_err());
    }
}
