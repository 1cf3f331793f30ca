//! Feed-forward autoencoder detector: a ReLU network squeezed through a
//! narrow bottleneck, scored by reconstruction error.

use super::DetectorError;
use crate::autodiff::{Adam, Mat, Tape};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AeOptions {
    fn default() -> Self {
        AeOptions { epochs: 300, learning_rate: 1e-2, batch_size: 32, seed: 0 }
    }
}

/// Encoder d -> h -> b, decoder b -> h -> d, ReLU on the three inner
/// layers, linear output. The bottleneck is a quarter of the input width.
#[derive(Clone, Debug)]
pub struct AeModel {
    weights: Vec<Mat>,
    biases: Vec<Mat>,
}

pub fn hidden_width(d: usize) -> usize {
    (d / 2).max(2)
}

pub fn bottleneck_width(d: usize) -> usize {
    (d / 4).max(1)
}

fn init_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (rows as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

impl AeModel {
    pub fn fit(rows: &[Vec<f64>], opts: &AeOptions) -> Result<AeModel, DetectorError> {
        let n = rows.len();
        if n < 2 {
            return Err(DetectorError::TooFewPoints { need: 2, got: n });
        }
        let d = rows[0].len();
        let h = hidden_width(d);
        let b = bottleneck_width(d);
        let dims = [(d, h), (h, b), (b, h), (h, d)];
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut weights: Vec<Mat> =
            dims.iter().map(|&(i, o)| init_mat(&mut rng, i, o)).collect();
        let mut biases: Vec<Mat> = dims.iter().map(|&(_, o)| Mat::zeros(1, o)).collect();

        let sizes: Vec<usize> = weights
            .iter()
            .map(|w| w.len())
            .chain(biases.iter().map(|b| b.len()))
            .collect();
        let mut adam = Adam::new(opts.learning_rate, &sizes);
        let batch_size = opts.batch_size.max(1);
        let all_cols: Vec<usize> = (0..d).collect();

        for _epoch in 0..opts.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            for batch in order.chunks(batch_size) {
                let data: Vec<Vec<f64>> = batch.iter().map(|&i| rows[i].clone()).collect();
                let input = Mat::from_rows(&data);
                let mut tape = Tape::new();
                let wv: Vec<_> = weights.iter().map(|w| tape.leaf(w.clone())).collect();
                let bv: Vec<_> = biases.iter().map(|b| tape.leaf(b.clone())).collect();
                let mut x = tape.leaf(input.clone());
                for layer in 0..4 {
                    let y = tape.matmul(x, wv[layer]);
                    x = tape.add_row(y, bv[layer]);
                    if layer < 3 {
                        x = tape.relu(x);
                    }
                }
                let w_rows = vec![1.0; batch.len()];
                let loss = tape.sq_err_sum(x, input, all_cols.clone(), w_rows);
                let loss = tape.scale(loss, 1.0 / (batch.len() * d) as f64);
                if !tape.value(loss).item().is_finite() {
                    return Err(DetectorError::NonFinite);
                }
                tape.backward(loss);
                let grads: Vec<Mat> =
                    wv.iter().chain(bv.iter()).map(|&v| tape.grad(v)).collect();
                let mut slots: Vec<&mut Mat> =
                    weights.iter_mut().chain(biases.iter_mut()).collect();
                adam.step(&mut slots, &grads);
            }
        }
        let model = AeModel { weights, biases };
        if !model.weights.iter().all(|w| w.all_finite()) {
            return Err(DetectorError::NonFinite);
        }
        Ok(model)
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    pub fn biases(&self) -> &[Mat] {
        &self.biases
    }

    pub fn from_parts(weights: Vec<Mat>, biases: Vec<Mat>) -> AeModel {
        assert_eq!(weights.len(), 4);
        assert_eq!(biases.len(), 4);
        AeModel { weights, biases }
    }

    pub fn reconstruct(&self, row: &[f64]) -> Vec<f64> {
        let mut x = Mat::from_rows(&[row.to_vec()]);
        for layer in 0..4 {
            let mut y = x.matmul(&self.weights[layer]);
            for (c, v) in y.data_mut().iter_mut().enumerate() {
                *v += self.biases[layer].data()[c];
            }
            if layer < 3 {
                for v in y.data_mut() {
                    *v = v.max(0.0);
                }
            }
            x = y;
        }
        x.data().to_vec()
    }

    /// Mean squared reconstruction error.
    pub fn score(&self, row: &[f64]) -> f64 {
        let recon = self.reconstruct(row);
        row.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / row.len() as f64
    }
}
